import math

import numpy as np
import pytest
import torch

from dalkseg.losses import LossWeights, loss_ce, loss_dice, loss_topo, loss_total, one_hot

from oracles import central_difference


def rand_target(seed, B=2, H=8, W=8):
    g = torch.Generator().manual_seed(seed)
    return torch.randint(0, 3, (B, H, W), generator=g)


def rand_logits(seed, B=2, H=8, W=8, dtype=torch.float64):
    g = torch.Generator().manual_seed(seed)
    return torch.randn(B, 3, H, W, generator=g, dtype=dtype)


def test_ce_saturated_correct():
    t = rand_target(0)
    logits = 50.0 * one_hot(t, 3, torch.float64)
    assert loss_ce(logits, t) < 1e-3


def test_ce_uniform_is_ln3():
    t = rand_target(1)
    assert loss_ce(torch.zeros(2, 3, 8, 8), t).item() == pytest.approx(math.log(3), abs=1e-6)


def test_ce_decreases_with_target_logit():
    t = rand_target(2)
    logits = rand_logits(2)
    base = loss_ce(logits, t).item()
    b, i, j = 1, 3, 4
    logits[b, t[b, i, j], i, j] += 0.5
    assert loss_ce(logits, t).item() < base


def test_dice_perfect_overlap():
    t = rand_target(3)
    assert loss_dice(one_hot(t, 3, torch.float64), t).item() <= 1e-4


def test_dice_disjoint():
    t = torch.tensor([[[0, 1, 2]]])
    p = one_hot(torch.tensor([[[1, 2, 0]]]), 3, torch.float64)
    assert loss_dice(p, t).item() == pytest.approx(1.0, abs=1e-4)


def test_dice_half_overlap_two_pixels():
    # two pixels, both class 1; predicted p1 = [1, 0] -> Dice 2/3 for class 1
    t = torch.tensor([[[1, 1]]])
    p = torch.zeros(1, 3, 1, 2, dtype=torch.float64)
    p[0, 1, 0, 0] = 1.0
    p[0, 0, 0, 1] = 1.0
    eps = 1e-5
    class1 = (2 * 1 + eps) / (1 + 2 + eps)
    class0 = (0 + eps) / (1 + 0 + eps)
    class2 = 1.0  # absent from both: eps / eps
    expected = 1 - (class0 + class1 + class2) / 3
    assert class1 == pytest.approx(2 / 3, abs=1e-5)
    assert loss_dice(p, t).item() == pytest.approx(expected, abs=1e-12)


def test_topo_zero_at_onehot():
    t = rand_target(4)
    assert loss_topo(one_hot(t, 3, torch.float64), t).item() == 0.0


def test_topo_zero_for_column_constant_probs():
    t = rand_target(5)
    col = torch.softmax(torch.randn(2, 3, 1, 8, dtype=torch.float64), dim=1)
    p = col.expand(2, 3, 8, 8)
    assert loss_topo(p, t).item() == 0.0


def _column(p1):
    p1 = torch.tensor(p1, dtype=torch.float64)
    p = torch.stack([1 - p1, p1, torch.zeros_like(p1)])[None, :, :, None]
    return p, torch.ones(1, len(p1), 1, dtype=torch.long)


def test_topo_alternating_beats_single_flip():
    # hand evaluation on 4 rows, all class 1:
    # alternating [1,0,1,0]: pairs (0,1),(2,3) each cost 1*1 in two classes -> 4/3
    # single flip [1,1,0,1]: pair (1,2) costs 2 -> 2/3
    alt = loss_topo(*_column([1, 0, 1, 0])).item()
    flip = loss_topo(*_column([1, 1, 0, 1])).item()
    assert alt == pytest.approx(4 / 3, abs=1e-12)
    assert flip == pytest.approx(2 / 3, abs=1e-12)
    assert alt > flip > 0


def test_topo_ignores_pairs_across_label_change():
    p = one_hot(torch.tensor([[[0], [2]]]), 3, torch.float64)
    t = torch.tensor([[[0], [1]]])
    assert loss_topo(p, t).item() == 0.0


def test_topo_column_permutation_invariant():
    t = rand_target(6)
    p = torch.softmax(rand_logits(6), dim=1)
    perm = torch.randperm(8, generator=torch.Generator().manual_seed(0))
    assert loss_topo(p[..., perm], t[..., perm]).item() == pytest.approx(loss_topo(p, t).item(), rel=1e-12)


@pytest.mark.parametrize("term", ["ce", "dice", "topo"])
def test_input_gradients_match_finite_differences(term):
    t = rand_target(7)
    x0 = rand_logits(7)

    def f_torch(x):
        if term == "ce":
            return loss_ce(x, t)
        p = torch.softmax(x, dim=1)
        return loss_dice(p, t) if term == "dice" else loss_topo(p, t)

    x = x0.clone().requires_grad_(True)
    f_torch(x).backward()
    grad = x.grad.numpy()
    xn = x0.numpy()

    def f_np(v):
        return f_torch(torch.from_numpy(v)).item()

    rng = np.random.default_rng(0)
    for _ in range(40):
        idx = tuple(int(rng.integers(0, s)) for s in xn.shape)
        fd = central_difference(f_np, xn, idx, 1e-6)
        assert abs(fd - grad[idx]) <= 1e-3 * max(abs(fd), abs(grad[idx])) + 1e-9


def test_warmup_schedule():
    w = LossWeights(lambda_topo_max=0.5, topo_warmup_epochs=20)
    assert w.lambda_topo(0) == 0.0
    assert w.lambda_topo(10) == 0.25
    assert w.lambda_topo(20) == 0.5
    assert w.lambda_topo(35) == 0.5
    vals = [w.lambda_topo(e) for e in range(40)]
    assert vals == sorted(vals)


def test_total_epoch_zero_has_no_topology():
    t = rand_target(8)
    x = rand_logits(8)
    total, parts = loss_total(x, t, LossWeights(), epoch=0)
    assert parts["lambda_topo"] == 0.0
    assert total.item() == pytest.approx(parts["loss_ce"] + parts["loss_dice"], rel=1e-12)


def test_total_plateau():
    w = LossWeights(topo_warmup_epochs=5)
    _, parts = loss_total(rand_logits(9), rand_target(9), w, epoch=7)
    assert parts["lambda_topo"] == w.lambda_topo_max


def test_total_degenerate_weights_equals_ce():
    t = rand_target(10)
    x = rand_logits(10)
    total, _ = loss_total(x, t, LossWeights(1.0, 0.0, 0.0), epoch=30)
    assert total.item() == loss_ce(x, t).item()


def test_all_terms_nonnegative():
    for s in range(10):
        t = rand_target(s)
        p = torch.softmax(rand_logits(s), dim=1)
        assert loss_dice(p, t) >= 0 and loss_topo(p, t) >= 0


def test_shape_mismatch():
    with pytest.raises(ValueError):
        loss_ce(torch.zeros(1, 3, 4, 4), torch.zeros(1, 4, 5, dtype=torch.long))


def test_training_signal_decreases():
    torch.manual_seed(0)
    t = rand_target(11, B=4, H=16, W=16)
    x = torch.randn(4, 1, 16, 16)
    net = torch.nn.Sequential(torch.nn.Conv2d(1, 8, 3, padding=1), torch.nn.ReLU(), torch.nn.Conv2d(8, 3, 1))
    # give the network the answer through a learnable embedding of the target
    emb = torch.nn.Parameter(torch.zeros(4, 3, 16, 16))
    opt = torch.optim.Adam(list(net.parameters()) + [emb], lr=0.05)
    w = LossWeights(topo_warmup_epochs=0)
    losses = []
    for _ in range(200):
        total, _ = loss_total(net(x) + emb, t, w, epoch=0)
        opt.zero_grad()
        total.backward()
        opt.step()
        losses.append(total.item())
    smooth = np.convolve(losses, np.ones(10) / 10, mode="valid")
    assert np.all(np.diff(smooth) < 1e-3)
    assert losses[-1] < 0.1 * losses[0]
