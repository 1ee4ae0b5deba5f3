"""Composite training objective: cross-entropy + soft Dice + depth-axis star-shape term."""
from __future__ import annotations

from dataclasses import asdict, dataclass

import torch
import torch.nn.functional as F

DICE_EPS = 1e-5


@dataclass(frozen=True)
class LossWeights:
    lambda_ce: float = 1.0
    lambda_dice: float = 1.0
    lambda_topo_max: float = 0.5
    topo_warmup_epochs: int = 20

    def __post_init__(self):
        if min(self.lambda_ce, self.lambda_dice, self.lambda_topo_max) < 0:
            raise ValueError("loss weights must be non-negative")
        if self.topo_warmup_epochs < 0:
            raise ValueError("topo_warmup_epochs must be >= 0")

    def lambda_topo(self, epoch: int) -> float:
        """Linear warm-up from 0 at epoch 0 to the plateau at ``topo_warmup_epochs``."""
        if self.topo_warmup_epochs == 0:
            return self.lambda_topo_max
        return self.lambda_topo_max * min(1.0, epoch / self.topo_warmup_epochs)

    def to_dict(self) -> dict:
        return asdict(self)


def _check(pred: torch.Tensor, target: torch.Tensor) -> None:
    if pred.ndim != 4 or target.shape != (pred.shape[0],) + tuple(pred.shape[2:]):
        raise ValueError(f"shape mismatch: prediction {tuple(pred.shape)} vs target {tuple(target.shape)}")


def one_hot(target: torch.Tensor, num_classes: int, dtype=torch.float32) -> torch.Tensor:
    return F.one_hot(target.long(), num_classes).permute(0, 3, 1, 2).to(dtype)


def loss_ce(logits: torch.Tensor, target: torch.Tensor) -> torch.Tensor:
    _check(logits, target)
    return F.cross_entropy(logits, target.long())


def loss_dice(probs: torch.Tensor, target: torch.Tensor) -> torch.Tensor:
    """1 - mean over classes of the soft Dice coefficient (sums over batch and pixels)."""
    _check(probs, target)
    t = one_hot(target, probs.shape[1], probs.dtype)
    dims = (0, 2, 3)
    inter = (probs * t).sum(dims)
    denom = probs.sum(dims) + t.sum(dims)
    return 1.0 - ((2.0 * inter + DICE_EPS) / (denom + DICE_EPS)).mean()


def loss_topo(probs: torch.Tensor, target: torch.Tensor) -> torch.Tensor:
    """Star-shape penalty along each column with the star centre at the top row.

    For each vertically adjacent pair whose ground-truth labels agree, the
    deeper pixel's error |p - t| is multiplied by its disagreement with the
    pixel above |p_below - p_above|, summed over classes; the result is the
    mean over such pairs (0 if there are none).
    """
    _check(probs, target)
    t = one_hot(target, probs.shape[1], probs.dtype)
    above, below = probs[:, :, :-1], probs[:, :, 1:]
    same = (target[:, :-1] == target[:, 1:]).to(probs.dtype)
    term = ((below - t[:, :, 1:]).abs() * (below - above).abs()).sum(1)
    n = same.sum()
    if n == 0:
        return probs.sum() * 0.0
    return (term * same).sum() / n


def loss_total(logits: torch.Tensor, target: torch.Tensor, weights: LossWeights, epoch: int):
    """Weighted sum and a per-term breakdown (floats, for logging)."""
    probs = torch.softmax(logits, dim=1)
    ce = loss_ce(logits, target)
    dice = loss_dice(probs, target)
    lam_topo = weights.lambda_topo(epoch)
    total = weights.lambda_ce * ce + weights.lambda_dice * dice
    topo = loss_topo(probs, target)
    if lam_topo > 0:
        total = total + lam_topo * topo
    breakdown = {
        "loss_ce": float(ce.detach()),
        "loss_dice": float(dice.detach()),
        "loss_topo": float(topo.detach()),
        "lambda_topo": lam_topo,
        "total": float(total.detach()),
    }
    return total, breakdown
