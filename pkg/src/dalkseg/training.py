"""Training loop, augmentation policy and model selection."""
from __future__ import annotations

import csv
import json
import logging
import math
from dataclasses import asdict, dataclass, field
from functools import total_ordering
from pathlib import Path
from typing import Sequence

import numpy as np
import torch

from . import network
from .losses import LossWeights, loss_total
from .metrics import dice_iou
from .network import ModelParams, NetworkConfig
from .pipeline import PipelineConfig, TorchModel, process_frame
from .preprocess import NormStats, fit_norm, tile_array
from .synthgen import load_manifest
from .types import BoundaryTrace, Frame, load_frame, load_labels, load_trace

log = logging.getLogger(__name__)

HISTORY_COLUMNS = ("epoch", "loss_ce", "loss_dice", "loss_topo", "val_mae_px", "val_dice")


class TrainingDiverged(RuntimeError):
    pass


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 30
    batch_size_stripes: int = 16
    learning_rate: float = 3e-3
    weight_decay: float = 1e-4
    seed: int = 0
    jitter_brightness: float = 0.1
    jitter_contrast: float = 0.1
    hflip_prob: float = 0.5
    mixed_precision: bool = False
    cosine_schedule: bool = True

    def __post_init__(self):
        if self.epochs < 1 or self.batch_size_stripes < 1:
            raise ValueError("epochs and batch_size_stripes must be positive")
        if not 0 <= self.hflip_prob <= 1:
            raise ValueError("hflip_prob must lie in [0, 1]")
        if not (0 <= self.jitter_brightness <= 1 and 0 <= self.jitter_contrast <= 1):
            raise ValueError("jitter amplitudes must lie in [0, 1]")
        if self.learning_rate <= 0 or self.weight_decay < 0:
            raise ValueError("learning_rate must be > 0 and weight_decay >= 0")


@total_ordering
@dataclass(frozen=True)
class SelectionRecord:
    epoch: int
    val_boundary_mae_px: float
    val_macro_dice: float
    checkpoint: str = ""

    def key(self):
        return (self.val_boundary_mae_px, -self.val_macro_dice, self.epoch)

    def __lt__(self, other: "SelectionRecord") -> bool:
        return self.key() < other.key()

    def __eq__(self, other) -> bool:
        return isinstance(other, SelectionRecord) and self.key() == other.key()

    def __hash__(self):
        return hash(self.key())


def select_best(records: Sequence[SelectionRecord]) -> SelectionRecord:
    """Lowest boundary error, then highest Dice, then earliest epoch."""
    if not records:
        raise ValueError("select_best needs at least one record")
    return min(records)


def augment(frame: np.ndarray, mask: np.ndarray, rng: np.random.Generator,
            cfg: TrainConfig | None = None) -> tuple[np.ndarray, np.ndarray]:
    """Intensity jitter on the frame, shared horizontal flip; nothing else.

    Rotations and vertical flips would break the depth axis, so they are
    never applied.
    """
    cfg = cfg or TrainConfig()
    x = np.asarray(frame, dtype=np.float64)
    m = np.asarray(mask)
    if cfg.jitter_contrast > 0:
        gain = rng.uniform(1 - cfg.jitter_contrast, 1 + cfg.jitter_contrast)
        mu = x.mean()
        x = (x - mu) * gain + mu
    if cfg.jitter_brightness > 0:
        x = x + rng.uniform(-cfg.jitter_brightness, cfg.jitter_brightness)
    if cfg.jitter_brightness > 0 or cfg.jitter_contrast > 0:
        x = np.clip(x, 0.0, 1.0)
    if cfg.hflip_prob > 0 and rng.random() < cfg.hflip_prob:
        x = x[:, ::-1]
        m = m[:, ::-1]
    return np.ascontiguousarray(x), np.ascontiguousarray(m)


@dataclass
class Sample:
    name: str
    frame: Frame
    labels: np.ndarray
    trace: BoundaryTrace


def load_split(manifest_path, split: str) -> list[Sample]:
    manifest, root = load_manifest(manifest_path)
    out = []
    for it in manifest["items"]:
        if it["split"] != split:
            continue
        frame = load_frame(root / it["frame"])
        out.append(Sample(it["frame"], frame, load_labels(root / it["mask"]).labels,
                          load_trace(root / it["trace"], frame.pixel_pitch_um)))
    return out


def selection_mae(pred: BoundaryTrace, truth: BoundaryTrace, height: int) -> float:
    """Mean of epithelium and DM column MAE; MISSING columns cost height/4 px."""
    penalty = height / 4.0
    errs = []
    for p, t in ((pred.epi_row_px, truth.epi_row_px), (pred.dm_row_px, truth.dm_row_px)):
        e = np.abs(p - t)
        e[np.isnan(p)] = penalty
        errs.append(float(e.mean()))
    return 0.5 * (errs[0] + errs[1])


@dataclass
class ValidationResult:
    boundary_mae_px: float
    macro_dice: float
    dm_mae_px: float
    frame_shapes: list = field(default_factory=list)


def validate(params: ModelParams, samples: Sequence[Sample], mixed_precision: bool = False) -> ValidationResult:
    """Full-frame evaluation: tile, infer, reassemble, decode, then score."""
    params.net.eval()
    model = TorchModel(params, mixed_precision=mixed_precision)
    cfg = PipelineConfig(mixed_precision=mixed_precision)
    maes, dices, dms, shapes = [], [], [], []
    for s in samples:
        shapes.append(s.frame.pixels.shape)
        res = process_frame(s.frame, model, cfg, render=False)
        H = s.frame.height_px
        maes.append(selection_mae(res.trace, s.trace, H))
        dices.append(dice_iou(res.labels, s.labels)[0])
        d = np.abs(res.trace.dm_row_px - s.trace.dm_row_px)
        d[np.isnan(d)] = H / 4.0
        dms.append(float(d.mean()))
    return ValidationResult(float(np.mean(maes)), float(np.mean(dices)), float(np.mean(dms)), shapes)


@dataclass
class TrainResult:
    best: SelectionRecord
    params: ModelParams
    records: list[SelectionRecord]
    history: list[dict]
    out_dir: Path | None = None


def _stripe_batches(samples, rng, cfg: TrainConfig):
    """Yield (x, y) float/long stripe batches from augmented frames."""
    order = rng.permutation(len(samples))
    xs, ys = [], []
    for i in order:
        s = samples[int(i)]
        x, m = augment(s.frame.pixels, s.labels, rng, cfg)
        xs.append(tile_array(x))
        ys.append(tile_array(m))
    X = np.concatenate(xs)
    Y = np.concatenate(ys)
    perm = rng.permutation(X.shape[0])
    for s in range(0, len(perm), cfg.batch_size_stripes):
        idx = perm[s:s + cfg.batch_size_stripes]
        yield X[idx], Y[idx]


def write_history(history: list[dict], path: Path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(HISTORY_COLUMNS)
        for h in history:
            w.writerow([h[c] for c in HISTORY_COLUMNS])


def train(model_cfg: NetworkConfig, train_cfg: TrainConfig, loss_weights: LossWeights,
          manifest, out_dir: str | Path | None = None, log_every: int = 0) -> TrainResult:
    """Train, validate every epoch on full frames, keep the best checkpoint."""
    train_set = load_split(manifest, "train")
    val_set = load_split(manifest, "val")
    if not train_set or not val_set:
        raise ValueError("manifest needs non-empty train and val splits")
    out = Path(out_dir) if out_dir is not None else None
    if out is not None:
        (out / "checkpoints").mkdir(parents=True, exist_ok=True)

    torch.manual_seed(train_cfg.seed)
    torch.use_deterministic_algorithms(True, warn_only=True)
    rng = np.random.default_rng(train_cfg.seed)

    norm = fit_norm([s.frame for s in train_set])
    params = network.build(model_cfg, norm, seed=train_cfg.seed)
    net = params.net
    opt = torch.optim.AdamW(net.parameters(), lr=train_cfg.learning_rate, weight_decay=train_cfg.weight_decay)
    sched = None
    if train_cfg.cosine_schedule:
        sched = torch.optim.lr_scheduler.CosineAnnealingLR(opt, T_max=train_cfg.epochs)

    history, records = [], []
    best_state, best = None, None
    for epoch in range(train_cfg.epochs):
        net.train()
        sums = {"loss_ce": 0.0, "loss_dice": 0.0, "loss_topo": 0.0, "total": 0.0}
        n = 0
        for step, (xb, yb) in enumerate(_stripe_batches(train_set, rng, train_cfg)):
            x = torch.from_numpy(norm.apply(xb).astype(np.float32))[:, None]
            y = torch.from_numpy(yb.astype(np.int64))
            if train_cfg.mixed_precision:
                with torch.autocast("cpu", dtype=network.autocast_dtype()):
                    logits = net(x)
                logits = logits.float()
            else:
                logits = net(x)
            loss, parts = loss_total(logits, y, loss_weights, epoch)
            if not math.isfinite(parts["total"]):
                raise TrainingDiverged(f"non-finite loss at epoch {epoch}, step {step}: {parts}")
            opt.zero_grad(set_to_none=True)
            loss.backward()
            opt.step()
            for k in sums:
                sums[k] += parts[k]
            n += 1
            if log_every and step % log_every == 0:
                log.info("epoch %d step %d %s", epoch, step, parts)
        if sched is not None:
            sched.step()

        val = validate(params, val_set, train_cfg.mixed_precision)
        ckpt = ""
        if out is not None:
            ckpt = str(out / "checkpoints" / f"epoch_{epoch:03d}.pt")
            network.save_checkpoint(params, ckpt)
        rec = SelectionRecord(epoch, val.boundary_mae_px, val.macro_dice, ckpt)
        records.append(rec)
        row = {k: sums[k] / max(n, 1) for k in sums}
        row.update(epoch=epoch, val_mae_px=val.boundary_mae_px, val_dice=val.macro_dice,
                   val_dm_mae_px=val.dm_mae_px, val_frame_shapes=val.frame_shapes)
        history.append(row)
        log.info("epoch %d loss %.4f val mae %.3f dice %.4f", epoch, row["total"],
                 val.boundary_mae_px, val.macro_dice)
        if best is None or rec < best:
            best = rec
            best_state = {k: v.detach().clone() for k, v in net.state_dict().items()}

    net.load_state_dict(best_state)
    net.eval()
    params.meta = {"best_epoch": best.epoch, "train_config": asdict(train_cfg),
                   "loss_weights": loss_weights.to_dict()}
    if out is not None:
        network.save_checkpoint(params, out / "best.pt")
        norm.save(out / "norm.json")
        write_history(history, out / "history.csv")
        (out / "selection.json").write_text(json.dumps([asdict(r) for r in records], indent=2))
    return TrainResult(best, params, records, history, out)


# --- config files ---------------------------------------------------------

def default_config() -> dict:
    return {
        "network": NetworkConfig.tiny().to_dict(),
        "train": asdict(TrainConfig()),
        "loss": LossWeights().to_dict(),
    }


def parse_config(d: dict) -> tuple[NetworkConfig, TrainConfig, LossWeights]:
    sections = {"network", "train", "loss"}
    unknown = set(d) - sections - {"manifest", "out"}
    if unknown:
        raise KeyError(sorted(unknown)[0])
    for name, cls in (("network", NetworkConfig), ("train", TrainConfig), ("loss", LossWeights)):
        bad = set(d.get(name, {})) - set(cls.__dataclass_fields__)
        if bad:
            raise KeyError(f"{name}.{sorted(bad)[0]}")
    return (NetworkConfig(**d.get("network", {})), TrainConfig(**d.get("train", {})),
            LossWeights(**d.get("loss", {})))
