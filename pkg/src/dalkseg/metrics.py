"""Evaluation metrics: macro Dice/IoU, boundary MAE, SSIM and PSNR."""
from __future__ import annotations

import csv
import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import NamedTuple

import numpy as np
from scipy.ndimage import gaussian_filter

from .types import NUM_CLASSES, BoundaryTrace, LabelMap

TABLE_COLUMNS = ("ssim", "psnr_db", "macro_iou", "macro_dice", "hz")

# Gaussian window: sigma 1.5, truncated to radius 5 (11 taps)
SSIM_SIGMA = 1.5
SSIM_TRUNCATE = 3.5
SSIM_K1 = 0.01
SSIM_K2 = 0.03


def _lab(x) -> np.ndarray:
    return x.labels if isinstance(x, LabelMap) else np.asarray(x)


def per_class_dice_iou(pred, truth, num_classes: int = NUM_CLASSES) -> tuple[np.ndarray, np.ndarray]:
    p, t = _lab(pred), _lab(truth)
    if p.shape != t.shape:
        raise ValueError(f"shape mismatch: {p.shape} vs {t.shape}")
    dice = np.ones(num_classes)
    iou = np.ones(num_classes)
    for k in range(num_classes):
        pk, tk = p == k, t == k
        inter = np.count_nonzero(pk & tk)
        sp, st = np.count_nonzero(pk), np.count_nonzero(tk)
        union = sp + st - inter
        if sp + st:
            dice[k] = 2.0 * inter / (sp + st)
            iou[k] = inter / union
    return dice, iou


def dice_iou(pred, truth, num_classes: int = NUM_CLASSES) -> tuple[float, float]:
    """Macro Dice and IoU; a class absent from both maps counts as 1.0."""
    dice, iou = per_class_dice_iou(pred, truth, num_classes)
    return float(dice.mean()), float(iou.mean())


class BoundaryError(NamedTuple):
    epi_mae_px: float
    dm_mae_px: float
    epi_mae_um: float
    dm_mae_um: float
    epi_coverage: float
    dm_coverage: float


def _mae(pred: np.ndarray, truth: np.ndarray) -> tuple[float, float]:
    present = ~np.isnan(pred)
    cov = float(present.mean()) if pred.size else 0.0
    if not present.any():
        return math.nan, cov
    return float(np.mean(np.abs(pred[present] - truth[present]))), cov


def boundary_mae(pred: BoundaryTrace, truth: BoundaryTrace) -> BoundaryError:
    """MAE over columns where the prediction exists; coverage reports the rest.

    MAE is NaN when no column is covered.
    """
    if pred.width_px != truth.width_px:
        raise ValueError("traces must have equal width")
    if np.isnan(truth.epi_row_px).any() or np.isnan(truth.dm_row_px).any():
        raise ValueError("ground-truth trace must not contain MISSING columns")
    epi, epi_cov = _mae(pred.epi_row_px, truth.epi_row_px)
    dm, dm_cov = _mae(pred.dm_row_px, truth.dm_row_px)
    pitch = truth.pixel_pitch_um
    return BoundaryError(epi, dm, epi * pitch, dm * pitch, epi_cov, dm_cov)


def nonbackground_map(probs: np.ndarray) -> np.ndarray:
    """Probability mass on classes {1, 2} as an H x W x 2 field."""
    return np.asarray(probs, dtype=np.float64)[..., 1:NUM_CLASSES]


def onehot_nonbackground(labels) -> np.ndarray:
    lab = _lab(labels)
    return np.stack([(lab == k).astype(np.float64) for k in range(1, NUM_CLASSES)], axis=-1)


def _ssim_channel(a: np.ndarray, b: np.ndarray) -> float:
    C1 = (SSIM_K1 * 1.0) ** 2
    C2 = (SSIM_K2 * 1.0) ** 2

    def filt(x):
        return gaussian_filter(x, sigma=SSIM_SIGMA, truncate=SSIM_TRUNCATE, mode="reflect")

    mu_a, mu_b = filt(a), filt(b)
    # population (biased) local moments
    var_a = filt(a * a) - mu_a * mu_a
    var_b = filt(b * b) - mu_b * mu_b
    cov = filt(a * b) - mu_a * mu_b
    num = (2 * mu_a * mu_b + C1) * (2 * cov + C2)
    den = (mu_a ** 2 + mu_b ** 2 + C1) * (var_a + var_b + C2)
    smap = num / den
    pad = int(SSIM_TRUNCATE * SSIM_SIGMA + 0.5)
    if smap.shape[0] > 2 * pad and smap.shape[1] > 2 * pad:
        smap = smap[pad:-pad, pad:-pad]
    return float(smap.mean())


def ssim(pred_map: np.ndarray, truth_map: np.ndarray) -> float:
    """Mean local SSIM (dynamic range 1), averaged over channels, clipped to [0, 1]."""
    a = np.asarray(pred_map, dtype=np.float64)
    b = np.asarray(truth_map, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch: {a.shape} vs {b.shape}")
    if a.ndim == 2:
        a, b = a[..., None], b[..., None]
    vals = [_ssim_channel(a[..., k], b[..., k]) for k in range(a.shape[-1])]
    return float(np.clip(np.mean(vals), 0.0, 1.0))


def psnr(pred_map: np.ndarray, truth_map: np.ndarray) -> float:
    """PSNR with MAX=1; returns ``math.inf`` when the maps are identical."""
    a = np.asarray(pred_map, dtype=np.float64)
    b = np.asarray(truth_map, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch: {a.shape} vs {b.shape}")
    mse = float(np.mean((a - b) ** 2))
    return psnr_from_mse(mse)


def psnr_from_mse(mse: float) -> float:
    if mse == 0:
        return math.inf
    return 10.0 * math.log10(1.0 / mse)


@dataclass
class FrameMetrics:
    frame: str
    macro_dice: float
    macro_iou: float
    epi_mae_px: float
    dm_mae_px: float
    epi_mae_um: float
    dm_mae_um: float
    epi_coverage: float
    dm_coverage: float
    ssim: float
    psnr_db: float
    confidence: float


def frame_metrics(name: str, probs: np.ndarray, pred_labels, pred_trace: BoundaryTrace,
                  truth_labels, truth_trace: BoundaryTrace, conf: float = math.nan) -> FrameMetrics:
    dice, iou = dice_iou(pred_labels, truth_labels)
    be = boundary_mae(pred_trace, truth_trace)
    soft = nonbackground_map(probs)
    hard = onehot_nonbackground(truth_labels)
    return FrameMetrics(name, dice, iou, *be, ssim(soft, hard), psnr(soft, hard), conf)


@dataclass
class EvalReport:
    macro_dice: float
    macro_iou: float
    epi_mae_px: float
    dm_mae_px: float
    epi_mae_um: float
    dm_mae_um: float
    epi_coverage: float
    dm_coverage: float
    ssim: float
    psnr_db: float
    n_frames: int
    hz: float = math.nan
    frames: list = field(default_factory=list, repr=False)

    def table_row(self) -> list[float]:
        """Values in the order SSIM, PSNR, IoU, Dice, Hz."""
        return [getattr(self, k) for k in TABLE_COLUMNS]

    def to_dict(self, include_timing: bool = True) -> dict:
        d = asdict(self)
        d.pop("frames")
        if not include_timing:
            d.pop("hz")
        return {k: _json_num(v) for k, v in d.items()}

    def to_json(self, include_timing: bool = True) -> str:
        return json.dumps(self.to_dict(include_timing), indent=2, sort_keys=True)

    def write(self, out_dir: str | Path) -> None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        (out / "eval_report.json").write_text(self.to_json())
        with open(out / "eval_frames.csv", "w", newline="") as fh:
            names = list(FrameMetrics.__dataclass_fields__)
            w = csv.writer(fh)
            w.writerow(names)
            for fm in self.frames:
                w.writerow([_json_num(getattr(fm, n)) for n in names])


def _json_num(v):
    if isinstance(v, float):
        if math.isinf(v):
            return "inf" if v > 0 else "-inf"
        if math.isnan(v):
            return None
    return v


def aggregate(frames: list[FrameMetrics], hz: float = math.nan) -> EvalReport:
    if not frames:
        raise ValueError("cannot aggregate zero frames")

    def mean(name):
        vals = np.array([getattr(f, name) for f in frames], dtype=np.float64)
        if np.all(np.isnan(vals)):
            return math.nan
        return float(np.nanmean(vals))

    names = [n for n in EvalReport.__dataclass_fields__ if n not in ("n_frames", "hz", "frames")]
    return EvalReport(**{n: mean(n) for n in names}, n_frames=len(frames), hz=hz, frames=frames)


def evaluate(model, manifest_path: str | Path, split: str = "test", out_dir: str | Path | None = None,
             pipeline_config=None) -> EvalReport:
    """Run the full-frame pipeline on every frame of ``split`` and aggregate.

    ``model`` is a checkpoint path or anything :mod:`dalkseg.pipeline` accepts.
    """
    from . import pipeline
    from .synthgen import load_manifest
    from .types import load_frame, load_labels, load_trace

    manifest, root = load_manifest(manifest_path)
    items = [it for it in manifest["items"] if it["split"] == split]
    if not items:
        raise ValueError(f"split {split!r} is empty")
    model = pipeline.as_model(model)
    cfg = pipeline_config or pipeline.PipelineConfig()
    frames, seconds = [], 0.0
    for it in items:
        frame = load_frame(root / it["frame"])
        truth = load_labels(root / it["mask"])
        truth_trace = load_trace(root / it["trace"], frame.pixel_pitch_um)
        res = pipeline.process_frame(frame, model, cfg, render=False)
        seconds += res.timings["total_ms"] / 1000.0
        frames.append(frame_metrics(it["frame"], res.probs, res.labels, res.trace,
                                    truth, truth_trace, res.confidence))
    report = aggregate(frames, hz=len(items) / seconds if seconds > 0 else math.nan)
    if out_dir is not None:
        report.write(out_dir)
    return report
