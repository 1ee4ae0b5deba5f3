"""Ordered decoding, interface extraction, frame confidence, trace smoothing."""
from __future__ import annotations

import numpy as np
from scipy.ndimage import median_filter

from . import kernels
from .types import DEFAULT_PITCH_UM, BoundaryTrace, LabelMap, ProbMap, validate_ordered

PROB_FLOOR = 1e-12
CONFIDENCE_RADIUS = 8


class ContractError(ValueError):
    pass


def _probs_array(probs) -> np.ndarray:
    p = probs.probs if isinstance(probs, ProbMap) else np.asarray(probs, dtype=np.float64)
    if p.ndim != 3 or p.shape[2] != 3:
        raise ContractError(f"ordered decoding needs an H x W x 3 prob map, got {p.shape}")
    return p


def log_cost(probs) -> np.ndarray:
    """Per-pixel, per-class cost -log p with p floored at 1e-12."""
    p = _probs_array(probs)
    return np.ascontiguousarray(-np.log(np.clip(p, PROB_FLOOR, 1.0)))


def transitions_to_labels(r1: np.ndarray, r2: np.ndarray, height: int) -> np.ndarray:
    rows = np.arange(height)[:, None]
    return ((rows >= r1[None, :]).astype(np.uint8) + (rows >= r2[None, :]).astype(np.uint8))


def decode_transitions(probs) -> tuple[np.ndarray, np.ndarray]:
    """Per-column (r1, r2) of the most probable monotone labeling."""
    return kernels.decode_transitions(log_cost(probs))


def decode_ordered(probs) -> LabelMap:
    """Exact per-column MAP labeling subject to 0-run, 1-run, 2-run order.

    Ties resolve to the smallest start of the cornea run, then the smallest
    start of the below-DM run.
    """
    p = _probs_array(probs)
    r1, r2 = kernels.decode_transitions(log_cost(p))
    return LabelMap(transitions_to_labels(r1, r2, p.shape[0]))


def extract_trace(labels: LabelMap, pitch_um: float = DEFAULT_PITCH_UM) -> BoundaryTrace:
    lab = labels.labels if isinstance(labels, LabelMap) else np.asarray(labels)
    if not validate_ordered(lab):
        raise ContractError("extract_trace needs an ordered label map")
    is1 = lab == 1
    has = is1.any(axis=0)
    epi = np.argmax(is1, axis=0).astype(np.float64)
    dm = (lab.shape[0] - 1 - np.argmax(is1[::-1], axis=0)).astype(np.float64)
    epi[~has] = np.nan
    dm[~has] = np.nan
    return BoundaryTrace(epi, dm, pitch_um, height_px=lab.shape[0])


def trace_from_transitions(r1: np.ndarray, r2: np.ndarray, height: int,
                           pitch_um: float = DEFAULT_PITCH_UM) -> BoundaryTrace:
    """Interface rows straight from decoded transitions; equals extract_trace of the labels."""
    has = r2 > r1
    epi = np.where(has, r1, np.nan).astype(np.float64)
    dm = np.where(has, r2 - 1, np.nan).astype(np.float64)
    return BoundaryTrace(epi, dm, pitch_um, height_px=height)


def _transitions_from_labels(lab: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    H = lab.shape[0]
    r1 = np.where((lab >= 1).any(axis=0), np.argmax(lab >= 1, axis=0), H).astype(np.int64)
    r2 = np.where((lab >= 2).any(axis=0), np.argmax(lab >= 2, axis=0), H).astype(np.int64)
    return r1, r2


def confidence(probs, labels: LabelMap, radius: int = CONFIDENCE_RADIUS) -> float:
    """Mean decoded-label probability within ``radius`` rows of either interface.

    Columns without a cornea band contribute nothing; 0.0 if none has one.
    """
    p = np.ascontiguousarray(_probs_array(probs))
    lab = np.ascontiguousarray(labels.labels if isinstance(labels, LabelMap) else labels, dtype=np.uint8)
    r1, r2 = _transitions_from_labels(lab)
    return confidence_from_transitions(p, lab, r1, r2, radius)


def confidence_from_transitions(probs: np.ndarray, labels: np.ndarray, r1: np.ndarray, r2: np.ndarray,
                                radius: int = CONFIDENCE_RADIUS) -> float:
    """:func:`confidence` when the decoded transitions are already known."""
    total, count = kernels.band_confidence(np.ascontiguousarray(probs, dtype=np.float64),
                                           np.ascontiguousarray(labels, dtype=np.uint8),
                                           np.ascontiguousarray(r1, dtype=np.int64),
                                           np.ascontiguousarray(r2, dtype=np.int64), int(radius))
    return float(total / count) if count else 0.0


def smooth_trace(trace: BoundaryTrace, window: int = 5) -> BoundaryTrace:
    """Median-filter each interface over its present columns only."""
    if window < 1 or window % 2 == 0:
        raise ValueError(f"window must be a positive odd integer, got {window}")

    def _filt(row: np.ndarray) -> np.ndarray:
        out = row.copy()
        present = ~np.isnan(row)
        if present.sum() > 0:
            out[present] = median_filter(row[present], size=window, mode="nearest")
        return out

    epi = _filt(trace.epi_row_px)
    dm = _filt(trace.dm_row_px)
    # keep epi <= dm after independent filtering
    both = ~np.isnan(epi) & ~np.isnan(dm)
    dm[both] = np.maximum(dm[both], epi[both])
    return BoundaryTrace(epi, dm, trace.pixel_pitch_um, trace.height_px)


def argmax_violations(probs) -> int:
    """Number of columns whose raw per-pixel argmax is not depth-ordered."""
    p = np.asarray(probs.probs if isinstance(probs, ProbMap) else probs)
    am = np.argmax(p, axis=-1)
    return int(np.any(np.diff(am, axis=0) < 0, axis=0).sum())
