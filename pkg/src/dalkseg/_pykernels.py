"""Numpy fallback for the compiled kernels in ``_ckernels.pyx``.

Loops run over rows and vectorize across columns, so each column sees the
same sequence of floating-point operations as the compiled version.
"""
from __future__ import annotations

import numpy as np


def decode_transitions(cost: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    cost = np.asarray(cost, dtype=np.float64)
    if cost.ndim != 3 or cost.shape[2] != 3:
        raise ValueError("decode_transitions expects exactly 3 classes")
    H, W, _ = cost.shape
    # cumsum accumulates sequentially along the axis
    s = np.concatenate([np.zeros((1, W, 3)), np.cumsum(cost, axis=0)], axis=0)
    A = s[:, :, 0] - s[:, :, 1]
    B = s[:, :, 1] - s[:, :, 2]

    sufval = np.empty_like(B)
    sufidx = np.empty(B.shape, dtype=np.int64)
    sufval[H] = B[H]
    sufidx[H] = H
    for r in range(H - 1, -1, -1):
        take = B[r] <= sufval[r + 1]
        sufval[r] = np.where(take, B[r], sufval[r + 1])
        sufidx[r] = np.where(take, r, sufidx[r + 1])

    total = A + sufval
    r1 = np.argmin(total, axis=0).astype(np.int64)
    r2 = sufidx[r1, np.arange(W)]
    return r1, r2


def band_confidence(probs, labels, r1, r2, radius):
    probs = np.asarray(probs, dtype=np.float64)
    H, W, _ = probs.shape
    rows = np.arange(H)[:, None]
    epi = r1[None, :]
    dm = r2[None, :] - 1
    has = (r1 < r2)[None, :]
    mask = has & ((np.abs(rows - epi) <= radius) | (np.abs(rows - dm) <= radius))
    picked = np.take_along_axis(probs, labels[:, :, None].astype(np.intp), axis=2)[:, :, 0]
    # column-major traversal, sequential sum: matches the compiled loop order
    vals = picked.T[mask.T]
    total = 0.0
    if vals.size:
        total = float(np.cumsum(vals)[-1])
    return total, int(mask.sum())
