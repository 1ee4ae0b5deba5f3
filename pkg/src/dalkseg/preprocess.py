"""Stripe tiling, training-set normalization and the pad16/crop pair."""
from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from .types import FRAME_SIZE, NUM_STRIPES, STRIPE_WIDTH, Frame, Stripe

MULTIPLE = 16
STD_FLOOR = 1e-6


class DimensionError(ValueError):
    pass


@dataclass(frozen=True)
class NormStats:
    mean: float
    std: float

    def __post_init__(self):
        if not self.std > 0:
            raise ValueError("std must be positive")

    def apply(self, x: np.ndarray) -> np.ndarray:
        return (x - self.mean) / self.std

    def to_dict(self) -> dict:
        return {"mean": float(self.mean), "std": float(self.std)}

    def save(self, path: str | Path) -> None:
        Path(path).write_text(json.dumps(self.to_dict()))

    @classmethod
    def load(cls, path: str | Path) -> "NormStats":
        d = json.loads(Path(path).read_text())
        return cls(float(d["mean"]), float(d["std"]))


def tile(frame: Frame) -> list[Stripe]:
    if frame.pixels.shape != (FRAME_SIZE, FRAME_SIZE):
        raise DimensionError(f"tiling expects a {FRAME_SIZE}x{FRAME_SIZE} frame, got {frame.pixels.shape}")
    return [
        Stripe(frame.pixels[:, i * STRIPE_WIDTH:(i + 1) * STRIPE_WIDTH], frame.frame_id, i)
        for i in range(NUM_STRIPES)
    ]


def tile_array(pixels: np.ndarray) -> np.ndarray:
    """(H, 512) -> (8, H, 64) view-free copy; the batched form of :func:`tile`."""
    H, W = pixels.shape[:2]
    if W != NUM_STRIPES * STRIPE_WIDTH:
        raise DimensionError(f"expected width {NUM_STRIPES * STRIPE_WIDTH}, got {W}")
    return np.ascontiguousarray(
        pixels.reshape(H, NUM_STRIPES, STRIPE_WIDTH, *pixels.shape[2:]).swapaxes(0, 1)
    )


def fit_norm(train_frames: Sequence[Frame]) -> NormStats:
    if len(train_frames) == 0:
        raise ValueError("fit_norm needs at least one training frame")
    # two-pass over all pixels for numerical stability
    total = sum(f.pixels.size for f in train_frames)
    mean = sum(float(f.pixels.sum(dtype=np.float64)) for f in train_frames) / total
    var = sum(float(((f.pixels - mean) ** 2).sum()) for f in train_frames) / total
    return NormStats(mean, max(float(np.sqrt(var)), STD_FLOOR))


def pad16(image: np.ndarray) -> tuple[np.ndarray, tuple[int, int]]:
    """Zero-pad bottom/right so both leading dims are multiples of 16."""
    image = np.asarray(image)
    if image.ndim < 2 or image.shape[0] == 0 or image.shape[1] == 0:
        raise DimensionError("pad16 needs a non-empty grid")
    H, W = image.shape[:2]
    Hp = -(-H // MULTIPLE) * MULTIPLE
    Wp = -(-W // MULTIPLE) * MULTIPLE
    if (Hp, Wp) == (H, W):
        return image.copy(), (H, W)
    out = np.zeros((Hp, Wp) + image.shape[2:], dtype=image.dtype)
    out[:H, :W] = image
    return out, (H, W)


def crop(logits: np.ndarray, original_dims: tuple[int, int]) -> np.ndarray:
    """Keep the top-left H x W window of an H' x W' (x C) grid."""
    H, W = original_dims
    if H > logits.shape[0] or W > logits.shape[1]:
        raise DimensionError(f"crop dims {original_dims} exceed grid {logits.shape[:2]}")
    return logits[:H, :W]


def reassemble(stripe_outputs: Sequence[np.ndarray]) -> np.ndarray:
    """Concatenate 8 H x 64 (x C) stripe outputs left to right."""
    if len(stripe_outputs) != NUM_STRIPES:
        raise DimensionError(f"expected {NUM_STRIPES} stripes, got {len(stripe_outputs)}")
    first = np.asarray(stripe_outputs[0])
    for s in stripe_outputs:
        s = np.asarray(s)
        if s.shape != first.shape or s.shape[1] != STRIPE_WIDTH:
            raise DimensionError(f"stripe shape {s.shape} does not match {first.shape}")
    return np.concatenate([np.asarray(s) for s in stripe_outputs], axis=1)
