"""Domain types shared across the package, plus their on-disk formats.

Class convention (C=3): 0 above the cornea, 1 cornea, 2 below Descemet's
membrane. Rows are depth (top = probe side), columns are time.
"""
from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image

NUM_CLASSES = 3
DEFAULT_PITCH_UM = 2.61
STRIPE_WIDTH = 64
NUM_STRIPES = 8
FRAME_SIZE = 512


class FormatError(ValueError):
    """Raised when a file or sidecar cannot be parsed."""


def _frozen(arr: np.ndarray) -> np.ndarray:
    arr = np.ascontiguousarray(arr)
    arr.setflags(write=False)
    return arr


@dataclass(frozen=True, eq=False)
class Frame:
    pixels: np.ndarray
    pixel_pitch_um: float = DEFAULT_PITCH_UM
    frame_id: int = 0
    timestamp_s: float = 0.0

    def __post_init__(self):
        px = np.asarray(self.pixels, dtype=np.float64)
        if px.ndim != 2 or px.size == 0:
            raise ValueError(f"frame pixels must be a non-empty 2-D grid, got shape {px.shape}")
        if not np.all(np.isfinite(px)) or px.min() < 0.0 or px.max() > 1.0:
            raise ValueError("frame intensities must be finite and within [0, 1]")
        if not self.pixel_pitch_um > 0:
            raise ValueError("pixel_pitch_um must be positive")
        if self.frame_id < 0 or self.timestamp_s < 0:
            raise ValueError("frame_id and timestamp_s must be non-negative")
        object.__setattr__(self, "pixels", _frozen(px))

    @property
    def height_px(self) -> int:
        return self.pixels.shape[0]

    @property
    def width_px(self) -> int:
        return self.pixels.shape[1]


@dataclass(frozen=True, eq=False)
class LabelMap:
    labels: np.ndarray
    num_classes: int = NUM_CLASSES

    def __post_init__(self):
        lab = np.asarray(self.labels)
        if lab.ndim != 2:
            raise ValueError(f"label map must be 2-D, got shape {lab.shape}")
        if lab.size and (lab.min() < 0 or lab.max() >= self.num_classes):
            raise ValueError(f"label values must lie in [0, {self.num_classes})")
        object.__setattr__(self, "labels", _frozen(lab.astype(np.uint8)))

    @property
    def shape(self) -> tuple[int, int]:
        return self.labels.shape


@dataclass(frozen=True, eq=False)
class ProbMap:
    """Per-pixel class probabilities, stored H x W x C."""

    probs: np.ndarray

    def __post_init__(self):
        p = np.asarray(self.probs, dtype=np.float64)
        if p.ndim != 3:
            raise ValueError(f"prob map must be H x W x C, got shape {p.shape}")
        if p.size and (p.min() < 0 or p.max() > 1 or np.abs(p.sum(axis=2) - 1).max() > 1e-5):
            raise ValueError("class probabilities must lie in [0, 1] and sum to 1 per pixel")
        object.__setattr__(self, "probs", _frozen(p))

    @property
    def shape(self) -> tuple[int, int, int]:
        return self.probs.shape


@dataclass(frozen=True, eq=False)
class BoundaryTrace:
    """Per-column interface rows; NaN marks a MISSING column."""

    epi_row_px: np.ndarray
    dm_row_px: np.ndarray
    pixel_pitch_um: float = DEFAULT_PITCH_UM
    height_px: int | None = None

    def __post_init__(self):
        epi = np.asarray(self.epi_row_px, dtype=np.float64)
        dm = np.asarray(self.dm_row_px, dtype=np.float64)
        if epi.shape != dm.shape or epi.ndim != 1:
            raise ValueError("epi and dm traces must be 1-D and of equal length")
        both = ~np.isnan(epi) & ~np.isnan(dm)
        if np.any(epi[both] > dm[both]):
            raise ValueError("epithelium row must not lie below the DM row")
        for row in (epi, dm):
            present = row[~np.isnan(row)]
            if present.size and present.min() < 0:
                raise ValueError("trace rows must be non-negative")
            if self.height_px is not None and present.size and present.max() >= self.height_px:
                raise ValueError("trace rows must be < frame height")
        object.__setattr__(self, "epi_row_px", _frozen(epi))
        object.__setattr__(self, "dm_row_px", _frozen(dm))

    @property
    def width_px(self) -> int:
        return self.epi_row_px.shape[0]

    @property
    def epi_row_um(self) -> np.ndarray:
        return self.epi_row_px * self.pixel_pitch_um

    @property
    def dm_row_um(self) -> np.ndarray:
        return self.dm_row_px * self.pixel_pitch_um

    def equals(self, other: "BoundaryTrace") -> bool:
        return (
            np.array_equal(self.epi_row_px, other.epi_row_px, equal_nan=True)
            and np.array_equal(self.dm_row_px, other.dm_row_px, equal_nan=True)
            and self.pixel_pitch_um == other.pixel_pitch_um
        )

    @classmethod
    def missing(cls, width: int, pixel_pitch_um: float = DEFAULT_PITCH_UM) -> "BoundaryTrace":
        nan = np.full(width, np.nan)
        return cls(nan, nan.copy(), pixel_pitch_um)


@dataclass(frozen=True, eq=False)
class Stripe:
    pixels: np.ndarray
    parent_frame_id: int
    stripe_index: int

    def __post_init__(self):
        if not 0 <= self.stripe_index < NUM_STRIPES:
            raise ValueError(f"stripe_index must be in [0, {NUM_STRIPES})")
        object.__setattr__(self, "pixels", _frozen(np.asarray(self.pixels, dtype=np.float64)))

    @property
    def column_offset(self) -> int:
        return self.stripe_index * STRIPE_WIDTH


def validate_ordered(labels: LabelMap | np.ndarray) -> bool:
    """True iff every column is non-decreasing in class id from top to bottom."""
    lab = labels.labels if isinstance(labels, LabelMap) else np.asarray(labels)
    if lab.shape[0] < 2:
        return True
    return bool(np.all(np.diff(lab.astype(np.int16), axis=0) >= 0))


# --- serialization -------------------------------------------------------

def _sidecar(path: Path) -> Path:
    return path.with_suffix(".json")


def save_frame(frame: Frame, path: str | Path) -> None:
    """Write a 16-bit grayscale PNG plus a JSON metadata sidecar."""
    path = Path(path)
    q = np.rint(frame.pixels * 65535.0).astype(np.uint16)
    Image.fromarray(q).save(path)
    meta = {
        "pixel_pitch_um": frame.pixel_pitch_um,
        "frame_id": int(frame.frame_id),
        "timestamp_s": float(frame.timestamp_s),
    }
    _sidecar(path).write_text(json.dumps(meta))


def load_frame(path: str | Path) -> Frame:
    path = Path(path)
    with Image.open(path) as im:
        arr = np.asarray(im)
    if arr.ndim != 2:
        raise FormatError(f"{path}: expected a single-channel image")
    if arr.dtype == np.uint8:
        pixels = arr / 255.0
    else:
        pixels = arr.astype(np.float64) / 65535.0
    meta = {}
    side = _sidecar(path)
    if side.exists():
        try:
            meta = json.loads(side.read_text())
        except json.JSONDecodeError as exc:
            raise FormatError(f"{side}: malformed sidecar ({exc})") from exc
        if not isinstance(meta, dict):
            raise FormatError(f"{side}: sidecar must be a JSON object")
    try:
        return Frame(
            pixels,
            pixel_pitch_um=float(meta.get("pixel_pitch_um", DEFAULT_PITCH_UM)),
            frame_id=int(meta.get("frame_id", 0)),
            timestamp_s=float(meta.get("timestamp_s", 0.0)),
        )
    except (TypeError, ValueError) as exc:
        raise FormatError(f"{side}: invalid metadata ({exc})") from exc


_PALETTE = [0, 0, 0, 255, 160, 0, 0, 90, 255] + [0] * (256 * 3 - 9)


def save_labels(labels: LabelMap, path: str | Path) -> None:
    im = Image.fromarray(labels.labels.astype(np.uint8), mode="P")
    im.putpalette(_PALETTE)
    im.save(path)


def load_labels(path: str | Path) -> LabelMap:
    with Image.open(path) as im:
        arr = np.asarray(im)
    if arr.ndim != 2:
        raise FormatError(f"{path}: expected a single-channel label image")
    try:
        return LabelMap(arr)
    except ValueError as exc:
        raise FormatError(f"{path}: {exc}") from exc


def _cell(v: float) -> str:
    return "" if math.isnan(v) else repr(float(v))


def save_trace(trace: BoundaryTrace, path: str | Path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["column", "epi_row_px", "dm_row_px"])
        for c, (e, d) in enumerate(zip(trace.epi_row_px, trace.dm_row_px)):
            w.writerow([c, _cell(e), _cell(d)])


def load_trace(path: str | Path, pixel_pitch_um: float = DEFAULT_PITCH_UM) -> BoundaryTrace:
    epi, dm = [], []
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames != ["column", "epi_row_px", "dm_row_px"]:
            raise FormatError(f"{path}: unexpected header {reader.fieldnames}")
        try:
            for row in reader:
                epi.append(float(row["epi_row_px"]) if row["epi_row_px"] else np.nan)
                dm.append(float(row["dm_row_px"]) if row["dm_row_px"] else np.nan)
        except ValueError as exc:
            raise FormatError(f"{path}: {exc}") from exc
    return BoundaryTrace(np.array(epi), np.array(dm), pixel_pitch_um)
