"""Synthetic M-mode phantoms: ordered three-band geometry, then speckle,
depth attenuation and instrument shadowing on top.

Ground truth is fixed before any degradation, so shadowed columns keep
valid labels over uninformative pixels. Outputs depend only on
``(config.seed, index)``.
"""
from __future__ import annotations

import json
import logging
from dataclasses import asdict, dataclass, replace
from importlib import resources
from pathlib import Path

import numpy as np
from scipy.ndimage import gaussian_filter1d

from .types import (
    BoundaryTrace,
    Frame,
    LabelMap,
    save_frame,
    save_labels,
    save_trace,
)

log = logging.getLogger(__name__)

SUBSETS = ("in_vivo", "ex_vivo", "hybrid")
DEFAULT_SPLITS = {"in_vivo": (400, 100), "ex_vivo": (200, 50), "hybrid": (600, 150)}
VAL_FRACTION = 0.20

# background / cornea / below-DM reflectivity before contrast scaling
_BASE_LEVEL = 0.08


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class PhantomConfig:
    seed: int = 0
    height_px: int = 512
    width_px: int = 512
    epi_depth_range_px: tuple[float, float] = (80.0, 160.0)
    cornea_thickness_range_px: tuple[float, float] = (150.0, 230.0)
    drift_amplitude_px: float = 6.0
    speckle_strength: float = 0.5
    attenuation_per_px: float = 0.0015
    shadow_rate: float = 0.1
    shadow_width_range_px: tuple[int, int] = (48, 160)
    layer_contrast: float = 0.8
    frame_rate_hz: float = 80.0

    def __post_init__(self):
        for name in ("epi_depth_range_px", "cornea_thickness_range_px", "shadow_width_range_px"):
            lo, hi = getattr(self, name)
            if lo > hi:
                raise ConfigError(f"{name}: min {lo} exceeds max {hi}")
            object.__setattr__(self, name, (type(lo)(lo), type(hi)(hi)))
        if self.height_px <= 0 or self.width_px <= 0:
            raise ConfigError("frame dimensions must be positive")
        if self.epi_depth_range_px[0] < 0 or self.cornea_thickness_range_px[0] < 1:
            raise ConfigError("epithelium depth must be >= 0 and cornea thickness >= 1 px")
        if self.epi_depth_range_px[1] + self.cornea_thickness_range_px[1] >= self.height_px:
            raise ConfigError("epi_depth_max + cornea_thickness_max must be < height_px")
        if self.drift_amplitude_px < 0 or self.attenuation_per_px < 0:
            raise ConfigError("drift_amplitude_px and attenuation_per_px must be >= 0")
        if not 0 <= self.speckle_strength <= 1 or not 0 <= self.shadow_rate <= 1:
            raise ConfigError("speckle_strength and shadow_rate must lie in [0, 1]")
        if not 0 < self.layer_contrast <= 1:
            raise ConfigError("layer_contrast must lie in (0, 1]")
        if self.shadow_width_range_px[0] < 1:
            raise ConfigError("shadow widths must be >= 1 px")

    @classmethod
    def from_dict(cls, d: dict) -> "PhantomConfig":
        known = set(cls.__dataclass_fields__)
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown phantom config keys: {sorted(unknown)}")
        d = {k: tuple(v) if isinstance(v, list) else v for k, v in d.items()}
        return cls(**d)

    def to_dict(self) -> dict:
        return asdict(self)


def load_preset(style: str, **overrides) -> PhantomConfig:
    """Load a shipped preset (``in_vivo`` or ``ex_vivo``) with optional overrides."""
    try:
        text = resources.files("dalkseg.presets").joinpath(f"{style}.json").read_text()
    except FileNotFoundError:
        raise ConfigError(f"no preset named {style!r}") from None
    d = json.loads(text)
    d.update(overrides)
    return PhantomConfig.from_dict(d)


@dataclass(frozen=True)
class DatasetSpec:
    subset: str
    n_train: int
    n_test: int
    val_fraction: float = VAL_FRACTION

    def __post_init__(self):
        if self.subset not in SUBSETS:
            raise ConfigError(f"subset must be one of {SUBSETS}, got {self.subset!r}")
        if self.n_train < 1 or self.n_test < 0:
            raise ConfigError("n_train must be >= 1 and n_test >= 0")
        if not 0 <= self.val_fraction < 1:
            raise ConfigError("val_fraction must lie in [0, 1)")

    @classmethod
    def for_subset(cls, subset: str) -> "DatasetSpec":
        if subset not in DEFAULT_SPLITS:
            raise ConfigError(f"subset must be one of {SUBSETS}, got {subset!r}")
        n_train, n_test = DEFAULT_SPLITS[subset]
        return cls(subset, n_train, n_test, VAL_FRACTION)

    @property
    def n_val(self) -> int:
        return int(round(self.val_fraction * self.n_train))


def _smooth_walk(rng: np.random.Generator, n: int, amplitude: float) -> np.ndarray:
    """Band-limited random walk with max |deviation| equal to ``amplitude``."""
    if amplitude == 0 or n < 2:
        return np.zeros(n)
    walk = np.cumsum(rng.standard_normal(n))
    walk = gaussian_filter1d(walk, sigma=max(n / 64.0, 2.0), mode="nearest")
    walk -= walk.mean()
    peak = np.abs(walk).max()
    if peak == 0:
        return np.zeros(n)
    return walk * (amplitude * rng.uniform(0.5, 1.0) / peak)


def boundary_curves(config: PhantomConfig, index: int) -> tuple[np.ndarray, np.ndarray]:
    """Sub-pixel epithelium and DM curves (top of the cornea band, bottom of it)."""
    rng = np.random.default_rng([config.seed, index, 0])
    H, W = config.height_px, config.width_px
    epi0 = rng.uniform(*config.epi_depth_range_px)
    thick0 = rng.uniform(*config.cornea_thickness_range_px)
    epi = epi0 + _smooth_walk(rng, W, config.drift_amplitude_px)
    thick = thick0 + _smooth_walk(rng, W, 0.25 * config.drift_amplitude_px)
    epi = np.clip(epi, 0.0, H - 2.0)
    bottom = np.clip(epi + np.maximum(thick, 1.0), epi + 1.0, H - 1.0)
    return epi, bottom


def rasterize(epi: np.ndarray, bottom: np.ndarray, height: int) -> np.ndarray:
    """Rows with center r in [epi, bottom) are cornea; above is 0, below is 2."""
    rows = np.arange(height, dtype=np.float64)[:, None]
    labels = np.where(rows < epi[None, :], 0, np.where(rows < bottom[None, :], 1, 2))
    return labels.astype(np.uint8)


def trace_from_labels(labels: np.ndarray, pitch_um: float) -> BoundaryTrace:
    """First class-1 row and last class-1 row per column (NaN if no band)."""
    lab = np.asarray(labels)
    is1 = lab == 1
    has = is1.any(axis=0)
    first = np.argmax(is1, axis=0).astype(np.float64)
    last = (lab.shape[0] - 1 - np.argmax(is1[::-1], axis=0)).astype(np.float64)
    first[~has] = np.nan
    last[~has] = np.nan
    return BoundaryTrace(first, last, pitch_um, height_px=lab.shape[0])


def _levels(contrast: float) -> tuple[float, float, float]:
    return _BASE_LEVEL, _BASE_LEVEL + 0.8 * contrast, _BASE_LEVEL + 0.22 * contrast


def render_clean(labels: np.ndarray, contrast: float) -> np.ndarray:
    return np.asarray(_levels(contrast))[labels]


def generate_sample(
    config: PhantomConfig, index: int, *, pitch_um: float = 2.61, force_shadow: bool | None = None
) -> tuple[Frame, LabelMap, BoundaryTrace]:
    """Deterministically generate one phantom frame with its ground truth.

    ``force_shadow`` overrides the per-frame shadow draw (used to build paired
    clean/corrupted frames from the same geometry and speckle).
    """
    if index < 0:
        raise ConfigError("index must be non-negative")
    H, W = config.height_px, config.width_px
    epi, bottom = boundary_curves(config, index)
    labels = rasterize(epi, bottom, H)

    rng = np.random.default_rng([config.seed, index, 1])
    img = render_clean(labels, config.layer_contrast)
    speckle = rng.exponential(1.0, size=(H, W))
    if config.speckle_strength > 0:
        img = img * ((1.0 - config.speckle_strength) + config.speckle_strength * speckle)
    if config.attenuation_per_px > 0:
        img = img * np.exp(-config.attenuation_per_px * np.arange(H, dtype=np.float64))[:, None]

    shadowed, start, width = _shadow_band(config, index)
    if force_shadow is not None:
        shadowed = force_shadow
    if shadowed:
        img[:, start:start + width] = 0.0
    img = np.clip(img, 0.0, 1.0)

    frame = Frame(
        img,
        pixel_pitch_um=pitch_um,
        frame_id=index,
        timestamp_s=index / config.frame_rate_hz,
    )
    return frame, LabelMap(labels), trace_from_labels(labels, pitch_um)


def _shadow_band(config: PhantomConfig, index: int) -> tuple[bool, int, int]:
    rng = np.random.default_rng([config.seed, index, 2])
    draw = rng.random()
    lo, hi = config.shadow_width_range_px
    width = min(int(rng.integers(lo, hi + 1)), config.width_px)
    start = int(rng.integers(0, config.width_px - width + 1))
    return bool(draw < config.shadow_rate), start, width


def is_shadowed(config: PhantomConfig, index: int) -> bool:
    """Whether ``generate_sample(config, index)`` applies a shadow band."""
    return _shadow_band(config, index)[0]


def _style_for(subset: str, i: int) -> str:
    if subset != "hybrid":
        return subset
    # in vivo : ex vivo = 2 : 1, interleaved so every split keeps the ratio
    return "ex_vivo" if i % 3 == 2 else "in_vivo"


def resolve_configs(subset: str, config: PhantomConfig | dict | None, seed: int = 0) -> dict:
    if isinstance(config, dict):
        return config
    if config is None:
        return {s: load_preset(s, seed=seed) for s in ("in_vivo", "ex_vivo")}
    if subset == "hybrid":
        return {s: load_preset(s, seed=config.seed) for s in ("in_vivo", "ex_vivo")}
    return {subset: config}


def split_indices(spec: DatasetSpec, seed: int) -> list[str]:
    n_total = spec.n_train + spec.n_test
    splits = ["train"] * spec.n_train + ["test"] * spec.n_test
    order = np.random.default_rng([seed, 7919]).permutation(spec.n_train)
    for i in order[: spec.n_val]:
        splits[int(i)] = "val"
    assert len(splits) == n_total
    return splits


def generate_dataset(
    spec: DatasetSpec,
    config: PhantomConfig | dict | None,
    out_dir: str | Path,
    *,
    seed: int | None = None,
) -> dict:
    """Write frames, masks and traces plus ``manifest.json`` under ``out_dir``.

    For ``hybrid`` the in vivo and ex vivo presets are interleaved 2:1.
    """
    out = Path(out_dir)
    if seed is None:
        seed = config.seed if isinstance(config, PhantomConfig) else 0
    configs = resolve_configs(spec.subset, config, seed)
    for sub in ("frames", "masks", "traces"):
        (out / sub).mkdir(parents=True, exist_ok=True)

    splits = split_indices(spec, seed)
    items = []
    for i, split in enumerate(splits):
        style = _style_for(spec.subset, i)
        cfg = configs[style]
        frame, labels, trace = generate_sample(cfg, i)
        stem = f"{i:05d}"
        save_frame(frame, out / "frames" / f"{stem}.png")
        save_labels(labels, out / "masks" / f"{stem}.png")
        save_trace(trace, out / "traces" / f"{stem}.csv")
        items.append({
            "frame": f"frames/{stem}.png",
            "mask": f"masks/{stem}.png",
            "trace": f"traces/{stem}.csv",
            "split": split,
            "style": style,
            "shadowed": is_shadowed(cfg, i),
        })
    manifest = {
        "subset": spec.subset,
        "seed": seed,
        "configs": {k: v.to_dict() for k, v in configs.items()},
        "items": items,
    }
    (out / "manifest.json").write_text(json.dumps(manifest, indent=2))
    log.info("wrote %d samples to %s", len(items), out)
    return manifest


def load_manifest(path: str | Path) -> tuple[dict, Path]:
    path = Path(path)
    if path.is_dir():
        path = path / "manifest.json"
    return json.loads(path.read_text()), path.parent


def with_overrides(config: PhantomConfig, **kw) -> PhantomConfig:
    return replace(config, **kw)
