import json

import numpy as np
import pytest

from dalkseg.synthgen import (
    ConfigError,
    DatasetSpec,
    PhantomConfig,
    generate_dataset,
    generate_sample,
    is_shadowed,
    load_preset,
)
from dalkseg.types import validate_ordered


def rescan_trace(labels):
    """Brute-force column scan: first class-1 row, first class-2 row minus 1."""
    H, W = labels.shape
    epi, dm = np.full(W, np.nan), np.full(W, np.nan)
    for c in range(W):
        col = labels[:, c]
        ones = [r for r in range(H) if col[r] == 1]
        if ones:
            epi[c] = ones[0]
            twos = [r for r in range(H) if col[r] == 2]
            dm[c] = (twos[0] if twos else H) - 1
    return epi, dm


@pytest.fixture(scope="module")
def cfg():
    return load_preset("in_vivo", seed=5)


def test_frame_shape(cfg):
    frame, labels, trace = generate_sample(cfg, 0)
    assert frame.pixels.shape == (512, 512)
    assert labels.shape == (512, 512)
    assert trace.width_px == 512


def test_deterministic(cfg):
    a = generate_sample(cfg, 17)
    b = generate_sample(cfg, 17)
    assert np.array_equal(a[0].pixels, b[0].pixels)
    assert np.array_equal(a[1].labels, b[1].labels)
    assert a[2].equals(b[2])
    c = generate_sample(cfg, 18)
    assert not np.array_equal(a[0].pixels, c[0].pixels)


def test_clean_config_gives_three_constant_bands():
    clean = PhantomConfig(seed=1, speckle_strength=0.0, attenuation_per_px=0.0, shadow_rate=0.0)
    frame, labels, _ = generate_sample(clean, 3)
    px = frame.pixels
    for c in range(0, 512, 37):
        runs = np.flatnonzero(np.diff(px[:, c])) + 1
        assert len(runs) == 2
        for k in range(3):
            vals = px[labels.labels[:, c] == k, c]
            assert np.all(vals == vals[0])


@pytest.mark.parametrize("index", range(12))
def test_labels_ordered_and_trace_matches_rescan(cfg, index):
    _, labels, trace = generate_sample(cfg, index)
    assert validate_ordered(labels)
    epi, dm = rescan_trace(labels.labels)
    assert np.array_equal(trace.epi_row_px, epi, equal_nan=True)
    assert np.array_equal(trace.dm_row_px, dm, equal_nan=True)


def test_shadow_touches_pixels_only(cfg):
    for i in range(40):
        if is_shadowed(cfg, i):
            break
    shadow = generate_sample(cfg, i)
    clean = generate_sample(cfg, i, force_shadow=False)
    assert np.array_equal(shadow[1].labels, clean[1].labels)
    assert shadow[2].equals(clean[2])
    dark = np.all(shadow[0].pixels == 0, axis=0)
    assert dark.sum() >= cfg.shadow_width_range_px[0]
    assert np.array_equal(shadow[0].pixels[:, ~dark], clean[0].pixels[:, ~dark])


def test_shadow_frequency_within_three_se():
    rate = 0.1
    cfg = load_preset("ex_vivo", seed=2, shadow_rate=rate)
    n = 1000
    hits = sum(is_shadowed(cfg, i) for i in range(n))
    se = np.sqrt(rate * (1 - rate) / n)
    assert abs(hits / n - rate) <= 3 * se


def test_drift_bounded():
    cfg = PhantomConfig(seed=3, drift_amplitude_px=8.0, speckle_strength=0, shadow_rate=0)
    from dalkseg.synthgen import boundary_curves

    for i in range(10):
        epi, _ = boundary_curves(cfg, i)
        # base depth is drawn inside the range, drift adds at most the amplitude
        assert epi.max() - epi.min() <= 2 * 8.0 + 1e-9


def test_config_validation():
    with pytest.raises(ConfigError):
        PhantomConfig(epi_depth_range_px=(200.0, 100.0))
    with pytest.raises(ConfigError):
        PhantomConfig(epi_depth_range_px=(100.0, 300.0), cornea_thickness_range_px=(100.0, 250.0))
    with pytest.raises(ConfigError):
        PhantomConfig(speckle_strength=1.5)


@pytest.mark.parametrize(
    "subset, n_train, n_val, n_test",
    [("in_vivo", 320, 80, 100), ("ex_vivo", 160, 40, 50), ("hybrid", 480, 120, 150)],
)
def test_default_split_sizes(subset, n_train, n_val, n_test):
    from dalkseg.synthgen import split_indices

    spec = DatasetSpec.for_subset(subset)
    splits = split_indices(spec, seed=0)
    assert splits.count("train") == n_train
    assert splits.count("val") == n_val
    assert splits.count("test") == n_test
    # val is carved out of the training portion only
    assert all(s != "val" for s in splits[spec.n_train:])


def test_generate_dataset_small(tmp_path):
    spec = DatasetSpec("hybrid", 10, 5)
    m = generate_dataset(spec, None, tmp_path, seed=4)
    assert len(m["items"]) == 15
    assert sum(it["split"] == "val" for it in m["items"]) == 2
    assert {it["style"] for it in m["items"]} == {"in_vivo", "ex_vivo"}
    on_disk = json.loads((tmp_path / "manifest.json").read_text())
    assert on_disk["subset"] == "hybrid"
    assert set(on_disk["items"][0]) >= {"frame", "mask", "trace", "split"}
    assert len(list((tmp_path / "frames").glob("*.png"))) == 15
    m2 = generate_dataset(spec, None, tmp_path / "again", seed=4)
    assert m2["items"] == m["items"]


@pytest.mark.slow
def test_generate_ex_vivo_full(tmp_path):
    m = generate_dataset(DatasetSpec.for_subset("ex_vivo"), None, tmp_path, seed=0)
    splits = [it["split"] for it in m["items"]]
    assert (splits.count("train") + splits.count("val"), splits.count("val"), splits.count("test")) == (200, 40, 50)
    assert len(list((tmp_path / "frames").glob("*.png"))) == 250
