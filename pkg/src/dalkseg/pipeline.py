"""Deployment loop: tile -> normalize -> transfer -> infer -> reassemble ->
decode/gate -> overlay, with per-stage timing and an output pacing cap.
"""
from __future__ import annotations

import csv
import enum
import json
import logging
import math
import os
import platform
import threading
import time
from collections import deque
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Iterable, Iterator, Protocol

import numpy as np
import torch
from PIL import Image

from . import kernels, network
from .network import ModelParams
from .postprocess import (
    confidence_from_transitions,
    PROB_FLOOR,
    smooth_trace,
    trace_from_transitions,
    transitions_to_labels,
)
from .preprocess import NormStats, crop, pad16, tile_array
from .types import NUM_STRIPES, STRIPE_WIDTH, BoundaryTrace, Frame, LabelMap

log = logging.getLogger(__name__)

STAGES = ("tile", "norm", "transfer", "infer", "reassemble", "decode", "overlay")

BAND_ALPHA = 0.35
BAND_COLOR = (0, 200, 255)
EPI_COLOR = (255, 64, 64)
DM_COLOR = (64, 255, 64)
# blended band colour for every gray level
_BAND_LUT = np.clip(np.rint((1.0 - BAND_ALPHA) * np.arange(256.0)[:, None]
                            + BAND_ALPHA * np.asarray(BAND_COLOR, dtype=np.float64)), 0, 255).astype(np.uint8)


class UsageError(ValueError):
    pass


class Decision(str, enum.Enum):
    ACCEPT = "ACCEPT"
    REJECT = "REJECT"


@dataclass
class PipelineConfig:
    cap_hz: float = 80.0
    confidence_threshold: float = 0.6
    hold_last_on_reject: bool = True
    batch_stripes: int = 8
    mixed_precision: bool = False
    confidence_radius: int = 8
    smooth_window: int = 0
    device: str = "cpu"

    def __post_init__(self):
        if not self.cap_hz > 0:
            raise UsageError("cap_hz must be > 0")
        if not 0 <= self.confidence_threshold <= 1:
            raise UsageError("confidence_threshold must lie in [0, 1]")
        if not 1 <= self.batch_stripes <= NUM_STRIPES:
            raise UsageError(f"batch_stripes must lie in [1, {NUM_STRIPES}]")


# --- models ---------------------------------------------------------------

class InferenceModel(Protocol):
    norm: NormStats
    num_classes: int

    def to_device(self, batch: np.ndarray): ...
    def infer(self, handle, frame_id: int = 0): ...
    def to_host(self, handle) -> np.ndarray: ...
    def sync(self) -> None: ...


class TorchModel:
    """Checkpointed network behind the pipeline's model interface."""

    def __init__(self, params: ModelParams, device: str = "cpu", mixed_precision: bool = False):
        self.params = params.eval()
        self.device = torch.device(device)
        self.params.net.to(self.device)
        self.norm = params.norm
        self.num_classes = params.config.num_classes
        self.mixed_precision = mixed_precision

    def to_device(self, batch):
        return torch.from_numpy(batch).to(self.device)

    def infer(self, handle, frame_id: int = 0):
        with torch.inference_mode():
            if self.mixed_precision:
                return network.forward_mixed_precision(self.params, handle)
            return network.forward(self.params, handle)

    def to_host(self, handle):
        return handle.detach().cpu().numpy()

    def sync(self):
        if self.device.type == "cuda":
            torch.cuda.synchronize(self.device)


class OracleModel:
    """Emits one-hot logits of known ground truth, looked up by frame id."""

    num_classes = 3

    def __init__(self, truth: dict[int, LabelMap], margin: float = 1e4):
        self.truth = truth
        self.margin = margin
        self.norm = NormStats(0.0, 1.0)

    def to_device(self, batch):
        return batch

    def infer(self, handle, frame_id: int = 0):
        lab = self.truth[frame_id].labels
        stripes = tile_array(lab)  # (8, H, 64)
        B, _, Hp, Wp = handle.shape
        out = np.full((NUM_STRIPES, self.num_classes, Hp, Wp), -self.margin, dtype=np.float32)
        H = lab.shape[0]
        for k in range(self.num_classes):
            out[:, k, :H, :STRIPE_WIDTH][stripes == k] = 0.0
        return out

    def infer_batch(self, handle, frame_id, offset):
        return self.infer(handle, frame_id)[offset:offset + handle.shape[0]]

    def to_host(self, handle):
        return np.asarray(handle)

    def sync(self):
        pass


class StubModel:
    """Cheap stand-in: constant logits, or random ones when ``noise`` > 0."""

    num_classes = 3

    def __init__(self, noise: float = 0.0, seed: int = 0, delay_s: float = 0.0):
        self.noise = noise
        self.delay_s = delay_s
        self.rng = np.random.default_rng(seed)
        self.norm = NormStats(0.0, 1.0)

    def to_device(self, batch):
        return batch

    def infer(self, handle, frame_id: int = 0):
        if self.delay_s:
            time.sleep(self.delay_s)
        B, _, H, W = handle.shape
        rows = np.linspace(-1.0, 1.0, H, dtype=np.float32)[:, None]
        base = np.stack([-4 * rows - 2, 2 - 4 * np.abs(rows), 4 * rows - 2])  # ordered bands
        out = np.broadcast_to(base[None], (B, 3, H, W)).astype(np.float32)
        if self.noise:
            out = out + self.noise * self.rng.standard_normal(out.shape).astype(np.float32)
        return out

    def to_host(self, handle):
        return np.asarray(handle)

    def sync(self):
        pass


def as_model(model, config: PipelineConfig | None = None):
    config = config or PipelineConfig()
    if isinstance(model, (str, os.PathLike)):
        model = network.load_checkpoint(model)
    if isinstance(model, ModelParams):
        return TorchModel(model, config.device, config.mixed_precision)
    return model


# --- per-frame processing -------------------------------------------------

@dataclass
class FrameResult:
    frame_id: int
    probs: np.ndarray | None
    labels: LabelMap | None
    trace: BoundaryTrace | None
    confidence: float
    overlay: np.ndarray | None
    timings: dict
    decision: Decision = Decision.REJECT
    failed: bool = False
    error: str = ""


def _softmax_planes(x: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Softmax over the class axis of a C x H x W array.

    Returns H x W x C probabilities plus the shifted logits and their
    log-normalizer, which give the decode cost without a per-class log.
    """
    z = x - x.max(axis=0)
    e = np.exp(z)
    total = e.sum(axis=0)
    e /= total
    return np.ascontiguousarray(np.moveaxis(e, 0, -1)), z, np.log(total)


def _decode_cost(z: np.ndarray, log_total: np.ndarray) -> np.ndarray:
    """-log p floored like :func:`postprocess.log_cost`, as H x W x C."""
    cost = log_total - z
    np.minimum(cost, -math.log(PROB_FLOOR), out=cost)
    return np.ascontiguousarray(np.moveaxis(cost, 0, -1))


def gate(confidence: float, config: PipelineConfig) -> Decision:
    """ACCEPT iff confidence >= threshold (boundary inclusive)."""
    return Decision.ACCEPT if confidence >= config.confidence_threshold else Decision.REJECT


def render_overlay(frame: Frame, labels: LabelMap | None, trace: BoundaryTrace | None) -> np.ndarray:
    """RGB uint8 overlay: grayscale frame, tinted cornea band, 1-px interface lines."""
    gray = np.rint(frame.pixels * 255.0).astype(np.uint8)
    if labels is not None:
        out = np.where((labels.labels == 1)[:, :, None], _BAND_LUT[gray], gray[:, :, None])
    else:
        out = np.repeat(gray[:, :, None], 3, axis=2)
    if trace is not None:
        H = out.shape[0]
        for row_px, color in ((trace.epi_row_px, EPI_COLOR), (trace.dm_row_px, DM_COLOR)):
            cols = np.flatnonzero(~np.isnan(row_px))
            rows = np.clip(np.rint(row_px[cols]).astype(int), 0, H - 1)
            out[rows, cols] = color
    return out


def _infer_batches(model, batch: np.ndarray, frame_id: int, size: int, timings: dict):
    """Run inference in chunks of ``size`` stripes; host<->device time goes to transfer."""
    outs = []
    for s in range(0, batch.shape[0], size):
        chunk = batch[s:s + size]
        t0 = time.perf_counter()
        handle = model.to_device(chunk)
        model.sync()
        t1 = time.perf_counter()
        if hasattr(model, "infer_batch"):
            logits = model.infer_batch(handle, frame_id, s)
        else:
            logits = model.infer(handle, frame_id)
        model.sync()
        t2 = time.perf_counter()
        outs.append(model.to_host(logits))
        t3 = time.perf_counter()
        timings["transfer"] += (t1 - t0) + (t3 - t2)
        timings["infer"] += t2 - t1
    return np.concatenate(outs, axis=0)


def process_frame(frame: Frame, model, config: PipelineConfig | None = None, render: bool = True) -> FrameResult:
    """Run every stage on one 512x512 frame; timings are in milliseconds."""
    config = config or PipelineConfig()
    model = as_model(model, config)
    t = dict.fromkeys(STAGES, 0.0)
    start = time.perf_counter()

    stripes = tile_array(frame.pixels)  # (8, H, 64)
    t1 = time.perf_counter()
    t["tile"] = t1 - start

    norm = model.norm
    normed = ((stripes - norm.mean) / norm.std).astype(np.float32)
    padded, dims = pad16(np.moveaxis(normed, 0, -1))  # pad H, W of (H, 64, 8)
    batch = np.ascontiguousarray(np.moveaxis(padded, -1, 0)[:, None])
    t2 = time.perf_counter()
    t["norm"] = t2 - t1

    try:
        logits = _infer_batches(model, batch, frame.frame_id, config.batch_stripes, t)
    except Exception as exc:  # a failed frame must not stop the stream
        log.warning("inference failed on frame %d: %s", frame.frame_id, exc)
        t3 = time.perf_counter()
        timings = {f"{k}_ms": v * 1000 for k, v in t.items()}
        timings["total_ms"] = (t3 - start) * 1000
        return FrameResult(frame.frame_id, None, None, None, 0.0, None, timings,
                           Decision.REJECT, failed=True, error=str(exc))
    t3 = time.perf_counter()

    per_stripe = [np.moveaxis(crop(np.moveaxis(logits[i], 0, -1), dims), -1, 0) for i in range(NUM_STRIPES)]
    probs, z, log_total = _softmax_planes(np.concatenate(per_stripe, axis=2, dtype=np.float64))
    t4 = time.perf_counter()
    t["reassemble"] = t4 - t3

    r1, r2 = kernels.decode_transitions(_decode_cost(z, log_total))
    lab = transitions_to_labels(r1, r2, probs.shape[0])
    labels = LabelMap(lab)
    trace = trace_from_transitions(r1, r2, probs.shape[0], frame.pixel_pitch_um)
    if config.smooth_window > 1:
        trace = smooth_trace(trace, config.smooth_window)
    conf = confidence_from_transitions(probs, lab, r1, r2, config.confidence_radius)
    decision = gate(conf, config)
    t5 = time.perf_counter()
    t["decode"] = t5 - t4

    overlay = render_overlay(frame, labels, trace) if render else None
    t6 = time.perf_counter()
    t["overlay"] = t6 - t5

    timings = {f"{k}_ms": v * 1000 for k, v in t.items()}
    timings["total_ms"] = (t6 - start) * 1000
    return FrameResult(frame.frame_id, probs, labels, trace, conf, overlay, timings, decision)


# --- streaming ------------------------------------------------------------

@dataclass
class PipelineReport:
    stage_mean_ms: dict
    stage_p95_ms: dict
    end_to_end_mean_ms: float
    end_to_end_p95_ms: float
    end_to_end_hz: float
    delivered_hz: float
    frames_in: int
    frames_processed: int
    frames_accepted: int
    frames_rejected: int
    frames_failed: int
    frames_dropped: int
    effective_update_hz: float
    cap_hz: float | None
    hardware: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return asdict(self)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, default=_json_default)


def _json_default(v):
    if isinstance(v, float) and (math.isnan(v) or math.isinf(v)):
        return str(v)
    raise TypeError(type(v))


def hardware_descriptor(config: PipelineConfig | None = None) -> dict:
    return {
        "machine": platform.machine(),
        "processor": platform.processor() or platform.machine(),
        "cpu_count": os.cpu_count(),
        "torch": torch.__version__,
        "torch_threads": torch.get_num_threads(),
        "device": (config.device if config else "cpu"),
        "mixed_precision": bool(config.mixed_precision) if config else False,
        "kernel_backend": kernels.BACKEND,
        "python": platform.python_version(),
    }


@dataclass
class Emission:
    """What the display receives for one processed input frame."""

    frame_id: int
    source_frame_id: int
    decision: Decision
    confidence: float
    trace: BoundaryTrace | None
    overlay: np.ndarray | None
    release_s: float


class LiveSynthSource:
    """Synthetic acquisition running on its own timer thread.

    Frames land in a 2-slot queue; when the consumer falls behind, the oldest
    queued frame is dropped, so the newest frame always wins.
    """

    def __init__(self, frames: list[Frame], hz: float, n_frames: int, capacity: int = 2):
        if hz <= 0 or n_frames <= 0 or not frames:
            raise UsageError("live source needs frames, hz > 0 and n_frames > 0")
        self.pool = frames
        self.hz = hz
        self.n_frames = n_frames
        self.queue: deque[Frame] = deque()
        self.capacity = capacity
        self.dropped = 0
        self.produced = 0
        self._cv = threading.Condition()
        self._done = False
        self._thread = threading.Thread(target=self._run, daemon=True)

    def _run(self):
        period = 1.0 / self.hz
        t0 = time.perf_counter()
        for i in range(self.n_frames):
            target = t0 + i * period
            delay = target - time.perf_counter()
            if delay > 0:
                time.sleep(delay)
            src = self.pool[i % len(self.pool)]
            f = Frame(src.pixels, src.pixel_pitch_um, frame_id=i, timestamp_s=i * period)
            with self._cv:
                if len(self.queue) >= self.capacity:
                    self.queue.popleft()
                    self.dropped += 1
                self.queue.append(f)
                self.produced += 1
                self._cv.notify()
        with self._cv:
            self._done = True
            self._cv.notify()

    def __iter__(self) -> Iterator[Frame]:
        self._thread.start()
        while True:
            with self._cv:
                while not self.queue and not self._done:
                    self._cv.wait()
                if not self.queue and self._done:
                    return
                newest = self.queue.pop()
                self.dropped += len(self.queue)
                self.queue.clear()
            yield newest


def _summaries(results: list[FrameResult]) -> tuple[dict, dict, float, float]:
    means, p95 = {}, {}
    for s in STAGES:
        vals = np.array([r.timings[f"{s}_ms"] for r in results])
        means[f"{s}_ms"] = float(vals.mean())
        p95[f"{s}_ms"] = float(np.percentile(vals, 95))
    tot = np.array([r.timings["total_ms"] for r in results])
    return means, p95, float(tot.mean()), float(np.percentile(tot, 95))


def _write_trace_row(writer, em: Emission):
    tr = em.trace
    if tr is None:
        epi = dm = cov = float("nan")
    else:
        present = ~np.isnan(tr.epi_row_px)
        cov = float(present.mean())
        epi = float(np.nanmean(tr.epi_row_px)) if present.any() else float("nan")
        dm = float(np.nanmean(tr.dm_row_px)) if present.any() else float("nan")
    writer.writerow([em.frame_id, em.source_frame_id, f"{em.confidence:.6f}", em.decision.value,
                     "" if math.isnan(epi) else f"{epi:.3f}", "" if math.isnan(dm) else f"{dm:.3f}",
                     "" if math.isnan(cov) else f"{cov:.4f}"])


def run_stream(source: Iterable[Frame], model, config: PipelineConfig | None = None,
               out_dir: str | Path | None = None, save_overlays: bool = False,
               cap: bool = True, keep_emissions: bool = False):
    """Process a frame stream with gating and output pacing.

    Returns ``(report, emissions)``; ``emissions`` is empty unless
    ``keep_emissions`` is set. With ``cap`` disabled, output is released as
    soon as it is ready (used by :func:`bench`).
    """
    config = config or PipelineConfig()
    model = as_model(model, config)
    period = 1.0 / config.cap_hz if cap else 0.0
    out = Path(out_dir) if out_dir is not None else None
    log_fh = writer = None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
        if save_overlays:
            (out / "overlays").mkdir(exist_ok=True)
        log_fh = open(out / "trace_log.csv", "w", newline="")
        writer = csv.writer(log_fh)
        writer.writerow(["frame_id", "source_frame_id", "confidence", "decision",
                         "epi_mean_px", "dm_mean_px", "coverage"])

    results: list[FrameResult] = []
    emissions: list[Emission] = []
    releases: list[float] = []
    last: tuple[int, BoundaryTrace | None, np.ndarray | None] | None = None
    accepted = rejected = failed = 0
    try:
        for frame in source:
            res = process_frame(frame, model, config, render=True)
            results.append(res)
            if res.failed:
                failed += 1
            if res.decision is Decision.ACCEPT:
                accepted += 1
                last = (res.frame_id, res.trace, res.overlay)
                em_src, em_trace, em_overlay = last
            else:
                rejected += 1
                if config.hold_last_on_reject and last is not None:
                    em_src, em_trace, em_overlay = last
                else:
                    em_src, em_trace, em_overlay = res.frame_id, None, render_overlay(frame, None, None)

            now = time.perf_counter()
            if releases and period:
                target = releases[-1] + period
                while now < target:
                    time.sleep(target - now)
                    now = time.perf_counter()
            releases.append(now)
            em = Emission(res.frame_id, em_src, res.decision, res.confidence, em_trace, em_overlay, now)
            if keep_emissions:
                emissions.append(em)
            if writer is not None:
                _write_trace_row(writer, em)
            if out is not None and save_overlays and em_overlay is not None:
                Image.fromarray(em_overlay).save(out / "overlays" / f"{res.frame_id:06d}.png")
    finally:
        if log_fh is not None:
            log_fh.close()

    if not results:
        raise UsageError("frame source is empty")
    dropped = getattr(source, "dropped", 0)
    frames_in = getattr(source, "produced", len(results))
    means, p95, tot_mean, tot_p95 = _summaries(results)
    span = releases[-1] - releases[0]
    delivered = (len(releases) - 1) / span if len(releases) > 1 and span > 0 else math.nan
    report = PipelineReport(
        stage_mean_ms=means,
        stage_p95_ms=p95,
        end_to_end_mean_ms=tot_mean,
        end_to_end_p95_ms=tot_p95,
        end_to_end_hz=1000.0 / tot_mean if tot_mean > 0 else math.inf,
        delivered_hz=delivered,
        frames_in=frames_in,
        frames_processed=len(results),
        frames_accepted=accepted,
        frames_rejected=rejected,
        frames_failed=failed,
        frames_dropped=dropped,
        effective_update_hz=(accepted / len(results)) * delivered if not math.isnan(delivered) else math.nan,
        cap_hz=config.cap_hz if cap else None,
        hardware=hardware_descriptor(config),
    )
    if out is not None:
        (out / "report.json").write_text(report.to_json())
    return report, emissions


def synthetic_frames(n: int, seed: int = 0, style: str = "ex_vivo", **overrides) -> list[Frame]:
    from .synthgen import generate_sample, load_preset

    cfg = load_preset(style, seed=seed, **overrides)
    return [generate_sample(cfg, i)[0] for i in range(n)]


def bench(model, config: PipelineConfig | None = None, n_frames: int = 200, warmup: int = 20,
          frames: list[Frame] | None = None) -> PipelineReport:
    """Uncapped throughput over ``n_frames`` after ``warmup`` excluded frames."""
    config = config or PipelineConfig()
    model = as_model(model, config)
    pool = frames or synthetic_frames(min(16, n_frames + warmup))

    def stream(count, offset):
        for i in range(count):
            src = pool[(offset + i) % len(pool)]
            yield Frame(src.pixels, src.pixel_pitch_um, frame_id=offset + i, timestamp_s=0.0)

    if warmup > 0:
        run_stream(stream(warmup, 0), model, config, cap=False)
    report, _ = run_stream(stream(n_frames, warmup), model, config, cap=False)
    return report


def stripe_inference_ms(model, n: int = 10, batch: int = 8, config: PipelineConfig | None = None) -> float:
    """Mean wall time (ms) of one inference call on ``batch`` padded stripes."""
    config = config or PipelineConfig()
    model = as_model(model, config)
    x = np.zeros((batch, 1, 512, STRIPE_WIDTH), dtype=np.float32)
    handle = model.to_device(x)
    model.infer(handle)
    model.sync()
    t0 = time.perf_counter()
    for _ in range(n):
        model.infer(handle)
    model.sync()
    return (time.perf_counter() - t0) * 1000.0 / n
