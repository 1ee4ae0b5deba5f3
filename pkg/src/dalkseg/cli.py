"""Command-line entry point: generate, train, eval, stream, bench.

Every command accepts ``--config file.json`` and repeated ``--set key=value``
dotted overrides, and writes a ``stamp.json`` (resolved config, its hash,
seed and library versions) next to its outputs.

Exit codes: 0 ok, 1 runtime failure, 2 usage or config error.
"""
from __future__ import annotations

import argparse
import hashlib
import json
import logging
import platform
import sys
from dataclasses import asdict
from pathlib import Path

import numpy as np
import torch

from . import __version__, kernels

log = logging.getLogger("dalkseg")


class ConfigKeyError(Exception):
    """Unknown or malformed configuration key; carries the offending key."""

    def __init__(self, key: str, reason: str = "unknown key"):
        super().__init__(f"{reason}: {key}")
        self.key = key


def default_config() -> dict:
    from .losses import LossWeights
    from .network import NetworkConfig
    from .pipeline import PipelineConfig
    from .training import TrainConfig

    return {
        "data": {"subset": "hybrid", "seed": 0, "n_train": None, "n_test": None},
        "network": NetworkConfig.tiny().to_dict(),
        "train": asdict(TrainConfig()),
        "loss": LossWeights().to_dict(),
        "pipeline": asdict(PipelineConfig()),
    }


def _parse_value(text: str):
    try:
        return json.loads(text)
    except json.JSONDecodeError:
        return text


def merge(base: dict, update: dict, prefix: str = "") -> dict:
    """Recursively merge ``update`` into a copy of ``base``; unknown keys raise."""
    out = dict(base)
    for k, v in update.items():
        key = f"{prefix}{k}"
        if k not in base:
            raise ConfigKeyError(key)
        if isinstance(base[k], dict):
            if not isinstance(v, dict):
                raise ConfigKeyError(key, "expected a section")
            out[k] = merge(base[k], v, key + ".")
        else:
            out[k] = v
    return out


def apply_set(cfg: dict, assignment: str) -> dict:
    if "=" not in assignment:
        raise ConfigKeyError(assignment, "expected key=value")
    key, text = assignment.split("=", 1)
    update: dict = {}
    node = update
    parts = key.split(".")
    for p in parts[:-1]:
        node = node.setdefault(p, {})
    node[parts[-1]] = _parse_value(text)
    return merge(cfg, update)


def resolve_config(args) -> dict:
    cfg = default_config()
    if getattr(args, "config", None):
        try:
            loaded = json.loads(Path(args.config).read_text())
        except json.JSONDecodeError as exc:
            raise ConfigKeyError(args.config, f"invalid JSON ({exc})") from exc
        cfg = merge(cfg, loaded)
    for s in getattr(args, "set", None) or []:
        cfg = apply_set(cfg, s)
    return cfg


def _build(cls, section: str, values: dict):
    try:
        return cls(**values)
    except (TypeError, ValueError) as exc:
        raise ConfigKeyError(section, f"invalid values ({exc})") from exc


def config_hash(cfg: dict) -> str:
    return hashlib.sha256(json.dumps(cfg, sort_keys=True).encode()).hexdigest()


def write_stamp(out_dir: Path, command: str, cfg: dict, seed: int) -> dict:
    stamp = {
        "command": command,
        "config": cfg,
        "config_hash": config_hash(cfg),
        "seed": seed,
        "versions": {
            "dalkseg": __version__,
            "numpy": np.__version__,
            "torch": torch.__version__,
            "python": platform.python_version(),
            "kernel_backend": kernels.BACKEND,
        },
    }
    out_dir.mkdir(parents=True, exist_ok=True)
    (out_dir / "stamp.json").write_text(json.dumps(stamp, indent=2))
    return stamp


# --- commands -------------------------------------------------------------

def cmd_generate(args, cfg) -> int:
    from .synthgen import DatasetSpec, generate_dataset

    data = cfg["data"]
    subset = args.subset or data["subset"]
    seed = args.seed if args.seed is not None else data["seed"]
    spec = DatasetSpec.for_subset(subset)
    n_train = args.n_train if args.n_train is not None else data["n_train"]
    n_test = args.n_test if args.n_test is not None else data["n_test"]
    if n_train is not None or n_test is not None:
        spec = DatasetSpec(subset, n_train if n_train is not None else spec.n_train,
                           n_test if n_test is not None else spec.n_test)
    cfg["data"].update(subset=subset, seed=seed, n_train=spec.n_train, n_test=spec.n_test)
    out = Path(args.out)
    manifest = generate_dataset(spec, None, out, seed=seed)
    write_stamp(out, "generate", cfg, seed)
    print(json.dumps({"out": str(out), "frames": len(manifest["items"])}))
    return 0


def cmd_train(args, cfg) -> int:
    from .training import parse_config, train

    if args.epochs is not None:
        cfg["train"]["epochs"] = args.epochs
    if args.seed is not None:
        cfg["train"]["seed"] = args.seed
    try:
        model_cfg, train_cfg, weights = parse_config({k: cfg[k] for k in ("network", "train", "loss")})
    except KeyError as exc:
        raise ConfigKeyError(exc.args[0]) from exc
    except (TypeError, ValueError) as exc:
        raise ConfigKeyError("train", f"invalid values ({exc})") from exc
    out = Path(args.out)
    write_stamp(out, "train", cfg, train_cfg.seed)
    res = train(model_cfg, train_cfg, weights, args.manifest, out)
    print(json.dumps({"best_epoch": res.best.epoch, "val_boundary_mae_px": res.best.val_boundary_mae_px,
                      "val_macro_dice": res.best.val_macro_dice, "checkpoint": str(out / "best.pt")}))
    return 0


def _pipeline_config(cfg, args):
    from .pipeline import PipelineConfig

    if getattr(args, "cap", None) is not None:
        cfg["pipeline"]["cap_hz"] = args.cap
    if getattr(args, "threshold", None) is not None:
        cfg["pipeline"]["confidence_threshold"] = args.threshold
    return _build(PipelineConfig, "pipeline", cfg["pipeline"])


def _model(args):
    from .pipeline import StubModel

    if args.checkpoint:
        from .network import load_checkpoint

        return load_checkpoint(args.checkpoint)
    return StubModel()


def cmd_eval(args, cfg) -> int:
    from .metrics import evaluate

    pcfg = _pipeline_config(cfg, args)
    out = Path(args.out) if args.out else Path(args.checkpoint).parent / f"eval_{args.split}"
    write_stamp(out, "eval", cfg, cfg["data"]["seed"])
    rep = evaluate(args.checkpoint, args.manifest, args.split, out, pcfg)
    print(json.dumps(rep.to_dict(), indent=2))
    return 0


def cmd_stream(args, cfg) -> int:
    from .pipeline import LiveSynthSource, run_stream, synthetic_frames

    pcfg = _pipeline_config(cfg, args)
    seed = args.seed if args.seed is not None else cfg["data"]["seed"]
    if args.source == "synth":
        pool = synthetic_frames(min(args.frames, 64), seed=seed, style=args.style)
        source = LiveSynthSource(pool, args.hz, args.frames)
    else:
        from .synthgen import load_manifest
        from .types import load_frame

        manifest, root = load_manifest(args.source)
        source = [load_frame(root / it["frame"]) for it in manifest["items"]][: args.frames]
    out = Path(args.out)
    write_stamp(out, "stream", cfg, seed)
    report, _ = run_stream(source, _model(args), pcfg, out, save_overlays=args.save_overlays)
    print(report.to_json())
    return 0


def cmd_bench(args, cfg) -> int:
    from .pipeline import bench

    pcfg = _pipeline_config(cfg, args)
    report = bench(_model(args), pcfg, n_frames=args.frames, warmup=args.warmup)
    if args.out:
        out = Path(args.out)
        write_stamp(out, "bench", cfg, cfg["data"]["seed"])
        (out / "bench_report.json").write_text(report.to_json())
    print(report.to_json())
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="dalkseg", description=__doc__.splitlines()[0])
    p.add_argument("--version", action="version", version=__version__)
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp):
        sp.add_argument("--config", help="JSON config file (sections: data, network, train, loss, pipeline)")
        sp.add_argument("--set", action="append", metavar="KEY=VALUE",
                        help="dotted override, e.g. train.epochs=5 (repeatable)")

    g = sub.add_parser("generate", help="write a synthetic dataset and manifest")
    common(g)
    g.add_argument("--out", required=True, help="output directory")
    g.add_argument("--subset", choices=("in_vivo", "ex_vivo", "hybrid"), help="dataset subset")
    g.add_argument("--seed", type=int, help="dataset seed")
    g.add_argument("--n-train", type=int, help="train+val frame count (default: subset size)")
    g.add_argument("--n-test", type=int, help="test frame count (default: subset size)")
    g.set_defaults(func=cmd_generate)

    t = sub.add_parser("train", help="train a model on a dataset manifest")
    common(t)
    t.add_argument("--manifest", required=True, help="dataset directory or manifest.json")
    t.add_argument("--out", required=True, help="run directory for checkpoints and history")
    t.add_argument("--epochs", type=int, help="override train.epochs")
    t.add_argument("--seed", type=int, help="override train.seed")
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", help="evaluate a checkpoint on one split")
    common(e)
    e.add_argument("--checkpoint", required=True, help="checkpoint file")
    e.add_argument("--manifest", required=True, help="dataset directory or manifest.json")
    e.add_argument("--split", default="test", choices=("train", "val", "test"), help="split to score")
    e.add_argument("--out", help="report directory (default: next to the checkpoint)")
    e.set_defaults(func=cmd_eval)

    s = sub.add_parser("stream", help="run the gated, paced pipeline on a frame stream")
    common(s)
    s.add_argument("--source", default="synth", help="'synth' for a live synthetic source, or a dataset directory")
    s.add_argument("--hz", type=float, default=120.0, help="acquisition rate of the synthetic source")
    s.add_argument("--cap", type=float, help="output rate cap in Hz (default 80)")
    s.add_argument("--threshold", type=float, help="confidence gate threshold (default 0.6)")
    s.add_argument("--frames", type=int, default=200, help="number of frames to acquire")
    s.add_argument("--style", default="ex_vivo", choices=("in_vivo", "ex_vivo"), help="synthetic preset")
    s.add_argument("--seed", type=int, help="synthetic source seed")
    s.add_argument("--checkpoint", help="checkpoint file (default: a stub model)")
    s.add_argument("--out", default="stream_out", help="output directory")
    s.add_argument("--save-overlays", action="store_true", help="write overlay PNGs")
    s.set_defaults(func=cmd_stream)

    b = sub.add_parser("bench", help="uncapped end-to-end throughput with per-stage latency")
    common(b)
    b.add_argument("--frames", type=int, default=200, help="timed frames")
    b.add_argument("--warmup", type=int, default=20, help="untimed warm-up frames")
    b.add_argument("--checkpoint", help="checkpoint file (default: a stub model)")
    b.add_argument("--out", help="also write bench_report.json here")
    b.set_defaults(func=cmd_bench)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = resolve_config(args)
        return args.func(args, cfg)
    except ConfigKeyError as exc:
        print(f"dalkseg {args.command}: invalid config, {exc}", file=sys.stderr)
        return 2
    except Exception as exc:  # noqa: BLE001 - report and map to the runtime exit code
        log.debug("failure", exc_info=True)
        print(f"dalkseg {args.command}: error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
