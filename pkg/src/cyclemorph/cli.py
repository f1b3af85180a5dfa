"""Command-line entry point: ``cyclemorph {synth,train,register,eval}``.

Exit codes: 0 success, 1 usage or configuration error, 2 runtime or data error.
Every command writes ``manifest.json`` into its output directory.
"""
from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import sys
import time
from pathlib import Path

import numpy as np

from . import __version__, io
from .losses import HyperParams
from .metrics import EvalReport, as_field, batch, evaluate
from .multiscale import MultiscaleConfig, local_training_set, register_multiscale
from .regnet import RegNetConfig
from .synthbench import FieldGenerationError, SynthConfig, load_benchmark, load_pair, write_benchmark
from .trainer import IncompatibleDataset, PairDataset, TrainConfig, fit, load_stage
from .warp import PLAIN_SUM, COMPOSE, downsample_image, spatial_transform

log = logging.getLogger("cyclemorph")


class ConfigError(Exception):
    pass


class DataError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(1, f"{self.prog}: error: {message}\n")


def _read_config(path) -> dict:
    if path is None:
        return {}
    try:
        with open(path) as f:
            doc = json.load(f)
    except (OSError, json.JSONDecodeError) as err:
        raise ConfigError(f"cannot read config {path}: {err}") from err
    if isinstance(doc, dict) and "command" in doc and "config" in doc:
        doc = doc["config"]  # a run manifest replays its own config
    if not isinstance(doc, dict):
        raise ConfigError(f"config {path} must be a JSON object")
    return doc


def _build(cls, doc: dict, what: str):
    names = {f.name for f in dataclasses.fields(cls)}
    unknown = sorted(set(doc) - names)
    if unknown:
        raise ConfigError(f"{what}: unknown field(s) {', '.join(unknown)}")
    try:
        return cls(**doc)
    except (TypeError, ValueError) as err:
        raise ConfigError(f"{what}: {err}") from err


def _load_image(path) -> np.ndarray:
    path = Path(path)
    try:
        return io.load_pgm(path) if path.suffix.lower() == ".pgm" else io.load_dtf(path)
    except (OSError, io.FormatError) as err:
        raise DataError(f"cannot read image {path}: {err}") from err


_PATH_ARGS = ("data", "moving", "fixed", "checkpoints", "ground_truth", "resume")


def _replay_args(args) -> None:
    """Fill path arguments left unset on the command line from a run manifest given as ``--config``."""
    if not args.config:
        return
    try:
        with open(args.config) as f:
            doc = json.load(f)
    except (OSError, json.JSONDecodeError):
        return  # reported properly when the config is read
    if not (isinstance(doc, dict) and "command" in doc and "config" in doc):
        return
    if doc["command"] != args.command:
        return  # e.g. a train manifest handed to register only supplies configuration
    for key, value in doc.get("args", {}).items():
        if key in _PATH_ARGS and getattr(args, key, None) is None:
            setattr(args, key, value)
        elif key in ("multiscale", "plain_sum_fusion", "sum_normalization") and value:
            setattr(args, key, True)
    if args.seed is None and "seed" in doc.get("seeds", {}):
        args.seed = doc["seeds"]["seed"]


def _write_manifest(out: Path, command: str, config: dict, seeds: dict, inputs, artifacts, started: float,
                    args=None) -> None:
    recorded = {}
    if args is not None:
        for key in _PATH_ARGS + ("multiscale", "plain_sum_fusion", "sum_normalization"):
            value = getattr(args, key, None)
            if value not in (None, False):
                recorded[key] = value
    manifest = {
        "command": command,
        "args": recorded,
        "config": config,
        "seeds": seeds,
        "inputs": {str(p): io.sha256_file(p) for p in inputs if Path(p).is_file()},
        "artifacts": {str(Path(p).relative_to(out)): io.sha256_file(p) for p in artifacts},
        "wall_clock": time.time() - started,
        "version": __version__,
    }
    io.write_json(out / "manifest.json", manifest)


# --------------------------------------------------------------------------


def cmd_synth(args) -> None:
    started = time.time()
    doc = _read_config(args.config)
    if args.seed is not None:
        doc["seed"] = args.seed
    cfg = _build(SynthConfig, doc, "synth config")
    out = Path(args.out)
    try:
        manifest = write_benchmark(cfg, out)
    except FieldGenerationError as err:
        raise DataError(str(err)) from err
    artifacts = [out / k for k in sorted(manifest["checksums"])]
    _write_manifest(out, "synth", cfg.to_dict(), {"seed": cfg.seed}, [], artifacts, started, args)
    print(f"wrote {manifest['n_pairs']} pairs to {out}")


def _train_config(doc: dict, args) -> tuple[TrainConfig, dict]:
    doc = dict(doc)
    ms = doc.pop("multiscale", None)
    local = doc.pop("local", {})
    hp = dict(doc.pop("hp", {}))
    if args.sum_normalization:
        hp["normalization"] = "sum"
    if args.seed is not None:
        doc["seed"] = args.seed
    doc["hp"] = _build(HyperParams, hp, "hp")
    doc["net"] = _build(RegNetConfig, doc.get("net", {}), "net")
    cfg = _build(TrainConfig, doc, "train config")
    return cfg, {"multiscale": ms or {}, "local": local}


def cmd_train(args) -> None:
    started = time.time()
    doc = _read_config(args.config)
    cfg, more = _train_config(doc, args)
    if args.data is None:
        raise ConfigError("--data is required")
    try:
        data = load_benchmark(args.data)
    except (OSError, io.FormatError) as err:
        raise DataError(f"cannot load benchmark {args.data}: {err}") from err
    out = Path(args.out)
    artifacts = []
    full_config = cfg.to_dict()
    try:
        if args.multiscale:
            ms = _build(MultiscaleConfig, more["multiscale"], "multiscale")
            coarse = PairDataset(
                [downsample_image(batch(m), ms.subsample).numpy()[0, 0] for m in data.moving],
                [downsample_image(batch(f), ms.subsample).numpy()[0, 0] for f in data.fixed])
            res = fit(coarse, cfg, out, name="global", resume=args.resume)
            local_doc = {**doc, **more["local"]}
            local_cfg, _ = _train_config({k: v for k, v in local_doc.items() if k not in ("multiscale", "local")}, args)
            patches = local_training_set(res.gx, data, ms)
            res_local = fit(patches, local_cfg, out, name="local")
            artifacts += [res_local.checkpoint, out / "local_log.jsonl"]
            full_config = {**full_config, "multiscale": ms.to_dict(), "local": local_cfg.to_dict()}
        else:
            res = fit(data, cfg, out, name="global", resume=args.resume)
    except IncompatibleDataset as err:
        raise DataError(str(err)) from err
    artifacts = [res.checkpoint, out / "global_log.jsonl"] + artifacts
    inputs = [p for p in [args.config, args.resume] if p]
    inputs += sorted(Path(args.data).glob("pairs/*/*.dtf"))
    _write_manifest(out, "train", full_config, {"seed": cfg.seed}, inputs, artifacts, started, args)
    print(f"trained {len(data)} pairs for {cfg.epochs} epoch(s); checkpoints in {out}")


def cmd_register(args) -> None:
    started = time.time()
    if not (args.checkpoints and args.moving and args.fixed):
        raise ConfigError("register needs --checkpoints, --moving and --fixed")
    moving, fixed = _load_image(args.moving), _load_image(args.fixed)
    if moving.shape != fixed.shape:
        raise DataError(f"moving {moving.shape} and fixed {fixed.shape} lattices differ")
    ck = Path(args.checkpoints)
    try:
        gx, _, _ = load_stage(ck / "global.cmk")
    except (OSError, io.FormatError, ValueError) as err:
        raise DataError(f"cannot load {ck / 'global.cmk'}: {err}") from err
    config = {"multiscale": None}
    t0 = time.perf_counter()
    try:
        if args.multiscale:
            lx, _, _ = load_stage(ck / "local.cmk")
            ms_doc = dict(_read_config(args.config).get("multiscale") or {})
            if args.plain_sum_fusion:
                ms_doc["composition"] = PLAIN_SUM
            ms = _build(MultiscaleConfig, ms_doc, "multiscale")
            res = register_multiscale(gx, lx, moving, fixed, ms)
            deformed, phi = res.deformed, res.phi_final
            config["multiscale"] = ms.to_dict()
        else:
            phi = gx.predict(batch(moving), batch(fixed))[0]
            deformed = spatial_transform(batch(moving), phi[None]).numpy()[0, 0]
    except ValueError as err:
        raise DataError(str(err)) from err
    runtime = time.perf_counter() - t0
    out = Path(args.out)
    io.save_dtf(out / "deformed.dtf", deformed)
    io.save_dtf(out / "phi_final.dtf", phi)
    io.write_json(out / "runtime.json", {"seconds": runtime})
    _write_manifest(out, "register", config, {}, [args.moving, args.fixed, ck / "global.cmk"],
                    [out / "deformed.dtf", out / "phi_final.dtf"], started, args)
    print(f"registered in {runtime:.3f}s; outputs in {out}")


def cmd_eval(args) -> None:
    started = time.time()
    if not (args.data and args.ground_truth):
        raise ConfigError("eval needs --data (registration output) and --ground-truth (pair directory)")
    reg = Path(args.data)
    try:
        deformed = io.load_dtf(reg / "deformed.dtf")
        phi = io.load_dtf(reg / "phi_final.dtf")
        moving, fixed, extras = load_pair(args.ground_truth)
    except (OSError, io.FormatError) as err:
        raise DataError(str(err)) from err
    runtime = None
    if (reg / "runtime.json").exists():
        runtime = json.loads((reg / "runtime.json").read_text())["seconds"]
    nets = None
    if args.checkpoints:
        gx, gy, _ = load_stage(Path(args.checkpoints) / "global.cmk")
        nets = (gx, gy)
    try:
        report = evaluate(moving, fixed, as_field(phi), deformed=deformed, extras=extras, nets=nets, runtime=runtime)
    except ValueError as err:
        raise DataError(str(err)) from err
    out = Path(args.out)
    io.write_json(out / "report.json", report.to_dict())
    artifacts = [out / "report.json"]
    if args.plots:
        artifacts += _plots(out, moving, fixed, deformed, as_field(phi))
    _write_manifest(out, "eval", {"plots": bool(args.plots)}, {},
                    [reg / "deformed.dtf", reg / "phi_final.dtf"], [out / "report.json"], started, args)
    print(json.dumps(report.to_dict(), indent=2))


def _plots(out: Path, moving, fixed, deformed, phi) -> list:
    """Difference images and a field quiver; 2-D only, skipped quietly if matplotlib is missing."""
    if moving.ndim != 2:
        return []
    try:
        import matplotlib
        matplotlib.use("Agg")
        import matplotlib.pyplot as plt
    except ImportError:
        return []
    fig, ax = plt.subplots(1, 4, figsize=(14, 3.5))
    ax[0].imshow(moving, cmap="gray")
    ax[0].set_title("moving")
    ax[1].imshow(fixed, cmap="gray")
    ax[1].set_title("fixed")
    ax[2].imshow(np.abs(moving - fixed), cmap="magma", vmin=0, vmax=1)
    ax[2].set_title("|moving - fixed|")
    ax[3].imshow(np.abs(deformed - fixed), cmap="magma", vmin=0, vmax=1)
    ax[3].set_title("|deformed - fixed|")
    for a in ax:
        a.axis("off")
    fig.savefig(out / "difference.png", dpi=100, bbox_inches="tight")
    plt.close(fig)
    step = max(1, moving.shape[0] // 24)
    rows, cols = np.mgrid[0:moving.shape[0]:step, 0:moving.shape[1]:step]
    fig, a = plt.subplots(figsize=(5, 5))
    a.imshow(fixed, cmap="gray")
    # arrows drawn at true length in voxel units
    a.quiver(cols, rows, phi[1, ::step, ::step], phi[0, ::step, ::step], color="yellow",
             angles="xy", scale_units="xy", scale=1)
    a.axis("off")
    fig.savefig(out / "field.png", dpi=100, bbox_inches="tight")
    plt.close(fig)
    return [out / "difference.png", out / "field.png"]


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="cyclemorph", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def common(p):
        p.add_argument("--config", metavar="PATH")
        p.add_argument("--out", metavar="DIR", required=True)
        p.add_argument("--seed", type=int)
        return p

    common(sub.add_parser("synth", help="generate a synthetic benchmark")).set_defaults(func=cmd_synth)

    p = common(sub.add_parser("train", help="train the registration networks"))
    p.add_argument("--data", metavar="DIR")
    p.add_argument("--multiscale", action="store_true")
    p.add_argument("--resume", metavar="PATH")
    p.add_argument("--sum-normalization", action="store_true")
    p.set_defaults(func=cmd_train)

    p = common(sub.add_parser("register", help="register one pair"))
    p.add_argument("--checkpoints", metavar="DIR")
    p.add_argument("--moving", metavar="PATH")
    p.add_argument("--fixed", metavar="PATH")
    p.add_argument("--multiscale", action="store_true")
    p.add_argument("--plain-sum-fusion", action="store_true")
    p.set_defaults(func=cmd_register)

    p = common(sub.add_parser("eval", help="evaluate a registration against ground truth"))
    p.add_argument("--data", metavar="DIR", help="registration output directory")
    p.add_argument("--ground-truth", metavar="DIR", help="benchmark pair directory")
    p.add_argument("--checkpoints", metavar="DIR", help="adds reverse-consistency metrics")
    p.add_argument("--plots", action="store_true")
    p.set_defaults(func=cmd_eval)
    return parser


def main(argv=None) -> int:
    logging.basicConfig(level=logging.INFO, format="%(levelname)s %(name)s: %(message)s")
    args = build_parser().parse_args(argv)
    try:
        _replay_args(args)
        args.func(args)
    except ConfigError as err:
        print(f"config error: {err}", file=sys.stderr)
        return 1
    except (DataError, OSError, ValueError, FloatingPointError) as err:
        # bad files, incompatible checkpoints, diverged training
        print(f"error: {err}", file=sys.stderr)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
