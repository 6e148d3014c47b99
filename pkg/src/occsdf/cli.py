"""Command-line entry point: one subcommand per experiment.

Exit codes: 0 success, 2 input or contract error, 3 numerical abort, 4 I/O error.
"""
from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from pathlib import Path

import numpy as np
import torch

from .data import DatasetError, camera_rig, generate_dataset, load_dataset, save_dataset
from .fields import CheckpointError, UsageError, load_checkpoint, parameter_checksum
from .mesh import DEFAULT_THRESHOLD, TriangleMesh, evaluate, extract_mesh
from .renderer import toy_ray_analysis
from .scenes import BENCHMARK_SCENES, Ray, SceneFormatError, load_scene, sdf_query, toy_rays
from .training import (
    MODES,
    NumericalAbort,
    RayTable,
    TrainConfig,
    check_probe_regions,
    regions_by_intensity,
    regions_from_blocks,
    train,
    write_probe_csv,
)

EXIT_OK, EXIT_INPUT, EXIT_NAN, EXIT_IO = 0, 2, 3, 4

log = logging.getLogger("occsdf")


class InputError(ValueError):
    pass


def _scene(arg: str):
    if arg in BENCHMARK_SCENES and not Path(arg).exists():
        return BENCHMARK_SCENES[arg]()
    if not Path(arg).is_file():
        raise InputError(f"scene {arg!r} is neither a file nor one of {sorted(BENCHMARK_SCENES)}")
    return load_scene(arg)


def _require_dir(path, what):
    if path is None or not Path(path).is_dir():
        raise InputError(f"{what} directory {path!r} does not exist")
    return Path(path)


def _train_config(args) -> TrainConfig:
    data = {}
    if args.config is not None:
        if not Path(args.config).is_file():
            raise InputError(f"config file {args.config!r} does not exist")
        try:
            data = json.loads(Path(args.config).read_text())
        except json.JSONDecodeError as exc:
            raise InputError(f"{args.config}:{exc.lineno}:{exc.colno}: {exc.msg}") from None
    if getattr(args, "seed", None) is not None:
        data["seed"] = args.seed
    if getattr(args, "mode", None) is not None:
        data["mode"] = args.mode
    return TrainConfig.from_dict(data)


def _write_manifest(out: Path, args, extra=None) -> None:
    out.mkdir(parents=True, exist_ok=True)
    manifest = {
        "command": args.command,
        "config": getattr(args, "config", None),
        "dataset": getattr(args, "dataset", None),
        "out": str(args.out),
        "seed": getattr(args, "seed", None),
        "mode": getattr(args, "mode", None),
        "arguments": {k: v for k, v in sorted(vars(args).items()) if k not in ("func",)},
    }
    if extra:
        manifest.update(extra)
    (out / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True, default=str) + "\n")


def _emit(obj) -> None:
    print(json.dumps(obj, sort_keys=True))


# ---------------------------------------------------------------- commands


def cmd_generate_data(args) -> int:
    scene = _scene(args.scene)
    rig = {}
    if args.config is not None:
        rig = json.loads(Path(args.config).read_text())
    allowed = {"views", "radius_factor", "width", "height", "fov_deg", "max_elevation_deg"}
    if set(rig) - allowed:
        raise InputError(f"unknown rig keys: {sorted(set(rig) - allowed)}")
    rig.setdefault("views", args.views)
    rig.setdefault("width", args.width)
    rig.setdefault("height", args.height)
    out = Path(args.out)
    _write_manifest(out, args)
    dataset = generate_dataset(scene, camera_rig(scene, **rig))
    save_dataset(dataset, out)
    _emit({"frames": len(dataset.frames), "pixels": dataset.num_pixels,
           "dark_fraction": dataset.dark_fraction(), "scene": scene.scene_id})
    return EXIT_OK


def cmd_train(args) -> int:
    cfg = _train_config(args)
    dataset = load_dataset(_require_dir(args.dataset, "dataset"))
    out = Path(args.out)
    _write_manifest(out, args, {"train_config": cfg.to_dict()})
    resume = None
    if args.resume:
        last = out / "checkpoint_last.bin"
        resume = last if last.is_file() else None
    regions = None
    if cfg.probe_every:
        regions = _regions(args, dataset)
    result = train(cfg, dataset, out_dir=out, resume_from=resume, probe_regions=regions)
    if result.probe is not None:
        write_probe_csv(out / "probe.csv", {cfg.mode: result.probe})
    _emit({"mode": cfg.mode, "iterations": cfg.iterations, "checksum": parameter_checksum(result.field),
           "final": result.log[-1] if result.log else None})
    return EXIT_OK


def _regions(args, dataset):
    if getattr(args, "regions", None) is None:
        return regions_by_intensity(dataset)
    path = Path(args.regions)
    if not path.is_file():
        raise InputError(f"regions file {args.regions!r} does not exist")
    try:
        spec = json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise InputError(f"{path}:{exc.lineno}:{exc.colno}: {exc.msg}") from None
    return regions_from_blocks(dataset, spec)


def cmd_gradient_probe(args) -> int:
    cfg = _train_config(args)
    dataset = load_dataset(_require_dir(args.dataset, "dataset"))
    regions = _regions(args, dataset)
    check_probe_regions(RayTable(dataset), regions)
    out = Path(args.out)
    _write_manifest(out, args, {"train_config": cfg.to_dict()})
    if not cfg.probe_every:
        cfg = TrainConfig.from_dict({**cfg.to_dict(), "probe_every": max(1, cfg.iterations // 10)})
    probes, summary = {}, {}
    for mode in args.modes:
        mcfg = TrainConfig.from_dict({**cfg.to_dict(), "mode": mode})
        probe = train(mcfg, dataset, probe_regions=regions).probe
        probes[mode] = probe
        summary[mode] = {"initial_ratio": probe.ratio(0), "final_ratio": probe.ratio(-1)}
    write_probe_csv(out / "probe.csv", probes)
    (out / "probe_summary.json").write_text(json.dumps(summary, indent=2, sort_keys=True) + "\n")
    _emit(summary)
    return EXIT_OK


def cmd_toy_ray(args) -> int:
    scene = _scene(args.scene)
    if args.origin is not None:
        if args.direction is None or args.far is None:
            raise InputError("--origin needs --direction and --far")
        d = np.asarray(args.direction, dtype=np.float64)
        ray = Ray(np.asarray(args.origin, dtype=np.float64), d / np.linalg.norm(d), args.near, args.far)
    else:
        named = toy_rays(scene)
        if args.ray not in named:
            raise InputError(f"unknown ray {args.ray!r}; choose from {sorted(named)}")
        ray = named[args.ray]
    report = toy_ray_analysis(scene, ray, args.alpha, args.beta, args.samples)
    if report.true_depth is None:
        raise InputError("ray does not intersect the scene")
    out = Path(args.out)
    _write_manifest(out, args)
    report.write(out / "toy_ray.csv", out / "toy_ray.json")
    _emit(report.summary())
    return EXIT_OK


def cmd_extract_evaluate(args) -> int:
    scene = _scene(args.scene)
    if args.oracle:
        source, checksum = (lambda p: sdf_query(scene, p)), None
    else:
        if args.checkpoint is None or not Path(args.checkpoint).is_file():
            raise InputError("--checkpoint must name an existing checkpoint (or pass --oracle)")
        field, _, _ = load_checkpoint(args.checkpoint)
        source, checksum = field, parameter_checksum(field)
    out = Path(args.out)
    _write_manifest(out, args, {"checkpoint_checksum": checksum})
    mesh = extract_mesh(source, scene.bounds, args.resolution)
    mesh.write_obj(out / "mesh.obj")
    report = evaluate(mesh, scene, args.threshold, args.samples, args.seed or 0)
    report.write(out / "metrics.json")
    _emit(report.to_dict())
    return EXIT_OK


# ---------------------------------------------------------------- parser


def build_parser() -> argparse.ArgumentParser:
    fmt = argparse.ArgumentDefaultsHelpFormatter
    p = argparse.ArgumentParser(prog="occsdf", description=__doc__, formatter_class=fmt)
    p.add_argument("--log-level", default="WARNING", help="logging level")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, seed=True):
        sp.add_argument("--out", required=True, help="output directory (created if missing)")
        sp.add_argument("--workers", type=int, default=os.cpu_count() or 1,
                        help="cap on internal worker threads; 1 gives bitwise reproducible runs")
        if seed:
            sp.add_argument("--seed", type=int, default=None, help="random seed (overrides the config)")

    g = sub.add_parser("generate-data", help="render a supervision dataset from a scene", formatter_class=fmt)
    g.add_argument("--scene", required=True, help=f"scene JSON file or built-in name {sorted(BENCHMARK_SCENES)}")
    g.add_argument("--config", default=None, help="camera rig JSON (views, width, height, fov_deg, ...)")
    g.add_argument("--views", type=int, default=24, help="number of cameras")
    g.add_argument("--width", type=int, default=64, help="image width in pixels")
    g.add_argument("--height", type=int, default=64, help="image height in pixels")
    common(g)
    g.set_defaults(func=cmd_generate_data)

    t = sub.add_parser("train", help="train a field on a dataset", formatter_class=fmt)
    t.add_argument("--config", default=None, help="training config JSON mirroring TrainConfig")
    t.add_argument("--dataset", required=True, help="dataset directory")
    t.add_argument("--mode", choices=sorted(MODES), default=None, help="ablation mode (overrides the config)")
    t.add_argument("--regions", default=None, help="probe regions JSON; default splits by pixel intensity")
    t.add_argument("--resume", action="store_true", help="continue from OUT/checkpoint_last.bin if present")
    common(t)
    t.set_defaults(func=cmd_train)

    r = sub.add_parser("toy-ray", help="render the ground-truth SDF along one ray", formatter_class=fmt)
    r.add_argument("--scene", default="toy", help="scene JSON file or built-in name")
    r.add_argument("--ray", default="occluded", help="named ray of the toy scene (occluded, single)")
    r.add_argument("--origin", type=float, nargs=3, default=None, help="custom ray origin")
    r.add_argument("--direction", type=float, nargs=3, default=None, help="custom ray direction")
    r.add_argument("--near", type=float, default=0.0, help="custom ray near bound")
    r.add_argument("--far", type=float, default=None, help="custom ray far bound")
    r.add_argument("--alpha", type=float, default=100.0, help="density scale")
    r.add_argument("--beta", type=float, default=0.01, help="Laplace spread")
    r.add_argument("--samples", type=int, default=128, help="samples along the ray")
    common(r, seed=False)
    r.set_defaults(func=cmd_toy_ray)

    q = sub.add_parser("gradient-probe", help="dark/bright SDF-gradient series per mode", formatter_class=fmt)
    q.add_argument("--config", default=None, help="training config JSON")
    q.add_argument("--dataset", required=True, help="dataset directory")
    q.add_argument("--regions", default=None, help="regions JSON; default splits by pixel intensity")
    q.add_argument("--modes", nargs="+", choices=sorted(MODES), default=["sdf_only", "feature"],
                   help="modes to probe")
    q.add_argument("--mode", default=None, help=argparse.SUPPRESS)
    common(q)
    q.set_defaults(func=cmd_gradient_probe)

    e = sub.add_parser("extract-evaluate", help="marching cubes plus metrics against the analytic scene",
                       formatter_class=fmt)
    e.add_argument("--checkpoint", default=None, help="checkpoint file")
    e.add_argument("--oracle", action="store_true", help="use the scene's exact SDF instead of a checkpoint")
    e.add_argument("--scene", required=True, help="scene JSON file or built-in name")
    e.add_argument("--resolution", type=int, default=128, help="grid resolution per axis")
    e.add_argument("--threshold", type=float, default=DEFAULT_THRESHOLD, help="precision/recall distance")
    e.add_argument("--samples", type=int, default=100_000, help="surface samples per side")
    common(e)
    e.set_defaults(func=cmd_extract_evaluate)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=args.log_level.upper(), format="%(levelname)s %(name)s: %(message)s")
    torch.set_num_threads(max(1, args.workers))
    try:
        return args.func(args)
    except NumericalAbort as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_NAN
    except (InputError, SceneFormatError, DatasetError, CheckpointError, UsageError, ValueError, KeyError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INPUT
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
