"""Command line: gen | train | eval | render | gradcheck | sweep.

Exit codes: 0 success, 2 bad usage or bad configuration (reported before
any compute starts), 3 run aborted on a non-finite loss or gradient.
Unknown extra flags on `train` and `sweep` are treated as config
overrides: ``--optimizer.lr0 0.002`` rewrites that key in the loaded
config before validation.
"""

import os
import sys


def _cap_threads():
    # honored only if set before numpy/numba load their thread pools
    n = os.environ.get("TCODE_THREADS")
    if n:
        for var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS",
                    "MKL_NUM_THREADS", "NUMEXPR_NUM_THREADS",
                    "NUMBA_NUM_THREADS"):
            os.environ.setdefault(var, n)


_cap_threads()

import argparse
import json

import numpy as np

from . import config as config_mod
from .fields import build_field
from .gradcheck import run_suite
from .rendering import CULLED, DENSE, DEFAULT_AABB, render_image
from .scenes_io import SCENES, build_scene, generate_dataset, load_dataset, \
    write_png
from .training import (checkpoint_config, checkpoint_step, eval_split,
                       load_checkpoint, restore_field, restore_occupancy,
                       train, _format_csv)


def _epilog() -> str:
    lines = ["config keys (override with --<section>.<key> <value>):", ""]
    lines += ["  " + line for line in config_mod.help_lines()]
    return "\n".join(lines)


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="tcode",
        description="differentiable spatiotemporal neural-field engine",
        epilog=_epilog(),
        formatter_class=argparse.RawDescriptionHelpFormatter)
    sub = parser.add_subparsers(dest="cmd", required=True)

    p = sub.add_parser("gen", help="render a synthetic dataset to disk")
    p.add_argument("--scene", required=True,
                   help=f"one of: {', '.join(sorted(SCENES))}")
    p.add_argument("--layout", required=True,
                   help="multicam (fixed ring) or mono (orbiting camera)")
    p.add_argument("--out", required=True, help="dataset directory")
    p.add_argument("--cameras", type=int, default=8)
    p.add_argument("--frames", type=int, default=30)
    p.add_argument("--resolution", type=int, default=64)
    p.add_argument("--fps", type=int, default=30)
    p.add_argument("--oracle-samples", type=int, default=1024,
                   help="quadrature samples per ray of the reference "
                        "renderer")

    p = sub.add_parser(
        "train", help="optimize a field on a dataset",
        epilog=_epilog(),
        formatter_class=argparse.RawDescriptionHelpFormatter)
    p.add_argument("--config", help="run configuration JSON file")
    p.add_argument("--dataset", help="shorthand for --paths.dataset")
    p.add_argument("--out", help="shorthand for --paths.out_dir")
    p.add_argument("--resume", help="shorthand for --paths.resume")

    p = sub.add_parser("eval", help="score a checkpoint on one split")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--dataset", required=True)
    p.add_argument("--split", default="eval", choices=("eval", "train"))
    p.add_argument("--out", help="also write rendered PNGs here")

    p = sub.add_parser("render", help="render a checkpoint to PNGs")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--dataset", required=True,
                   help="dataset supplying camera poses and intrinsics")
    p.add_argument("--camera", type=int, required=True, help="camera id")
    p.add_argument("--frame", type=int,
                   help="render this dataset frame at its exact timestamp")
    p.add_argument("--time", type=float, help="render at this time")
    p.add_argument("--sweep", nargs=3, metavar=("T0", "T1", "N"),
                   help="render N evenly spaced times in [T0, T1]")
    p.add_argument("--out", required=True, help="output directory")

    p = sub.add_parser("gradcheck",
                       help="finite-difference audit of the gradients")
    p.add_argument("--variant", action="append",
                   choices=("hybrid", "naive4d", "dngpt"),
                   help="repeatable; default checks all three")
    p.add_argument("--n-configs", type=int, default=200)
    p.add_argument("--seed", type=int, default=0)

    p = sub.add_parser(
        "sweep", help="train one run per encoding layout, sharing a dataset",
        epilog=_epilog(),
        formatter_class=argparse.RawDescriptionHelpFormatter)
    p.add_argument("--config", help="base run configuration JSON file")
    p.add_argument("--dataset", help="shorthand for --paths.dataset")
    p.add_argument("--out", help="parent directory for the runs")
    p.add_argument("--layouts", required=True,
                   help="JSON list of [spatial_levels, spatial_feat, "
                        "tcode_levels, tcode_feat] tuples")
    return parser


def _override_pairs(extras: list) -> list:
    pairs = []
    i = 0
    while i < len(extras):
        arg = extras[i]
        if not arg.startswith("--"):
            raise ValueError(f"unexpected argument {arg!r}")
        key = arg[2:]
        if "=" in key:
            key, value = key.split("=", 1)
            i += 1
        else:
            if i + 1 >= len(extras):
                raise ValueError(f"missing value for --{key}")
            value = extras[i + 1]
            i += 2
        pairs.append((key, value))
    return pairs


def _load_config(args, extras: list) -> dict:
    if args.config:
        with open(args.config) as f:
            raw = json.load(f)
        if not isinstance(raw, dict):
            raise ValueError(f"{args.config}: config root must be a JSON "
                             "object")
    else:
        raw = {}
    pairs = _override_pairs(extras)
    if getattr(args, "dataset", None):
        pairs.append(("paths.dataset", args.dataset))
    if getattr(args, "out", None):
        pairs.append(("paths.out_dir", args.out))
    if getattr(args, "resume", None):
        pairs.append(("paths.resume", args.resume))
    config_mod.apply_overrides(raw, pairs)
    return config_mod.validate(raw)


def _run_training(cfg: dict, out_dir: str) -> int:
    if not cfg["paths"]["dataset"]:
        raise ValueError("paths.dataset is required")
    if not out_dir:
        raise ValueError("paths.out_dir is required")
    dataset = load_dataset(cfg["paths"]["dataset"])
    field = build_field(config_mod.field_config_from(cfg), seed=cfg["seed"])
    settings = config_mod.train_settings_from(cfg)
    resume = cfg["paths"]["resume"] or None
    identity = config_mod.canonical_json(config_mod.identity_config(cfg))
    result = train(dataset, field, settings, out_dir, resume=resume,
                   config_json=identity)
    tail = ""
    if result.final_psnr is not None:
        tail = f", eval psnr {result.final_psnr:.2f} dB"
    print(f"{out_dir}: {result.steps_run} steps{tail}; checkpoint "
          f"{result.checkpoint_path}")
    if result.aborted:
        print(f"aborted: {result.abort_reason}", file=sys.stderr)
        return 3
    return 0


def _cmd_gen(args, extras) -> int:
    scene = build_scene(args.scene)
    manifest = generate_dataset(
        scene, args.out, args.layout, n_cameras=args.cameras,
        n_frames=args.frames, resolution=args.resolution, fps=args.fps,
        oracle_samples=args.oracle_samples)
    frames = manifest["frames"]
    n_train = sum(1 for r in frames if r["split"] == "train")
    print(f"{args.out}: wrote {len(frames)} frames "
          f"({n_train} train / {len(frames) - n_train} eval), "
          f"{manifest['n_cameras']} cameras x {manifest['n_frames']} "
          f"timesteps at {manifest['width']}x{manifest['height']}")
    return 0


def _cmd_train(args, extras) -> int:
    cfg = _load_config(args, extras)
    return _run_training(cfg, cfg["paths"]["out_dir"])


def _restore(checkpoint: str, dataset_path: str):
    tensors, _ = load_checkpoint(checkpoint)
    stored = checkpoint_config(tensors)
    if not stored:
        raise ValueError(f"{checkpoint}: no embedded run configuration")
    cfg = config_mod.validate(stored)
    field = build_field(config_mod.field_config_from(cfg), seed=cfg["seed"])
    restore_field(tensors, field)
    occupancy = restore_occupancy(tensors)
    dataset = load_dataset(dataset_path)
    return tensors, cfg, field, occupancy, dataset


def _cmd_eval(args, extras) -> int:
    tensors, cfg, field, occupancy, dataset = _restore(args.checkpoint,
                                                       args.dataset)
    if args.out:
        os.makedirs(args.out, exist_ok=True)
    rows, mean_psnr, mean_dssim = eval_split(
        dataset, field, args.split, n_samples=cfg["render"]["n_samples"],
        background=tuple(cfg["render"]["background"]), occupancy=occupancy,
        renders_dir=args.out or None,
        step=checkpoint_step(tensors) if args.out else None)
    rows = rows + [{"frame": "mean", "time": "", "psnr": mean_psnr,
                    "dssim": mean_dssim}]
    sys.stdout.write(_format_csv(rows, ["frame", "time", "psnr", "dssim"]))
    return 0


def _cmd_render(args, extras) -> int:
    chosen = [args.frame is not None, args.time is not None,
              args.sweep is not None]
    if sum(chosen) != 1:
        raise ValueError("give exactly one of --frame, --time, --sweep")
    tensors, cfg, field, occupancy, dataset = _restore(args.checkpoint,
                                                       args.dataset)
    records = np.flatnonzero(dataset.camera_ids == args.camera)
    if len(records) == 0:
        ids = sorted(set(int(c) for c in dataset.camera_ids))
        raise ValueError(f"camera {args.camera} not in dataset "
                         f"(available: {ids})")
    if args.frame is not None:
        hits = records[dataset.frame_ids[records] == args.frame]
        if len(hits) == 0:
            raise ValueError(f"camera {args.camera} has no frame "
                             f"{args.frame}")
        jobs = [(int(hits[0]), float(dataset.times[hits[0]]),
                 f"c{args.camera:02d}_f{args.frame:03d}.png")]
    else:
        times = [args.time] if args.time is not None else np.linspace(
            float(args.sweep[0]), float(args.sweep[1]),
            int(args.sweep[2])).tolist()
        jobs = []
        for i, t in enumerate(times):
            # nearest dataset pose of this camera; mono orbits move per frame
            rec = int(records[np.argmin(np.abs(dataset.times[records] - t))])
            name = (f"c{args.camera:02d}_t{t:.6f}.png" if len(times) == 1
                    else f"c{args.camera:02d}_s{i:04d}.png")
            jobs.append((rec, float(t), name))

    use_grid = occupancy is not None and occupancy.updates > 0
    os.makedirs(args.out, exist_ok=True)
    background = np.asarray(cfg["render"]["background"], np.float64)
    for rec, t, name in jobs:
        img = render_image(field, dataset.camera_for(rec), t,
                           n_samples=cfg["render"]["n_samples"],
                           aabb=DEFAULT_AABB,
                           occupancy=occupancy if use_grid else None,
                           mode=CULLED if use_grid else DENSE,
                           background=background)
        path = os.path.join(args.out, name)
        write_png(path, img)
        print(path)
    return 0


def _cmd_gradcheck(args, extras) -> int:
    variants = tuple(args.variant) if args.variant else ("hybrid",
                                                         "naive4d", "dngpt")
    reports = run_suite(variants, n_configs=args.n_configs, seed=args.seed)
    ok = True
    for report in reports:
        for line in report.lines():
            print(line)
        ok = ok and report.passed
    return 0 if ok else 1


def _cmd_sweep(args, extras) -> int:
    try:
        layouts = json.loads(args.layouts)
    except json.JSONDecodeError as err:
        raise ValueError(f"--layouts: malformed JSON ({err})") from err
    if (not isinstance(layouts, list) or not layouts
            or not all(isinstance(l, list) and len(l) == 4 for l in layouts)):
        raise ValueError("--layouts: expected a non-empty list of "
                         "[spatial_levels, spatial_feat, tcode_levels, "
                         "tcode_feat] tuples")
    base_cfg = _load_config(args, extras)
    parent = base_cfg["paths"]["out_dir"]
    if not parent:
        raise ValueError("paths.out_dir is required")

    code = 0
    for i, (sl, sf, tl, tf) in enumerate(layouts):
        cfg = json.loads(config_mod.canonical_json(base_cfg))
        cfg["architecture"].update(spatial_levels=sl, spatial_feat=sf,
                                   tcode_levels=tl, tcode_feat=tf)
        cfg = config_mod.validate(cfg)
        run_dir = os.path.join(parent,
                               f"run{i:02d}_sl{sl}_sf{sf}_tl{tl}_tf{tf}")
        cfg["paths"]["out_dir"] = run_dir
        status = _run_training(cfg, run_dir)
        code = max(code, status)
    return code


_COMMANDS = {"gen": _cmd_gen, "train": _cmd_train, "eval": _cmd_eval,
             "render": _cmd_render, "gradcheck": _cmd_gradcheck,
             "sweep": _cmd_sweep}


def main(argv=None) -> int:
    parser = _build_parser()
    try:
        args, extras = parser.parse_known_args(argv)
    except SystemExit as exit_:  # argparse prints its own message
        return exit_.code or 0
    if extras and args.cmd not in ("train", "sweep"):
        print(f"error: unrecognized arguments: {' '.join(extras)}",
              file=sys.stderr)
        return 2
    try:
        return _COMMANDS[args.cmd](args, extras)
    except (ValueError, FileNotFoundError) as err:
        print(f"error: {err}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
