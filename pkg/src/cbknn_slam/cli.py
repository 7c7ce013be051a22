"""``cbknn-slam`` command line: run, synth, eval, ablate, render.

Exit codes: 0 success, 1 usage error, 2 data error, 3 pipeline error.
Configuration precedence is flag > ``--config`` file > built-in default.
"""
from __future__ import annotations

import argparse
import csv
import hashlib
import io
import json
import logging
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import __version__
from .cbknn import build_plan
from .dataio import (SyntheticSceneSpec, atomic_write, format_config, generate_synthetic,
                     load_camera, load_map, load_trajectory, load_tum, match_by_timestamp,
                     parse_config, read_tum_trajectory_raw, save_config, save_map,
                     save_trajectory, write_color_png, write_depth_png, write_gray_png,
                     write_tum_sequence)
from .errors import (CorruptFile, DimensionMismatch, EmptyFrame, LengthMismatch, MissingIndexFile,
                     NoAssociations, SlamError, VersionMismatch)
from .experiments import ablation_rows, rows_to_csv
from .geometry import PinholeCamera, Pose
from .metrics import Trajectory, evaluate
from .rasterizer import render
from .slam import FrameDiagnostics, SlamConfig, run

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_PIPELINE = 0, 1, 2, 3
DATA_ERRORS = (MissingIndexFile, NoAssociations, CorruptFile, VersionMismatch, LengthMismatch,
               DimensionMismatch, EmptyFrame, FileNotFoundError, IsADirectoryError, PermissionError)

log = logging.getLogger("cbknn_slam")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(message)


# ----------------------------------------------------------------------------- helpers

def _sha256(path: Path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def _pairs(items) -> dict:
    out = {}
    for item in items or ():
        if "=" not in item:
            raise UsageError(f"expected key=value, got {item!r}")
        k, v = item.split("=", 1)
        out[k.strip()] = v.strip()
    return out


def _config(args) -> SlamConfig:
    values = parse_config(Path(args.config).read_text()) if args.config else {}
    values.update(_pairs(args.set))
    if getattr(args, "workers", None) is not None:
        values["workers"] = str(args.workers)
    try:
        return SlamConfig.from_flat(values)
    except KeyError as exc:
        raise UsageError(f"unknown config key {exc.args[0]!r}") from None
    except ValueError as exc:
        raise UsageError(f"bad config value: {exc}") from None


def _spec(args) -> SyntheticSceneSpec:
    values = parse_config(Path(args.spec_file).read_text()) if getattr(args, "spec_file", None) else {}
    values.update(_pairs(getattr(args, "spec", None)))
    if getattr(args, "seed", None) is not None:
        values["seed"] = str(args.seed)
    try:
        return SyntheticSceneSpec.from_flat(values)
    except KeyError as exc:
        raise UsageError(f"unknown scene key {exc.args[0]!r}") from None
    except ValueError as exc:
        raise UsageError(f"bad scene value: {exc}") from None


def _manifest(out: Path, command: str, config: dict, inputs: dict, outputs: dict, seed) -> None:
    doc = {"command": command, "tool_version": __version__, "seed": seed, "config": config,
           "inputs": inputs, "outputs": outputs}
    atomic_write(out / "manifest.json", (json.dumps(doc, indent=2, sort_keys=True) + "\n").encode())


def _diagnostics_csv(rows) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(FrameDiagnostics.CSV_COLUMNS)
    for d in rows:
        w.writerow(d.row())
    return buf.getvalue()


def _parse_pose(text: str) -> Pose:
    vals = [float(x) for x in text.replace(",", " ").split()]
    if len(vals) != 7:
        raise UsageError("--pose needs 'tx ty tz qx qy qz qw'")
    q = np.array(vals[3:])
    if np.linalg.norm(q) < 1e-12:
        raise UsageError("--pose quaternion is zero")
    return Pose.from_quaternion(vals[:3], q / np.linalg.norm(q))


def _parse_list(text: str, kind):
    if text is None or not text.strip():
        return []
    out = []
    for part in text.split(","):
        part = part.strip()
        try:
            if "-" in part and kind is int and not part.startswith("-"):
                a, b = part.split("-", 1)
                out.extend(range(int(a), int(b) + 1))
            else:
                out.append(kind(part))
        except ValueError:
            raise UsageError(f"cannot parse {part!r} in list {text!r}") from None
    return out


def _flag(text: str) -> bool:
    t = text.strip().lower()
    if t in ("on", "1", "true", "yes"):
        return True
    if t in ("off", "0", "false", "no"):
        return False
    raise UsageError(f"expected on/off, got {text!r}")


# ----------------------------------------------------------------------------- commands

def cmd_run(args) -> int:
    cfg = _config(args)
    out = Path(args.out)
    outputs = {k: str(out / v) for k, v in
               (("trajectory", "trajectory.txt"), ("map", "map.bin"), ("diagnostics", "diagnostics.csv"),
                ("config", "config.txt"))}
    inputs, seed = {}, None
    if args.dataset:
        root = Path(args.dataset)
        source = load_tum(root, max_frames=args.max_frames, stride=args.stride,
                          cam=load_camera(args.camera) if args.camera else None, downscale=args.downscale)
        for name in ("rgb.txt", "depth.txt", "groundtruth.txt", "camera.txt"):
            if (root / name).is_file():
                inputs[name] = _sha256(root / name)
        frames_iter = source.frames
        cam = source.cam
        gt = source.groundtruth
        timestamps = [d.timestamp for d in source.descriptors]
    else:
        spec = _spec(args)
        seed = spec.seed
        inputs["synthetic_spec"] = spec.to_flat()
        scene = generate_synthetic(spec)
        frames_iter = lambda: iter(scene.frames)  # noqa: E731
        cam, gt = scene.source.cam, scene.trajectory
        timestamps = gt.timestamps
    initial_map = None
    if args.initial_map:
        inputs["initial_map"] = _sha256(Path(args.initial_map))
        initial_map = load_map(args.initial_map)
    _manifest(out, "run", cfg.to_flat(), inputs, outputs, seed)
    save_config(out / "config.txt", cfg)

    pose0 = None
    if gt is not None and len(gt) and gt.indices[0] == 0:
        pose0 = gt.poses[0]
    frames = list(frames_iter())
    result = run(frames, cam, cfg, initial_map=initial_map, initial_pose=pose0,
                 check_transience=args.check_transience)
    save_trajectory(out / "trajectory.txt", Trajectory.from_poses(result.poses, timestamps[: len(result.poses)]))
    save_map(out / "map.bin", result.gmap)
    atomic_write(out / "diagnostics.csv", _diagnostics_csv(result.diagnostics).encode())
    n_div = sum(d.diverged for d in result.diagnostics)
    print(f"tracked {len(result.poses)} frames ({n_div} diverged), map has {len(result.gmap)} Gaussians")
    return EXIT_OK


def cmd_synth(args) -> int:
    spec = _spec(args)
    out = Path(args.out)
    _manifest(out, "synth", spec.to_flat(), {}, {"dataset": str(out)}, spec.seed)
    scene = generate_synthetic(spec)
    write_tum_sequence(out, scene)
    save_map(out / "gt_map.bin", scene.gt_map)
    save_map(out / "corrupted_map.bin", scene.corrupted_map)
    atomic_write(out / "scene.txt", format_config(spec.to_flat()).encode())
    print(f"wrote {spec.n_frames} frames of a {spec.n_gaussians}-Gaussian scene to {out}")
    return EXIT_OK


def cmd_eval(args) -> int:
    est, gt = load_trajectory(args.est), load_trajectory(args.gt)
    if args.match == "timestamp":
        est, gt = match_by_timestamp(est, gt)
    elif len(est) != len(gt):
        short = min(len(est), len(gt))
        raise LengthMismatch(f"estimate has {len(est)} poses, ground truth {len(gt)}; "
                             f"unmatched indices {short}..{max(len(est), len(gt)) - 1}")
    renders = None
    if args.map:
        if not args.dataset:
            raise UsageError("--map needs --dataset for the target frames")
        gmap = load_map(args.map)
        source = load_tum(args.dataset, cam=load_camera(args.camera) if args.camera else None)
        if len(source) < len(est):
            raise LengthMismatch(f"dataset has {len(source)} frames, trajectory {len(est)}")
        renders = []
        for k in range(0, len(est), args.render_every):
            r = render(gmap, est.poses[k], source.cam)
            f = source.load(k)
            renders.append((f"frame {k}", r.color, r.depth, f.color, f.depth))
    report = evaluate(est, gt, args.delta, renders)
    text = report.to_csv()
    if args.out:
        atomic_write(Path(args.out), text.encode())
    else:
        sys.stdout.write(text)
    return EXIT_OK


def cmd_ablate(args) -> int:
    base = _config(args)
    spec = _spec(args)
    seeds = _parse_list(args.seeds, int)
    noises = _parse_list(args.noise, float)
    flags = [_flag(x) for x in _parse_list(args.cbknn, str)]
    alphas = _parse_list(args.alpha, float) or [None]
    k0s = _parse_list(args.k0, int) or [None]
    out = Path(args.out)
    grid = {"seeds": seeds, "noise": noises, "cbknn": flags, "alpha": alphas, "k0": k0s}
    _manifest(out, "ablate", {"slam": base.to_flat(), "scene": spec.to_flat(), "grid": grid}, {},
              {"table": str(out / "ablation.csv")}, None)

    def progress(row):
        log.info("seed %s noise %s cbknn %s: ATE %.4f cm", row["seed"], row["noise"], row["cbknn"],
                 row["ate_rmse_cm"])

    if not (seeds and noises and flags):
        rows = []
    else:
        rows = ablation_rows(seeds, noises, flags, alphas, k0s, base=base, spec=spec, on_row=progress)
    atomic_write(out / "ablation.csv", rows_to_csv(rows).encode())
    print(f"wrote {len(rows)} rows to {out / 'ablation.csv'}")
    return EXIT_OK


def cmd_render(args) -> int:
    gmap = load_map(args.map)
    if args.camera:
        cam = load_camera(args.camera)
    else:
        cam = PinholeCamera(args.focal, args.focal, (args.width - 1) / 2, (args.height - 1) / 2,
                            args.width, args.height)
    if args.pose:
        pose = _parse_pose(args.pose)
    elif args.trajectory:
        _, poses = read_tum_trajectory_raw(args.trajectory)
        if not 0 <= args.frame < len(poses):
            raise UsageError(f"--frame {args.frame} outside trajectory of {len(poses)} poses")
        pose = poses[args.frame]
    else:
        pose = Pose.identity()
    plan = None
    if args.correction:
        smooth = SlamConfig().cbknn
        if args.alpha is not None:
            smooth = replace(smooth, alpha=args.alpha)
        if args.k0 is not None:
            smooth = replace(smooth, k0=args.k0)
        plan = build_plan(gmap, pose, cam, smooth, args.gamma)
    frame = render(gmap, pose, cam, plan)
    out = Path(args.out)
    write_color_png(out / "color.png", frame.color)
    write_depth_png(out / "depth.png", frame.depth)
    write_gray_png(out / "silhouette.png", frame.silhouette)
    if args.stats:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(("channel", "min", "max", "mean"))
        for name, arr in (("red", frame.color[..., 0]), ("green", frame.color[..., 1]),
                          ("blue", frame.color[..., 2]), ("depth", frame.depth),
                          ("silhouette", frame.silhouette)):
            w.writerow((name, f"{arr.min():.10g}", f"{arr.max():.10g}", f"{arr.mean():.10g}"))
        atomic_write(out / "stats.csv", buf.getvalue().encode())
    return EXIT_OK


# ----------------------------------------------------------------------------- parser

def _add_config(p):
    p.add_argument("--config", help="flat key = value pipeline config file")
    p.add_argument("--set", action="append", metavar="KEY=VALUE",
                   help="override one config value, e.g. --set cbknn.k0=5 (repeatable)")
    p.add_argument("--workers", type=int, help="rasterizer worker threads")


def _add_spec(p):
    p.add_argument("--spec-file", help="flat key = value synthetic scene file")
    p.add_argument("--spec", action="append", metavar="KEY=VALUE",
                   help="override one scene value, e.g. --spec noise_fraction=0.1 (repeatable)")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="cbknn-slam", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    parser.add_argument("--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", parser_class=_Parser)

    p = sub.add_parser("run", help="run SLAM on a TUM folder or a generated synthetic scene")
    src = p.add_mutually_exclusive_group(required=True)
    src.add_argument("--dataset", help="TUM-layout folder (rgb.txt, depth.txt)")
    src.add_argument("--synthetic", action="store_true", help="generate the sequence in memory")
    _add_spec(p)
    p.add_argument("--seed", type=int, help="synthetic scene seed")
    p.add_argument("--camera", help="camera file (default: dataset camera.txt, else TUM fr1)")
    p.add_argument("--max-frames", type=int)
    p.add_argument("--stride", type=int, default=1)
    p.add_argument("--downscale", type=int, default=1)
    p.add_argument("--initial-map", help="start from this map file instead of seeding from frame 0")
    p.add_argument("--check-transience", action="store_true",
                   help="verify corrected keyframe renders leave the map untouched")
    _add_config(p)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_run)

    p = sub.add_parser("synth", help="write a seeded synthetic sequence as a TUM-layout folder")
    _add_spec(p)
    p.add_argument("--seed", type=int)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("eval", help="trajectory and optional rendering metrics as CSV")
    p.add_argument("--est", required=True, help="estimated TUM trajectory")
    p.add_argument("--gt", required=True, help="ground-truth TUM trajectory")
    p.add_argument("--match", choices=("index", "timestamp"), default="index")
    p.add_argument("--delta", type=int, default=1, help="RPE frame step")
    p.add_argument("--map", help="map file to render at the estimated poses")
    p.add_argument("--dataset", help="TUM folder with the target frames")
    p.add_argument("--camera")
    p.add_argument("--render-every", type=int, default=1)
    p.add_argument("--out", help="CSV path (default stdout)")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("ablate", help="paired CB-KNN on/off runs over seeds and noise levels")
    p.add_argument("--seeds", default="0-19", help="e.g. 0-19 or 1,4,7")
    p.add_argument("--noise", default="0.1", help="fractions of perturbed Gaussians, comma separated")
    p.add_argument("--cbknn", default="on,off")
    p.add_argument("--alpha", help="comma separated correction steps (default from config)")
    p.add_argument("--k0", help="comma separated base neighbor counts (default from config)")
    _add_spec(p)
    _add_config(p)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_ablate)

    p = sub.add_parser("render", help="render a map to color, depth and silhouette PNGs")
    p.add_argument("--map", required=True)
    p.add_argument("--pose", help="'tx ty tz qx qy qz qw' camera-to-world")
    p.add_argument("--trajectory", help="take the pose from this TUM trajectory")
    p.add_argument("--frame", type=int, default=0)
    p.add_argument("--camera", help="camera file")
    p.add_argument("--width", type=int, default=64)
    p.add_argument("--height", type=int, default=64)
    p.add_argument("--focal", type=float, default=60.0)
    p.add_argument("--correction", action="store_true", help="render through a CB-KNN plan")
    p.add_argument("--alpha", type=float)
    p.add_argument("--k0", type=int)
    p.add_argument("--gamma", type=float, default=0.0)
    p.add_argument("--stats", action="store_true", help="also write stats.csv")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_render)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        if not args.command:
            parser.print_help(sys.stderr)
            return EXIT_USAGE
        logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                            format="%(levelname)s %(message)s")
        return args.func(args)
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (*DATA_ERRORS, ValueError) as exc:
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_DATA
    except SlamError as exc:
        print(f"error: pipeline failed: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_PIPELINE


if __name__ == "__main__":
    sys.exit(main())
