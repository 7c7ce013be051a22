"""Seeded synthetic runs and the paired CB-KNN on/off comparison."""
from __future__ import annotations

import csv
import io
import itertools
from dataclasses import dataclass, replace

import numpy as np

from .dataio import SyntheticScene, SyntheticSceneSpec, generate_synthetic
from .metrics import MetricReport, Trajectory, evaluate
from .rasterizer import render
from .slam import SlamConfig, SlamResult, run

ABLATION_COLUMNS = ("seed", "noise", "cbknn", "alpha", "k0", "ate_rmse_cm", "rpe_cm", "psnr_db",
                    "depth_l1_cm", "diverged_frames")


@dataclass(eq=False)
class SyntheticRun:
    scene: SyntheticScene
    result: SlamResult
    report: MetricReport


def training_views(result: SlamResult, frames):
    """Final map rendered at every keyframe's estimated pose, paired with its input frame."""
    for kf in result.state.keyframes:
        r = render(result.gmap, result.poses[kf.index], result.state.cam)
        f = frames[kf.index]
        yield f"keyframe {kf.index}", r.color, r.depth, f.color, f.depth


def run_synthetic(scene: SyntheticScene, cfg: SlamConfig, check_transience: bool = True) -> SyntheticRun:
    """Run from the scene's (possibly corrupted) map, anchored at the true first pose."""
    frames = scene.frames
    result = run(frames, scene.source.cam, cfg, initial_map=scene.corrupted_map,
                 initial_pose=scene.trajectory.poses[0], check_transience=check_transience)
    est = Trajectory(scene.trajectory.indices, result.poses, scene.trajectory.timestamps)
    report = evaluate(est, scene.trajectory, renders=list(training_views(result, frames)))
    return SyntheticRun(scene, result, report)


def ablation_rows(seeds, noises, flags=(True, False), alphas=(None,), k0s=(None,),
                  base: SlamConfig | None = None, spec: SyntheticSceneSpec | None = None,
                  on_row=None) -> list[dict]:
    """One row per grid cell; each (seed, noise) scene is shared by every configuration."""
    base = base or SlamConfig()
    spec = spec or SyntheticSceneSpec()
    rows = []
    for seed, noise in itertools.product(seeds, noises):
        scene = generate_synthetic(replace(spec, seed=int(seed), noise_fraction=float(noise)))
        for flag, alpha, k0 in itertools.product(flags, alphas, k0s):
            smooth = replace(base.cbknn, alpha=base.cbknn.alpha if alpha is None else float(alpha),
                         k0=base.cbknn.k0 if k0 is None else int(k0))
            cfg = base.replace(use_cbknn=bool(flag), cbknn=smooth)
            out = run_synthetic(scene, cfg)
            rep = out.report
            row = {"seed": int(seed), "noise": float(noise), "cbknn": int(bool(flag)),
                   "alpha": smooth.alpha, "k0": smooth.k0, "ate_rmse_cm": rep.ate_rmse,
                   "rpe_cm": rep.rpe, "psnr_db": rep.psnr, "depth_l1_cm": rep.depth_l1,
                   "diverged_frames": sum(d.diverged for d in out.result.diagnostics)}
            rows.append(row)
            if on_row:
                on_row(row)
    return rows


def rows_to_csv(rows) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(ABLATION_COLUMNS)
    for r in rows:
        w.writerow([f"{r[c]:.10g}" if isinstance(r[c], float) else r[c] for c in ABLATION_COLUMNS])
    return buf.getvalue()


def paired_summary(rows) -> dict:
    """Median ATE with and without correction and the share of pairs that improve."""
    by_key = {}
    for r in rows:
        by_key.setdefault((r["seed"], r["noise"], r["alpha"], r["k0"]), {})[r["cbknn"]] = r["ate_rmse_cm"]
    pairs = [(v[1], v[0]) for v in by_key.values() if 0 in v and 1 in v]
    if not pairs:
        return {"pairs": 0, "median_on": float("nan"), "median_off": float("nan"), "improved": float("nan")}
    on, off = np.array(pairs).T
    return {"pairs": len(pairs), "median_on": float(np.median(on)), "median_off": float(np.median(off)),
            "improved": float(np.mean(on < off))}
