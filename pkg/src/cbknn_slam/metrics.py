"""Trajectory and image-quality metrics."""
from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass, field

import numpy as np
from scipy.ndimage import correlate1d

from .errors import DimensionMismatch, LengthMismatch
from .geometry import Pose

PSNR_CAP = 100.0
SSIM_C1 = 0.01**2
SSIM_C2 = 0.03**2


class Trajectory:
    """Ordered ``(frame index, Pose)`` pairs with strictly increasing indices."""

    def __init__(self, indices, poses, timestamps=None):
        self.indices = [int(i) for i in indices]
        self.poses = list(poses)
        if len(self.indices) != len(self.poses):
            raise LengthMismatch("indices and poses differ in length")
        if any(b <= a for a, b in zip(self.indices, self.indices[1:])):
            raise ValueError("trajectory indices must be strictly increasing")
        self.timestamps = (list(map(float, timestamps)) if timestamps is not None
                           else [float(i) for i in self.indices])

    @classmethod
    def from_poses(cls, poses, timestamps=None) -> "Trajectory":
        poses = list(poses)
        return cls(range(len(poses)), poses, timestamps)

    def __len__(self):
        return len(self.poses)

    def positions(self) -> np.ndarray:
        return np.array([p.translation for p in self.poses]).reshape(-1, 3)

    def subset(self, indices) -> "Trajectory":
        keep = set(int(i) for i in indices)
        rows = [k for k, i in enumerate(self.indices) if i in keep]
        return Trajectory([self.indices[k] for k in rows], [self.poses[k] for k in rows],
                          [self.timestamps[k] for k in rows])

    def diameter(self) -> float:
        p = self.positions()
        if len(p) < 2:
            return 0.0
        return float(np.sqrt(((p[:, None] - p[None]) ** 2).sum(-1)).max())


def _matched(est: Trajectory, gt: Trajectory):
    if est.indices != gt.indices:
        bad = sorted(set(est.indices) ^ set(gt.indices))
        raise LengthMismatch(f"trajectories disagree on frame indices {bad[:10]}")


def align_rigid(source: np.ndarray, target: np.ndarray):
    """Least-squares rotation R and translation t minimizing |R source + t - target|."""
    mu_s = source.mean(0)
    mu_t = target.mean(0)
    H = (source - mu_s).T @ (target - mu_t)
    U, _, Vt = np.linalg.svd(H)
    D = np.eye(3)
    D[2, 2] = np.sign(np.linalg.det(Vt.T @ U.T)) or 1.0
    R = Vt.T @ D @ U.T
    return R, mu_t - R @ mu_s


def ate_rmse(est: Trajectory, gt: Trajectory) -> float:
    """Absolute trajectory error (cm) after rigid alignment of positions."""
    _matched(est, gt)
    if len(est) < 2:
        raise LengthMismatch("ATE needs at least two poses")
    src, dst = est.positions(), gt.positions()
    R, t = align_rigid(src, dst)
    res = src @ R.T + t - dst
    return float(np.sqrt((res**2).sum(1).mean()) * 100.0)


def rpe(est: Trajectory, gt: Trajectory, delta: int = 1, frames=None) -> float:
    """Translational relative pose error (cm), RMSE over pairs ``(i, i + delta)``.

    ``frames`` optionally restricts the starting frames to a given index subset.
    """
    _matched(est, gt)
    if len(est) <= delta:
        raise LengthMismatch(f"need more than {delta} poses for RPE")
    starts = range(len(est) - delta)
    if frames is not None:
        wanted = set(int(f) for f in frames)
        starts = [i for i in starts if est.indices[i] in wanted]
    errs = []
    for i in starts:
        rel_gt = gt.poses[i].inverse() @ gt.poses[i + delta]
        rel_est = est.poses[i].inverse() @ est.poses[i + delta]
        errs.append(np.linalg.norm((rel_gt.inverse() @ rel_est).translation))
    if not errs:
        raise LengthMismatch("no frame pairs selected for RPE")
    return float(np.sqrt(np.mean(np.square(errs))) * 100.0)


def psnr(a: np.ndarray, b: np.ndarray) -> float:
    a, b = np.asarray(a, float), np.asarray(b, float)
    if a.shape != b.shape:
        raise DimensionMismatch(f"{a.shape} vs {b.shape}")
    mse = float(np.mean((a - b) ** 2))
    if mse < 1e-10:
        return PSNR_CAP
    return min(PSNR_CAP, 10.0 * math.log10(1.0 / mse))


def _gauss_kernel(size: int = 11, sigma: float = 1.5) -> np.ndarray:
    x = np.arange(size) - size // 2
    k = np.exp(-(x**2) / (2 * sigma**2))
    return k / k.sum()


_KERNEL = _gauss_kernel()


def _blur(img: np.ndarray) -> np.ndarray:
    # zero-padded "same" filtering; the kernel is symmetric so this is self-adjoint
    out = correlate1d(img, _KERNEL, axis=0, mode="constant")
    return correlate1d(out, _KERNEL, axis=1, mode="constant")


def _as_channels(img):
    img = np.asarray(img, dtype=float)
    return img[..., None] if img.ndim == 2 else img


def ssim_with_grad(a: np.ndarray, b: np.ndarray):
    """Mean SSIM over pixels and channels and its gradient w.r.t. ``a``.

    11x11 Gaussian window (sigma 1.5), zero padding, stabilizers for data in [0, 1].
    """
    a = np.asarray(a, float)
    b = np.asarray(b, float)
    if a.shape != b.shape:
        raise DimensionMismatch(f"{a.shape} vs {b.shape}")
    x, y = _as_channels(a), _as_channels(b)
    mx, my = _blur(x), _blur(y)
    exx, eyy, exy = _blur(x * x), _blur(y * y), _blur(x * y)
    vx, vy, cxy = exx - mx**2, eyy - my**2, exy - mx * my
    a1 = 2 * mx * my + SSIM_C1
    a2 = 2 * cxy + SSIM_C2
    b1 = mx**2 + my**2 + SSIM_C1
    b2 = vx + vy + SSIM_C2
    smap = a1 * a2 / (b1 * b2)
    n = smap.size
    value = float(smap.mean())
    d_mx = (2 * my * a2 - 2 * my * a1) / (b1 * b2) - smap * (2 * mx / b1 - 2 * mx / b2)
    d_exx = -smap / b2
    d_exy = 2 * a1 / (b1 * b2)
    grad = (_blur(d_mx) + 2 * x * _blur(d_exx) + y * _blur(d_exy)) / n
    return value, grad.reshape(a.shape)


def ssim(a: np.ndarray, b: np.ndarray) -> float:
    return ssim_with_grad(a, b)[0]


def depth_l1(a: np.ndarray, b: np.ndarray, valid: np.ndarray | None = None) -> float:
    """Mean absolute depth difference (cm) over pixels valid in both rasters."""
    a, b = np.asarray(a, float), np.asarray(b, float)
    if a.shape != b.shape:
        raise DimensionMismatch(f"{a.shape} vs {b.shape}")
    mask = (a > 0) & (b > 0)
    if valid is not None:
        mask &= np.asarray(valid, bool)
    if not mask.any():
        return 0.0
    return float(np.abs(a - b)[mask].mean() * 100.0)


REPORT_COLUMNS = ("row", "ate_rmse_cm", "rpe_cm", "psnr_db", "ssim", "depth_l1_cm")


@dataclass
class MetricReport:
    ate_rmse: float = float("nan")
    rpe: float = float("nan")
    psnr: float = float("nan")
    ssim: float = float("nan")
    depth_l1: float = float("nan")
    rows: list = field(default_factory=list)

    def to_csv(self) -> str:
        """Summary row first, then per-frame rows with the same columns."""
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(REPORT_COLUMNS)
        w.writerow(["summary", *(_fmt(v) for v in (self.ate_rmse, self.rpe, self.psnr, self.ssim, self.depth_l1))])
        for r in self.rows:
            w.writerow([r.get("row", ""), *(_fmt(r.get(k)) for k in REPORT_COLUMNS[1:])])
        return buf.getvalue()


def _fmt(v):
    if v is None:
        return ""
    if isinstance(v, float) and math.isnan(v):
        return ""
    return f"{v:.10g}"


def evaluate(est: Trajectory, gt: Trajectory, delta: int = 1, renders=None) -> MetricReport:
    """Trajectory metrics plus optional image metrics over ``(rendered, target)`` frame pairs.

    ``renders`` yields ``(label, color, depth, gt_color, gt_depth)`` tuples.
    """
    rep = MetricReport(ate_rmse=ate_rmse(est, gt), rpe=rpe(est, gt, delta))
    if renders:
        ps, ss, ds = [], [], []
        for label, color, depth, gt_color, gt_depth in renders:
            p, s, d = psnr(color, gt_color), ssim(color, gt_color), depth_l1(depth, gt_depth)
            ps.append(p)
            ss.append(s)
            ds.append(d)
            rep.rows.append({"row": label, "psnr_db": p, "ssim": s, "depth_l1_cm": d})
        rep.psnr, rep.ssim, rep.depth_l1 = float(np.mean(ps)), float(np.mean(ss)), float(np.mean(ds))
    return rep
