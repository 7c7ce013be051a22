"""Independent finite-difference oracle for the rasterizer gradients.

The loss is piecewise smooth: truncation at three footprints, the coverage
mask, the L1 kinks, depth re-sorting and neighbor re-selection all jump or
bend at isolated parameter values.  A naive central difference that happens
to straddle one of those events is meaningless, so the oracle first records
the discrete structure at the base point (draw order, per-pixel inclusion,
loss masks, residual signs, neighbor sets and clamp branches) and then
evaluates a dense, untiled, vectorized loss with that structure held fixed.
Within the region where the structure is unchanged this is exactly the
rendered loss, so its derivatives are the true ones.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .cbknn import CorrectionPlan
from .gaussian_map import GaussianMap
from .geometry import PinholeCamera, Pose
from .metrics import ssim_with_grad
from .rasterizer import CUTOFF, LossWeights, project_splats, render, render_with_gradients


@dataclass(eq=False)
class _CellFreeze:
    members: np.ndarray   # positions in the frozen draw order
    clamped: np.ndarray   # per member, whether the step reached the centroid
    fallback: bool        # unweighted color mean
    offsets: np.ndarray   # corrected - original center at the base point
    weights: np.ndarray   # color weights at the base point


@dataclass(eq=False)
class FrozenStructure:
    ids: np.ndarray
    include: np.ndarray           # (pixels, M) bool
    depth_mask: np.ndarray        # (pixels,)
    color_mask: np.ndarray        # (pixels,)
    depth_sign: np.ndarray        # (pixels,)
    color_sign: np.ndarray        # (pixels, 3)
    dscale: float
    cscale: float
    cells: list | None = None
    cell_of_pixel: np.ndarray | None = None
    cell_centers: np.ndarray | None = None
    alpha: float = 0.0
    epsilon: float = 1e-6
    full: bool = False


def _screen(gmap: GaussianMap, pose: Pose, cam: PinholeCamera, ids: np.ndarray):
    rows = gmap.rows_of(ids)
    pc = (gmap.mu[rows] - pose.translation) @ pose.rotation
    z = pc[:, 2]
    center = np.stack([cam.fx * pc[:, 0] / z + cam.cx, cam.fy * pc[:, 1] / z + cam.cy], axis=1)
    fp = gmap.radius[rows] * cam.fx / z
    return center, z, fp, gmap.opacity[rows], gmap.color[rows]


def _corrected(fz: FrozenStructure, center, fp, op, color):
    """Per-cell centers (cells, M, 2) and colors (cells, M, 3) under the frozen plan."""
    n = len(fz.cells)
    cen = np.broadcast_to(center, (n,) + center.shape).copy()
    col = np.broadcast_to(color, (n,) + color.shape).copy()
    for c, cell in enumerate(fz.cells):
        k = cell.members
        if not len(k):
            continue
        u = center[k]
        if fz.full:
            d = u.mean(0) - u
            dist = np.sqrt((d**2).sum(1))
            scale = np.where(cell.clamped, 1.0, fz.alpha / (dist + fz.epsilon))
            cen[c, k] = u + scale[:, None] * d
            if cell.fallback:
                w = np.full(len(k), 1.0 / len(k))
            else:
                q = ((fz.cell_centers[c] - u) ** 2).sum(1) / fp[k] ** 2
                f = op[k] * np.exp(-q)
                w = f / f.sum()
        else:
            cen[c, k] = u + cell.offsets
            w = cell.weights
        col[c, k] = w @ color[k]
    return cen, col


def _dense(fz: FrozenStructure, gmap, pose, cam, pixels=None):
    center, z, fp, op, color = _screen(gmap, pose, cam, fz.ids)
    pixels = np.arange(cam.width * cam.height) if pixels is None else pixels
    v, u = np.divmod(pixels, cam.width)
    if fz.cells is not None:
        cen, col = _corrected(fz, center, fp, op, color)
        cell = fz.cell_of_pixel[pixels]
        cen, col = cen[cell], col[cell]
    else:
        cen, col = center[None], color[None]
    q = ((u[:, None] - cen[..., 0]) ** 2 + (v[:, None] - cen[..., 1]) ** 2) / fp**2
    include = fz.include[pixels] if fz.include is not None else np.ones(q.shape, bool)
    f = np.where(include, op * np.exp(-np.where(include, q, 0.0)), 0.0)
    trans = np.cumprod(1.0 - f, axis=1)
    trans = np.concatenate([np.ones((len(f), 1)), trans[:, :-1]], axis=1)
    w = f * trans
    if col.shape[0] == 1:
        rgb = w @ col[0]
    else:
        rgb = np.einsum("pm,pmc->pc", w, col)
    return rgb, w @ z, w.sum(1), q


def freeze(gmap: GaussianMap, pose: Pose, cam: PinholeCamera, weights: LossWeights,
           correction: CorrectionPlan | None = None, full: bool = False) -> FrozenStructure:
    splats = project_splats(gmap, pose, cam)
    fz = FrozenStructure(ids=splats.ids.copy(), include=None, depth_mask=None, color_mask=None,
                         depth_sign=None, color_sign=None, dscale=0.0, cscale=0.0, full=full)
    if correction is not None:
        pos = {int(g): k for k, g in enumerate(splats.ids)}
        cells = []
        for c, cell in enumerate(correction.cells):
            k = np.array([pos[int(g)] for g in cell.ids], dtype=np.int64)
            if len(k):
                u = splats.center[k]
                dist = np.sqrt(((u.mean(0) - u) ** 2).sum(1))
                clamped = correction.alpha / (dist + correction.epsilon) >= 1.0
                fallback = bool(cell.decays.sum() < correction.epsilon)
                offsets = cell.centers - u
            else:
                clamped, fallback, offsets = np.zeros(0, bool), False, np.zeros((0, 2))
            cells.append(_CellFreeze(k, clamped, fallback, offsets, cell.weights.copy()))
        fz.cells = cells
        cs = correction.cell_size
        v, u = np.divmod(np.arange(cam.width * cam.height), cam.width)
        fz.cell_of_pixel = (v // cs) * correction.grid[1] + u // cs
        fz.cell_centers = correction.cell_centers
        fz.alpha, fz.epsilon = correction.alpha, correction.epsilon
    _, _, _, q = _dense(fz, gmap, pose, cam)
    fz.include = q <= CUTOFF * CUTOFF
    frame = render(gmap, pose, cam, correction)
    tgt = weights.target
    valid = (tgt.depth > 0).ravel()
    if weights.silhouette_threshold is not None:
        fz.depth_mask = valid & (frame.silhouette.ravel() > weights.silhouette_threshold)
        fz.color_mask = fz.depth_mask
    else:
        fz.depth_mask = valid
        fz.color_mask = np.ones_like(valid)
    fz.depth_sign = np.sign(frame.depth - tgt.depth).ravel()
    fz.color_sign = np.sign(frame.color - tgt.color).reshape(-1, 3)
    if weights.reduction == "sum":
        fz.dscale, fz.cscale = weights.depth_weight, weights.color_weight
    else:
        fz.dscale = weights.depth_weight / max(int(fz.depth_mask.sum()), 1)
        fz.cscale = weights.color_weight / max(int(fz.color_mask.sum()), 1)
    return fz


def frozen_loss(fz: FrozenStructure, gmap, pose, cam, weights: LossWeights, pixels=None):
    """``(per-pixel loss map, SSIM term)``; their total is the loss.

    ``pixels`` restricts the loss map to a subset of flat pixel indices; the
    SSIM term is only evaluated over the full image.
    """
    rgb, depth, _, _ = _dense(fz, gmap, pose, cam, pixels)
    tgt = weights.target
    sel = slice(None) if pixels is None else pixels
    rd = depth - tgt.depth.ravel()[sel]
    rc = rgb - tgt.color.reshape(-1, 3)[sel]
    lmap = fz.dscale * fz.depth_mask[sel] * fz.depth_sign[sel] * rd
    lmap = lmap + fz.cscale * fz.color_mask[sel] * (fz.color_sign[sel] * rc).sum(1)
    extra = 0.0
    if weights.ssim_weight and pixels is None:
        s, _ = ssim_with_grad(rgb.reshape(tgt.color.shape), tgt.color)
        extra = weights.ssim_weight * (1.0 - s)
    return lmap, extra


def _affected(fz: FrozenStructure, k: int):
    """Pixels whose loss can depend on the Gaussian at draw position ``k``."""
    hit = fz.include[:, k].copy()
    if fz.cells is not None and fz.full:
        cells = [c for c, cell in enumerate(fz.cells) if k in cell.members]
        if cells:
            hit |= np.isin(fz.cell_of_pixel, cells)
    return np.nonzero(hit)[0]


_FIELDS = (("mu", 3), ("opacity", 0), ("radius", 0), ("color", 3))


@dataclass
class GradCheckReport:
    max_rel_error: float
    worst: tuple
    n_checked: int
    failures: list

    @property
    def ok(self) -> bool:
        return not self.failures


def compare(analytic: float, numeric: float, rtol: float = 1e-4, atol: float = 1e-8) -> float:
    """Relative error with an absolute floor: 0 when ``|a - n| <= atol``."""
    diff = abs(analytic - numeric)
    if diff <= atol:
        return 0.0
    return diff / max(abs(analytic), abs(numeric))


def check_gradients(gmap: GaussianMap, pose: Pose, cam: PinholeCamera, weights: LossWeights,
                    correction: CorrectionPlan | None = None, full: bool = False,
                    step: float = 1e-4, rtol: float = 1e-4, atol: float = 1e-8) -> GradCheckReport:
    """Compare analytic gradients against central differences of the frozen loss."""
    _, _, grads = render_with_gradients(gmap, pose, cam, weights, correction=correction,
                                        through_correction=full)
    fz = freeze(gmap, pose, cam, weights, correction, full)

    whole_image = bool(weights.ssim_weight)

    def diff(mp, pp, mm, pm, pixels=None):
        pixels = None if whole_image else pixels
        a, ea = frozen_loss(fz, mp, pp, cam, weights, pixels)
        b, eb = frozen_loss(fz, mm, pm, cam, weights, pixels)
        return (float((a - b).sum()) + (ea - eb)) / (2 * step)

    results = []
    for k in range(6):
        xi = np.zeros(6)
        xi[k] = step
        results.append((("pose", k), float(grads.pose[k]),
                        diff(gmap, pose.retract(xi), gmap, pose.retract(-xi))))
    for k, row in enumerate(gmap.rows_of(fz.ids)):
        pixels = _affected(fz, k)
        gid = int(gmap.ids[row])
        for name, width in _FIELDS:
            for idx in ([(row, a) for a in range(width)] if width else [(row,)]):
                mp, mm = gmap.copy(), gmap.copy()
                getattr(mp, name)[idx] += step
                getattr(mm, name)[idx] -= step
                results.append(((name, gid, *idx[1:]), float(getattr(grads, name)[idx]),
                                diff(mp, pose, mm, pose, pixels)))
    errors = [compare(a, fd, rtol, atol) for _, a, fd in results]
    fails = [(*r, e) for r, e in zip(results, errors) if e > rtol]
    i = int(np.argmax(errors))
    return GradCheckReport(errors[i], results[i], len(results), fails)
