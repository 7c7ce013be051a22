"""Tile-based splat rasterizer with analytic gradients.

Each visible Gaussian is projected to a screen-space disk: center
``pi(mu)`` and footprint ``radius * fx / depth`` pixels.  Its decay at a
pixel is ``opacity * exp(-|p - center|^2 / footprint^2)``, truncated to
zero beyond three footprints.  Pixels composite their candidates front to
back; color, depth and silhouette share the same weights.

Candidates are binned per 16x16 tile.  Worker threads take disjoint tile
groups; per-tile partial gradients are reduced afterwards in tile order, so
results are bit-identical for any worker count.
"""
from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from .errors import DimensionMismatch, NonFinite
from .gaussian_map import GaussianMap
from ._kernels import backward_tiles, forward_tiles
from .geometry import PinholeCamera, Pose, RgbdFrame

TILE = 16
CUTOFF = 3.0


@dataclass(frozen=True)
class SplatWorkItem:
    gaussian_id: int
    center: np.ndarray
    depth: float
    footprint: float


@dataclass(eq=False)
class Splats:
    """Visible Gaussians for one view, sorted front to back (ties by id)."""

    index: np.ndarray      # rows of the source map
    ids: np.ndarray
    center: np.ndarray     # (M, 2) pixels
    depth: np.ndarray      # (M,) camera z
    footprint: np.ndarray  # (M,) pixels
    cam_points: np.ndarray # (M, 3)
    opacity: np.ndarray
    radius: np.ndarray
    color: np.ndarray

    def __len__(self):
        return len(self.index)

    def items(self) -> list[SplatWorkItem]:
        return [SplatWorkItem(int(i), c.copy(), float(d), float(r))
                for i, c, d, r in zip(self.ids, self.center, self.depth, self.footprint)]


def project_splats(gmap: GaussianMap, pose: Pose, cam: PinholeCamera) -> Splats:
    pc = pose.to_camera(gmap.mu)
    z = pc[:, 2]
    keep = (z > cam.near) & (z < cam.far)
    pc, idx = pc[keep], np.nonzero(keep)[0]
    z = pc[:, 2]
    u = cam.fx * pc[:, 0] / z + cam.cx
    v = cam.fy * pc[:, 1] / z + cam.cy
    fp = gmap.radius[idx] * cam.fx / z
    # the truncated disk must reach at least one pixel center
    dx = np.maximum(np.maximum(0.0 - u, u - (cam.width - 1)), 0.0)
    dy = np.maximum(np.maximum(0.0 - v, v - (cam.height - 1)), 0.0)
    keep = (dx * dx + dy * dy <= (CUTOFF * fp) ** 2) & (fp > 0)
    idx, pc, u, v, z, fp = idx[keep], pc[keep], u[keep], v[keep], z[keep], fp[keep]
    ids = gmap.ids[idx]
    order = np.lexsort((ids, z))
    idx = idx[order]
    return Splats(index=idx, ids=ids[order], center=np.stack([u, v], axis=1)[order],
                  depth=z[order], footprint=fp[order], cam_points=pc[order],
                  opacity=gmap.opacity[idx], radius=gmap.radius[idx], color=gmap.color[idx])


def frustum_cull_and_sort(gmap: GaussianMap, pose: Pose, cam: PinholeCamera) -> list[SplatWorkItem]:
    return project_splats(gmap, pose, cam).items()


def decay(item: SplatWorkItem, opacity: float, pixel) -> float:
    """Untruncated screen-space decay of one splat at ``pixel``."""
    d = np.asarray(pixel, dtype=float) - item.center
    return float(opacity * np.exp(-(d @ d) / item.footprint**2))


def composite_pixel(items):
    """Front-to-back compositing of ``(decay, color, depth)`` triples."""
    color = np.zeros(3)
    depth = 0.0
    sil = 0.0
    trans = 1.0
    for f, c, d in items:
        w = f * trans
        color += w * np.asarray(c, dtype=float)
        depth += w * d
        sil += w
        trans *= 1.0 - f
    return color, depth, sil


@dataclass(eq=False)
class RenderedFrame:
    color: np.ndarray
    depth: np.ndarray
    silhouette: np.ndarray

    @classmethod
    def blank(cls, cam: PinholeCamera) -> "RenderedFrame":
        h, w = cam.shape
        return cls(np.zeros((h, w, 3)), np.zeros((h, w)), np.zeros((h, w)))


@dataclass(eq=False)
class GradientBundle:
    """Loss partials per map row (zero for culled rows) and per pose tangent coordinate."""

    ids: np.ndarray
    mu: np.ndarray
    opacity: np.ndarray
    radius: np.ndarray
    color: np.ndarray
    pose: np.ndarray = field(default_factory=lambda: np.zeros(6))

    @classmethod
    def zeros(cls, gmap: GaussianMap) -> "GradientBundle":
        n = len(gmap)
        return cls(gmap.ids.copy(), np.zeros((n, 3)), np.zeros(n), np.zeros(n), np.zeros((n, 3)))

    def is_finite(self) -> bool:
        return all(np.all(np.isfinite(a)) for a in (self.mu, self.opacity, self.radius, self.color, self.pose))

    def __iadd__(self, other: "GradientBundle"):
        self.mu += other.mu
        self.opacity += other.opacity
        self.radius += other.radius
        self.color += other.color
        self.pose += other.pose
        return self


@dataclass
class LossWeights:
    """Photometric/geometric loss configuration against a target frame.

    ``silhouette_threshold`` restricts the loss to well-covered pixels (the
    tracking loss); ``None`` uses every valid pixel (the mapping loss).
    ``reduction`` is ``"sum"`` over pixels or ``"mean"`` (each term averaged
    over its own pixel set).
    """

    target: RgbdFrame
    color_weight: float = 0.6
    depth_weight: float = 1.0
    silhouette_threshold: float | None = 0.99
    reduction: str = "sum"
    ssim_weight: float = 0.0


def _tile_grid(cam: PinholeCamera) -> tuple[int, int]:
    return -(-cam.height // TILE), -(-cam.width // TILE)


def _bin_tiles(splats: Splats, cam: PinholeCamera, margin: float):
    """CSR lists of splat positions (front to back) whose reach touches each tile."""
    nty, ntx = _tile_grid(cam)
    nt = nty * ntx
    if len(splats) == 0:
        return np.zeros(nt + 1, dtype=np.int64), np.zeros(0, dtype=np.int64)
    t = np.arange(nt)
    x0 = (t % ntx) * TILE
    y0 = (t // ntx) * TILE
    x1 = np.minimum(x0 + TILE, cam.width) - 1
    y1 = np.minimum(y0 + TILE, cam.height) - 1
    u, v = splats.center[:, 0], splats.center[:, 1]
    reach = CUTOFF * splats.footprint + margin + 1e-9
    dx = np.maximum(np.maximum(x0[:, None] - u, u - x1[:, None]), 0.0)
    dy = np.maximum(np.maximum(y0[:, None] - v, v - y1[:, None]), 0.0)
    hit = dx * dx + dy * dy <= reach * reach
    ptr = np.zeros(nt + 1, dtype=np.int64)
    ptr[1:] = np.cumsum(hit.sum(1))
    return ptr, np.nonzero(hit)[1].astype(np.int64)


class _Overlay:
    """A correction plan resolved against one view's splat ordering (CSR by cell)."""

    def __init__(self, plan, splats: Splats, cam: PinholeCamera):
        plan.check_camera(cam)
        if TILE % plan.cell_size:
            raise ValueError(f"correction cell size {plan.cell_size} must divide the tile size {TILE}")
        self.plan = plan
        pos = {int(g): k for k, g in enumerate(splats.ids)}
        counts = np.array([len(c.ids) for c in plan.cells], dtype=np.int64)
        self.ptr = np.zeros(plan.n_cells + 1, dtype=np.int64)
        self.ptr[1:] = np.cumsum(counts)
        n = int(self.ptr[-1])
        self.m = np.zeros(n, dtype=np.int64)
        self.offset = np.zeros((n, 2))
        self.color = np.zeros((n, 3))
        self.weights = np.zeros(n)
        self.cell = np.repeat(np.arange(plan.n_cells), counts)
        for c, cell in enumerate(plan.cells):
            a, b = self.ptr[c], self.ptr[c + 1]
            if a == b:
                continue
            try:
                cols = np.array([pos[int(g)] for g in cell.ids])
            except KeyError as exc:
                raise ValueError(f"correction references Gaussian {exc} not visible in this view") from None
            self.m[a:b] = cols
            self.offset[a:b] = cell.centers - splats.center[cols]
            self.color[a:b] = cell.color
            self.weights[a:b] = cell.weights
        self.margin = float(np.sqrt((self.offset**2).sum(1)).max()) if n else 0.0
        cs = plan.cell_size
        v, u = np.divmod(np.arange(cam.width * cam.height), cam.width)
        self.cell_of_pixel = (v // cs) * plan.grid[1] + u // cs


_NO_OVERLAY = (np.zeros(1, dtype=np.int64), np.zeros(0, dtype=np.int64), np.zeros((0, 2)), np.zeros((0, 3)))


def _map_chunks(fn, chunks, workers: int):
    if workers <= 1 or len(chunks) <= 1:
        return [fn(c) for c in chunks]
    with ThreadPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(fn, chunks))


class _Pass:
    """One render of a view, retaining what the backward pass needs."""

    def __init__(self, gmap, pose, cam, correction=None, workers=1):
        self.gmap, self.pose, self.cam, self.workers = gmap, pose, cam, max(int(workers), 1)
        self.splats = project_splats(gmap, pose, cam)
        self.overlay = _Overlay(correction, self.splats, cam) if correction is not None else None
        margin = self.overlay.margin if self.overlay is not None else 0.0
        self.tile_ptr, self.tile_idx = _bin_tiles(self.splats, cam, margin)
        nty, self.ntx = _tile_grid(cam)
        tiles = np.arange(nty * self.ntx, dtype=np.int64)
        self.chunks = [c for c in np.array_split(tiles, min(self.workers, len(tiles))) if len(c)]
        s = self.splats
        self.cu = np.ascontiguousarray(s.center[:, 0])
        self.cv = np.ascontiguousarray(s.center[:, 1])
        if self.overlay is not None:
            o = self.overlay
            self.ovr = (o.ptr, o.m, o.offset, o.color)
            self.cs, self.ncx = o.plan.cell_size, o.plan.grid[1]
        else:
            self.ovr = _NO_OVERLAY
            self.cs, self.ncx = 1, 1

    def _common(self):
        s = self.splats
        return (self.tile_ptr, self.tile_idx, self.ntx, self.cam.width, self.cam.height,
                self.cu, self.cv, s.footprint, s.opacity, s.color, s.depth,
                self.cs, self.ncx, *self.ovr)

    def forward(self) -> RenderedFrame:
        cam = self.cam
        n = cam.width * cam.height
        rgb = np.zeros((n, 3))
        depth = np.zeros(n)
        sil = np.zeros(n)
        if len(self.splats):
            common = self._common()
            _map_chunks(lambda tiles: forward_tiles(tiles, *common, rgb, depth, sil),
                        self.chunks, self.workers)
        h, w = cam.shape
        return RenderedFrame(rgb.reshape(h, w, 3), depth.reshape(h, w), sil.reshape(h, w))

    def backward(self, gC, gD, gS, want_pose=True, through_correction=False) -> GradientBundle:
        s = self.splats
        m = len(s)
        nnz = len(self.tile_idx)
        n_ovr = len(self.ovr[1])
        p = {k: np.zeros(nnz) for k in ("cu", "cv", "fp", "op", "z")}
        p_col = np.zeros((nnz, 3))
        pix_ovr_col = np.zeros((self.cam.width * self.cam.height, 3))
        e_cu, e_cv = np.zeros(n_ovr), np.zeros(n_ovr)
        grads = (np.ascontiguousarray(gC.reshape(-1, 3)), np.ascontiguousarray(gD.ravel()),
                 np.ascontiguousarray(gS.ravel()))
        common = self._common()
        _map_chunks(lambda tiles: backward_tiles(tiles, *common, *grads, p["cu"], p["cv"], p["fp"], p["op"],
                                                 p["z"], p_col, pix_ovr_col, e_cu, e_cv),
                    self.chunks, self.workers)
        # sequential reduction in slot (tile) order: independent of worker count
        acc = {}
        for k, part in p.items():
            acc[k] = np.zeros(m)
            np.add.at(acc[k], self.tile_idx, part)
        g_col = np.zeros((m, 3))
        np.add.at(g_col, self.tile_idx, p_col)
        if self.overlay is not None:
            o = self.overlay
            cell_grad = np.zeros((o.plan.n_cells, 3))
            np.add.at(cell_grad, o.cell_of_pixel, pix_ovr_col)
            np.add.at(g_col, o.m, o.weights[:, None] * cell_grad[o.cell])
            if through_correction:
                _correction_chain(self, acc, e_cu, e_cv, cell_grad)
        return self._chain(acc, g_col, want_pose)

    def _chain(self, acc, g_col, want_pose) -> GradientBundle:
        s, cam = self.splats, self.cam
        out = GradientBundle.zeros(self.gmap)
        if len(s) == 0:
            return out
        x, y, z = s.cam_points.T
        g_fp = acc["fp"]
        out.radius[s.index] = g_fp * cam.fx / z
        g_pc = np.stack([
            acc["cu"] * cam.fx / z,
            acc["cv"] * cam.fy / z,
            acc["z"] - acc["cu"] * cam.fx * x / z**2 - acc["cv"] * cam.fy * y / z**2
            - g_fp * s.footprint / z,
        ], axis=1)
        out.mu[s.index] = g_pc @ self.pose.rotation.T
        out.opacity[s.index] = acc["op"]
        out.color[s.index] = g_col
        if want_pose:
            out.pose = np.concatenate([-g_pc.sum(0), np.cross(g_pc, s.cam_points).sum(0)])
        return out


def _correction_chain(p: _Pass, acc, e_cu, e_cv, cell_grad) -> None:
    """Add the terms that flow through the centroid pull and the color weights.

    Neighbor sets and the clamp branch are held fixed; everything continuous
    (centroid, step direction, decay-based weights) is differentiated.
    """
    o, s = p.overlay, p.splats
    plan = o.plan
    alpha, eps = plan.alpha, plan.epsilon
    for c, cell in enumerate(plan.cells):
        a, b = o.ptr[c], o.ptr[c + 1]
        K = b - a
        if K == 0:
            continue
        cols = o.m[a:b]
        u = s.center[cols]
        G = np.stack([e_cu[a:b], e_cv[a:b]], axis=1)
        d = u.mean(0) - u
        JG = np.empty_like(G)
        for k in range(K):
            n = float(np.hypot(*d[k]))
            if alpha / (n + eps) >= 1.0:
                J = np.eye(2)
            else:
                J = alpha / (n + eps) * np.eye(2)
                if n > 0:
                    J -= alpha * np.outer(d[k], d[k]) / (n * (n + eps) ** 2)
            JG[k] = J @ G[k]
        extra = JG.sum(0) / K - JG
        acc["cu"][cols] += extra[:, 0]
        acc["cv"][cols] += extra[:, 1]
        total = cell.decays.sum()
        if total < eps:
            continue
        A = cell_grad[c]
        dl_df = (s.color[cols] - cell.color) @ A / total
        pt = plan.cell_centers[c]
        fp = s.footprint[cols]
        du = pt - u
        q = (du**2).sum(1) / fp**2
        E = np.exp(-q)
        f = s.opacity[cols] * E
        acc["cu"][cols] += dl_df * f * 2.0 * du[:, 0] / fp**2
        acc["cv"][cols] += dl_df * f * 2.0 * du[:, 1] / fp**2
        acc["fp"][cols] += dl_df * f * 2.0 * q / fp
        acc["op"][cols] += dl_df * E


def render(gmap: GaussianMap, pose: Pose, cam: PinholeCamera, correction=None,
           workers: int = 1) -> RenderedFrame:
    """Render color, depth and silhouette; ``correction`` is an optional CB-KNN plan."""
    p = _Pass(gmap, pose, cam, correction, workers)
    if not p.chunks:
        return RenderedFrame.blank(cam)
    return p.forward()


def evaluate_loss(frame: RenderedFrame, weights: LossWeights):
    """Loss value, per-pixel loss map, and pixel-space gradients (gC, gD, gS)."""
    from .metrics import ssim_with_grad

    tgt = weights.target
    if tgt.depth.shape != frame.depth.shape:
        raise DimensionMismatch(f"target {tgt.depth.shape} vs render {frame.depth.shape}")
    valid = tgt.depth > 0
    if weights.silhouette_threshold is not None:
        depth_mask = valid & (frame.silhouette > weights.silhouette_threshold)
        color_mask = depth_mask
    else:
        depth_mask = valid
        color_mask = np.ones_like(valid)
    rd = frame.depth - tgt.depth
    rc = frame.color - tgt.color
    if weights.reduction == "sum":
        dscale = weights.depth_weight
        cscale = weights.color_weight
    elif weights.reduction == "mean":
        dscale = weights.depth_weight / max(int(depth_mask.sum()), 1)
        cscale = weights.color_weight / max(int(color_mask.sum()), 1)
    else:
        raise ValueError(f"unknown reduction {weights.reduction!r}")
    loss_map = dscale * depth_mask * np.abs(rd) + cscale * color_mask * np.abs(rc).sum(-1)
    gD = dscale * depth_mask * np.sign(rd)
    gC = cscale * color_mask[..., None] * np.sign(rc)
    gS = np.zeros_like(gD)
    loss = float(loss_map.sum())
    if weights.ssim_weight:
        s, ds = ssim_with_grad(frame.color, tgt.color)
        loss += weights.ssim_weight * (1.0 - s)
        gC = gC - weights.ssim_weight * ds
    return loss, loss_map, (gC, gD, gS)


def render_with_gradients(gmap: GaussianMap, pose: Pose, cam: PinholeCamera,
                          weights: LossWeights, correction=None, want_pose: bool = True,
                          workers: int = 1, through_correction: bool = False):
    """Render, evaluate the loss, and back-propagate to map rows and the pose tangent.

    By default correction offsets and color weights are treated as constants.
    ``through_correction`` also differentiates the centroid pull and the
    decay-based color weights (neighbor sets and clamp branches held fixed).
    """
    p = _Pass(gmap, pose, cam, correction, workers)
    frame = p.forward() if p.chunks else RenderedFrame.blank(cam)
    loss, _, (gC, gD, gS) = evaluate_loss(frame, weights)
    if not p.chunks:
        return frame, loss, GradientBundle.zeros(gmap)
    grads = p.backward(gC, gD, gS, want_pose=want_pose,
                       through_correction=through_correction and correction is not None)
    if not grads.is_finite():
        raise NonFinite("gradient contains NaN or Inf")
    return frame, loss, grads
