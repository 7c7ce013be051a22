"""Corrective blurry KNN: transient neighborhood smoothing of splats.

For every 8x8 grid cell the K splats contributing most at the cell center
are pulled a fixed step toward their common screen-space centroid and
take a contribution-weighted average color.  The result is a
:class:`CorrectionPlan` that the rasterizer overlays on the cell's pixels;
the Gaussian map itself is never modified.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy.spatial import cKDTree

from .errors import DimensionMismatch, EmptyNeighborhood
from .gaussian_map import GaussianMap
from .geometry import PinholeCamera, Pose, pose_distance
from .rasterizer import CUTOFF, Splats, project_splats


@dataclass
class SmoothingConfig:
    """Knobs of the correction.

    ``alpha`` is the screen-space step in pixels (0.1 to 0.3 is the intended
    range; 0 disables the position pull).  ``fixed_k`` bypasses the adaptive
    neighbor count, e.g. ``fixed_k=1`` for the degenerate identity check.
    """

    alpha: float = 0.2
    epsilon: float = 1e-6
    k0: int = 8
    beta: float = 0.3
    grid: int = 8
    metric: str = "contribution"
    per_pixel: bool = False
    fixed_k: int | None = None
    t_max: float = 0.3
    theta_max_deg: float = 30.0

    def __post_init__(self):
        if self.alpha < 0:
            raise ValueError("alpha must be non-negative")
        if self.k0 < 2:
            raise ValueError("k0 must be at least 2")
        if self.beta < 0:
            raise ValueError("beta must be non-negative")
        if self.fixed_k is not None and self.fixed_k < 1:
            raise ValueError("fixed_k must be at least 1")
        if self.grid < 1 or 16 % self.grid:
            raise ValueError("grid must divide 16")
        if self.metric not in ("contribution", "distance"):
            raise ValueError(f"unknown neighbor metric {self.metric!r}")


@dataclass(eq=False)
class CellCorrection:
    ids: np.ndarray          # neighbor Gaussian ids, best first
    centers: np.ndarray      # corrected projected centers (K, 2)
    color: np.ndarray        # shared corrected color (3,)
    weights: np.ndarray      # color weights per neighbor (K,)
    decays: np.ndarray       # decay of each neighbor at the cell center
    centroid: np.ndarray | None
    k: int


@dataclass(eq=False)
class CorrectionPlan:
    """Per-cell neighbor sets with corrected centers and colors for one view."""

    image_shape: tuple[int, int]
    cell_size: int
    grid: tuple[int, int]
    cells: list[CellCorrection]
    density: np.ndarray = field(default=None)
    k_used: np.ndarray = field(default=None)
    gamma: float = 0.0
    cell_centers: np.ndarray = field(default=None)
    alpha: float = 0.0
    epsilon: float = 1e-6

    @property
    def n_cells(self) -> int:
        return self.grid[0] * self.grid[1]

    def check_camera(self, cam: PinholeCamera) -> None:
        ny = -(-cam.height // self.cell_size)
        nx = -(-cam.width // self.cell_size)
        if self.image_shape != (cam.height, cam.width) or self.grid != (ny, nx):
            raise DimensionMismatch(
                f"plan grid {self.grid} for image {self.image_shape} does not match camera "
                f"{(cam.height, cam.width)}")

    def referenced_ids(self) -> set[int]:
        return {int(g) for c in self.cells for g in c.ids}


def select_neighbors(items, opacity, point, k: int, metric: str = "contribution"):
    """The ``k`` items contributing most at ``point``.

    Ties are broken by smaller depth, then smaller id.  Items whose truncated
    footprint misses ``point`` contribute nothing and are never selected.
    Returns the selected items best first.
    """
    if k < 1:
        raise ValueError("k must be at least 1")
    point = np.asarray(point, dtype=float)
    scored = []
    for item, op in zip(items, opacity):
        d2 = float(np.sum((point - item.center) ** 2))
        q = d2 / item.footprint**2
        if q > CUTOFF * CUTOFF:
            continue
        f = op * math.exp(-q)
        if metric == "contribution":
            if f <= 0:
                continue
            key = (-f, item.depth, item.gaussian_id)
        else:
            key = (d2, item.depth, item.gaussian_id)
        scored.append((key, item))
    scored.sort(key=lambda s: s[0])
    return [item for _, item in scored[:k]]


def centroid(centers) -> np.ndarray:
    centers = np.asarray(centers, dtype=float).reshape(-1, 2)
    if not len(centers):
        raise EmptyNeighborhood("centroid of an empty neighbor set")
    return centers.mean(axis=0)


def correct_position(center, target, cfg: SmoothingConfig) -> np.ndarray:
    """Fixed-length step of ``alpha`` pixels toward ``target``, never overshooting it."""
    center = np.asarray(center, dtype=float)
    d = np.asarray(target, dtype=float) - center
    dist = float(np.hypot(d[0], d[1]))
    scale = cfg.alpha / (dist + cfg.epsilon)
    if scale >= 1.0:
        return center + d
    return center + scale * d


def color_weights(decays, epsilon: float = 1e-6) -> np.ndarray:
    decays = np.asarray(decays, dtype=float)
    total = decays.sum()
    if total < epsilon:
        return np.full(len(decays), 1.0 / len(decays))
    return decays / total


def correct_color(decays, colors, epsilon: float = 1e-6) -> np.ndarray:
    colors = np.asarray(colors, dtype=float).reshape(-1, 3)
    if not len(colors):
        raise EmptyNeighborhood("color correction needs at least one neighbor")
    return color_weights(decays, epsilon) @ colors


def adaptive_k(density_count: int, motion_gamma: float, cfg: SmoothingConfig) -> int:
    rho = density_count / float(cfg.grid * cfg.grid)
    factor = max(0.5, 1.0 - cfg.beta * motion_gamma / (rho + cfg.epsilon))
    k = math.floor(cfg.k0 * factor + 0.5)
    return int(min(max(k, 2), cfg.k0))


def motion_gamma(pose_a: Pose, pose_b: Pose, cfg: SmoothingConfig | None = None,
                 t_max: float | None = None, theta_max_deg: float | None = None) -> float:
    """Normalized motion amplitude in [0, 1] between two poses."""
    cfg = cfg or SmoothingConfig()
    t_max = cfg.t_max if t_max is None else t_max
    theta_max = math.radians(cfg.theta_max_deg if theta_max_deg is None else theta_max_deg)
    dt, dtheta = pose_distance(pose_a, pose_b)
    return float(min(1.0, 0.5 * (dt / t_max + dtheta / theta_max)))


def _cell_geometry(width, height, size):
    nx = -(-width // size)
    ny = -(-height // size)
    cx = np.arange(nx) * size
    cy = np.arange(ny) * size
    x_mid = (cx + np.minimum(cx + size, width) - 1) / 2.0
    y_mid = (cy + np.minimum(cy + size, height) - 1) / 2.0
    gx, gy = np.meshgrid(x_mid, y_mid)
    return (ny, nx), np.stack([gx.ravel(), gy.ravel()], axis=1)


def density_counts(splats: Splats, cam: PinholeCamera, grid: int) -> np.ndarray:
    """Projected centers falling in each grid cell, shape (ny, nx)."""
    ny, nx = -(-cam.height // grid), -(-cam.width // grid)
    u = splats.center[:, 0] + 0.5
    v = splats.center[:, 1] + 0.5
    inside = (u >= 0) & (u < cam.width) & (v >= 0) & (v < cam.height)
    ix = (u[inside] // grid).astype(int)
    iy = (v[inside] // grid).astype(int)
    return np.bincount(iy * nx + ix, minlength=ny * nx).reshape(ny, nx)


def _rank(splats: Splats, points: np.ndarray, metric: str):
    """Per point, splat order best-first and the decays at that point."""
    d2 = ((points[:, None, :] - splats.center[None, :, :]) ** 2).sum(-1)
    q = d2 / splats.footprint[None, :] ** 2
    reach = q <= CUTOFF * CUTOFF
    f = np.where(reach, splats.opacity[None, :] * np.exp(-np.where(reach, q, 0.0)), 0.0)
    shape = f.shape
    depth = np.broadcast_to(splats.depth, shape)
    ids = np.broadcast_to(splats.ids, shape)
    primary = -f if metric == "contribution" else np.where(reach, d2, np.inf)
    order = np.lexsort((ids, depth, primary), axis=1)
    usable = (f > 0) if metric == "contribution" else reach
    return order, f, usable


def build_plan(gmap: GaussianMap, pose: Pose, cam: PinholeCamera, cfg: SmoothingConfig,
               gamma: float = 0.0, splats: Splats | None = None) -> CorrectionPlan:
    """Correction plan for one view; reads the map, never writes it."""
    if splats is None:
        splats = project_splats(gmap, pose, cam)
    density = density_counts(splats, cam, cfg.grid)
    k_stats = np.array([[adaptive_k(int(c), gamma, cfg) for c in row] for row in density])
    if cfg.fixed_k is not None:
        k_stats = np.full_like(k_stats, cfg.fixed_k)
    size = 1 if cfg.per_pixel else cfg.grid
    grid, points = _cell_geometry(cam.width, cam.height, size)
    rows, cols = np.divmod(np.arange(len(points)), grid[1])
    k_cells = k_stats[(rows * size) // cfg.grid, (cols * size) // cfg.grid]

    cells = []
    if len(splats):
        order, f, usable = _rank(splats, points, cfg.metric)
    for c in range(len(points)):
        k = int(k_cells[c])
        if not len(splats):
            cells.append(CellCorrection(np.zeros(0, np.int64), np.zeros((0, 2)), np.zeros(3),
                                        np.zeros(0), np.zeros(0), None, k))
            continue
        sel = order[c][usable[c][order[c]]][:k]
        if not len(sel):
            cells.append(CellCorrection(np.zeros(0, np.int64), np.zeros((0, 2)), np.zeros(3),
                                        np.zeros(0), np.zeros(0), None, k))
            continue
        centers = splats.center[sel]
        ctr = centroid(centers)
        corrected = np.array([correct_position(p, ctr, cfg) for p in centers])
        decays = f[c, sel]
        weights = color_weights(decays, cfg.epsilon)
        color = weights @ splats.color[sel]
        cells.append(CellCorrection(splats.ids[sel].copy(), corrected, color, weights, decays, ctr, k))
    return CorrectionPlan(image_shape=(cam.height, cam.width), cell_size=size, grid=grid,
                          cells=cells, density=density, k_used=k_cells.reshape(grid), gamma=gamma,
                          cell_centers=points, alpha=cfg.alpha, epsilon=cfg.epsilon)


def lift_corrections(plan: CorrectionPlan, gmap: GaussianMap, pose: Pose,
                     cam: PinholeCamera) -> dict[int, np.ndarray]:
    """World positions implied by each cell's corrected centers at unchanged camera depth.

    Keyed by Gaussian id; a Gaussian corrected in several cells gets the mean.
    """
    splats = project_splats(gmap, pose, cam)
    depth = dict(zip(splats.ids.tolist(), splats.depth))
    acc: dict[int, list] = {}
    for cell in plan.cells:
        for gid, (u, v) in zip(cell.ids.tolist(), cell.centers):
            z = depth[gid]
            pc = np.array([(u - cam.cx) / cam.fx * z, (v - cam.cy) / cam.fy * z, z])
            acc.setdefault(gid, []).append(pose.apply(pc))
    return {g: np.mean(v, axis=0) for g, v in acc.items()}


def smooth_point_cloud(points: np.ndarray, k: int, step) -> np.ndarray:
    """Pull each point a bounded step toward the centroid of its k nearest neighbors."""
    points = np.asarray(points, dtype=float)
    if len(points) < 2 or k < 2:
        return points.copy()
    k = min(k, len(points))
    _, nn = cKDTree(points).query(points, k=k)
    d = points[nn].mean(axis=1) - points
    dist = np.linalg.norm(d, axis=1)
    step = np.broadcast_to(np.asarray(step, dtype=float), dist.shape)
    scale = np.minimum(step / (dist + 1e-12), 1.0)
    return points + scale[:, None] * d

