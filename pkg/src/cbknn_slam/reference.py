"""Brute-force per-pixel renderer with no tiling.

Slow and simple on purpose: it is the oracle the tiled rasterizer is
checked against, and it renders synthetic ground-truth frames.
"""
from __future__ import annotations

import numpy as np

from .errors import BehindCamera
from .gaussian_map import GaussianMap
from .geometry import PinholeCamera, Pose, project
from .rasterizer import CUTOFF, RenderedFrame


def visible_splats(gmap: GaussianMap, pose: Pose, cam: PinholeCamera):
    """(id, center, depth, footprint, opacity, color) for visible Gaussians, front to back."""
    out = []
    for g in gmap:
        try:
            center, z = project(g.mu, pose, cam)
        except BehindCamera:
            continue
        if not cam.near < z < cam.far:
            continue
        fp = g.radius * cam.fx / z
        dx = max(0.0 - center[0], center[0] - (cam.width - 1), 0.0)
        dy = max(0.0 - center[1], center[1] - (cam.height - 1), 0.0)
        if dx * dx + dy * dy > (CUTOFF * fp) ** 2:
            continue
        out.append((g.id, center, z, fp, g.opacity, g.color))
    out.sort(key=lambda s: (s[2], s[0]))
    return out


def render_reference(gmap: GaussianMap, pose: Pose, cam: PinholeCamera, correction=None) -> RenderedFrame:
    splats = visible_splats(gmap, pose, cam)
    h, w = cam.shape
    frame = RenderedFrame.blank(cam)
    if not splats:
        return frame
    ids = [s[0] for s in splats]
    centers = np.array([s[1] for s in splats])
    depth = np.array([s[2] for s in splats])
    fp2 = np.array([s[3] for s in splats]) ** 2
    opacity = np.array([s[4] for s in splats])
    colors = np.array([s[5] for s in splats])
    pos = {g: k for k, g in enumerate(ids)}
    cell_overrides = {}
    if correction is not None:
        correction.check_camera(cam)
        for c, cell in enumerate(correction.cells):
            cols = [pos[int(g)] for g in cell.ids]
            cell_overrides[c] = (cols, cell.centers, cell.color)
    for v in range(h):
        for u in range(w):
            cu = centers[:, 0].copy()
            cv = centers[:, 1].copy()
            col = colors
            if correction is not None:
                c = (v // correction.cell_size) * correction.grid[1] + u // correction.cell_size
                cols, cc, ccolor = cell_overrides[c]
                if cols:
                    cu[cols] = cc[:, 0]
                    cv[cols] = cc[:, 1]
                    col = colors.copy()
                    col[cols] = ccolor
            du = u - cu
            dv = v - cv
            q = (du * du + dv * dv) / fp2
            f = np.where(q <= CUTOFF * CUTOFF, opacity * np.exp(-np.minimum(q, 50.0)), 0.0)
            trans = np.concatenate([[1.0], np.cumprod(1.0 - f)[:-1]])
            wgt = f * trans
            frame.color[v, u] = wgt @ col
            frame.depth[v, u] = wgt @ depth
            frame.silhouette[v, u] = wgt.sum()
    return frame
