"""Compiled per-tile compositing loops used by the rasterizer.

Every kernel handles a caller-chosen subset of tiles and writes only to
slots owned by those tiles (their pixels, their candidate-list entries,
and the override entries of cells inside them), so disjoint tile subsets
can run concurrently without locks.
"""
import numpy as np
from numba import njit

TILE = 16
CUTOFF2 = 9.0


@njit(cache=True, nogil=True)
def _tile_slots(t, ntx, W, H, a, n, tile_idx, pos, cs, ncx, ovr_ptr, ovr_m):
    """Map (cell inside tile, candidate position) -> override entry, or -1."""
    x0 = (t % ntx) * TILE
    y0 = (t // ntx) * TILE
    x1 = min(x0 + TILE, W)
    y1 = min(y0 + TILE, H)
    cx0 = x0 // cs
    cy0 = y0 // cs
    nxl = (x1 - 1) // cs - cx0 + 1
    nyl = (y1 - 1) // cs - cy0 + 1
    slots = np.full((nyl * nxl, max(n, 1)), -1, np.int64)
    for j in range(n):
        pos[tile_idx[a + j]] = j
    for cyl in range(nyl):
        for cxl in range(nxl):
            c = (cy0 + cyl) * ncx + cx0 + cxl
            for e in range(ovr_ptr[c], ovr_ptr[c + 1]):
                j = pos[ovr_m[e]]
                if j >= 0:
                    slots[cyl * nxl + cxl, j] = e
    for j in range(n):
        pos[tile_idx[a + j]] = -1
    return slots, cx0, cy0, nxl


@njit(cache=True, nogil=True)
def forward_tiles(tiles, tile_ptr, tile_idx, ntx, W, H,
                  cu, cv, fp, op, col, dep,
                  cs, ncx, ovr_ptr, ovr_m, ovr_off, ovr_col,
                  out_rgb, out_d, out_s):
    M = cu.shape[0]
    has_ovr = ovr_ptr.shape[0] > 1
    pos = np.full(M, -1, np.int64)
    for ti in range(tiles.shape[0]):
        t = tiles[ti]
        a = tile_ptr[t]
        n = tile_ptr[t + 1] - a
        x0 = (t % ntx) * TILE
        y0 = (t // ntx) * TILE
        x1 = min(x0 + TILE, W)
        y1 = min(y0 + TILE, H)
        if has_ovr:
            slots, cx0, cy0, nxl = _tile_slots(t, ntx, W, H, a, n, tile_idx, pos, cs, ncx, ovr_ptr, ovr_m)
        else:
            slots = np.full((1, 1), -1, np.int64)
            cx0 = cy0 = nxl = 0
        for y in range(y0, y1):
            for x in range(x0, x1):
                cl = (y // cs - cy0) * nxl + (x // cs - cx0) if has_ovr else 0
                T = 1.0
                r = 0.0
                g = 0.0
                b = 0.0
                d = 0.0
                s = 0.0
                for j in range(n):
                    m = tile_idx[a + j]
                    ux = cu[m]
                    vy = cv[m]
                    e = slots[cl, j] if has_ovr else -1
                    if e >= 0:
                        ux += ovr_off[e, 0]
                        vy += ovr_off[e, 1]
                    du = x - ux
                    dv = y - vy
                    q = (du * du + dv * dv) / (fp[m] * fp[m])
                    if q > CUTOFF2:
                        continue
                    f = op[m] * np.exp(-q)
                    w = f * T
                    if e >= 0:
                        r += w * ovr_col[e, 0]
                        g += w * ovr_col[e, 1]
                        b += w * ovr_col[e, 2]
                    else:
                        r += w * col[m, 0]
                        g += w * col[m, 1]
                        b += w * col[m, 2]
                    d += w * dep[m]
                    s += w
                    T *= 1.0 - f
                p = y * W + x
                out_rgb[p, 0] = r
                out_rgb[p, 1] = g
                out_rgb[p, 2] = b
                out_d[p] = d
                out_s[p] = s


@njit(cache=True, nogil=True)
def backward_tiles(tiles, tile_ptr, tile_idx, ntx, W, H,
                   cu, cv, fp, op, col, dep,
                   cs, ncx, ovr_ptr, ovr_m, ovr_off, ovr_col,
                   gC, gD, gS,
                   p_cu, p_cv, p_fp, p_op, p_z, p_col, pix_ovr_col, e_cu, e_cv):
    """Per-slot partials of the loss w.r.t. splat screen parameters.

    ``p_*`` are indexed like ``tile_idx``; ``pix_ovr_col`` collects, per
    pixel, the color gradient routed to overridden (cell-shared) colors;
    ``e_cu``/``e_cv`` collect gradients w.r.t. each corrected center.
    """
    M = cu.shape[0]
    has_ovr = ovr_ptr.shape[0] > 1
    pos = np.full(M, -1, np.int64)
    for ti in range(tiles.shape[0]):
        t = tiles[ti]
        a = tile_ptr[t]
        n = tile_ptr[t + 1] - a
        x0 = (t % ntx) * TILE
        y0 = (t // ntx) * TILE
        x1 = min(x0 + TILE, W)
        y1 = min(y0 + TILE, H)
        if has_ovr:
            slots, cx0, cy0, nxl = _tile_slots(t, ntx, W, H, a, n, tile_idx, pos, cs, ncx, ovr_ptr, ovr_m)
        else:
            slots = np.full((1, 1), -1, np.int64)
            cx0 = cy0 = nxl = 0
        jb = np.empty(max(n, 1), np.int64)
        eb = np.empty(max(n, 1), np.int64)
        fb = np.empty(max(n, 1))
        Tb = np.empty(max(n, 1))
        Eb = np.empty(max(n, 1))
        qb = np.empty(max(n, 1))
        dub = np.empty(max(n, 1))
        dvb = np.empty(max(n, 1))
        for y in range(y0, y1):
            for x in range(x0, x1):
                p = y * W + x
                cl = (y // cs - cy0) * nxl + (x // cs - cx0) if has_ovr else 0
                T = 1.0
                k = 0
                for j in range(n):
                    m = tile_idx[a + j]
                    ux = cu[m]
                    vy = cv[m]
                    e = slots[cl, j] if has_ovr else -1
                    if e >= 0:
                        ux += ovr_off[e, 0]
                        vy += ovr_off[e, 1]
                    du = x - ux
                    dv = y - vy
                    q = (du * du + dv * dv) / (fp[m] * fp[m])
                    if q > CUTOFF2:
                        continue
                    E = np.exp(-q)
                    f = op[m] * E
                    jb[k] = j
                    eb[k] = e
                    fb[k] = f
                    Tb[k] = T
                    Eb[k] = E
                    qb[k] = q
                    dub[k] = du
                    dvb[k] = dv
                    k += 1
                    T *= 1.0 - f
                gr = gC[p, 0]
                gg = gC[p, 1]
                gbl = gC[p, 2]
                gd = gD[p]
                gs = gS[p]
                R = 0.0
                for kk in range(k - 1, -1, -1):
                    j = jb[kk]
                    m = tile_idx[a + j]
                    e = eb[kk]
                    f = fb[kk]
                    Tk = Tb[kk]
                    if e >= 0:
                        c0 = ovr_col[e, 0]
                        c1 = ovr_col[e, 1]
                        c2 = ovr_col[e, 2]
                    else:
                        c0 = col[m, 0]
                        c1 = col[m, 1]
                        c2 = col[m, 2]
                    ev = gr * c0 + gg * c1 + gbl * c2 + gd * dep[m] + gs
                    dldf = Tk * (ev - R)
                    R = f * ev + (1.0 - f) * R
                    w = f * Tk
                    fpm = fp[m]
                    aa = dldf * f
                    slot = a + j
                    gcu = 2.0 * aa * dub[kk] / (fpm * fpm)
                    gcv = 2.0 * aa * dvb[kk] / (fpm * fpm)
                    p_cu[slot] += gcu
                    p_cv[slot] += gcv
                    p_fp[slot] += 2.0 * aa * qb[kk] / fpm
                    p_op[slot] += dldf * Eb[kk]
                    p_z[slot] += w * gd
                    if e >= 0:
                        pix_ovr_col[p, 0] += w * gr
                        pix_ovr_col[p, 1] += w * gg
                        pix_ovr_col[p, 2] += w * gbl
                        e_cu[e] += gcu
                        e_cv[e] += gcv
                    else:
                        p_col[slot, 0] += w * gr
                        p_col[slot, 1] += w * gg
                        p_col[slot, 2] += w * gbl
