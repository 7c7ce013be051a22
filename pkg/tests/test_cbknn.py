import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from cbknn_slam.cbknn import (SmoothingConfig, adaptive_k, build_plan, centroid, color_weights,
                              correct_color, correct_position, lift_corrections, motion_gamma,
                              select_neighbors, smooth_point_cloud)
from cbknn_slam.dataio import map_to_bytes
from cbknn_slam.errors import DimensionMismatch, EmptyNeighborhood
from cbknn_slam.gaussian_map import GaussianMap
from cbknn_slam.geometry import PinholeCamera, Pose, project
from cbknn_slam.rasterizer import SplatWorkItem, render

from conftest import random_scene, small_pose

CFG = SmoothingConfig(alpha=0.2, epsilon=1e-6)


def item(gid, x, y, depth=1.0, footprint=2.0):
    return SplatWorkItem(gid, np.array([x, y], dtype=float), depth, footprint)


# ----------------------------------------------------------------------------- neighbor selection

def test_single_candidate():
    (only,) = select_neighbors([item(0, 5, 5)], [0.5], (5, 5), k=3)
    assert only.gaussian_id == 0


def test_top_two_by_decay():
    items = [item(0, 5, 5), item(1, 5, 5), item(2, 5, 5)]
    picked = select_neighbors(items, [0.1, 0.9, 0.5], (5, 5), k=2)
    assert [p.gaussian_id for p in picked] == [1, 2]


def test_tie_break_depth_then_id():
    items = [item(3, 5, 5, depth=2.0), item(1, 5, 5, depth=2.0), item(0, 5, 5, depth=1.0)]
    # every permutation of equal-decay candidates gives the same order
    for perm in ([0, 1, 2], [2, 1, 0], [1, 0, 2]):
        picked = select_neighbors([items[i] for i in perm], [0.5] * 3, (5, 5), k=3)
        assert [p.gaussian_id for p in picked] == [0, 1, 3]


def test_out_of_reach_never_selected():
    assert select_neighbors([item(0, 50, 50, footprint=1.0)], [1.0], (0, 0), k=2) == []


def test_distance_metric_orders_by_screen_distance():
    items = [item(0, 6, 5, footprint=10.0), item(1, 5, 5, footprint=0.5)]
    assert select_neighbors(items, [0.9, 0.1], (5, 5), k=1, metric="distance")[0].gaussian_id == 1
    assert select_neighbors(items, [0.9, 0.1], (5, 5), k=1)[0].gaussian_id == 0


def test_k_must_be_positive():
    with pytest.raises(ValueError):
        select_neighbors([], [], (0, 0), k=0)


# ----------------------------------------------------------------------------- centroid / position pull

def test_centroid_examples():
    assert np.allclose(centroid([[3, 4]]), [3, 4])
    assert np.allclose(centroid([[10, 10], [20, 30]]), [15, 20])
    pts = np.random.default_rng(0).uniform(0, 100, (5, 2))
    assert np.abs(centroid(pts) - pts.sum(0) / 5).max() <= 1e-12
    with pytest.raises(EmptyNeighborhood):
        centroid([])


def test_correct_position_examples():
    assert np.array_equal(correct_position([7, 7], [7, 7], CFG), [7, 7])
    assert np.allclose(correct_position([10, 10], [14, 13], CFG), [10.16, 10.12], atol=1e-6)
    assert np.allclose(correct_position([10, 10], [10.05, 10], CFG), [10.05, 10], atol=1e-12)


pts2 = st.tuples(st.floats(-50, 50), st.floats(-50, 50)).map(np.array)


@given(pts2, pts2, st.floats(0, 0.3))
def test_position_pull_contracts(p, c, alpha):
    q = correct_position(p, c, SmoothingConfig(alpha=alpha))
    before, after = np.linalg.norm(c - p), np.linalg.norm(c - q)
    assert after <= before + 1e-12
    # the step stays on the segment from p to c
    assert np.linalg.norm(q - p) + after == pytest.approx(before, abs=1e-9)


# ----------------------------------------------------------------------------- color

def test_color_examples():
    assert np.allclose(color_weights([0.6, 0.2]), [0.75, 0.25])
    assert np.allclose(correct_color([0.6, 0.2], [[1, 0, 0], [0, 1, 0]]), [0.75, 0.25, 0])
    assert np.allclose(correct_color([0.3, 0.9], [[0.2, 0.4, 0.6]] * 2), [0.2, 0.4, 0.6])
    assert np.allclose(correct_color([0.0, 0.0], [[1, 0, 0], [0, 0, 1]]), [0.5, 0, 0.5])
    with pytest.raises(EmptyNeighborhood):
        correct_color([], [])


@given(st.lists(st.floats(1e-3, 1), min_size=1, max_size=10), st.integers(0, 2**31))
def test_color_is_convex_combination(decays, seed):
    colors = np.random.default_rng(seed).uniform(0, 1, (len(decays), 3))
    w = color_weights(decays)
    assert abs(w.sum() - 1) <= 1e-12
    c = correct_color(decays, colors)
    assert np.all(c >= colors.min(0) - 1e-12) and np.all(c <= colors.max(0) + 1e-12)


# ----------------------------------------------------------------------------- adaptive K, motion

def test_adaptive_k_examples():
    cfg8 = SmoothingConfig(k0=8, beta=0.3)
    assert adaptive_k(10, 0.0, cfg8) == 8
    assert adaptive_k(64, 0.5, cfg8) == 7
    assert adaptive_k(0, 1.0, cfg8) == 4


@given(st.integers(0, 500), st.floats(0, 1), st.integers(2, 16), st.floats(0, 3))
def test_adaptive_k_range(count, gamma, k0, beta):
    k = adaptive_k(count, gamma, SmoothingConfig(k0=k0, beta=beta))
    assert 2 <= k <= k0
    if gamma == 0:
        assert k == k0


def test_motion_gamma_examples():
    I = Pose.identity()
    assert motion_gamma(I, I) == 0.0
    assert motion_gamma(I, Pose.from_translation(0.3, 0, 0)) == pytest.approx(0.5)
    big = Pose.from_rotvec([0, 0, math.radians(60)], [0.6, 0, 0])
    assert motion_gamma(I, big) == 1.0


def test_config_validation():
    for bad in (dict(alpha=-0.1), dict(k0=1), dict(beta=-1), dict(fixed_k=0), dict(grid=3),
                dict(metric="nope")):
        with pytest.raises(ValueError):
            SmoothingConfig(**bad)


# ----------------------------------------------------------------------------- plans

def test_empty_map_plan(cam100):
    plan = build_plan(GaussianMap(), Pose.identity(), cam100, CFG)
    assert plan.n_cells == 13 * 13 and all(len(c.ids) == 0 for c in plan.cells)


def test_single_cell_hand_computation():
    """Three Gaussians in one 8x8 cell: ranking, centers and colors worked by hand."""
    cam = PinholeCamera(8.0, 8.0, 3.5, 3.5, 8, 8)
    mu = np.array([[0.0, 0.0, 2.0], [0.25, 0.1, 2.5], [-0.2, 0.3, 3.0]])
    op = np.array([0.9, 0.6, 0.7])
    rad = np.array([0.3, 0.4, 0.5])
    col = np.array([[1, 0, 0], [0, 1, 0], [0, 0, 1.0]])
    gmap = GaussianMap(mu, op, rad, col)
    plan = build_plan(gmap, Pose.identity(), cam, SmoothingConfig(k0=3))
    (cell,) = plan.cells

    px = np.array([project(m, Pose.identity(), cam)[0] for m in mu])
    foot = 8.0 * rad / mu[:, 2]
    f = op * np.exp(-((px - 3.5) ** 2).sum(1) / foot**2)
    order = np.argsort(-f)
    assert list(cell.ids) == list(order)
    ctr = px.mean(0)
    assert np.allclose(cell.centroid, ctr, atol=1e-12)
    for got, i in zip(cell.centers, order):
        d = ctr - px[i]
        step = min(0.2 / (np.linalg.norm(d) + 1e-6), 1.0)
        assert np.allclose(got, px[i] + step * d, atol=1e-12)
    assert np.allclose(cell.color, (f / f.sum()) @ col, atol=1e-12)


@pytest.mark.parametrize("seed", range(3))
def test_plan_invariants(seed):
    gmap, cam = random_scene(seed, n=50, size=48, dense=True)
    pose = small_pose(np.random.default_rng(seed))
    before = map_to_bytes(gmap)
    plan = build_plan(gmap, pose, cam, SmoothingConfig(k0=6), gamma=0.3)
    frame = render(gmap, pose, cam, plan)
    assert map_to_bytes(gmap) == before
    visible = {int(g) for g in gmap.ids[(pose.to_camera(gmap.mu)[:, 2] > cam.near)]}
    assert plan.referenced_ids() <= visible
    for cell in plan.cells:
        if not len(cell.ids):
            continue
        assert len(cell.ids) <= cell.k
        c = gmap.color[gmap.rows_of(cell.ids)]
        assert np.all(cell.color >= c.min(0) - 1e-12) and np.all(cell.color <= c.max(0) + 1e-12)
        orig = np.array([project(gmap.mu[r], pose, cam)[0] for r in gmap.rows_of(cell.ids)])
        assert np.all(np.linalg.norm(cell.centers - cell.centroid, axis=1)
                      <= np.linalg.norm(orig - cell.centroid, axis=1) + 1e-9)
    assert frame.silhouette.max() <= 1.0


def test_correction_changes_render():
    gmap, cam = random_scene(4, n=50, size=48, dense=True)
    plan = build_plan(gmap, Pose.identity(), cam, SmoothingConfig())
    a, b = render(gmap, Pose.identity(), cam), render(gmap, Pose.identity(), cam, plan)
    assert np.abs(a.color - b.color).max() > 1e-3


@pytest.mark.parametrize("per_pixel", [False, True])
def test_degenerate_smoothing_is_identity(per_pixel):
    gmap, cam = random_scene(5, n=40, size=32, dense=True)
    pose = small_pose(np.random.default_rng(5))
    cfg = SmoothingConfig(alpha=0.0, fixed_k=1, per_pixel=per_pixel)
    a = render(gmap, pose, cam)
    b = render(gmap, pose, cam, build_plan(gmap, pose, cam, cfg))
    for x, y in ((a.color, b.color), (a.depth, b.depth), (a.silhouette, b.silhouette)):
        assert np.abs(x - y).max() <= 1e-9


def test_plan_rejects_other_camera():
    gmap, cam = random_scene(1, size=32)
    plan = build_plan(gmap, Pose.identity(), cam, CFG)
    other = PinholeCamera(30, 30, 23.5, 23.5, 48, 48)
    with pytest.raises(DimensionMismatch):
        render(gmap, Pose.identity(), other, plan)


def test_lift_keeps_camera_depth():
    gmap, cam = random_scene(2, n=30, size=32, dense=True)
    pose = Pose.from_rotvec([0.05, -0.02, 0.01], [0.1, 0.0, -0.1])
    plan = build_plan(gmap, pose, cam, SmoothingConfig())
    lifted = lift_corrections(plan, gmap, pose, cam)
    assert lifted
    for gid, X in lifted.items():
        row = gmap.index_of(gid)
        assert pose.to_camera(X[None])[0, 2] == pytest.approx(pose.to_camera(gmap.mu[row][None])[0, 2])


def test_smooth_point_cloud_contracts():
    pts = np.random.default_rng(0).normal(size=(60, 3))
    out = smooth_point_cloud(pts, k=5, step=0.01)
    moved = np.linalg.norm(out - pts, axis=1)
    assert moved.max() <= 0.01 + 1e-12 and moved.max() > 0
    assert np.array_equal(smooth_point_cloud(pts[:1], k=5, step=0.01), pts[:1])


@pytest.mark.parametrize("seed", range(3))
def test_gradients_through_correction(seed):
    # center pull and color averaging are differentiated too; step 1e-5 keeps the
    # central-difference truncation error below the tolerance on small footprints
    from cbknn_slam.gradcheck import check_gradients
    from cbknn_slam.geometry import RgbdFrame
    from cbknn_slam.rasterizer import LossWeights

    gmap, cam = random_scene(seed, n=20, size=32, dense=True)
    r = render(gmap, Pose.identity(), cam)
    w = LossWeights(RgbdFrame(r.color, r.depth), silhouette_threshold=None, reduction="mean")
    pose = small_pose(np.random.default_rng(seed))
    plan = build_plan(gmap, pose, cam, SmoothingConfig(k0=5))
    rep = check_gradients(gmap, pose, cam, w, correction=plan, full=True, step=1e-5)
    assert rep.ok and rep.n_checked > 100, rep.failures[:3]
