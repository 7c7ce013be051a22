import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from scipy.spatial.transform import Rotation

from cbknn_slam.errors import BehindCamera, InvalidDepth
from cbknn_slam.geometry import (Gaussian, PinholeCamera, Pose, backproject, compose, inverse,
                                 pose_distance, predict_pose, project)

finite = st.floats(-3, 3, allow_nan=False)
vec3 = st.tuples(finite, finite, finite).map(np.array)
rotvec = st.tuples(*[st.floats(-2, 2)] * 3).map(np.array)
poses = st.builds(lambda r, t: Pose.from_rotvec(r, t), rotvec, vec3)


def test_project_optical_axis(cam100):
    px, z = project([0, 0, 2], Pose.identity(), cam100)
    assert np.allclose(px, [50, 50]) and z == 2


def test_project_offset_point(cam100):
    # u = 100 * 0.2 / 2 + 50
    px, z = project([0.2, 0, 2], Pose.identity(), cam100)
    assert np.allclose(px, [60, 50], atol=1e-12) and z == 2


def test_project_behind(cam100):
    with pytest.raises(BehindCamera):
        project([0, 0, -1], Pose.identity(), cam100)


def test_backproject_examples(cam100):
    assert np.allclose(backproject((50, 50), 2.0, Pose.identity(), cam100), [0, 0, 2])
    assert np.allclose(backproject((60, 50), 2.0, Pose.identity(), cam100), [0.2, 0, 2], atol=1e-12)
    with pytest.raises(InvalidDepth):
        backproject((1, 1), 0.0, Pose.identity(), cam100)


def test_roundtrip_random_pixels(cam100):
    rng = np.random.default_rng(3)
    pose = Pose.from_rotvec([0.1, -0.2, 0.3], [0.5, 0.1, -0.2])
    worst = 0.0
    for _ in range(100):
        p = rng.uniform(0, 100, 2)
        d = rng.uniform(0.1, 10)
        q, z = project(backproject(p, d, pose, cam100), pose, cam100)
        worst = max(worst, np.abs(q - p).max(), abs(z - d))
    assert worst < 1e-9


def test_world_to_camera_matches_matrix_inverse():
    pose = Pose.from_rotvec([0.3, 0.2, -0.1], [1, 2, 3])
    X = np.array([[0.5, -1, 4.0]])
    expected = (np.linalg.inv(pose.matrix()) @ np.r_[X[0], 1.0])[:3]
    assert np.allclose(pose.to_camera(X)[0], expected, atol=1e-12)


def test_compose_translations():
    p = compose(Pose.from_translation(1, 0, 0), Pose.from_translation(0, 2, 0))
    assert np.allclose(p.translation, [1, 2, 0]) and np.allclose(p.rotation, np.eye(3))


@given(poses)
def test_group_axioms(p):
    assert compose(p, inverse(p)).allclose(Pose.identity(), atol=1e-9)
    assert compose(Pose.identity(), p).allclose(p, atol=1e-12)
    assert p.is_valid()


@given(poses, poses, poses)
def test_associativity(a, b, c):
    assert compose(compose(a, b), c).allclose(compose(a, compose(b, c)), atol=1e-9)


@given(st.tuples(*[st.floats(-1, 1)] * 6).map(np.array))
def test_exp_log_roundtrip(xi):
    assert np.allclose(Pose.exp(xi).log(), xi, atol=1e-9)


def test_quaternion_matches_scipy():
    R = Rotation.from_rotvec([0.2, -0.4, 0.7])
    p = Pose.from_quaternion([1, 2, 3], R.as_quat())
    assert np.allclose(p.rotation, R.as_matrix(), atol=1e-12)
    assert np.allclose(Rotation.from_quat(p.quaternion()).as_matrix(), R.as_matrix(), atol=1e-12)


def test_predict_pose_examples():
    I = Pose.identity()
    assert predict_pose(I, I).allclose(I)
    assert predict_pose(I, Pose.from_translation(1, 0, 0)).allclose(Pose.from_translation(2, 0, 0))
    # 10 degree step about z is replayed
    step = Rotation.from_euler("z", 10, degrees=True).as_matrix()
    a = Pose(Rotation.from_euler("x", 5, degrees=True).as_matrix(), [0.1, 0, 0])
    b = Pose(a.rotation @ step, a.translation)
    pred = predict_pose(a, b)
    rel = inverse(b) @ pred
    assert np.allclose(rel.rotation, step, atol=1e-12)
    assert np.isclose(np.degrees(pose_distance(b, pred)[1]), 10.0)


@given(poses, poses)
def test_predict_pose_replays_relative_motion(a, b):
    pred = predict_pose(a, b)
    assert (inverse(b) @ pred).allclose(inverse(a) @ b, atol=1e-8)


def test_gaussian_invariants():
    Gaussian(0, np.zeros(3), 0.5, 0.1, np.array([0.1, 0.2, 0.3]))
    for bad in (dict(opacity=1.5), dict(radius=0.0), dict(color=np.array([0, 0, 2.0]))):
        kw = dict(opacity=0.5, radius=0.1, color=np.zeros(3)) | bad
        with pytest.raises(ValueError):
            Gaussian(0, np.zeros(3), **kw)


def test_camera_validation():
    with pytest.raises(ValueError):
        PinholeCamera(0, 1, 0, 0, 4, 4)
    with pytest.raises(ValueError):
        PinholeCamera(1, 1, 0, 0, 4, 4, near=2.0, far=1.0)


def test_scaled_camera_preserves_rays():
    cam = PinholeCamera(517.3, 516.5, 318.6, 255.3, 640, 480)
    half = cam.scaled(0.5)
    assert (half.width, half.height) == (320, 240)
    # the center of a 2x2 block maps to the center of the downsampled pixel
    X = backproject((100.5, 60.5), 2.0, Pose.identity(), cam)
    px, _ = project(X, Pose.identity(), half)
    assert np.allclose(px, [50, 30], atol=1e-9)
