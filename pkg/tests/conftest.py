import numpy as np
import pytest
from hypothesis import settings

from cbknn_slam.gaussian_map import GaussianMap
from cbknn_slam.geometry import PinholeCamera, Pose

settings.register_profile("default", max_examples=50, deadline=None)
settings.load_profile("default")


def random_scene(seed: int, n: int = 30, size: int = 32, dense: bool = False):
    """Gaussians in front of an identity camera; returns (map, camera)."""
    rng = np.random.default_rng(seed)
    mu = np.c_[rng.uniform(-0.8, 0.8, (n, 2)), rng.uniform(2.0, 4.0, n)]
    if dense:
        op, rad = rng.uniform(0.7, 0.99, n), rng.uniform(0.25, 0.45, n)
    else:
        op, rad = rng.uniform(0.2, 0.95, n), rng.uniform(0.05, 0.3, n)
    gmap = GaussianMap(mu, op, rad, rng.uniform(0.05, 0.95, (n, 3)))
    f = size * 60.0 / 64.0
    cam = PinholeCamera(f, f, (size - 1) / 2, (size - 1) / 2, size, size)
    return gmap, cam


def small_pose(rng, rot=0.02, trans=0.03) -> Pose:
    return Pose.from_rotvec(rng.normal(0, rot, 3), rng.normal(0, trans, 3))


@pytest.fixture
def cam100():
    return PinholeCamera(100.0, 100.0, 50.0, 50.0, 101, 101)


ACCEPTANCE: dict[int, str] = {}


@pytest.fixture
def verdict():
    """Record one acceptance line; returns the flag so tests can assert on it."""
    def record(number: int, ok, detail: str):
        status = "SKIP" if ok is None else "PASS" if ok else "FAIL"
        line = f"criterion {number:>2}: {status}  {detail}"
        ACCEPTANCE[number] = line
        print(line)
        return ok
    return record


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE:
        terminalreporter.write_sep("=", "acceptance criteria")
        for k in sorted(ACCEPTANCE):
            terminalreporter.write_line(ACCEPTANCE[k])
