"""Render a small random scene and check its analytic gradients.

Forty Gaussians sit in front of the camera.  We render them once at the
identity pose to get a target, nudge the camera a few centimeters, and ask
the rasterizer for the loss and its gradient with respect to the pose and
every Gaussian parameter.  An independent finite-difference oracle then
confirms each partial derivative.
"""
import numpy as np

from cbknn_slam.gaussian_map import GaussianMap
from cbknn_slam.geometry import PinholeCamera, Pose, RgbdFrame
from cbknn_slam.gradcheck import check_gradients
from cbknn_slam.rasterizer import LossWeights, render, render_with_gradients

rng = np.random.default_rng(0)
n = 40
gmap = GaussianMap(np.c_[rng.uniform(-0.8, 0.8, (n, 2)), rng.uniform(2, 4, n)],
                   rng.uniform(0.85, 0.99, n), rng.uniform(0.35, 0.5, n), rng.uniform(0, 1, (n, 3)))
cam = PinholeCamera(60, 60, 31.5, 31.5, 64, 64)

target = render(gmap, Pose.identity(), cam)
print(f"coverage: {np.mean(target.silhouette > 0.99):.0%} of pixels above the 0.99 gate")

weights = LossWeights(RgbdFrame(target.color, target.depth))
moved = Pose.from_rotvec([0.0, 0.01, 0.0], [0.03, 0.0, 0.0])
_, loss, grads = render_with_gradients(gmap, moved, cam, weights)
print(f"loss at the moved pose: {loss:.3f}")
print("pose gradient (v, w):", np.round(grads.pose, 3))

report = check_gradients(gmap, moved, cam, weights)
print(f"{report.n_checked} partials checked, worst relative error {report.max_rel_error:.1e}, ok={report.ok}")
