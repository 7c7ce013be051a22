"""RGB-D SLAM loop: initialization, tracking, densification, keyframes, mapping.

Frames are tracked against the current map with the map frozen.  Every
n-th frame becomes a keyframe: its tracking, and the mapping that follows
it, render through a transient CB-KNN correction plan.  Only
:func:`initialize`, :func:`densify` and :func:`map_update` write the map.
"""
from __future__ import annotations

import dataclasses
import hashlib
import logging
from dataclasses import dataclass, field

import numpy as np

from .cbknn import SmoothingConfig, build_plan, motion_gamma, smooth_point_cloud
from .errors import EmptyFrame, NonFinite, TrackingDiverged, TransienceViolation
from .gaussian_map import GaussianMap
from .geometry import PinholeCamera, Pose, RgbdFrame, backproject_depth, predict_pose
from .optim import Adam
from .rasterizer import LossWeights, render, render_with_gradients

log = logging.getLogger(__name__)

OPACITY_FLOOR = 1e-6


@dataclass
class SlamConfig:
    """Every knob of the pipeline; flat ``key=value`` serializable via :meth:`to_flat`.

    Tracking multiplies its step size by ``track_lr_decay`` whenever the loss
    rises over the previous iterate and returns the lowest-loss pose seen.
    Mapping steps opacity in logit space and radius in log space, so
    ``lr_opacity`` and ``lr_radius`` act on those.
    """

    track_iters: int = 40
    map_iters: int = 60
    init_iters: int = 60
    color_weight: float = 0.6
    silhouette_threshold: float = 0.99
    ssim_weight: float = 0.2
    lr_rotation: float = 2e-3
    lr_translation: float = 4e-3
    lr_mu: float = 1e-4
    lr_color: float = 2.5e-3
    lr_opacity: float = 5e-2
    lr_radius: float = 1e-3
    track_lr_decay: float = 0.8
    track_pivot: bool = True
    diverge_factor: float = 2.0
    keyframe_every: int = 5
    window_size: int = 10
    point_stride: int = 4
    pixel_stride: int = 1
    densify_lambda: float = 50.0
    densify_silhouette: float = 0.5
    init_opacity: float = 0.5
    min_opacity: float = 0.005
    max_radius: float = 0.5
    use_cbknn: bool = True
    full_differentiation: bool = False
    workers: int = 1
    cbknn: SmoothingConfig = field(default_factory=SmoothingConfig)

    def __post_init__(self):
        if self.keyframe_every < 1:
            raise ValueError("keyframe_every must be at least 1")
        if self.window_size < 2:
            raise ValueError("window_size must be at least 2")
        if min(self.track_iters, self.map_iters, self.init_iters) < 0:
            raise ValueError("iteration counts must be non-negative")
        if self.pixel_stride < 1 or self.point_stride < 1:
            raise ValueError("strides must be at least 1")

    def to_flat(self) -> dict:
        out = {}
        for f in dataclasses.fields(self):
            v = getattr(self, f.name)
            if isinstance(v, SmoothingConfig):
                for g in dataclasses.fields(v):
                    out[f"cbknn.{g.name}"] = getattr(v, g.name)
            else:
                out[f.name] = v
        return out

    @classmethod
    def from_flat(cls, values: dict) -> "SlamConfig":
        """Build from string or typed values; unknown keys raise ``KeyError``."""
        top = {f.name: f for f in dataclasses.fields(cls)}
        sub = {f.name: f for f in dataclasses.fields(SmoothingConfig)}
        defaults_top, defaults_sub = cls(), SmoothingConfig()
        kw, ckw = {}, {}
        for key, raw in values.items():
            if key.startswith("cbknn."):
                name = key[len("cbknn."):]
                if name not in sub:
                    raise KeyError(key)
                ckw[name] = _coerce(raw, getattr(defaults_sub, name), sub[name].type)
            else:
                if key not in top or key == "cbknn":
                    raise KeyError(key)
                kw[key] = _coerce(raw, getattr(defaults_top, key), top[key].type)
        return cls(**kw, cbknn=SmoothingConfig(**ckw))

    def replace(self, **changes) -> "SlamConfig":
        return dataclasses.replace(self, **changes)


def _coerce(raw, default, annotation):
    if not isinstance(raw, str):
        return raw
    text = raw.strip()
    if "None" in str(annotation) and text.lower() in ("", "none"):
        return None
    if isinstance(default, bool):
        if text.lower() in ("1", "true", "yes", "on"):
            return True
        if text.lower() in ("0", "false", "no", "off"):
            return False
        raise ValueError(f"not a boolean: {raw!r}")
    if isinstance(default, int) or "int" in str(annotation):
        return int(text)
    if isinstance(default, float):
        return float(text)
    return text


@dataclass(eq=False)
class Keyframe:
    index: int
    pose: Pose
    frame: RgbdFrame
    points: np.ndarray  # subsampled world points from the stored depth


@dataclass
class FrameDiagnostics:
    index: int
    loss: float
    iterations: int
    densified: int
    keyframe: bool
    k_used: float | None = None
    diverged: bool = False

    CSV_COLUMNS = ("index", "loss", "iterations", "densified", "keyframe", "k_used", "diverged")

    def row(self) -> list:
        k = "" if self.k_used is None else f"{self.k_used:.4g}"
        return [self.index, f"{self.loss:.10g}", self.iterations, self.densified,
                int(self.keyframe), k, int(self.diverged)]


@dataclass(eq=False)
class SlamState:
    gmap: GaussianMap
    cam: PinholeCamera
    cfg: SlamConfig
    poses: list = field(default_factory=list)
    keyframes: list = field(default_factory=list)
    diagnostics: list = field(default_factory=list)
    track_curves: dict = field(default_factory=dict)


def _map_lr(cfg: SlamConfig) -> dict:
    return {"mu": cfg.lr_mu, "opacity": cfg.lr_opacity, "radius": cfg.lr_radius, "color": cfg.lr_color}


def _new_gaussians(frame: RgbdFrame, pose: Pose, cam: PinholeCamera, cfg: SlamConfig, mask=None):
    points, rows, cols = backproject_depth(frame.depth, pose, cam, cfg.pixel_stride, mask)
    radius = cfg.pixel_stride * frame.depth[rows, cols] / cam.fx
    return points, radius, frame.color[rows, cols]


def _mapping_weights(frame: RgbdFrame, cfg: SlamConfig) -> LossWeights:
    return LossWeights(frame, color_weight=cfg.color_weight, silhouette_threshold=None,
                       reduction="mean", ssim_weight=cfg.ssim_weight)


def _tracking_weights(frame: RgbdFrame, cfg: SlamConfig) -> LossWeights:
    return LossWeights(frame, color_weight=cfg.color_weight,
                       silhouette_threshold=cfg.silhouette_threshold, reduction="sum")


def _logit(p: np.ndarray) -> np.ndarray:
    p = np.clip(p, OPACITY_FLOOR, 1.0 - OPACITY_FLOOR)
    return np.log(p / (1.0 - p))


def _optimize_map(gmap: GaussianMap, views, cam: PinholeCamera, cfg: SlamConfig, iters: int,
                  plans: bool) -> None:
    """``iters`` Adam steps on all map parameters over ``views`` = [(pose, frame, gamma)].

    Opacity is stepped in logit space and radius in log space, so the
    learning rates are relative and the parameters stay in range.
    """
    if iters <= 0 or not len(gmap):
        return
    opt = Adam(_map_lr(cfg))
    logit = _logit(gmap.opacity)
    log_r = np.log(gmap.radius)
    gmap.opacity[:] = 1.0 / (1.0 + np.exp(-logit))
    for _ in range(iters):
        total = None
        for pose, frame, gamma in views:
            plan = build_plan(gmap, pose, cam, cfg.cbknn, gamma) if plans else None
            _, _, g = render_with_gradients(gmap, pose, cam, _mapping_weights(frame, cfg),
                                            correction=plan, want_pose=False, workers=cfg.workers,
                                            through_correction=cfg.full_differentiation)
            if total is None:
                total = g
            else:
                total += g
        op = gmap.opacity
        step = opt.step({"mu": total.mu, "opacity": total.opacity * op * (1.0 - op),
                         "radius": total.radius * gmap.radius, "color": total.color})
        gmap.mu += step["mu"]
        logit += step["opacity"]
        log_r += step["radius"]
        gmap.opacity[:] = 1.0 / (1.0 + np.exp(-logit))
        gmap.radius[:] = np.exp(log_r)
        gmap.color += step["color"]
        gmap.clamp()


def initialize(first: RgbdFrame, cam: PinholeCamera, cfg: SlamConfig | None = None,
               pose: Pose | None = None) -> SlamState:
    """Seed a map from the first frame and fit it at ``pose`` (identity by default)."""
    cfg = cfg or SlamConfig()
    pose = pose or Pose.identity()
    if first.shape != cam.shape:
        raise ValueError(f"frame {first.shape} does not match camera {cam.shape}")
    points, radius, color = _new_gaussians(first, pose, cam, cfg)
    if not len(points):
        raise EmptyFrame("first frame has no valid depth")
    gmap = GaussianMap()
    gmap.append(points, cfg.init_opacity, radius, color, frame=0)
    _optimize_map(gmap, [(pose, first, 0.0)], cam, cfg, cfg.init_iters, plans=False)
    state = SlamState(gmap, cam, cfg, poses=[pose])
    state.keyframes.append(_keyframe(0, pose, first, cam, cfg))
    return state


def _track(state: SlamState, frame: RgbdFrame, init: Pose, keyframe: bool, gamma: float = 0.0,
           index: int | None = None):
    cfg, cam, gmap = state.cfg, state.cam, state.gmap
    if not len(gmap):
        raise EmptyFrame("cannot track against an empty map")
    weights = _tracking_weights(frame, cfg)
    lr = np.r_[np.full(3, cfg.lr_translation), np.full(3, cfg.lr_rotation)]
    opt = Adam({"pose": lr})
    pose = init
    curve, ks = [], []

    def loss_and_grad(p):
        plan = build_plan(gmap, p, cam, cfg.cbknn, gamma) if keyframe else None
        if plan is not None:
            ks.append(float(plan.k_used.mean()))
        return render_with_gradients(gmap, p, cam, weights, correction=plan, workers=cfg.workers,
                                     through_correction=cfg.full_differentiation)[1:]

    # Steps are taken in a tangent basis centred on a point at the median
    # scene depth: rotations then orbit the scene instead of sweeping the
    # image sideways, which decouples them from translations.
    pivot = np.zeros(3)
    if cfg.track_pivot and np.any(frame.depth > 0):
        pivot[2] = float(np.median(frame.depth[frame.depth > 0]))

    best_loss, best_pose = np.inf, init
    initial = None
    scale = 1.0
    for it in range(cfg.track_iters + 1):
        try:
            loss, g = loss_and_grad(pose)
        except NonFinite:
            loss, g = np.inf, None
        curve.append(loss)
        if initial is None:
            initial = loss
        elif loss > curve[-2]:
            scale *= cfg.track_lr_decay
        if loss < best_loss:
            best_loss, best_pose = loss, pose
        if it == cfg.track_iters or g is None:
            break
        gv, gw = g.pose[:3], g.pose[3:]
        step = opt.step({"pose": np.r_[gv, gw - np.cross(pivot, gv)]},
                        scale=scale)["pose"]
        v, w = step[:3], step[3:]
        pose = pose.retract(np.r_[v + np.cross(pivot, w), w])
    if index is not None:
        state.track_curves[index] = curve
    final = curve[-1]
    if not np.isfinite(final) or final > cfg.diverge_factor * max(initial, 1e-12):
        raise TrackingDiverged(f"tracking loss rose from {initial:.4g} to {final:.4g}",
                               pose=init, initial_loss=initial, final_loss=final)
    return best_pose, best_loss, len(curve) - 1, (float(np.mean(ks)) if ks else None)


def _predicted(state: SlamState) -> Pose:
    if len(state.poses) >= 2:
        return predict_pose(state.poses[-2], state.poses[-1])
    return state.poses[-1]


def track(state: SlamState, frame: RgbdFrame, init: Pose | None = None) -> Pose:
    """Plain tracking: pose-only optimization of the masked loss from the motion prediction."""
    return _track(state, frame, init or _predicted(state), keyframe=False)[0]


def _gamma(state: SlamState, pose: Pose) -> float:
    if not state.keyframes:
        return 0.0
    return motion_gamma(state.keyframes[-1].pose, pose, state.cfg.cbknn)


def track_keyframe(state: SlamState, frame: RgbdFrame, init: Pose | None = None) -> Pose:
    """Tracking through the CB-KNN corrected rendering; identical optimizer settings."""
    init = init or _predicted(state)
    return _track(state, frame, init, keyframe=True, gamma=_gamma(state, init))[0]


def densify_mask(rendered, frame: RgbdFrame, lam: float = 50.0, silhouette: float = 0.5) -> np.ndarray:
    """Pixels needing new Gaussians: poorly covered, or true surface in front of the render."""
    valid = frame.depth > 0
    err = np.abs(rendered.depth - frame.depth)
    mde = float(np.median(err[valid])) if valid.any() else 0.0
    front = (frame.depth < rendered.depth) & (err > lam * mde)
    return valid & ((rendered.silhouette < silhouette) | front)


def densify(state: SlamState, frame: RgbdFrame, pose: Pose, index: int = 0) -> int:
    cfg = state.cfg
    rendered = render(state.gmap, pose, state.cam, workers=cfg.workers)
    mask = densify_mask(rendered, frame, cfg.densify_lambda, cfg.densify_silhouette)
    points, radius, color = _new_gaussians(frame, pose, state.cam, cfg, mask)
    if len(points):
        state.gmap.append(points, cfg.init_opacity, radius, color, frame=index)
    return len(points)


def _keyframe(index: int, pose: Pose, frame: RgbdFrame, cam: PinholeCamera, cfg: SlamConfig) -> Keyframe:
    points, _, _ = backproject_depth(frame.depth, pose, cam, cfg.point_stride)
    return Keyframe(index, pose, frame, points)


def frame_points(frame: RgbdFrame, pose: Pose, cam: PinholeCamera, cfg: SlamConfig) -> np.ndarray:
    """Subsampled back-projected points, smoothed toward their k nearest neighbors."""
    points, rows, cols = backproject_depth(frame.depth, pose, cam, cfg.point_stride)
    if not cfg.use_cbknn or not len(points):
        return points
    step = cfg.cbknn.alpha * frame.depth[rows, cols] / cam.fx
    return smooth_point_cloud(points, cfg.cbknn.k0, step)


def overlap(kf_pose: Pose, points: np.ndarray, cam: PinholeCamera) -> float:
    """Fraction of ``points`` inside the camera frustum at ``kf_pose``."""
    if not len(points):
        return 0.0
    pc = kf_pose.to_camera(points)
    z = pc[:, 2]
    front = z > cam.near
    zs = np.where(front, z, 1.0)
    u = cam.fx * pc[:, 0] / zs + cam.cx
    v = cam.fy * pc[:, 1] / zs + cam.cy
    inside = front & (u >= 0) & (u <= cam.width - 1) & (v >= 0) & (v <= cam.height - 1)
    return float(inside.mean())


def select_keyframes(state: SlamState, index: int, pose: Pose, frame: RgbdFrame) -> list[Keyframe]:
    """Current frame, the latest stored keyframe, and the best-overlapping others."""
    cfg = state.cfg
    current = _keyframe(index, pose, frame, state.cam, cfg)
    previous = [kf for kf in state.keyframes if kf.index != index]
    if not previous:
        return [current]
    latest = previous[-1]
    pts = frame_points(frame, pose, state.cam, cfg)
    scored = [(overlap(kf.pose, pts, state.cam), -kf.index, kf) for kf in previous[:-1]]
    scored.sort(key=lambda s: (-s[0], s[1]))
    return [current, latest] + [kf for _, _, kf in scored[: cfg.window_size - 2]]


def map_update(state: SlamState, window: list[Keyframe], iters: int | None = None) -> int:
    """Optimize the map over the window, then prune and clamp; returns the number pruned."""
    cfg = state.cfg
    iters = cfg.map_iters if iters is None else iters
    views = []
    for i, kf in enumerate(window):
        ref = window[1].pose if len(window) > 1 and i == 0 else kf.pose
        views.append((kf.pose, kf.frame, motion_gamma(ref, kf.pose, cfg.cbknn) if i == 0 else 0.0))
    _optimize_map(state.gmap, views, state.cam, cfg, iters, plans=cfg.use_cbknn)
    removed = state.gmap.prune(cfg.min_opacity, cfg.max_radius)
    state.gmap.clamp()
    return removed


def map_digest(gmap: GaussianMap) -> str:
    """SHA-256 of the serialized map."""
    from .dataio import map_to_bytes

    return hashlib.sha256(map_to_bytes(gmap)).hexdigest()


@dataclass(eq=False)
class SlamResult:
    poses: list
    gmap: GaussianMap
    diagnostics: list
    state: SlamState


def run(frames, cam: PinholeCamera, cfg: SlamConfig | None = None, initial_map: GaussianMap | None = None,
        initial_pose: Pose | None = None, on_frame=None, check_transience: bool = False) -> SlamResult:
    """Process a frame sequence end to end.

    ``initial_map`` skips map seeding (its copy is refined instead), e.g. to
    study tracking against a known or deliberately corrupted scene.
    ``on_frame(index, state)`` is called after every frame.  With
    ``check_transience`` the serialized map is compared before and after
    every corrected keyframe tracking, raising :class:`TransienceViolation`
    on any difference.
    """
    cfg = cfg or SlamConfig()
    frames = list(frames)
    if not frames:
        raise ValueError("need at least one frame")
    pose0 = initial_pose or Pose.identity()
    if initial_map is None:
        state = initialize(frames[0], cam, cfg, pose0)
    else:
        state = SlamState(initial_map.copy(), cam, cfg, poses=[pose0])
        state.keyframes.append(_keyframe(0, pose0, frames[0], cam, cfg))
        _optimize_map(state.gmap, [(pose0, frames[0], 0.0)], cam, cfg, cfg.init_iters, plans=False)
    state.diagnostics.append(FrameDiagnostics(0, float("nan"), 0, len(state.gmap), True))
    if on_frame:
        on_frame(0, state)
    for t in range(1, len(frames)):
        frame = frames[t]
        is_kf = t % cfg.keyframe_every == 0
        use_plan = is_kf and cfg.use_cbknn
        init = _predicted(state)
        gamma = _gamma(state, init) if use_plan else 0.0
        diverged = False
        before = map_digest(state.gmap) if check_transience and use_plan else None
        try:
            pose, loss, iters, k_used = _track(state, frame, init, use_plan, gamma, index=t)
        except TrackingDiverged as exc:
            log.warning("frame %d: %s; keeping the predicted pose", t, exc)
            pose, loss, iters, k_used, diverged = exc.pose, exc.final_loss, cfg.track_iters, None, True
        if before is not None and map_digest(state.gmap) != before:
            raise TransienceViolation(f"frame {t}: corrected tracking modified the map")
        state.poses.append(pose)
        added = densify(state, frame, pose, index=t)
        if is_kf:
            window = select_keyframes(state, t, pose, frame)
            state.keyframes.append(window[0])
            map_update(state, window)
        state.diagnostics.append(FrameDiagnostics(t, float(loss), iters, added, is_kf, k_used, diverged))
        if on_frame:
            on_frame(t, state)
    return SlamResult(state.poses, state.gmap, state.diagnostics, state)
