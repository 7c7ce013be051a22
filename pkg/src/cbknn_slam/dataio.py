"""Dataset ingestion, synthetic scenes, and on-disk formats.

Formats:

* TUM RGB-D folders: ``rgb.txt`` / ``depth.txt`` index files (``timestamp
  path`` lines, ``#`` comments), 8-bit color PNGs, 16-bit depth PNGs in
  units of 1/5000 m, optional ``groundtruth.txt``.
* Trajectories: TUM text, one ``timestamp tx ty tz qx qy qz qw`` line per pose.
* Maps: ``CBKNNMAP`` magic, a version byte, ``next_id`` and count as
  little-endian int64, then one packed little-endian record per Gaussian.
* Configs: flat ``key = value`` text, ``#`` comments.  A ``camera.txt`` in
  this format next to the index files overrides the default intrinsics.

Synthetic scenes draw every random quantity from one ``numpy`` PCG64
generator seeded by the scene spec, so a seed fully determines the scene,
the trajectory, the frames and the corruption on every platform.
"""
from __future__ import annotations

import math
import os
import tempfile
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np
from PIL import Image
from scipy.spatial.transform import Rotation, Slerp

from .errors import CorruptFile, MissingIndexFile, NoAssociations, VersionMismatch
from .gaussian_map import GaussianMap
from .geometry import PinholeCamera, Pose, RgbdFrame
from .metrics import Trajectory
from .reference import render_reference

TUM_DEPTH_SCALE = 5000.0
ASSOCIATION_TOLERANCE = 0.02
TUM_FR1_CAMERA = PinholeCamera(517.3, 516.5, 318.6, 255.3, 640, 480)

CAMERA_FILE = "camera.txt"

MAP_MAGIC = b"CBKNNMAP"
MAP_VERSION = 1
_RECORD = np.dtype([("id", "<i8"), ("created", "<i8"), ("mu", "<f8", 3), ("opacity", "<f8"),
                    ("radius", "<f8"), ("color", "<f8", 3)])
_HEADER = len(MAP_MAGIC) + 1 + 16


# ----------------------------------------------------------------------------- atomic writes

def atomic_write(path, data: bytes) -> None:
    """Write via a temporary file in the same directory, then rename over ``path``."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


# ----------------------------------------------------------------------------- sequences

@dataclass(eq=False)
class FrameDescriptor:
    timestamp: float
    color_path: Path | None = None
    depth_path: Path | None = None
    frame: RgbdFrame | None = None


@dataclass(eq=False)
class SequenceSource:
    """Camera, ordered frame descriptors and an optional ground-truth trajectory."""

    cam: PinholeCamera
    descriptors: list
    groundtruth: Trajectory | None = None
    downscale: int = 1

    def __len__(self):
        return len(self.descriptors)

    def load(self, i: int) -> RgbdFrame:
        d = self.descriptors[i]
        if d.frame is not None:
            return d.frame
        color = read_color_png(d.color_path)
        depth = read_depth_png(d.depth_path, TUM_DEPTH_SCALE)
        frame = RgbdFrame(color, depth, d.timestamp)
        return downsample(frame, self.downscale) if self.downscale > 1 else frame

    def frames(self):
        """Frames in file order."""
        for i in range(len(self)):
            yield self.load(i)


def _read_index(path: Path):
    if not path.is_file():
        raise MissingIndexFile(f"missing index file {path}")
    rows = []
    for n, line in enumerate(path.read_text().splitlines(), 1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        parts = line.split()
        try:
            rows.append((float(parts[0]), parts[1]))
        except (ValueError, IndexError):
            raise CorruptFile(f"{path}:{n}: expected 'timestamp path'") from None
    return rows


def associate(a, b, tolerance: float = ASSOCIATION_TOLERANCE):
    """One-to-one nearest-timestamp pairs ``(i, j)`` within ``tolerance``; ``b`` must be sorted.

    Each ``a`` proposes its nearest ``b``; closer proposals win conflicts.
    """
    a, b = np.asarray(a), np.asarray(b)
    if not len(a) or not len(b):
        return []
    j = np.clip(np.searchsorted(b, a), 1, len(b) - 1) if len(b) > 1 else np.zeros(len(a), int)
    if len(b) > 1:
        j = np.where(np.abs(b[j - 1] - a) <= np.abs(b[j] - a), j - 1, j)
    pairs, used = [], set()
    for i in np.argsort(np.abs(b[j] - a), kind="stable"):
        if abs(b[j[i]] - a[i]) <= tolerance and j[i] not in used:
            used.add(int(j[i]))
            pairs.append((int(i), int(j[i])))
    return sorted(pairs)


def interpolate_poses(times, stamps, poses, tolerance: float = ASSOCIATION_TOLERANCE):
    """Poses at ``times``: SLERP/linear between bracketing samples; ``None`` when out of range."""
    stamps = np.asarray(stamps, dtype=float)
    out = []
    if not len(stamps):
        return [None] * len(times)
    trans = np.array([p.translation for p in poses])
    rots = Rotation.from_matrix(np.array([p.rotation for p in poses]))
    slerp = Slerp(stamps, rots) if len(stamps) > 1 else None
    for t in times:
        if t < stamps[0] - tolerance or t > stamps[-1] + tolerance:
            out.append(None)
            continue
        tc = min(max(t, stamps[0]), stamps[-1])
        if slerp is None:
            out.append(poses[0])
            continue
        k = int(np.clip(np.searchsorted(stamps, tc), 1, len(stamps) - 1))
        w = (tc - stamps[k - 1]) / (stamps[k] - stamps[k - 1])
        out.append(Pose(slerp([tc]).as_matrix()[0], (1 - w) * trans[k - 1] + w * trans[k]))
    return out


def load_tum(path, max_frames: int | None = None, stride: int = 1, cam: PinholeCamera | None = None,
             downscale: int = 1) -> SequenceSource:
    """Index a TUM RGB-D folder; frames are decoded lazily on :meth:`SequenceSource.load`."""
    root = Path(path)
    if stride < 1 or downscale < 1:
        raise ValueError("stride and downscale must be at least 1")
    rgb = _read_index(root / "rgb.txt")
    depth = _read_index(root / "depth.txt")
    pairs = associate([t for t, _ in rgb], [t for t, _ in depth], ASSOCIATION_TOLERANCE)
    if not pairs:
        raise NoAssociations(f"no color/depth pairs within {ASSOCIATION_TOLERANCE} s in {root}")
    pairs = pairs[::stride]
    if max_frames is not None:
        pairs = pairs[:max_frames]
    desc = [FrameDescriptor(rgb[i][0], root / rgb[i][1], root / depth[j][1]) for i, j in pairs]
    if cam is None:
        cam = load_camera(root / CAMERA_FILE) if (root / CAMERA_FILE).is_file() else TUM_FR1_CAMERA
    if downscale > 1:
        cam = cam.scaled(1.0 / downscale)
    gt = None
    gt_path = root / "groundtruth.txt"
    if gt_path.is_file():
        stamps, poses = read_tum_trajectory_raw(gt_path)
        interp = interpolate_poses([d.timestamp for d in desc], stamps, poses)
        keep = [k for k, p in enumerate(interp) if p is not None]
        if keep:
            gt = Trajectory(keep, [interp[k] for k in keep], [desc[k].timestamp for k in keep])
    return SequenceSource(cam, desc, gt, downscale)


def downsample(frame: RgbdFrame, factor: int) -> RgbdFrame:
    """Block-average color; depth averages only valid samples of each block."""
    h, w = frame.shape
    h2, w2 = h // factor, w // factor
    c = frame.color[: h2 * factor, : w2 * factor].reshape(h2, factor, w2, factor, 3).mean((1, 3))
    d = frame.depth[: h2 * factor, : w2 * factor].reshape(h2, factor, w2, factor)
    n = (d > 0).sum((1, 3))
    depth = np.where(n > 0, d.sum((1, 3)) / np.maximum(n, 1), 0.0)
    return RgbdFrame(c, depth, frame.timestamp)


# ----------------------------------------------------------------------------- PNG rasters

def read_color_png(path) -> np.ndarray:
    with Image.open(path) as im:
        return np.asarray(im.convert("RGB"), dtype=float) / 255.0


def read_depth_png(path, scale: float = TUM_DEPTH_SCALE) -> np.ndarray:
    with Image.open(path) as im:
        raw = np.asarray(im, dtype=np.uint16 if im.mode.startswith("I;16") else None)
    return raw.astype(float) / scale


def _png_bytes(img: Image.Image) -> bytes:
    import io

    buf = io.BytesIO()
    img.save(buf, format="PNG")
    return buf.getvalue()


def write_color_png(path, color: np.ndarray) -> None:
    rgb = np.clip(np.round(np.asarray(color) * 255.0), 0, 255).astype(np.uint8)
    atomic_write(path, _png_bytes(Image.fromarray(rgb, "RGB")))


def write_gray_png(path, values: np.ndarray) -> None:
    g = np.clip(np.round(np.asarray(values) * 255.0), 0, 255).astype(np.uint8)
    atomic_write(path, _png_bytes(Image.fromarray(g, "L")))


def depth_scale_for(depth: np.ndarray) -> float:
    """Largest integer scale that fits the deepest sample into 16 bits (TUM's 5000 at most)."""
    top = float(np.max(depth)) if np.size(depth) else 0.0
    if top <= 0:
        return TUM_DEPTH_SCALE
    return float(min(TUM_DEPTH_SCALE, math.floor(65535.0 / top)))


def write_depth_png(path, depth: np.ndarray, scale: float | None = None) -> float:
    """16-bit depth PNG plus a ``<name>.scale.txt`` sidecar; returns the scale used."""
    scale = depth_scale_for(depth) if scale is None else float(scale)
    raw = np.clip(np.round(np.asarray(depth) * scale), 0, 65535).astype(np.uint16)
    atomic_write(path, _png_bytes(Image.fromarray(raw)))
    atomic_write(Path(str(path) + ".scale.txt"), f"depth_scale={scale:g}\n".encode())
    return scale


def read_depth_sidecar(path) -> float:
    text = Path(str(path) + ".scale.txt").read_text()
    for line in text.splitlines():
        if line.startswith("depth_scale="):
            return float(line.split("=", 1)[1])
    raise CorruptFile(f"no depth_scale in sidecar of {path}")


# ----------------------------------------------------------------------------- trajectories

def format_tum_trajectory(timestamps, poses) -> str:
    lines = ["# timestamp tx ty tz qx qy qz qw"]
    for t, p in zip(timestamps, poses):
        vals = [t, *p.translation, *p.quaternion()]
        lines.append(" ".join(repr(float(v)) for v in vals))
    return "\n".join(lines) + "\n"


def save_trajectory(path, traj: Trajectory) -> None:
    atomic_write(path, format_tum_trajectory(traj.timestamps, traj.poses).encode())


def read_tum_trajectory_raw(path):
    stamps, poses = [], []
    for n, line in enumerate(Path(path).read_text().splitlines(), 1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        parts = line.replace(",", " ").split()
        if len(parts) != 8:
            raise CorruptFile(f"{path}:{n}: expected 8 fields, got {len(parts)}")
        try:
            v = [float(x) for x in parts]
        except ValueError:
            raise CorruptFile(f"{path}:{n}: non-numeric field") from None
        q = np.array(v[4:8])
        if not np.isfinite(v).all() or np.linalg.norm(q) < 1e-12:
            raise CorruptFile(f"{path}:{n}: invalid pose")
        stamps.append(v[0])
        poses.append(Pose.from_quaternion(v[1:4], q / np.linalg.norm(q)))
    return stamps, poses


def load_trajectory(path) -> Trajectory:
    """TUM text trajectory; frame indices are the line order."""
    stamps, poses = read_tum_trajectory_raw(path)
    return Trajectory(range(len(poses)), poses, stamps)


def match_by_timestamp(est: Trajectory, gt: Trajectory, tolerance: float = ASSOCIATION_TOLERANCE):
    """Restrict two trajectories to their timestamp-associated poses, re-indexed jointly."""
    pairs = associate(est.timestamps, gt.timestamps, tolerance)
    idx = list(range(len(pairs)))
    return (Trajectory(idx, [est.poses[i] for i, _ in pairs], [est.timestamps[i] for i, _ in pairs]),
            Trajectory(idx, [gt.poses[j] for _, j in pairs], [gt.timestamps[j] for _, j in pairs]))


# ----------------------------------------------------------------------------- maps

def map_to_bytes(gmap: GaussianMap) -> bytes:
    rec = np.zeros(len(gmap), dtype=_RECORD)
    rec["id"], rec["created"] = gmap.ids, gmap.created
    rec["mu"], rec["opacity"], rec["radius"], rec["color"] = gmap.mu, gmap.opacity, gmap.radius, gmap.color
    head = MAP_MAGIC + bytes([MAP_VERSION]) + np.array([gmap.next_id, len(gmap)], dtype="<i8").tobytes()
    return head + rec.tobytes()


def map_from_bytes(data: bytes) -> GaussianMap:
    if len(data) < _HEADER or data[: len(MAP_MAGIC)] != MAP_MAGIC:
        raise CorruptFile("not a map file (bad magic or truncated header)")
    version = data[len(MAP_MAGIC)]
    if version != MAP_VERSION:
        raise VersionMismatch(f"map version {version}, expected {MAP_VERSION}")
    next_id, count = np.frombuffer(data, dtype="<i8", count=2, offset=len(MAP_MAGIC) + 1)
    if count < 0 or len(data) != _HEADER + int(count) * _RECORD.itemsize:
        raise CorruptFile(f"map body is {len(data) - _HEADER} bytes, header promises {count} records")
    rec = np.frombuffer(data, dtype=_RECORD, count=int(count), offset=_HEADER)
    try:
        return GaussianMap(rec["mu"], rec["opacity"], rec["radius"], rec["color"],
                           rec["id"], rec["created"], int(next_id))
    except ValueError as exc:
        raise CorruptFile(str(exc)) from None


def save_map(path, gmap: GaussianMap) -> None:
    atomic_write(path, map_to_bytes(gmap))


def load_map(path) -> GaussianMap:
    return map_from_bytes(Path(path).read_bytes())


# ----------------------------------------------------------------------------- configs

def format_config(values: dict) -> str:
    return "".join(f"{k} = {'none' if v is None else v}\n" for k, v in values.items())


def parse_config(text: str) -> dict:
    out = {}
    for n, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise CorruptFile(f"config line {n}: expected key = value")
        k, v = line.split("=", 1)
        out[k.strip()] = v.strip()
    return out


def save_config(path, cfg) -> None:
    atomic_write(path, format_config(cfg.to_flat()).encode())


def load_config(path):
    from .slam import SlamConfig

    return SlamConfig.from_flat(parse_config(Path(path).read_text()))


_CAMERA_KEYS = ("fx", "fy", "cx", "cy", "width", "height", "near", "far")


def save_camera(path, cam: PinholeCamera) -> None:
    atomic_write(path, format_config({k: getattr(cam, k) for k in _CAMERA_KEYS}).encode())


def load_camera(path) -> PinholeCamera:
    values = parse_config(Path(path).read_text())
    try:
        kw = {k: (int if k in ("width", "height") else float)(v) for k, v in values.items()
              if k in _CAMERA_KEYS}
        return PinholeCamera(**kw)
    except (TypeError, ValueError) as exc:
        raise CorruptFile(f"{path}: {exc}") from None


# ----------------------------------------------------------------------------- synthetic scenes

@dataclass
class SyntheticSceneSpec:
    """A seeded scene: Gaussians on a surface, an orbiting camera, optional corruption.

    ``shape`` places the Gaussians on the faces of a randomly rotated cube
    ("box"), on a sphere ("sphere") or throughout a cube ("volume").  A
    sphere orbited about its center leaves rotation unobservable in depth,
    so "box" is the default.  Colors vary smoothly with position so
    neighboring Gaussians agree, as on real surfaces.  ``position_noise`` is
    in multiples of the mean radius.
    Depth is reported invalid (0) where the rendered coverage is below
    ``min_coverage``, like sensor dropout at object silhouettes.
    """

    n_gaussians: int = 400
    shape: str = "box"
    extent: float = 0.5
    radius_range: tuple = (0.07, 0.11)
    opacity_range: tuple = (0.9, 0.99)
    n_frames: int = 30
    orbit_radius: float = 2.2
    orbit_height: float = 0.3
    orbit_arc_deg: float = 30.0
    trajectory: str = "orbit"
    jitter_translation: float = 0.002
    jitter_rotation_deg: float = 0.1
    width: int = 48
    height: int = 48
    focal: float = 70.0
    min_coverage: float = 0.99
    noise_fraction: float = 0.0
    position_noise: float = 2.0
    color_noise: float = 0.2
    opacity_noise: float = 0.0
    frame_rate: float = 30.0
    seed: int = 0

    def camera(self) -> PinholeCamera:
        return PinholeCamera(self.focal, self.focal, (self.width - 1) / 2, (self.height - 1) / 2,
                             self.width, self.height)

    def to_flat(self) -> dict:
        return {k: (",".join(map(str, v)) if isinstance(v, tuple) else v) for k, v in asdict(self).items()}

    @classmethod
    def from_flat(cls, values: dict) -> "SyntheticSceneSpec":
        base = cls()
        kw = {}
        names = {f.name for f in fields(cls)}
        for k, raw in values.items():
            if k not in names:
                raise KeyError(k)
            default = getattr(base, k)
            if not isinstance(raw, str):
                kw[k] = tuple(raw) if isinstance(default, tuple) else raw
            elif isinstance(default, tuple):
                kw[k] = tuple(float(x) for x in raw.split(","))
            elif isinstance(default, bool):
                kw[k] = raw.lower() in ("1", "true", "yes")
            elif isinstance(default, int):
                kw[k] = int(raw)
            elif isinstance(default, float):
                kw[k] = float(raw)
            else:
                kw[k] = raw
        return cls(**kw)


@dataclass(eq=False)
class SyntheticScene:
    spec: SyntheticSceneSpec
    source: SequenceSource
    gt_map: GaussianMap
    trajectory: Trajectory
    corrupted_map: GaussianMap
    perturbed_ids: np.ndarray = field(default_factory=lambda: np.zeros(0, np.int64))

    @property
    def frames(self) -> list:
        return [d.frame for d in self.source.descriptors]


def _smooth_color(p: np.ndarray, phase: np.ndarray) -> np.ndarray:
    k = 2.0 * np.pi / 1.2
    return 0.5 + 0.4 * np.stack([np.sin(k * p[:, 0] + phase[0]) * np.cos(k * p[:, 1]),
                                 np.sin(k * p[:, 1] + phase[1]) * np.cos(k * p[:, 2]),
                                 np.sin(k * p[:, 2] + phase[2]) * np.cos(k * p[:, 0])], axis=1)


def _trajectory(spec: SyntheticSceneSpec, rng: np.random.Generator) -> list[Pose]:
    poses = []
    arc = math.radians(spec.orbit_arc_deg)
    for i in range(spec.n_frames):
        s = i / max(spec.n_frames - 1, 1)
        if spec.trajectory == "orbit":
            a = -arc / 2 + arc * s
            eye = np.array([spec.orbit_radius * math.sin(a), -spec.orbit_height,
                            -spec.orbit_radius * math.cos(a)])
        elif spec.trajectory == "line":
            span = spec.orbit_radius * arc
            eye = np.array([-span / 2 + span * s, -spec.orbit_height, -spec.orbit_radius])
        else:
            raise ValueError(f"unknown trajectory {spec.trajectory!r}")
        pose = Pose.look_at(eye, np.zeros(3))
        jt = rng.normal(0.0, spec.jitter_translation, 3)
        jr = rng.normal(0.0, math.radians(spec.jitter_rotation_deg), 3)
        poses.append(Pose(pose.rotation @ Rotation.from_rotvec(jr).as_matrix(), pose.translation + jt))
    return poses


def corrupt_map(gmap: GaussianMap, spec: SyntheticSceneSpec, rng: np.random.Generator):
    """Copy of ``gmap`` with exactly ``round(fraction * N)`` Gaussians perturbed."""
    out = gmap.copy()
    n = int(round(spec.noise_fraction * len(gmap)))
    if n == 0:
        return out, np.zeros(0, np.int64)
    rows = np.sort(rng.choice(len(gmap), size=n, replace=False))
    sigma = spec.position_noise * float(gmap.radius.mean())
    out.mu[rows] += rng.normal(0.0, sigma, (n, 3))
    out.color[rows] = np.clip(out.color[rows] + rng.normal(0.0, spec.color_noise, (n, 3)), 0.0, 1.0)
    if spec.opacity_noise:
        out.opacity[rows] = np.clip(out.opacity[rows] + rng.normal(0.0, spec.opacity_noise, n), 0.0, 1.0)
    return out, gmap.ids[rows].copy()


def generate_synthetic(spec: SyntheticSceneSpec) -> SyntheticScene:
    rng = np.random.Generator(np.random.PCG64(spec.seed))
    n = spec.n_gaussians
    if spec.shape == "sphere":
        d = rng.normal(size=(n, 3))
        mu = spec.extent * d / np.linalg.norm(d, axis=1, keepdims=True)
    elif spec.shape == "box":
        face = rng.integers(0, 6, n)
        uv = rng.uniform(-spec.extent, spec.extent, (n, 2))
        mu = np.empty((n, 3))
        axis = face // 2
        for a in range(3):
            rest = [b for b in range(3) if b != a]
            m = axis == a
            mu[m, a] = np.where(face[m] % 2, spec.extent, -spec.extent)
            mu[np.ix_(m, rest)] = uv[m]
        mu = mu @ Rotation.random(random_state=rng).as_matrix().T
    elif spec.shape == "volume":
        mu = rng.uniform(-spec.extent, spec.extent, (n, 3))
    else:
        raise ValueError(f"unknown scene shape {spec.shape!r}")
    phase = rng.uniform(0.0, 2.0 * np.pi, 3)
    gt = GaussianMap(mu=mu, opacity=rng.uniform(*spec.opacity_range, n),
                     radius=rng.uniform(*spec.radius_range, n), color=_smooth_color(mu, phase))
    poses = _trajectory(spec, rng)
    cam = spec.camera()
    times = [i / spec.frame_rate for i in range(spec.n_frames)]
    desc = []
    for t, pose in zip(times, poses):
        r = render_reference(gt, pose, cam)
        # mixed boundary pixels carry no depth, as with a real sensor
        depth = np.where(r.silhouette >= spec.min_coverage, r.depth, 0.0)
        desc.append(FrameDescriptor(t, frame=RgbdFrame(r.color, depth, t)))
    corrupted, perturbed = corrupt_map(gt, spec, rng)
    traj = Trajectory(range(spec.n_frames), poses, times)
    return SyntheticScene(spec, SequenceSource(cam, desc, traj), gt, traj, corrupted, perturbed)


def write_tum_sequence(root, scene: SyntheticScene) -> None:
    """Write ``scene`` as a TUM-style folder that :func:`load_tum` reads back.

    PNG storage quantizes color to 8 bits and depth to ``1/TUM_DEPTH_SCALE`` m.
    """
    root = Path(root)
    rgb, depth = ["# timestamp filename"], ["# timestamp filename"]
    for k, d in enumerate(scene.source.descriptors):
        name = f"{k:06d}.png"
        write_color_png(root / "rgb" / name, d.frame.color)
        raw = np.clip(np.round(d.frame.depth * TUM_DEPTH_SCALE), 0, 65535).astype(np.uint16)
        atomic_write(root / "depth" / name, _png_bytes(Image.fromarray(raw)))
        rgb.append(f"{d.timestamp!r} rgb/{name}")
        depth.append(f"{d.timestamp!r} depth/{name}")
    atomic_write(root / "rgb.txt", ("\n".join(rgb) + "\n").encode())
    atomic_write(root / "depth.txt", ("\n".join(depth) + "\n").encode())
    save_trajectory(root / "groundtruth.txt", scene.trajectory)
    save_camera(root / CAMERA_FILE, scene.source.cam)
