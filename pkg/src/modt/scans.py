"""Point-cloud scans: binary I/O, ground-truth sidecars, synthetic scenes, triplets."""
from __future__ import annotations

import math
import os
from dataclasses import dataclass, field

import numpy as np

from .numerics import InvalidInputError

RECORD = np.dtype("<f4")
RECORD_BYTES = 16
JITTER_SIGMAS = 3.0  # jitter vectors are truncated at this many standard deviations


class ScanFormatError(ValueError):
    """Malformed scan or ground-truth file."""


@dataclass(frozen=True)
class PointCloud:
    points: np.ndarray  # (N, 3) meters
    frame: int = 0

    def __post_init__(self):
        pts = np.asarray(self.points, dtype=np.float64).reshape(-1, 3)
        if not np.all(np.isfinite(pts)):
            raise InvalidInputError("point coordinates must be finite")
        pts.setflags(write=False)
        object.__setattr__(self, "points", pts)

    def __len__(self) -> int:
        return self.points.shape[0]


@dataclass(frozen=True)
class GroundTruthObject:
    track_id: int
    center: np.ndarray
    size: np.ndarray  # (w, l, h)
    yaw: float
    mask: np.ndarray | None = None  # bool per point of the frame's cloud

    def __post_init__(self):
        size = np.asarray(self.size, dtype=np.float64)
        if size.shape != (3,) or np.any(size <= 0):
            raise InvalidInputError(f"box size must be three positive values, got {size}")
        object.__setattr__(self, "center", np.asarray(self.center, dtype=np.float64))
        object.__setattr__(self, "size", size)
        object.__setattr__(self, "yaw", wrap_angle(float(self.yaw)))


@dataclass
class Frame:
    cloud: PointCloud
    objects: list[GroundTruthObject]


@dataclass
class SyntheticSequence:
    frames: list[Frame]
    seed: int | None = None

    def __len__(self) -> int:
        return len(self.frames)


@dataclass
class FrameTriplet:
    """Frames (t, t-1, t-2), newest first."""

    frames: tuple[Frame, Frame, Frame]

    @property
    def indices(self) -> tuple[int, int, int]:
        return tuple(f.cloud.frame for f in self.frames)


def wrap_angle(a: float) -> float:
    """Map an angle to [-pi, pi)."""
    return (a + math.pi) % (2.0 * math.pi) - math.pi


# ---------------------------------------------------------------- file formats


def load_scan(path: str | os.PathLike, frame: int = 0) -> PointCloud:
    """Read little-endian float32 (x, y, z, intensity) records; intensity is dropped."""
    raw = open(path, "rb").read()
    if len(raw) % RECORD_BYTES:
        whole = len(raw) - len(raw) % RECORD_BYTES
        raise ScanFormatError(f"{path}: truncated record at byte offset {whole}")
    data = np.frombuffer(raw, dtype=RECORD).reshape(-1, 4).astype(np.float64)
    bad = ~np.isfinite(data).all(axis=1)
    if bad.any():
        raise ScanFormatError(f"{path}: non-finite value in record {int(np.argmax(bad))}")
    return PointCloud(data[:, :3], frame)


def save_scan(path: str | os.PathLike, cloud: PointCloud, intensity=None) -> None:
    n = len(cloud)
    rec = np.zeros((n, 4), dtype=RECORD)
    rec[:, :3] = cloud.points
    if intensity is not None:
        rec[:, 3] = intensity
    with open(path, "wb") as fh:
        fh.write(rec.tobytes())


def format_gt_line(frame: int, obj: GroundTruthObject) -> str:
    c, s = obj.center, obj.size
    return (
        f"{frame} {obj.track_id} {c[0]:.6f} {c[1]:.6f} {c[2]:.6f} "
        f"{s[0]:.6f} {s[1]:.6f} {s[2]:.6f} {obj.yaw:.6f}"
    )


def save_ground_truth(path: str | os.PathLike, frames: list[Frame]) -> None:
    with open(path, "w") as fh:
        for fr in frames:
            for obj in fr.objects:
                fh.write(format_gt_line(fr.cloud.frame, obj) + "\n")


def load_ground_truth(path: str | os.PathLike) -> dict[int, list[GroundTruthObject]]:
    """Parse ``frame track_id cx cy cz w l h yaw`` lines, grouped by frame."""
    out: dict[int, list[GroundTruthObject]] = {}
    with open(path) as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip() or line.lstrip().startswith("#"):
                continue
            parts = line.split()
            if len(parts) != 9:
                raise ScanFormatError(f"{path}:{lineno}: expected 9 fields, got {len(parts)}")
            try:
                frame, tid = int(parts[0]), int(parts[1])
                vals = [float(p) for p in parts[2:]]
                obj = GroundTruthObject(tid, vals[0:3], vals[3:6], vals[6])
            except ValueError as exc:
                raise ScanFormatError(f"{path}:{lineno}: {exc}") from None
            if not np.all(np.isfinite(vals)):
                raise ScanFormatError(f"{path}:{lineno}: non-finite value")
            out.setdefault(frame, []).append(obj)
    return out


# ---------------------------------------------------------------- synthetic scenes


@dataclass
class SceneConfig:
    num_objects: int = 3
    num_frames: int = 10
    points_per_object: int = 24
    noise: float = 0.02
    clutter: int = 0
    extent: float = 12.0  # half-width of the square arena (m)
    speed_min: float = 0.0
    speed_max: float = 0.5  # m / frame
    perturb: float = 0.0  # bounded random velocity change per frame (m / frame)
    size_min: tuple = (0.6, 0.6, 1.2)
    size_max: tuple = (1.0, 1.0, 1.8)
    min_gap: float = 1.0  # clearance between initial boxes (m)
    velocities: list | None = None  # optional fixed (K, 3) per-frame velocities
    centers: list | None = None  # optional fixed (K, 3) initial centers
    max_attempts: int = 1000


def _box_points(rng, center, size, yaw, n, noise):
    local = (rng.random((n, 3)) - 0.5) * size
    c, s = math.cos(yaw), math.sin(yaw)
    rot = np.array([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]])
    pts = local @ rot.T + center
    if noise > 0:
        jitter = rng.normal(0.0, noise, pts.shape)
        norm = np.linalg.norm(jitter, axis=1, keepdims=True)
        cap = JITTER_SIGMAS * noise
        pts = pts + jitter * np.minimum(1.0, cap / np.maximum(norm, 1e-300))
    return pts


def point_in_box(points: np.ndarray, obj: GroundTruthObject, margin: float = 0.0) -> np.ndarray:
    rel = np.asarray(points, dtype=np.float64) - obj.center
    c, s = math.cos(obj.yaw), math.sin(obj.yaw)
    local_x = rel[:, 0] * c + rel[:, 1] * s
    local_y = -rel[:, 0] * s + rel[:, 1] * c
    half = obj.size / 2.0 + margin
    return (
        (np.abs(local_x) <= half[0]) & (np.abs(local_y) <= half[1]) & (np.abs(rel[:, 2]) <= half[2])
    )


def jitter_margin(noise: float) -> float:
    """Box inflation that contains every jittered point of an object."""
    return JITTER_SIGMAS * noise


def synth_scene(cfg: SceneConfig, seed: int) -> SyntheticSequence:
    """Constant-velocity boxes (with optional bounded perturbation) emitting jittered points.

    Points of each frame are ordered object by object, followed by clutter.
    """
    rng = np.random.default_rng(seed)
    k = cfg.num_objects
    lo, hi = np.array(cfg.size_min, float), np.array(cfg.size_max, float)
    sizes = lo + rng.random((k, 3)) * (hi - lo)
    yaws = rng.uniform(-math.pi, math.pi, k)
    if cfg.centers is not None:
        centers = np.asarray(cfg.centers, dtype=np.float64).reshape(k, 3)
    else:
        centers = np.zeros((k, 3))
        for i in range(k):
            for _ in range(cfg.max_attempts):
                cand = np.array([*rng.uniform(-cfg.extent, cfg.extent, 2), sizes[i, 2] / 2.0])
                reach = np.linalg.norm(sizes[i, :2]) / 2.0
                ok = all(
                    np.linalg.norm(cand[:2] - centers[j, :2])
                    > reach + np.linalg.norm(sizes[j, :2]) / 2.0 + cfg.min_gap
                    for j in range(i)
                )
                if ok:
                    centers[i] = cand
                    break
            else:
                raise RuntimeError(f"could not place object {i} after {cfg.max_attempts} attempts")
    if cfg.velocities is not None:
        vel = np.asarray(cfg.velocities, dtype=np.float64).reshape(k, 3)
    else:
        speed = rng.uniform(cfg.speed_min, cfg.speed_max, k)
        heading = rng.uniform(-math.pi, math.pi, k)
        vel = np.stack([speed * np.cos(heading), speed * np.sin(heading), np.zeros(k)], axis=1)

    frames = []
    pos = centers.copy()
    v = vel.copy()
    for f in range(cfg.num_frames):
        if f > 0 and cfg.perturb > 0:
            v = v + np.concatenate(
                [rng.uniform(-cfg.perturb, cfg.perturb, (k, 2)), np.zeros((k, 1))], axis=1
            )
            pos = pos + v
        elif f > 0:
            pos = centers + f * vel
        chunks, spans = [], []
        start = 0
        for i in range(k):
            pts = _box_points(rng, pos[i], sizes[i], yaws[i], cfg.points_per_object, cfg.noise)
            chunks.append(pts)
            spans.append((start, start + len(pts)))
            start += len(pts)
        if cfg.clutter:
            ext = cfg.extent + 2.0
            clutter = np.column_stack(
                [rng.uniform(-ext, ext, (cfg.clutter, 2)), rng.uniform(0.0, 0.3, cfg.clutter)]
            )
            chunks.append(clutter)
        pts = np.concatenate(chunks) if chunks else np.zeros((0, 3))
        objs = []
        for i in range(k):
            mask = np.zeros(len(pts), dtype=bool)
            mask[spans[i][0] : spans[i][1]] = True
            objs.append(GroundTruthObject(i, pos[i].copy(), sizes[i], yaws[i], mask))
        frames.append(Frame(PointCloud(pts, f), objs))
    return SyntheticSequence(frames, seed)


def window_triplets(seq) -> list[FrameTriplet]:
    frames = seq.frames if isinstance(seq, SyntheticSequence) else list(seq)
    if len(frames) < 3:
        raise InvalidInputError(f"need at least 3 frames, got {len(frames)}")
    return [FrameTriplet((frames[i + 2], frames[i + 1], frames[i])) for i in range(len(frames) - 2)]


# ---------------------------------------------------------------- directory layout


def scan_filename(frame: int) -> str:
    return f"{frame:06d}.bin"


def write_sequence(seq: SyntheticSequence, out_dir: str | os.PathLike) -> None:
    os.makedirs(out_dir, exist_ok=True)
    for fr in seq.frames:
        save_scan(os.path.join(out_dir, scan_filename(fr.cloud.frame)), fr.cloud)
    save_ground_truth(os.path.join(out_dir, "gt.txt"), seq.frames)


def read_sequence(scan_dir: str | os.PathLike, gt_path=None) -> SyntheticSequence:
    """Load ``*.bin`` scans (sorted by name) plus an optional ``gt.txt`` sidecar.

    Object membership masks are recovered from box containment.
    """
    names = sorted(n for n in os.listdir(scan_dir) if n.endswith(".bin"))
    if gt_path is None:
        cand = os.path.join(scan_dir, "gt.txt")
        gt_path = cand if os.path.exists(cand) else None
    gt = load_ground_truth(gt_path) if gt_path else {}
    frames = []
    for i, name in enumerate(names):
        stem = os.path.splitext(name)[0]
        frame = int(stem) if stem.isdigit() else i
        cloud = load_scan(os.path.join(scan_dir, name), frame)
        objs = [
            GroundTruthObject(o.track_id, o.center, o.size, o.yaw, point_in_box(cloud.points, o, 0.1))
            for o in gt.get(frame, [])
        ]
        frames.append(Frame(cloud, objs))
    return SyntheticSequence(frames)
