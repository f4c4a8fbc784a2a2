"""Tracking-offset and 3D box heads operating on tokens and refined affinities."""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import numerics as nx
from .affinity import AffinityMatrix
from .encoder import FEATURE_DIM, TokenSet
from .numerics import Tensor
from .scans import PointCloud, wrap_angle

BOX_OUTPUTS = 9  # center residual (3), log size (3), sin/cos yaw (2), confidence logit (1)


@dataclass(frozen=True)
class Box3D:
    center: np.ndarray
    size: np.ndarray
    yaw: float

    def __post_init__(self):
        object.__setattr__(self, "center", np.asarray(self.center, dtype=np.float64))
        size = np.asarray(self.size, dtype=np.float64)
        if np.any(size <= 0):
            raise ValueError(f"box size must be positive, got {size}")
        object.__setattr__(self, "size", size)
        object.__setattr__(self, "yaw", wrap_angle(float(self.yaw)))


@dataclass
class Detection:
    box: Box3D
    embedding: np.ndarray
    confidence: float
    token: int = -1


@dataclass
class OffsetField:
    displacements: np.ndarray  # (N, 3), points at t -> t-1
    token_offsets: Tensor | None = None  # (M, 3), differentiable
    frame: int = 0
    skipped: bool = False
    token_index: np.ndarray | None = None  # nearest token per point, -1 for background
    points: np.ndarray | None = None  # the cloud at t the field is defined on

    def at(self, xyz, points: np.ndarray) -> np.ndarray:
        """Offset of the cloud point nearest to ``xyz``."""
        if len(points) == 0:
            return np.zeros(3)
        i = int(np.argmin(np.sum((points - np.asarray(xyz)) ** 2, axis=1)))
        return self.displacements[i]


@dataclass
class HeadConfig:
    hidden: int = 64
    r_bg: float = 2.0
    conf_threshold: float = 0.5
    d_nms: float = 1.0


def init_head_params(cfg: HeadConfig, rng: np.random.Generator) -> dict[str, np.ndarray]:
    d, h = FEATURE_DIM, cfg.hidden
    return {
        "off.w": np.zeros((d, 3)),
        "det.w1": rng.normal(0.0, np.sqrt(1.0 / d), (d, h)),
        "det.b1": np.zeros((1, h)),
        "det.w2": rng.normal(0.0, 0.1 / np.sqrt(h), (h, BOX_OUTPUTS)),
        "det.b2": np.array([[0, 0, 0, 0, 0, 0, 0, 1, 0]], dtype=np.float64),
    }


def token_offsets(tokens_t: TokenSet, tokens_tm1: TokenSet, a_hat, params: dict) -> Tensor:
    """(M, 3) displacement from each token at t to its soft counterpart at t-1."""
    a = a_hat.values if isinstance(a_hat, AffinityMatrix) else nx.as_tensor(a_hat)
    m = len(tokens_t)
    attn = nx.softmax_rows(a)[:m, : len(tokens_tm1)]
    target = attn @ Tensor(tokens_tm1.positions)
    residual = tokens_t.features @ nx.as_tensor(params["off.w"])
    return target - Tensor(tokens_t.positions) + residual


def scatter_to_points(
    offsets: np.ndarray, positions: np.ndarray, points: np.ndarray, r_bg: float
) -> tuple[np.ndarray, np.ndarray]:
    """Give each point the offset of its nearest token, zero beyond ``r_bg``."""
    if len(points) == 0:
        return np.zeros((0, 3)), np.zeros(0, dtype=int)
    d2 = np.sum((points[:, None, :] - positions[None, :, :]) ** 2, axis=2)
    nearest = np.argmin(d2, axis=1)
    far = d2[np.arange(len(points)), nearest] > r_bg * r_bg
    field_ = offsets[nearest].copy()
    field_[far] = 0.0
    nearest = np.where(far, -1, nearest)
    return field_, nearest


def predict_offsets(
    tokens_t: TokenSet,
    tokens_tm1: TokenSet,
    a_hat,
    params: dict,
    cloud_t: PointCloud,
    r_bg: float = 2.0,
) -> OffsetField:
    if tokens_t.empty or tokens_tm1.empty or len(tokens_t) == 0 or len(tokens_tm1) == 0:
        return OffsetField(
            np.zeros((len(cloud_t), 3)), None, cloud_t.frame, True, None, cloud_t.points
        )
    off = token_offsets(tokens_t, tokens_tm1, a_hat, params)
    disp, nearest = scatter_to_points(off.value, tokens_t.positions, cloud_t.points, r_bg)
    return OffsetField(disp, off, cloud_t.frame, False, nearest, cloud_t.points)


@dataclass
class BoxRegression:
    """Differentiable per-token box outputs."""

    center: Tensor  # (M, 3) absolute
    log_size: Tensor  # (M, 3)
    size: Tensor  # (M, 3) meters
    sincos: Tensor  # (M, 2)
    logit: Tensor  # (M, 1)


def box_head(tokens: TokenSet, params: dict) -> BoxRegression:
    p = {k: nx.as_tensor(params[k]) for k in ("det.w1", "det.b1", "det.w2", "det.b2")}
    hidden = nx.tanh(tokens.features @ p["det.w1"] + p["det.b1"])
    out = hidden @ p["det.w2"] + p["det.b2"]
    center = Tensor(tokens.positions) + out[:, 0:3]
    log_size = out[:, 3:6]
    return BoxRegression(center, log_size, nx.exp(log_size), out[:, 6:8], out[:, 8:9])


def decode_yaw(sin_v: float, cos_v: float) -> float:
    return wrap_angle(math.atan2(sin_v, cos_v))


def yaw_targets(yaw: float) -> np.ndarray:
    return np.array([math.sin(yaw), math.cos(yaw)])


def merge_detections(dets: list[Detection], d_nms: float) -> list[Detection]:
    """Keep the most confident detection among any whose centers are closer than ``d_nms``."""
    order = sorted(range(len(dets)), key=lambda i: (-dets[i].confidence, i))
    kept: list[Detection] = []
    for i in order:
        c = dets[i].box.center
        if all(np.linalg.norm(c - k.box.center) >= d_nms for k in kept):
            kept.append(dets[i])
    return kept


def predict_boxes(
    tokens: TokenSet,
    params: dict,
    conf_threshold: float = 0.5,
    d_nms: float = 1.0,
) -> list[Detection]:
    if tokens.empty or len(tokens) == 0:
        return []
    reg = box_head(tokens, params)
    centers = reg.center.value
    sizes = reg.size.value
    sincos = reg.sincos.value
    conf = 1.0 / (1.0 + np.exp(-reg.logit.value[:, 0]))
    feats = tokens.features.value
    dets = []
    seen = set()
    for i in range(len(tokens)):
        src = int(tokens.source_index[i])
        if conf[i] < conf_threshold or src in seen:  # padded tokens repeat a source point
            continue
        seen.add(src)
        box = Box3D(centers[i], sizes[i], decode_yaw(sincos[i, 0], sincos[i, 1]))
        dets.append(Detection(box, feats[i].copy(), float(conf[i]), i))
    return merge_detections(dets, d_nms)


def format_detection_line(frame: int, det: Detection) -> str:
    c, s = det.box.center, det.box.size
    return (
        f"{frame} {det.confidence:.6f} {c[0]:.6f} {c[1]:.6f} {c[2]:.6f} "
        f"{s[0]:.6f} {s[1]:.6f} {s[2]:.6f} {det.box.yaw:.6f}"
    )


def write_detections(path, frames: list[tuple[int, list[Detection]]]) -> None:
    with open(path, "w") as fh:
        for frame, dets in frames:
            for d in dets:
                fh.write(format_detection_line(frame, d) + "\n")


def read_detections(path) -> dict[int, list[tuple[float, Box3D]]]:
    out: dict[int, list[tuple[float, Box3D]]] = {}
    with open(path) as fh:
        for line in fh:
            parts = line.split()
            if not parts:
                continue
            frame, conf = int(parts[0]), float(parts[1])
            v = [float(x) for x in parts[2:9]]
            out.setdefault(frame, []).append((conf, Box3D(v[0:3], v[3:6], v[6])))
    return out
