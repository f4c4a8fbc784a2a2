"""Point-cloud tokenizer: farthest-point sampling, local max-pooled features, token attention.

Each token carries 64 feature channels computed from neighbor coordinates
*relative to the token*, so features are translation invariant while the
token positions move with the cloud.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import numerics as nx
from .numerics import InvalidInputError, Tensor
from .scans import PointCloud

FEATURE_DIM = 64
LN_EPS = 1e-9


@dataclass
class TokenSet:
    features: Tensor  # (M, 64)
    positions: np.ndarray  # (M, 3)
    source_index: np.ndarray  # (M,) rows of the source cloud
    empty: bool = False

    def __len__(self) -> int:
        return len(self.source_index)

    def vectors(self) -> Tensor:
        """(M, 64 + 3) token vectors: features followed by positional channels."""
        return nx.concat([self.features, Tensor(self.positions)], axis=1)

    @classmethod
    def make_empty(cls, width: int = FEATURE_DIM) -> "TokenSet":
        return cls(Tensor(np.zeros((0, width))), np.zeros((0, 3)), np.zeros(0, dtype=int), True)


def farthest_point_sample(cloud, m: int, pad: bool = False) -> np.ndarray:
    """Greedy max-min subsampling starting at index 0; ties go to the smallest index.

    With ``pad=True`` a request for more points than exist repeats the last
    chosen index instead of raising.
    """
    pts = cloud.points if isinstance(cloud, PointCloud) else np.asarray(cloud, dtype=np.float64)
    n = len(pts)
    if m < 1:
        raise InvalidInputError("m must be at least 1")
    if m > n and not pad:
        raise InvalidInputError(f"cannot sample {m} of {n} points")
    if n == 0:
        raise InvalidInputError("cannot sample from an empty cloud")
    take = min(m, n)
    chosen = np.empty(take, dtype=np.intp)
    chosen[0] = 0
    dist = np.sum((pts - pts[0]) ** 2, axis=1)
    for i in range(1, take):
        nxt = int(np.argmax(dist))  # argmax returns the first maximum
        chosen[i] = nxt
        dist = np.minimum(dist, np.sum((pts - pts[nxt]) ** 2, axis=1))
    if m > take:
        chosen = np.concatenate([chosen, np.full(m - take, chosen[-1], dtype=np.intp)])
    return chosen


def knn_indices(points: np.ndarray, centers: np.ndarray, k: int) -> np.ndarray:
    """(M, k) indices of the k nearest points to each center; ties by index."""
    d2 = np.sum((centers[:, None, :] - points[None, :, :]) ** 2, axis=2)
    order = np.argsort(d2, axis=1, kind="stable")[:, :k]
    if order.shape[1] < k:
        pad = np.repeat(order[:, -1:], k - order.shape[1], axis=1)
        order = np.concatenate([order, pad], axis=1)
    return order


@dataclass
class EncoderConfig:
    tokens: int = 64
    neighbors: int = 8
    hidden: int = 32
    heads: int = 4


def init_encoder_params(cfg: EncoderConfig, rng: np.random.Generator) -> dict[str, np.ndarray]:
    d, h = FEATURE_DIM, cfg.hidden

    def glorot(fan_in, fan_out):
        return rng.normal(0.0, np.sqrt(2.0 / (fan_in + fan_out)), (fan_in, fan_out))

    return {
        "enc.pw1": glorot(3, h) * 2.0,
        "enc.pb1": rng.normal(0.0, 0.1, (1, h)),
        "enc.pw2": glorot(h, d),
        "enc.pb2": np.zeros((1, d)),
        "enc.wq": glorot(d, d),
        "enc.wk": glorot(d, d),
        "enc.wv": glorot(d, d),
        "enc.wo": glorot(d, d) * 0.5,
        "enc.ln_g": np.ones((1, d)),
        "enc.ln_b": np.zeros((1, d)),
        "enc.wout": glorot(d, d),
    }


def layer_norm(x: Tensor, eps: float = LN_EPS) -> Tensor:
    """Per-row standardization (no affine)."""
    mu = nx.mean(x, axis=1, keepdims=True)
    centered = x - mu
    var = nx.mean(centered * centered, axis=1, keepdims=True)
    return centered / nx.sqrt(var + eps)


def multi_head_attention(x: Tensor, wq, wk, wv, wo, heads: int) -> Tensor:
    d = x.shape[1]
    hd = d // heads
    q, k, v = x @ wq, x @ wk, x @ wv
    scale = 1.0 / np.sqrt(hd)
    outs = []
    for h in range(heads):
        cols = slice(h * hd, (h + 1) * hd)
        att = nx.softmax_rows((q[:, cols] @ k[:, cols].T) * scale)
        outs.append(att @ v[:, cols])
    return nx.concat(outs, axis=1) @ wo


def encode(
    cloud: PointCloud,
    params: dict,
    m: int,
    cfg: EncoderConfig | None = None,
    return_normed: bool = False,
):
    """Tokenize ``cloud`` into ``m`` tokens of 64 features.

    Clouds with fewer than ``m`` points are padded by repeating the last
    sampled point; an empty cloud gives an empty token set flagged ``empty``.
    """
    cfg = cfg or EncoderConfig()
    if len(cloud) == 0:
        out = TokenSet.make_empty()
        return (out, None) if return_normed else out
    if m < 1:
        raise InvalidInputError("m must be at least 1")
    p = {k: v if isinstance(v, Tensor) else Tensor(v) for k, v in params.items()}
    pts = cloud.points
    idx = farthest_point_sample(pts, m, pad=True)
    centers = pts[idx]
    k = min(cfg.neighbors, len(pts))
    nbr = knn_indices(pts, centers, k)
    rel = (pts[nbr] - centers[:, None, :]).reshape(-1, 3)
    h = nx.tanh(Tensor(rel) @ p["enc.pw1"] + p["enc.pb1"])
    h = h @ p["enc.pw2"] + p["enc.pb2"]
    pooled = nx.group_max(h, k)
    mixed = pooled + multi_head_attention(
        pooled, p["enc.wq"], p["enc.wk"], p["enc.wv"], p["enc.wo"], cfg.heads
    )
    normed = layer_norm(mixed)
    feats = (normed * p["enc.ln_g"] + p["enc.ln_b"]) @ p["enc.wout"]
    tokens = TokenSet(feats, centers.copy(), idx)
    return (tokens, normed) if return_normed else tokens
