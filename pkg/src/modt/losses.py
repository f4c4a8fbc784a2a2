"""Ground-truth affinities and the training objective.

    L = L_a + lambda_c * L_c + lambda_b * L_b

``L_a`` is the masked mean of -log of the row-softmaxed refined affinity over
ground-truth correspondences; ``L_c`` and ``L_b`` are mean per-object l1 errors
of centers and decoded sizes.  Two optional extras (objectness and yaw) are
kept outside that sum and reported separately.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import NamedTuple

import numpy as np

from . import numerics as nx
from .affinity import AffinityMatrix
from .encoder import TokenSet
from .numerics import Tensor
from .scans import GroundTruthObject, point_in_box


class Term(NamedTuple):
    value: Tensor
    count: int  # number of supervising entries; 0 means no supervision

    @property
    def supervised(self) -> bool:
        return self.count > 0


@dataclass
class GtAffinity:
    values: np.ndarray  # (M, M) binary
    row_mask: np.ndarray
    col_mask: np.ndarray


@dataclass
class LossWeights:
    lambda_c: float = 1.0
    lambda_b: float = 1.0
    lambda_conf: float = 1.0
    lambda_yaw: float = 0.0

    def __post_init__(self):
        for name in ("lambda_c", "lambda_b", "lambda_conf", "lambda_yaw"):
            v = getattr(self, name)
            if not np.isfinite(v) or v < 0:
                raise ValueError(f"{name} must be finite and nonnegative, got {v}")


def valid_token_mask(tokens: TokenSet) -> np.ndarray:
    """False for padding tokens that repeat an earlier source point."""
    _, first = np.unique(tokens.source_index, return_index=True)
    mask = np.zeros(len(tokens), dtype=bool)
    mask[first] = True
    return mask


def assign_tokens(
    positions: np.ndarray, objects: list[GroundTruthObject], margin: float
) -> np.ndarray:
    """Object index (into ``objects``) containing each token, nearest center on overlap; -1 if none."""
    out = np.full(len(positions), -1, dtype=int)
    if not objects or len(positions) == 0:
        return out
    inside = np.stack([point_in_box(positions, o, margin) for o in objects], axis=1)
    centers = np.stack([o.center for o in objects])
    d2 = np.sum((positions[:, None, :] - centers[None, :, :]) ** 2, axis=2)
    d2 = np.where(inside, d2, np.inf)
    best = np.argmin(d2, axis=1)
    hit = np.isfinite(d2[np.arange(len(positions)), best])
    out[hit] = best[hit]
    return out


def build_gt_affinity(
    tokens_t: TokenSet,
    tokens_tm1: TokenSet,
    gt_t: list[GroundTruthObject],
    gt_tm1: list[GroundTruthObject],
    margin: float = 0.0,
) -> GtAffinity:
    """Partial permutation linking each object token at t to one token of the same track at t-1.

    The counterpart is the same-track token whose position relative to the
    object center is nearest (ties to the lower index).
    """
    m = max(len(tokens_t), len(tokens_tm1))
    g = np.zeros((m, m))
    rows = np.zeros(m, dtype=bool)
    cols = np.zeros(m, dtype=bool)
    rows[: len(tokens_t)] = valid_token_mask(tokens_t)
    cols[: len(tokens_tm1)] = valid_token_mask(tokens_tm1)
    own_t = assign_tokens(tokens_t.positions, gt_t, margin)
    own_tm1 = assign_tokens(tokens_tm1.positions, gt_tm1, margin)
    for d in range(len(tokens_t)):
        if not rows[d] or own_t[d] < 0:
            continue
        obj = gt_t[own_t[d]]
        rel_d = tokens_t.positions[d] - obj.center
        best, best_e = np.inf, -1
        for e in range(len(tokens_tm1)):
            if not cols[e] or own_tm1[e] < 0:
                continue
            prev = gt_tm1[own_tm1[e]]
            if prev.track_id != obj.track_id:
                continue
            dist = float(np.sum((tokens_tm1.positions[e] - prev.center - rel_d) ** 2))
            if dist < best:
                best, best_e = dist, e
        if best_e >= 0:
            g[d, best_e] = 1.0
    return GtAffinity(g, rows, cols)


def association_loss(a_hat, g) -> Term:
    """Sum(G * -log softmax_rows(A_hat)) / Sum(G)."""
    a = a_hat.values if isinstance(a_hat, AffinityMatrix) else nx.as_tensor(a_hat)
    gv = g.values if isinstance(g, GtAffinity) else np.asarray(g, dtype=np.float64)
    total = float(gv.sum())
    if total == 0:
        return Term(Tensor(0.0), 0)
    nll = -nx.log(nx.softmax_rows(a))
    return Term(nx.sum_(nll * Tensor(gv)) * (1.0 / total), int(total))


def match_predictions(
    pred_centers: np.ndarray,
    confidence: np.ndarray,
    gt_centers: np.ndarray,
    radius: float = 2.0,
    candidates: np.ndarray | None = None,
) -> list[tuple[int, int]]:
    """Greedy (prediction, object) pairs: most confident prediction first, nearest free object within ``radius``."""
    pred_centers = np.asarray(pred_centers, dtype=np.float64).reshape(-1, 3)
    gt_centers = np.asarray(gt_centers, dtype=np.float64).reshape(-1, 3)
    if len(gt_centers) == 0 or len(pred_centers) == 0:
        return []
    order = sorted(range(len(pred_centers)), key=lambda i: (-float(confidence[i]), i))
    free = np.ones(len(gt_centers), dtype=bool)
    pairs = []
    for i in order:
        if candidates is not None and not candidates[i]:
            continue
        d = np.linalg.norm(gt_centers - pred_centers[i], axis=1)
        d = np.where(free, d, np.inf)
        j = int(np.argmin(d))
        if d[j] <= radius:
            pairs.append((i, j))
            free[j] = False
            if not free.any():
                break
    return pairs


def _l1_mean(pred, gt) -> Term:
    pred = nx.as_tensor(pred)
    r = pred.shape[0] if pred.ndim == 2 else 0
    if r == 0:
        return Term(Tensor(0.0), 0)
    diff = nx.abs_(pred - Tensor(np.asarray(gt, dtype=np.float64).reshape(pred.shape)))
    return Term(nx.sum_(diff) * (1.0 / r), r)


def center_loss(pred_centers, gt_centers) -> Term:
    """Mean over matched objects of the l1 norm of the center error."""
    return _l1_mean(pred_centers, gt_centers)


def size_loss(pred_dims, gt_dims) -> Term:
    """Mean over matched objects of the l1 norm of the (w, l, h) error, in meters."""
    return _l1_mean(pred_dims, gt_dims)


def yaw_loss(pred_sincos, gt_yaws) -> Term:
    gt = np.array([[np.sin(y), np.cos(y)] for y in gt_yaws]).reshape(-1, 2)
    return _l1_mean(pred_sincos, gt)


def objectness_loss(logits: Tensor, targets: np.ndarray, mask: np.ndarray | None = None) -> Term:
    """Mean binary cross-entropy of confidence logits."""
    y = np.asarray(targets, dtype=np.float64).reshape(logits.shape)
    w = np.ones_like(y) if mask is None else np.asarray(mask, dtype=np.float64).reshape(y.shape)
    n = float(w.sum())
    if n == 0:
        return Term(Tensor(0.0), 0)
    bce = nx.softplus(logits) - logits * Tensor(y)
    return Term(nx.sum_(bce * Tensor(w)) * (1.0 / n), int(n))


def objectness_targets(
    positions: np.ndarray, objects: list[GroundTruthObject], margin: float, sigma: float
) -> np.ndarray:
    """Soft labels exp(-d^2 / 2 sigma^2) rescaled so each object's most central token gets 1.

    d is the distance to the center of the containing object; tokens outside
    every (inflated) box get 0.  The peak makes the most confident token of an
    object its most central one.
    """
    own = assign_tokens(positions, objects, margin)
    out = np.zeros(len(positions))
    for k, obj in enumerate(objects):
        idx = np.flatnonzero(own == k)
        if len(idx) == 0:
            continue
        d2 = np.sum((positions[idx] - obj.center) ** 2, axis=1)
        out[idx] = np.exp(-(d2 - d2.min()) / (2.0 * sigma * sigma))
    return out


def total_loss(l_a, l_c, l_b, w: LossWeights) -> Tensor:
    """L_a + lambda_c * L_c + lambda_b * L_b."""
    val = lambda t: t.value if isinstance(t, Term) else nx.as_tensor(t)
    return val(l_a) + w.lambda_c * val(l_c) + w.lambda_b * val(l_b)
