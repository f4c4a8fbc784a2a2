"""Cosine affinities between consecutive token sets and their attention refinement.

Query, key and value maps are produced from an affinity matrix in two steps:
a pointwise lift of every entry to ``channels`` features (kernel-size-1
convolution, tanh), a pointwise projection back to one channel, then a right
multiplication by a square M x M weight.  The square weights are
``alpha * I + beta * J / M`` (J all ones), the general linear map that commutes
with column permutations, so results do not depend on token order.
Everything is bias free, so a zero affinity matrix maps to zero.

    S = A + self_attend(A)                  for both matrices
    A_hat^t   = S^t   + softmax(Qbar(S^{t-1}) Kbar(S^t)^T)   Vbar(S^t)
    A_hat^t-1 = S^t-1 + softmax(Qbar(S^t)   Kbar(S^{t-1})^T) Vbar(S^{t-1})
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import numerics as nx
from .numerics import InvalidInputError, Tensor

NORM_EPS = 1e-12


@dataclass
class AffinityMatrix:
    values: Tensor  # (M, M); rows index the later scan
    tag: tuple[int, int] = (0, -1)  # (later, earlier) frame offsets
    row_mask: np.ndarray | None = None  # False for padded rows
    col_mask: np.ndarray | None = None

    @property
    def shape(self):
        return self.values.shape

    def numpy(self) -> np.ndarray:
        return self.values.value


def _pad_rows(f: Tensor, m: int) -> Tensor:
    if f.shape[0] == m:
        return f
    return nx.concat([f, Tensor(np.zeros((m - f.shape[0], f.shape[1])))], axis=0)


def _token_vectors(tokens):
    return tokens.vectors() if hasattr(tokens, "vectors") else tokens


def build_affinity(tokens_a, tokens_b, tag=(0, -1)) -> AffinityMatrix:
    """Cosine similarity between token vectors of ``tokens_a`` (rows) and ``tokens_b`` (cols).

    Token sets contribute their 64 features plus 3 positional channels; raw
    (M, C) tensors are used as given.  The shorter set is padded with zero
    tokens, which receive affinity 0.
    """
    fa = _token_vectors(tokens_a)
    fb = _token_vectors(tokens_b)
    fa, fb = nx.as_tensor(fa), nx.as_tensor(fb)
    if fa.ndim != 2 or fb.ndim != 2 or fa.shape[1] != fb.shape[1]:
        raise InvalidInputError(f"feature width mismatch: {fa.shape} vs {fb.shape}")
    if fa.shape[0] == 0 or fb.shape[0] == 0:
        raise InvalidInputError("token sets must be nonempty")
    m = max(fa.shape[0], fb.shape[0])
    row_mask = np.arange(m) < fa.shape[0]
    col_mask = np.arange(m) < fb.shape[0]
    fa, fb = _pad_rows(fa, m), _pad_rows(fb, m)
    ua = fa / nx.clamp_min(nx.sqrt(nx.sum_(fa * fa, axis=1, keepdims=True)), NORM_EPS)
    ub = fb / nx.clamp_min(nx.sqrt(nx.sum_(fb * fb, axis=1, keepdims=True)), NORM_EPS)
    # products summed over channels instead of a BLAS matmul: the summation order
    # is then identical for (a, b) and (b, a), so swapping the sets transposes exactly
    c = fa.shape[1]
    prod = nx.reshape(ua, (m, 1, c)) * nx.reshape(ub, (1, m, c))
    values = nx.clip(nx.sum_(prod, axis=2), -1.0, 1.0)
    return AffinityMatrix(values, tag, row_mask, col_mask)


@dataclass
class AttentionConfig:
    channels: int = 64


def init_attention_weights(prefix: str, rng, channels: int = 64):
    """Random attention weights under names ``prefix.*``.

    ``prefix.w{q,k,v}`` hold the (alpha, beta) pair of each square projection.
    """
    out = {}
    for part in "qkv":
        out[f"{prefix}.lift_{part}"] = rng.normal(0.0, 1.0, (1, channels))
        out[f"{prefix}.proj_{part}"] = rng.normal(0.0, 1.0 / np.sqrt(channels), (channels, 1))
        out[f"{prefix}.w{part}"] = np.array([[1.0, 0.0]]) + rng.normal(0.0, 0.1, (1, 2))
    return out


def zero_attention_weights(prefix: str, channels: int = 64):
    out = {}
    for part in "qkv":
        out[f"{prefix}.lift_{part}"] = np.zeros((1, channels))
        out[f"{prefix}.proj_{part}"] = np.zeros((channels, 1))
        out[f"{prefix}.w{part}"] = np.zeros((1, 2))
    return out


def square_weight(w, m: int) -> Tensor:
    """The M x M matrix alpha * I + beta * J / M for a (1, 2) weight ``w``."""
    w = nx.as_tensor(w)
    return w[0, 0] * Tensor(np.eye(m)) + w[0, 1] * Tensor(np.full((m, m), 1.0 / m))


def _values(a) -> Tensor:
    return a.values if isinstance(a, AffinityMatrix) else nx.as_tensor(a)


def _wrap(v: Tensor, like) -> AffinityMatrix:
    if isinstance(like, AffinityMatrix):
        return AffinityMatrix(v, like.tag, like.row_mask, like.col_mask)
    return AffinityMatrix(v)


def project(a: Tensor, w: dict, prefix: str, part: str) -> Tensor:
    """Qbar/Kbar/Vbar of an affinity matrix: pointwise lift, pointwise projection, right weight."""
    m = a.shape[0]
    col = nx.reshape(a, (m * m, 1))
    lifted = nx.tanh(col @ w[f"{prefix}.lift_{part}"])
    flat = lifted @ w[f"{prefix}.proj_{part}"]
    return nx.reshape(flat, (m, m)) @ square_weight(w[f"{prefix}.w{part}"], m)


def _check_square(v: Tensor):
    if v.ndim != 2 or v.shape[0] != v.shape[1] or v.shape[0] == 0:
        raise InvalidInputError(f"affinity matrix must be square and nonempty, got {v.shape}")


def _prefix_of(w: dict) -> str:
    names = {k.rsplit(".", 1)[0] for k in w if k.rsplit(".", 1)[-1] == "wq"}
    if len(names) != 1:
        raise InvalidInputError(f"expected one attention weight set, found {sorted(names)}")
    return names.pop()


def _as_tensors(w: dict) -> dict:
    return {k: nx.as_tensor(v) for k, v in w.items()}


def attend(query_src: Tensor, kv_src: Tensor, w: dict, prefix: str) -> Tensor:
    q = project(query_src, w, prefix, "q")
    k = project(kv_src, w, prefix, "k")
    v = project(kv_src, w, prefix, "v")
    return nx.softmax_rows(q @ k.T) @ v


def self_attend(a, w: dict, prefix: str | None = None) -> AffinityMatrix:
    """softmax(Qbar Kbar^T) Vbar, all three maps computed from ``a``."""
    v = _values(a)
    _check_square(v)
    w = _as_tensors(w)
    prefix = prefix or _prefix_of(w)
    return _wrap(attend(v, v, w, prefix), a)


def cross_attend(s_t, s_tm1, w: dict, prefix: str | None = None):
    """Refine each matrix with queries taken from the other one."""
    vt, vtm1 = _values(s_t), _values(s_tm1)
    _check_square(vt)
    _check_square(vtm1)
    if vt.shape != vtm1.shape:
        raise InvalidInputError(f"shape mismatch {vt.shape} vs {vtm1.shape}")
    w = _as_tensors(w)
    prefix = prefix or _prefix_of(w)
    out_t = attend(vtm1, vt, w, prefix)
    out_tm1 = attend(vt, vtm1, w, prefix)
    return _wrap(out_t, s_t), _wrap(out_tm1, s_tm1)


def refine(a_t, a_tm1, w_self: dict | None, w_cross: dict | None, return_intermediate=False):
    """Residual self-attention on each matrix, then residual cross-attention.

    Passing ``None`` for either weight set skips that stage (ablations).
    """
    vt, vtm1 = _values(a_t), _values(a_tm1)
    if w_self is not None:
        vt = vt + self_attend(vt, w_self).values
        vtm1 = vtm1 + self_attend(vtm1, w_self).values
    s_t, s_tm1 = _wrap(vt, a_t), _wrap(vtm1, a_tm1)
    if w_cross is not None:
        ct, ctm1 = cross_attend(vt, vtm1, w_cross)
        vt, vtm1 = vt + ct.values, vtm1 + ctm1.values
    out = (_wrap(vt, a_t), _wrap(vtm1, a_tm1))
    return (out, (s_t, s_tm1)) if return_intermediate else out
