"""End-to-end model: encoder -> affinities -> refinement -> heads, plus training and inference."""
from __future__ import annotations

import csv
import os
from dataclasses import dataclass

import numpy as np

from . import numerics as nx
from .affinity import build_affinity, init_attention_weights, refine
from .config import RunConfig, dumps, loads
from .encoder import TokenSet, encode, init_encoder_params
from .heads import (
    BoxRegression,
    Box3D,
    Detection,
    OffsetField,
    box_head,
    init_head_params,
    predict_boxes,
    predict_offsets,
)
from .losses import (
    Term,
    assign_tokens,
    association_loss,
    build_gt_affinity,
    center_loss,
    match_predictions,
    objectness_loss,
    objectness_targets,
    size_loss,
    total_loss,
    valid_token_mask,
    yaw_loss,
)
from .numerics import GradTape, Tensor, backward
from .scans import FrameTriplet, SyntheticSequence, jitter_margin

SELF, CROSS = "att_self", "att_cross"


def init_params(cfg: RunConfig, seed: int | None = None) -> dict[str, np.ndarray]:
    rng = np.random.default_rng(cfg.model.init_seed if seed is None else seed)
    ch = cfg.affinity.channels
    params = init_encoder_params(cfg.encoder, rng)
    params.update(init_attention_weights(SELF, rng, ch))
    params.update(init_attention_weights(CROSS, rng, ch))
    params.update(init_head_params(cfg.heads, rng))
    return params


def attention_sets(params: dict, mode: str):
    pick = lambda prefix: {k: v for k, v in params.items() if k.startswith(prefix + ".")}
    w_self = pick(SELF) if mode in ("self", "full") else None
    w_cross = pick(CROSS) if mode == "full" else None
    return w_self, w_cross


@dataclass
class TripletOutput:
    tokens: tuple[TokenSet, TokenSet, TokenSet]
    raw: tuple  # (A^t, A^{t-1})
    intermediate: tuple  # (S^t, S^{t-1})
    refined: tuple  # (A_hat^t, A_hat^{t-1})
    boxes: BoxRegression


def forward_triplet(triplet: FrameTriplet, params: dict, cfg: RunConfig, tokens=None) -> TripletOutput:
    if tokens is None:
        tokens = tuple(encode(f.cloud, params, cfg.encoder.tokens, cfg.encoder) for f in triplet.frames)
    tok_t, tok_tm1, tok_tm2 = tokens
    a_t = build_affinity(tok_t, tok_tm1, (0, -1))
    a_tm1 = build_affinity(tok_tm1, tok_tm2, (-1, -2))
    w_self, w_cross = attention_sets(params, cfg.model.refine)
    refined, inter = refine(a_t, a_tm1, w_self, w_cross, return_intermediate=True)
    return TripletOutput(tokens, (a_t, a_tm1), inter, refined, box_head(tok_t, params))


@dataclass
class LossParts:
    total: Tensor  # L_a + lambda_c L_c + lambda_b L_b
    objective: Tensor  # total plus optional extras actually minimized
    l_a: Term
    l_c: Term
    l_b: Term
    l_conf: Term
    l_yaw: Term

    def floats(self) -> dict[str, float]:
        return {
            "objective": self.objective.item(),
            "total": self.total.item(),
            "l_a": self.l_a.value.item(),
            "l_c": self.l_c.value.item(),
            "l_b": self.l_b.value.item(),
            "l_conf": self.l_conf.value.item(),
            "l_yaw": self.l_yaw.value.item(),
        }


def _mean_terms(terms: list[Term]) -> Term:
    live = [t for t in terms if t.supervised]
    if not live:
        return Term(Tensor(0.0), 0)
    acc = live[0].value
    for t in live[1:]:
        acc = acc + t.value
    return Term(acc * (1.0 / len(live)), sum(t.count for t in live))


def triplet_loss(triplet: FrameTriplet, params: dict, cfg: RunConfig, tokens=None) -> LossParts:
    out = forward_triplet(triplet, params, cfg, tokens)
    frames = triplet.frames
    margin = jitter_margin(cfg.scene.noise) + cfg.model.gt_margin
    tok = out.tokens
    g_t = build_gt_affinity(tok[0], tok[1], frames[0].objects, frames[1].objects, margin)
    g_tm1 = build_gt_affinity(tok[1], tok[2], frames[1].objects, frames[2].objects, margin)
    l_a = _mean_terms([association_loss(out.refined[0], g_t), association_loss(out.refined[1], g_tm1)])
    extra = []
    if cfg.model.intermediate_supervision:
        l_s = _mean_terms(
            [association_loss(out.intermediate[0], g_t), association_loss(out.intermediate[1], g_tm1)]
        )
        extra.append(l_s.value)

    reg = out.boxes
    objs = frames[0].objects
    valid = valid_token_mask(tok[0])
    conf = 1.0 / (1.0 + np.exp(-reg.logit.value[:, 0]))
    gt_c = np.array([o.center for o in objs]).reshape(-1, 3)
    pairs = match_predictions(reg.center.value, conf, gt_c, cfg.model.match_radius, valid)
    if pairs:
        rows = np.array([p[0] for p in pairs])
        cols = np.array([p[1] for p in pairs])
        l_c = center_loss(nx.take_rows(reg.center, rows), gt_c[cols])
        l_b = size_loss(nx.take_rows(reg.size, rows), np.array([objs[j].size for j in cols]))
        l_yaw = yaw_loss(nx.take_rows(reg.sincos, rows), [objs[j].yaw for j in cols])
    else:
        l_c = l_b = l_yaw = Term(Tensor(0.0), 0)
    targets = objectness_targets(tok[0].positions, objs, margin, cfg.model.conf_sigma)
    l_conf = objectness_loss(reg.logit, targets, valid)

    w = cfg.loss
    total = total_loss(l_a, l_c, l_b, w)
    objective = total
    if w.lambda_conf:
        objective = objective + w.lambda_conf * l_conf.value
    if w.lambda_yaw:
        objective = objective + w.lambda_yaw * l_yaw.value
    for e in extra:
        objective = objective + e
    return LossParts(total, objective, l_a, l_c, l_b, l_conf, l_yaw)


def batch_loss(triplets, params, cfg):
    """Mean objective and total loss over ``triplets``; returns (objective, total, parts list)."""
    cache: dict[int, TokenSet] = {}  # triplets of one sequence share frames

    def tokens_of(frame):
        key = id(frame)
        if key not in cache:
            cache[key] = encode(frame.cloud, params, cfg.encoder.tokens, cfg.encoder)
        return cache[key]

    parts = [triplet_loss(t, params, cfg, tuple(tokens_of(f) for f in t.frames)) for t in triplets]
    obj, total = parts[0].objective, parts[0].total
    for p in parts[1:]:
        obj, total = obj + p.objective, total + p.total
    n = 1.0 / len(parts)
    return obj * n, total * n, parts


def loss_and_grad(triplets, params: dict, cfg: RunConfig, target: str = "objective"):
    tensors = {k: Tensor(v, requires_grad=True) for k, v in params.items()}
    with GradTape() as tape:
        obj, total, parts = batch_loss(triplets, tensors, cfg)
    loss = obj if target == "objective" else total
    grads = backward(loss, tape)
    return obj.item(), total.item(), {k: nx.grad_of(grads, t) for k, t in tensors.items()}


# ---------------------------------------------------------------- optimisation


class Adam:
    def __init__(self, cfg, params: dict):
        self.cfg = cfg
        self.step_count = 0
        self.m = {k: np.zeros_like(v) for k, v in params.items()}
        self.v = {k: np.zeros_like(v) for k, v in params.items()}

    def lr(self) -> float:
        c = self.cfg
        if c.decay_every > 0:
            return c.lr / c.lr_decay ** (self.step_count // c.decay_every)
        return c.lr

    def update(self, params: dict, grads: dict) -> dict:
        c = self.cfg
        lr = self.lr()
        self.step_count += 1
        t = self.step_count
        new = {}
        for k, p in params.items():
            g = grads[k]
            self.m[k] = c.beta1 * self.m[k] + (1 - c.beta1) * g
            self.v[k] = c.beta2 * self.v[k] + (1 - c.beta2) * g * g
            mhat = self.m[k] / (1 - c.beta1**t)
            vhat = self.v[k] / (1 - c.beta2**t)
            new[k] = p - lr * mhat / (np.sqrt(vhat) + c.eps)
        return new


class NonFiniteLoss(RuntimeError):
    """Training hit a non-finite loss or gradient; ``params`` are the offending values."""

    def __init__(self, message: str, params: dict | None = None):
        super().__init__(message)
        self.params = params


def train(
    params: dict,
    triplets: list[FrameTriplet],
    cfg: RunConfig,
    iterations: int | None = None,
    optimizer: Adam | None = None,
    log=None,
    trainable: tuple[str, ...] | None = None,
):
    """Full-batch Adam on the objective; returns (params, optimizer, history of dicts).

    ``trainable`` restricts updates to parameters whose names start with one of
    the given prefixes (e.g. ``("det.",)`` to fit the box head alone).
    """
    iterations = cfg.train.iterations if iterations is None else iterations
    opt = optimizer or Adam(cfg.train, params)
    history = []
    for _ in range(iterations):
        try:
            obj, total, grads = loss_and_grad(triplets, params, cfg)
        except FloatingPointError as exc:
            raise NonFiniteLoss(f"non-finite loss or gradient at step {opt.step_count}: {exc}", params) from exc
        if not (np.isfinite(obj) and all(np.all(np.isfinite(g)) for g in grads.values())):
            raise NonFiniteLoss(f"non-finite loss or gradient at step {opt.step_count}: {obj}", params)
        row = {"step": opt.step_count, "lr": opt.lr(), "objective": obj, "total": total}
        history.append(row)
        if log is not None:
            log(row)
        if trainable is not None:
            grads = {k: g if k.startswith(trainable) else np.zeros_like(g) for k, g in grads.items()}
        params = opt.update(params, grads)
    return params, opt, history


def write_history(path, history: list[dict]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=["step", "lr", "objective", "total"])
        w.writeheader()
        for row in history:
            w.writerow({k: repr(v) if isinstance(v, float) else v for k, v in row.items()})


# ---------------------------------------------------------------- checkpoints


def save_checkpoint(path, params: dict, cfg: RunConfig, optimizer: Adam | None = None) -> None:
    """Directory with ``params.bin`` (little-endian float64), ``manifest.txt`` and ``config.ini``."""
    os.makedirs(path, exist_ok=True)
    named = dict(sorted(params.items()))
    if optimizer is not None:
        named["adam.step"] = np.array([float(optimizer.step_count)])
        for k in sorted(params):
            named[f"adam.m.{k}"] = optimizer.m[k]
            named[f"adam.v.{k}"] = optimizer.v[k]
    with open(os.path.join(path, "params.bin"), "wb") as blob, open(
        os.path.join(path, "manifest.txt"), "w"
    ) as man:
        for name, arr in named.items():
            arr = np.asarray(arr, dtype="<f8")
            man.write(f"{name} {' '.join(str(d) for d in arr.shape)}\n")
            blob.write(arr.tobytes())
    with open(os.path.join(path, "config.ini"), "w") as fh:
        fh.write(dumps(cfg))


def load_checkpoint(path):
    """Returns (params, cfg, optimizer or None)."""
    with open(os.path.join(path, "config.ini")) as fh:
        cfg = loads(fh.read())
    raw = open(os.path.join(path, "params.bin"), "rb").read()
    named, offset = {}, 0
    with open(os.path.join(path, "manifest.txt")) as fh:
        for line in fh:
            parts = line.split()
            if not parts:
                continue
            shape = tuple(int(x) for x in parts[1:])
            count = int(np.prod(shape)) if shape else 1
            arr = np.frombuffer(raw, dtype="<f8", count=count, offset=offset).reshape(shape)
            named[parts[0]] = arr.astype(np.float64)
            offset += 8 * count
    if offset != len(raw):
        raise ValueError(f"{path}: manifest covers {offset} bytes, blob has {len(raw)}")
    params = {k: v for k, v in named.items() if not k.startswith("adam.")}
    opt = None
    if "adam.step" in named:
        opt = Adam(cfg.train, params)
        opt.step_count = int(named["adam.step"][0])
        opt.m = {k: named[f"adam.m.{k}"] for k in params}
        opt.v = {k: named[f"adam.v.{k}"] for k in params}
    return params, cfg, opt


# ---------------------------------------------------------------- inference


@dataclass
class FrameOutput:
    frame: int
    detections: list[Detection]
    offsets: OffsetField | None


def encode_sequence(seq: SyntheticSequence, params: dict, cfg: RunConfig) -> list[TokenSet]:
    return [encode(f.cloud, params, cfg.encoder.tokens, cfg.encoder) for f in seq.frames]


def sequence_offsets(seq: SyntheticSequence, params: dict, cfg: RunConfig, tokens=None):
    """Offset field per frame (None for the first frame and skipped frames)."""
    tokens = tokens or encode_sequence(seq, params, cfg)
    w_self, w_cross = attention_sets(params, cfg.model.refine)
    out: list[OffsetField | None] = [None]
    for t in range(1, len(seq.frames)):
        tt, tm1 = tokens[t], tokens[t - 1]
        if tt.empty or tm1.empty:
            out.append(predict_offsets(tt, tm1, None, params, seq.frames[t].cloud, cfg.heads.r_bg))
            continue
        a_t = build_affinity(tt, tm1)
        if t >= 2 and not tokens[t - 2].empty:
            a_tm1 = build_affinity(tm1, tokens[t - 2])
        else:
            a_tm1 = a_t  # no older scan: cross-attention degenerates to self-attention
        a_hat, _ = refine(a_t, a_tm1, w_self, w_cross)
        out.append(predict_offsets(tt, tm1, a_hat, params, seq.frames[t].cloud, cfg.heads.r_bg))
    return out


def infer_sequence(seq: SyntheticSequence, params: dict, cfg: RunConfig) -> list[FrameOutput]:
    tokens = encode_sequence(seq, params, cfg)
    offsets = sequence_offsets(seq, params, cfg, tokens)
    out = []
    for fr, tok, off in zip(seq.frames, tokens, offsets):
        dets = predict_boxes(tok, params, cfg.heads.conf_threshold, cfg.heads.d_nms)
        out.append(FrameOutput(fr.cloud.frame, dets, off))
    return out


def gt_detections(frame, tokens: TokenSet | None = None) -> list[Detection]:
    """Ground-truth boxes as detections; embeddings taken from the nearest token when given."""
    dets = []
    for o in frame.objects:
        emb = np.zeros(64)
        if tokens is not None and not tokens.empty:
            i = int(np.argmin(np.sum((tokens.positions - o.center) ** 2, axis=1)))
            emb = tokens.features.value[i].copy()
        dets.append(Detection(Box3D(o.center, o.size, o.yaw), emb, 1.0))
    return dets
