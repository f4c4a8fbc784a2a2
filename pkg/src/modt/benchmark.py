"""Refinement ablation on noisy synthetic sequences.

Each refinement mode (none, self, full) is trained from the same initialization
on the same triplets for the same number of steps, then tracks a fixed set of
held-out noisy sequences. Ground-truth boxes stand in for detections so the
comparison isolates what the refinement changes: the tracking offsets.
"""
from __future__ import annotations

import time
from dataclasses import dataclass, field, replace

import numpy as np

from .config import RunConfig, toy_config
from .metrics import MotReport, Obs, evaluate, gt_to_obs
from .pipeline import encode_sequence, gt_detections, init_params, sequence_offsets, train
from .scans import SyntheticSequence, synth_scene, window_triplets
from .tracker import run

MODES = ("none", "self", "full")


@dataclass
class AblationProtocol:
    iterations: int = 200
    train_sequences: int = 6
    train_seed0: int = 1000
    test_seeds: tuple = tuple(range(10))
    test_frames: int = 12
    test_noise: float = 0.05


@dataclass
class AblationResult:
    mode: str
    ids: list[int] = field(default_factory=list)
    mota: list[float] = field(default_factory=list)
    final_loss: float = float("nan")
    seconds: float = 0.0

    @property
    def mean_ids(self) -> float:
        return float(np.mean(self.ids))

    @property
    def mean_mota(self) -> float:
        return float(np.mean(self.mota))


def track_with_gt_boxes(seq: SyntheticSequence, params: dict, cfg: RunConfig) -> MotReport:
    tokens = encode_sequence(seq, params, cfg)
    offsets = sequence_offsets(seq, params, cfg, tokens)
    frames = [(gt_detections(f, tok), off) for f, tok, off in zip(seq.frames, tokens, offsets)]
    pred: dict[int, list[Obs]] = {}
    for trk in run(frames, cfg.tracker, seq.frames[0].cloud.frame):
        for f, box in trk.history:
            pred.setdefault(f, []).append(Obs(trk.id, tuple(box.center)))
    gt = gt_to_obs({f.cloud.frame: f.objects for f in seq.frames})
    return evaluate(gt, pred, cfg.eval.dist_max)


def run_ablation(
    protocol: AblationProtocol | None = None, base: RunConfig | None = None, modes=MODES, log=None
) -> dict[str, AblationResult]:
    protocol = protocol or AblationProtocol()
    base = base or toy_config()
    triplets = [
        t
        for s in range(protocol.train_sequences)
        for t in window_triplets(synth_scene(base.scene, protocol.train_seed0 + s))
    ]
    test_scene = replace(base.scene, num_frames=protocol.test_frames, noise=protocol.test_noise)
    tests = [synth_scene(test_scene, s) for s in protocol.test_seeds]
    out = {}
    for mode in modes:
        start = time.perf_counter()
        cfg = replace(base, model=replace(base.model, refine=mode))
        params, _, history = train(init_params(cfg), triplets, cfg, protocol.iterations)
        res = AblationResult(mode, final_loss=history[-1]["total"] if history else float("nan"))
        for seq in tests:
            rep = track_with_gt_boxes(seq, params, cfg)
            res.ids.append(rep.ids)
            res.mota.append(rep.mota)
        res.seconds = time.perf_counter() - start
        if log is not None:
            log(res)
        out[mode] = res
    return out
