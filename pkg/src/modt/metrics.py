"""CLEAR-MOT and recall-averaged MOT metrics with center-distance matching.

Sequences are dicts ``frame -> list[Obs]``.  Matching per frame keeps last
frame's pairing when it is still within ``dist_max`` and fills the rest
greedily by ascending center distance.
"""
from __future__ import annotations

import math
import os
from dataclasses import asdict, dataclass, field

import numpy as np

from .scans import ScanFormatError

RECALL_POINTS = 40


@dataclass(frozen=True)
class Obs:
    id: int
    center: tuple
    score: float = 1.0


@dataclass
class FrameMatching:
    frame: int
    matches: list[tuple[int, int, float]]  # (gt id, pred id, distance)
    fn: list[int]
    fp: list[int]


@dataclass
class MotReport:
    mota: float
    motp: float
    ids: int
    fp: int
    fn: int
    mt: float
    ml: float
    frag: int
    num_gt: int
    num_matches: int
    num_trajectories: int

    def as_dict(self) -> dict:
        return asdict(self)


@dataclass
class AveragedReport:
    amota: float
    samota: float
    amotp: float
    recalls: list[float] = field(default_factory=list)
    mota: list[float] = field(default_factory=list)
    smota: list[float] = field(default_factory=list)
    motp: list[float] = field(default_factory=list)
    thresholds: list[float] = field(default_factory=list)


def _dist(a, b) -> float:
    return float(np.linalg.norm(np.asarray(a, dtype=np.float64) - np.asarray(b, dtype=np.float64)))


def match_frame(gt, pred, dist_max: float, previous: dict | None = None, frame: int = 0) -> FrameMatching:
    """Injective gt/pred matching within ``dist_max``."""
    previous = previous or {}
    pred_by_id = {p.id: p for p in pred}
    used_gt, used_pred = set(), set()
    matches = []
    for g in gt:
        pid = previous.get(g.id)
        if pid is None or pid not in pred_by_id or pid in used_pred:
            continue
        d = _dist(g.center, pred_by_id[pid].center)
        if d <= dist_max:
            matches.append((g.id, pid, d))
            used_gt.add(g.id)
            used_pred.add(pid)
    cand = []
    for gi, g in enumerate(gt):
        if g.id in used_gt:
            continue
        for pi, p in enumerate(pred):
            if p.id in used_pred:
                continue
            d = _dist(g.center, p.center)
            if d <= dist_max:
                cand.append((d, gi, pi))
    for d, gi, pi in sorted(cand):
        g, p = gt[gi], pred[pi]
        if g.id in used_gt or p.id in used_pred:
            continue
        matches.append((g.id, p.id, d))
        used_gt.add(g.id)
        used_pred.add(p.id)
    fn = [g.id for g in gt if g.id not in used_gt]
    fp = [p.id for p in pred if p.id not in used_pred]
    return FrameMatching(frame, matches, fn, fp)


def match_sequence(gt_seq: dict, pred_seq: dict, dist_max: float) -> list[FrameMatching]:
    out = []
    last: dict[int, int] = {}
    for f in sorted(set(gt_seq) | set(pred_seq)):
        fm = match_frame(gt_seq.get(f, []), pred_seq.get(f, []), dist_max, last, f)
        for g, p, _ in fm.matches:
            last[g] = p
        out.append(fm)
    return out


def clear_mot(matchings: list[FrameMatching], dist_max: float) -> MotReport:
    fp = sum(len(m.fp) for m in matchings)
    fn = sum(len(m.fn) for m in matchings)
    num_gt = sum(len(m.fn) + len(m.matches) for m in matchings)
    last_pred: dict[int, int] = {}
    ids = 0
    sim = []
    # per-gt tracked flags, in frame order
    status: dict[int, list[bool]] = {}
    for m in sorted(matchings, key=lambda x: x.frame):
        for g, p, d in m.matches:
            if g in last_pred and last_pred[g] != p:
                ids += 1
            last_pred[g] = p
            sim.append(1.0 - d / dist_max)
            status.setdefault(g, []).append(True)
        for g in m.fn:
            status.setdefault(g, []).append(False)
    frag = 0
    mt = ml = 0
    for flags in status.values():
        frag += sum(1 for a, b in zip(flags, flags[1:]) if a and not b)
        ratio = sum(flags) / len(flags)
        mt += ratio >= 0.8
        ml += ratio < 0.2
    n_traj = len(status)
    mota = 1.0 - (fn + fp + ids) / num_gt if num_gt else math.nan
    return MotReport(
        mota=mota,
        motp=100.0 * float(np.mean(sim)) if sim else 0.0,
        ids=ids,
        fp=fp,
        fn=fn,
        mt=mt / n_traj if n_traj else 0.0,
        ml=ml / n_traj if n_traj else 0.0,
        frag=frag,
        num_gt=num_gt,
        num_matches=len(sim),
        num_trajectories=n_traj,
    )


def evaluate(gt_seq: dict, pred_seq: dict, dist_max: float = 1.0) -> MotReport:
    return clear_mot(match_sequence(gt_seq, pred_seq, dist_max), dist_max)


def filter_by_score(pred_seq: dict, threshold: float) -> dict:
    return {f: [p for p in ps if p.score >= threshold] for f, ps in pred_seq.items()}


def averaged_mot(
    gt_seq: dict, pred_seq: dict, dist_max: float = 1.0, num_points: int = RECALL_POINTS
) -> AveragedReport:
    """AMOTA / sAMOTA / AMOTP over the recall grid {1/n, 2/n, ..., 1}.

    For recall r the score threshold is the ceil(r * GT)-th highest score among
    true positives of the unfiltered output; predictions scoring below it are
    dropped and CLEAR-MOT is recomputed.  Recall points needing more true
    positives than exist contribute zero.
    """
    full = match_sequence(gt_seq, pred_seq, dist_max)
    num_gt = sum(len(m.fn) + len(m.matches) for m in full)
    score = {(f, p.id): p.score for f, ps in pred_seq.items() for p in ps}
    tp_scores = sorted((score[(m.frame, p)] for m in full for _, p, _ in m.matches), reverse=True)
    rep = AveragedReport(0.0, 0.0, 0.0)
    for k in range(1, num_points + 1):
        r = k / num_points
        need = math.ceil(r * num_gt - 1e-9)
        rep.recalls.append(r)
        if num_gt == 0 or need > len(tp_scores):
            rep.thresholds.append(math.nan)
            rep.mota.append(0.0)
            rep.smota.append(0.0)
            rep.motp.append(0.0)
            continue
        thr = tp_scores[need - 1]
        res = evaluate(gt_seq, filter_by_score(pred_seq, thr), dist_max)
        errors = res.fn + res.fp + res.ids
        smota = 1.0 - (errors - (1.0 - r) * num_gt) / (r * num_gt)
        rep.thresholds.append(thr)
        rep.mota.append(res.mota)
        rep.smota.append(min(1.0, max(0.0, smota)))
        rep.motp.append(res.motp)
    rep.amota = sum(rep.mota) / num_points
    rep.samota = sum(rep.smota) / num_points
    rep.amotp = sum(rep.motp) / num_points
    return rep


# ---------------------------------------------------------------- file helpers


def read_track_file(path) -> dict[int, list[Obs]]:
    """Parse ``frame track_id cx cy cz w l h yaw conf`` lines."""
    out: dict[int, list[Obs]] = {}
    with open(path) as fh:
        for lineno, line in enumerate(fh, 1):
            parts = line.split()
            if not parts:
                continue
            if len(parts) != 10:
                raise ScanFormatError(f"{path}:{lineno}: expected 10 fields, got {len(parts)}")
            try:
                frame, tid = int(parts[0]), int(parts[1])
                vals = [float(x) for x in parts[2:]]
            except ValueError as exc:
                raise ScanFormatError(f"{path}:{lineno}: {exc}") from None
            out.setdefault(frame, []).append(Obs(tid, tuple(vals[0:3]), vals[7]))
    return out


def gt_to_obs(gt: dict) -> dict[int, list[Obs]]:
    """Ground truth ``frame -> [GroundTruthObject]`` as metric observations."""
    return {f: [Obs(o.track_id, tuple(o.center)) for o in objs] for f, objs in gt.items()}


def format_report(rep: MotReport, avg: AveragedReport | None = None) -> str:
    lines = [
        f"MOTA  {rep.mota * 100:8.2f}",
        f"MOTP  {rep.motp:8.2f}",
        f"IDS   {rep.ids:8d}",
        f"FP    {rep.fp:8d}",
        f"FN    {rep.fn:8d}",
        f"MT    {rep.mt * 100:8.2f}",
        f"ML    {rep.ml * 100:8.2f}",
        f"FRAG  {rep.frag:8d}",
        f"GT    {rep.num_gt:8d}",
    ]
    if avg is not None:
        lines += [
            f"sAMOTA {avg.samota * 100:7.2f}",
            f"AMOTA  {avg.amota * 100:7.2f}",
            f"AMOTP  {avg.amotp:7.2f}",
        ]
    return "\n".join(lines) + "\n"


def write_report(out_dir, rep: MotReport, avg: AveragedReport | None = None) -> None:
    os.makedirs(out_dir, exist_ok=True)
    with open(os.path.join(out_dir, "summary.txt"), "w") as fh:
        fh.write(format_report(rep, avg))
    kv = rep.as_dict()
    if avg is not None:
        kv.update(amota=avg.amota, samota=avg.samota, amotp=avg.amotp)
    with open(os.path.join(out_dir, "metrics.txt"), "w") as fh:
        for k, v in kv.items():
            fh.write(f"{k} = {v!r}\n")
    if avg is not None:
        with open(os.path.join(out_dir, "recall.csv"), "w") as fh:
            fh.write("recall,threshold,mota,smota,motp\n")
            for row in zip(avg.recalls, avg.thresholds, avg.mota, avg.smota, avg.motp):
                fh.write(",".join(repr(float(x)) for x in row) + "\n")
