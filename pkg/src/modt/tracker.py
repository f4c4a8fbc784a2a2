"""Greedy association cascade turning per-frame detections into tracklets.

Per frame:
  1. detection center + tracking offset predicts where the object was at t-1;
     match greedily (ascending distance) to tracks whose last center is within r1
  2. retry unmatched detections with the larger radius r2
  3. match the rest by embedding cosine (>= sim_min) against unmatched tracks
  4. start new tracks; age unmatched tracks and terminate after max_misses
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .heads import Box3D, Detection, OffsetField


@dataclass
class TrackerConfig:
    r1: float = 1.0
    r2: float = 3.0
    sim_min: float = 0.7
    max_misses: int = 3
    ema: float = 0.9

    def __post_init__(self):
        if not (0 < self.r1 <= self.r2):
            raise ValueError("need 0 < r1 <= r2")
        if not (-1 < self.sim_min < 1):
            raise ValueError("sim_min must lie in (-1, 1)")
        if self.max_misses < 0:
            raise ValueError("max_misses must be >= 0")


@dataclass
class Track:
    id: int
    history: list[tuple[int, Box3D]]
    embedding: np.ndarray
    confidences: list[float] = field(default_factory=list)
    misses: int = 0
    active: bool = True

    @property
    def last_center(self) -> np.ndarray:
        return self.history[-1][1].center

    def __len__(self) -> int:
        return len(self.history)


@dataclass
class TrackerState:
    active: list[Track] = field(default_factory=list)
    terminated: list[Track] = field(default_factory=list)
    next_id: int = 0
    frame: int = -1


def _cosine(a: np.ndarray, b: np.ndarray) -> float:
    na, nb = np.linalg.norm(a), np.linalg.norm(b)
    if na < 1e-12 or nb < 1e-12:
        return 0.0
    return float(a @ b / (na * nb))


def detection_offsets(dets: list[Detection], offsets) -> np.ndarray:
    """Per-detection t -> t-1 displacement.

    ``offsets`` may be None (zero motion), an (len(dets), 3) array, or an
    :class:`OffsetField` with ``points`` set (offset of the point nearest the center).
    """
    n = len(dets)
    if offsets is None:
        return np.zeros((n, 3))
    if isinstance(offsets, OffsetField):
        if offsets.skipped or offsets.points is None:
            return np.zeros((n, 3))
        return np.array([offsets.at(d.box.center, offsets.points) for d in dets]).reshape(n, 3)
    return np.asarray(offsets, dtype=np.float64).reshape(n, 3)


def _greedy(pairs: list[tuple[float, int, int]], det_free: set, trk_free: set):
    """pairs are (key, det index, track id) sorted ascending; returns det -> track id."""
    out = {}
    for _, i, tid in sorted(pairs):
        if i in det_free and tid in trk_free:
            out[i] = tid
            det_free.discard(i)
            trk_free.discard(tid)
    return out


def step(
    state: TrackerState,
    dets: list[Detection],
    offsets,
    cfg: TrackerConfig,
    frame: int | None = None,
) -> TrackerState:
    """Advance the tracker by one frame (mutates and returns ``state``)."""
    frame = state.frame + 1 if frame is None else frame
    offs = detection_offsets(dets, offsets)
    by_id = {t.id: t for t in state.active}
    det_free = set(range(len(dets)))
    trk_free = set(by_id)
    assign: dict[int, int] = {}

    predicted = [d.box.center + offs[i] for i, d in enumerate(dets)]
    for radius in (cfg.r1, cfg.r2):
        pairs = []
        for i in det_free:
            for tid in trk_free:
                dist = float(np.linalg.norm(predicted[i] - by_id[tid].last_center))
                if dist <= radius:
                    pairs.append((dist, i, tid))
        assign.update(_greedy(pairs, det_free, trk_free))

    pairs = []
    for i in det_free:
        for tid in trk_free:
            sim = _cosine(dets[i].embedding, by_id[tid].embedding)
            if sim >= cfg.sim_min:
                pairs.append((-sim, i, tid))
    assign.update(_greedy(pairs, det_free, trk_free))

    for i, tid in assign.items():
        trk = by_id[tid]
        trk.history.append((frame, dets[i].box))
        trk.confidences.append(dets[i].confidence)
        trk.embedding = cfg.ema * trk.embedding + (1.0 - cfg.ema) * dets[i].embedding
        trk.misses = 0

    still = []
    for trk in state.active:
        if trk.id in trk_free:
            trk.misses += 1
            if trk.misses > cfg.max_misses:
                trk.active = False
                state.terminated.append(trk)
                continue
        still.append(trk)
    for i in sorted(det_free):
        d = dets[i]
        still.append(
            Track(state.next_id, [(frame, d.box)], np.array(d.embedding, dtype=np.float64), [d.confidence])
        )
        state.next_id += 1
    state.active = still
    state.frame = frame
    return state


def run(frames, cfg: TrackerConfig, first_frame: int = 0) -> list[Track]:
    """Fold :func:`step` over ``(dets, offsets)`` pairs; return every track, by id."""
    state = TrackerState(frame=first_frame - 1)
    for dets, offsets in frames:
        step(state, dets, offsets, cfg)
    return sorted(state.terminated + state.active, key=lambda t: t.id)


def track_lines(tracks: list[Track]) -> list[str]:
    rows = []
    for trk in tracks:
        for (frame, box), conf in zip(trk.history, trk.confidences):
            c, s = box.center, box.size
            rows.append(
                (
                    frame,
                    trk.id,
                    f"{frame} {trk.id} {c[0]:.6f} {c[1]:.6f} {c[2]:.6f} "
                    f"{s[0]:.6f} {s[1]:.6f} {s[2]:.6f} {box.yaw:.6f} {conf:.6f}",
                )
            )
    return [r[2] for r in sorted(rows)]


def write_tracks(path, tracks: list[Track]) -> None:
    with open(path, "w") as fh:
        for line in track_lines(tracks):
            fh.write(line + "\n")
