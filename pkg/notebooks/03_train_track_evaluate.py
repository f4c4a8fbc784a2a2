"""
Train, track and evaluate
=========================

A full toy run: Adam on the training loss, tracking with the three-stage
greedy cascade, and CLEAR-MOT / averaged-MOT evaluation.  The same steps
are available on the command line as ``modt synth``, ``modt train``,
``modt track`` and ``modt eval``.
"""

import numpy as np

from modt.config import toy_config
from modt.metrics import Obs, averaged_mot, evaluate, gt_to_obs
from modt.pipeline import batch_loss, infer_sequence, init_params, train
from modt.scans import synth_scene, window_triplets
from modt.tracker import TrackerState, step

cfg = toy_config()
seq = synth_scene(cfg.scene, seed=0)
triplets = window_triplets(seq)

# 50 full-batch Adam steps on the toy scene.
params, opt, history = train(init_params(cfg), triplets, cfg, 50)
final = batch_loss(triplets, params, cfg)[1].item()
print(f"loss {history[0]['total']:.3f} -> {final:.3f} after {opt.step_count} steps")

# Detect and track frame by frame.
state = TrackerState()
for out in infer_sequence(seq, params, cfg):
    step(state, out.detections, out.offsets, cfg.tracker, frame=out.frame)
tracks = sorted(state.terminated + state.active, key=lambda trk: trk.id)
print(f"{len(tracks)} tracks, lengths {[len(trk) for trk in tracks]}")

# Evaluate against ground truth, matching within 1 m.
pred = {}
for trk in tracks:
    for (frame, box), conf in zip(trk.history, trk.confidences):
        pred.setdefault(frame, []).append(Obs(trk.id, tuple(box.center), conf))
gt = gt_to_obs({f.cloud.frame: f.objects for f in seq.frames})
rep = evaluate(gt, pred, cfg.eval.dist_max)
avg = averaged_mot(gt, pred, cfg.eval.dist_max)
print(f"MOTA {rep.mota:.3f}  MOTP {rep.motp:.1f}  IDS {rep.ids}  FP {rep.fp}  FN {rep.fn}")
print(f"AMOTA {avg.amota:.3f}  sAMOTA {avg.samota:.3f}")

# Each track file line is: frame track_id cx cy cz w l h yaw conf
box = tracks[0].history[0][1]
print("first box center", np.round(box.center, 2), "size", np.round(box.size, 2))
