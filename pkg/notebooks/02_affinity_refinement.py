"""
Affinities, attention refinement and tracking offsets
=====================================================

Tokens from two scans are compared by cosine similarity; the resulting
matrix is refined by attention over its rows (self) and across the two
consecutive matrices (cross).  Row-softmax of the refined matrix turns it
into soft correspondences, and from those into displacements.
"""

import numpy as np

from modt.affinity import build_affinity, refine
from modt.config import toy_config
from modt.encoder import encode
from modt.heads import predict_offsets
from modt.losses import build_gt_affinity
from modt.pipeline import attention_sets, init_params
from modt.scans import synth_scene, window_triplets

cfg = toy_config()
params = init_params(cfg)
tri = window_triplets(synth_scene(cfg.scene, seed=1))[0]
t, tm1, tm2 = (encode(f.cloud, params, cfg.encoder.tokens, cfg.encoder) for f in tri.frames)
print(f"{len(t)} tokens per scan, vectors of width {t.vectors().shape[1]}")

# Raw affinities are cosines, so they lie in [-1, 1].
a_t, a_tm1 = build_affinity(t, tm1), build_affinity(tm1, tm2)
raw = a_t.numpy()
print(f"raw affinity range [{raw.min():.3f}, {raw.max():.3f}]")

# Refinement: S = A + self(A), then A_hat = S + cross(S).
w_self, w_cross = attention_sets(params, "full")
a_hat, _ = refine(a_t, a_tm1, w_self, w_cross)
print(f"refined affinity range [{a_hat.numpy().min():.3f}, {a_hat.numpy().max():.3f}]")

# Ground truth correspondences: each object token at t links to the token of
# the same track at t-1 with the nearest object-relative position.
g = build_gt_affinity(t, tm1, tri.frames[0].objects, tri.frames[1].objects, margin=0.16).values
rows = np.flatnonzero(g.sum(axis=1))
hits = np.mean([np.argmax(a_hat.numpy()[r]) == np.argmax(g[r]) for r in rows])
print(f"{len(rows)} supervised rows; untrained argmax agreement {hits:.0%}")

# Offsets point from t back to t-1; untrained, they are far from -velocity.
field = predict_offsets(t, tm1, a_hat, params, tri.frames[0].cloud)
print("mean point offset (untrained):", np.round(field.displacements.mean(axis=0), 3))
