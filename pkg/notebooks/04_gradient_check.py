"""
Checking the autodiff gradient
==============================

The tape-based autodiff is checked end to end, through encoder, affinity,
refinement and heads, against central finite differences on a small scene
(32 points, 8 tokens).  ``modt gradcheck`` runs the same check.
"""

from modt.gradcheck import TOLERANCE, gradcheck_config, run_gradcheck

cfg = gradcheck_config()
print(f"{cfg.scene.num_objects} objects x {cfg.scene.points_per_object} points + {cfg.scene.clutter} clutter, "
      f"{cfg.encoder.tokens} tokens")

for r in run_gradcheck(cfg, seeds=range(2)):
    worst = max(r.per_tensor, key=r.per_tensor.get)
    print(f"seed {r.seed}: loss {r.loss:.4f}, worst relative error {r.worst:.1e} "
          f"({worst}), {'ok' if r.ok else 'FAIL'} at tolerance {TOLERANCE}")
