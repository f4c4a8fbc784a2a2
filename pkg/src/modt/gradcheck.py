"""End-to-end gradient check of the training loss against central differences."""
from __future__ import annotations

import time
from dataclasses import dataclass, field, replace

import numpy as np

from .config import RunConfig
from .numerics import finite_difference_gradient, gradient_error
from .pipeline import batch_loss, init_params, loss_and_grad
from .scans import SceneConfig, synth_scene, window_triplets

TOLERANCE = 1e-4


def gradcheck_config(base: RunConfig | None = None) -> RunConfig:
    """Toy sizes: 2 objects x 12 points + 8 clutter = 32 points, 8 tokens, one triplet."""
    base = base or RunConfig()
    scene = SceneConfig(
        num_objects=2, num_frames=3, points_per_object=12, clutter=8, extent=4.0, speed_max=0.5
    )
    return replace(base, scene=scene, encoder=replace(base.encoder, tokens=8))


@dataclass
class GradCheckResult:
    seed: int
    loss: float
    worst: float  # largest error over checked coordinates
    per_tensor: dict[str, float] = field(default_factory=dict)
    seconds: float = 0.0

    @property
    def ok(self) -> bool:
        return self.worst < TOLERANCE


def check_seed(
    cfg: RunConfig, seed: int, coords_per_tensor: int = 3, h: float = 1e-5, target: str = "total"
) -> GradCheckResult:
    """Compare backward() with central differences on sampled coordinates of every parameter.

    Parameters and scene both derive from ``seed``; ``coords_per_tensor``
    entries of each tensor are drawn without replacement.
    """
    start = time.perf_counter()
    triplets = window_triplets(synth_scene(cfg.scene, seed))
    params = init_params(cfg, seed)
    obj, total, grads = loss_and_grad(triplets, params, cfg, target=target)
    rng = np.random.default_rng(seed)
    per = {}
    for name, value in params.items():
        coords = rng.choice(value.size, size=min(coords_per_tensor, value.size), replace=False)

        def f(x, name=name):
            trial = dict(params)
            trial[name] = x
            o, e, _ = batch_loss(triplets, trial, cfg)
            return (e if target == "total" else o).item()

        numeric = finite_difference_gradient(f, value, h, coords=coords)
        per[name] = gradient_error(grads[name], numeric)
    loss = total if target == "total" else obj
    return GradCheckResult(seed, loss, max(per.values()), per, time.perf_counter() - start)


def run_gradcheck(cfg: RunConfig | None = None, seeds=range(5), coords_per_tensor: int = 3, log=None):
    cfg = gradcheck_config(cfg)
    results = []
    for s in seeds:
        r = check_seed(cfg, s, coords_per_tensor)
        if log is not None:
            log(r)
        results.append(r)
    return results
