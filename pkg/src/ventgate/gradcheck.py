"""Central finite-difference check of the analytic backward pass."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .model import Variant, init_params, loss_and_grad


@dataclass
class GradCheckResult:
    variant: Variant
    config_seed: int
    worst_tensor: str
    max_rel_error: float


def _rel_error(fd: np.ndarray, an: np.ndarray) -> float:
    scale = max(float(np.max(np.abs(fd))) + float(np.max(np.abs(an))), 1e-8)
    return float(np.max(np.abs(fd - an))) / scale


def check_one(variant: Variant | str, seed: int, step: float = 1e-5) -> GradCheckResult:
    """Compare every parameter gradient of one random small model against finite differences."""
    variant = Variant(variant)
    rng = np.random.default_rng([seed, 7])
    n_static = int(rng.integers(1, 5))
    n_dynamic = int(rng.integers(1, 5))
    emb = int(rng.integers(2, 6))
    p = init_params(
        variant, n_static, n_dynamic, emb,
        hidden_dim=int(rng.integers(3, 7)),
        latent_dim=int(rng.integers(2, 5)),
        encoder_layers=int(rng.integers(1, 3)),
        projection_layers=int(rng.integers(1, 3)),
        seed=seed,
    )
    p.rho[:] = rng.normal(size=n_dynamic)
    p.gate_bias[:] = rng.normal()
    n = int(rng.integers(3, 9))
    x = rng.normal(size=(n, n_static + 4 * n_dynamic))
    # TSLM block holds non-negative hours
    x[:, -n_dynamic:] = np.abs(x[:, -n_dynamic:]) * 20.0
    z = rng.normal(size=(n, emb))
    y = (rng.random(n) < 0.5).astype(float)
    y[0], y[1] = 0.0, 1.0
    kw = dict(l2=0.01, pos_weight=1.5)

    _, grads = loss_and_grad(p, x, z, y, **kw)
    worst, worst_name = 0.0, ""
    for name, t in p.tensors().items():
        fd = np.zeros_like(t)
        for i in np.ndindex(t.shape):
            orig = t[i]
            t[i] = orig + step
            lp, _ = loss_and_grad(p, x, z, y, **kw)
            t[i] = orig - step
            lm, _ = loss_and_grad(p, x, z, y, **kw)
            t[i] = orig
            fd[i] = (lp - lm) / (2 * step)
        err = _rel_error(fd, grads[name])
        if err > worst:
            worst, worst_name = err, name
    return GradCheckResult(variant, seed, worst_name, worst)


def run(n_configs: int = 20, seed: int = 0) -> list[GradCheckResult]:
    return [check_one(v, seed + k) for k in range(n_configs) for v in Variant]
