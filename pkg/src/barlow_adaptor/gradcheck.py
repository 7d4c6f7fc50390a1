"""Central finite-difference checks for every hand-written backward pass.

All checks run in float64.  The error measure is
``max|analytic - numeric| / max(max|analytic|, max|numeric|)`` taken over
every gradient a check produces, concatenated.  It stays meaningful when
individual entries, or whole blocks such as a bias feeding batch-norm, have
a true gradient of 0.
"""

from __future__ import annotations

import time
from dataclasses import dataclass

import numpy as np

from . import core, losses
from .model import Architecture, LayerSpec, init_params, mlp_specs
from .trainer import Variant, step_objective

FD_STEP = 1e-5
TOLERANCES = {
    "batch_normalize": 1e-5,
    "cross_correlation": 1e-5,
    "covariance": 1e-5,
    "bfal": 1e-5,
    "coral": 1e-5,
    "cross_entropy": 1e-5,
    "model": 1e-4,
}


def numeric_grad(f, x: np.ndarray, h: float = FD_STEP) -> np.ndarray:
    """Central differences of scalar ``f()`` w.r.t. ``x``, perturbing ``x`` in place."""
    g = np.zeros_like(x)
    flat, gflat = x.reshape(-1), g.reshape(-1)
    for i in range(flat.size):
        old = flat[i]
        flat[i] = old + h
        fp = f()
        flat[i] = old - h
        fm = f()
        flat[i] = old
        gflat[i] = (fp - fm) / (2 * h)
    return g


def rel_error(analytic, numeric) -> float:
    analytic = np.asarray(analytic, dtype=np.float64)
    numeric = np.asarray(numeric, dtype=np.float64)
    scale = max(np.abs(analytic).max(initial=0.0), np.abs(numeric).max(initial=0.0))
    if scale == 0.0:
        return 0.0
    return float(np.abs(analytic - numeric).max() / scale)


def _worst(pairs) -> float:
    # one error over the concatenated gradient, so blocks whose true gradient is 0 are judged at its scale
    pairs = list(pairs)
    return rel_error(np.concatenate([np.ravel(a) for a, _ in pairs]), np.concatenate([np.ravel(n) for _, n in pairs]))


def check_batch_normalize(rng) -> float:
    b, p = int(rng.integers(3, 8)), int(rng.integers(1, 6))
    x = rng.normal(size=(b, p)) * rng.uniform(0.5, 3.0, size=p) + rng.normal(size=p)
    state = core.BatchNormState(rng.uniform(0.5, 2.0, size=p), rng.normal(size=p))
    up = rng.normal(size=(b, p))

    def f():
        return float((core.batch_normalize(x, state)[0] * up).sum())

    _, cache = core.batch_normalize(x, state)
    gx, gg, gb = core.batch_normalize_backward(up, cache)
    return _worst([(gx, numeric_grad(f, x)), (gg, numeric_grad(f, state.gamma)), (gb, numeric_grad(f, state.beta))])


def check_cross_correlation(rng) -> float:
    b, p = int(rng.integers(2, 8)), int(rng.integers(1, 6))
    ps, pt = rng.normal(size=(b, p)), rng.normal(size=(b, p))
    up = rng.normal(size=(p, p))

    def f():
        return float((core.cross_correlation(ps, pt)[0] * up).sum())

    _, cache = core.cross_correlation(ps, pt)
    g_s, g_t = core.cross_correlation_backward(up, cache)
    return _worst([(g_s, numeric_grad(f, ps)), (g_t, numeric_grad(f, pt))])


def check_covariance(rng) -> float:
    b, d = int(rng.integers(2, 8)), int(rng.integers(1, 6))
    x = rng.normal(size=(b, d))
    up = rng.normal(size=(d, d))

    def f():
        return float((core.covariance(x) * up).sum())

    return rel_error(core.covariance_backward(up, x), numeric_grad(f, x))


def check_bfal(rng) -> float:
    b, p = 6, 4
    ps, pt = rng.normal(size=(b, p)), rng.normal(size=(b, p))
    mu = float(rng.uniform(0.0, 1.0))

    def f():
        return losses.bfal_forward(ps, pt, mu)[0]

    g_s, g_t = losses.bfal_backward(losses.bfal_forward(ps, pt, mu)[1])
    return _worst([(g_s, numeric_grad(f, ps)), (g_t, numeric_grad(f, pt))])


def check_coral(rng) -> float:
    fs, ft = rng.normal(size=(5, 3)), rng.normal(size=(5, 3)) * 1.5 + 0.3

    def f():
        return losses.coral_forward(fs, ft)[0]

    g_s, g_t = losses.coral_backward(losses.coral_forward(fs, ft)[1])
    return _worst([(g_s, numeric_grad(f, fs)), (g_t, numeric_grad(f, ft))])


def check_cross_entropy(rng) -> float:
    logits = rng.normal(size=(4, 3)) * 2.0
    labels = rng.integers(0, 3, size=4)

    def f():
        return losses.cross_entropy_forward(logits, labels)[0]

    g = losses.cross_entropy_backward(losses.cross_entropy_forward(logits, labels)[1])
    return rel_error(g, numeric_grad(f, logits))


def toy_architecture(in_dim: int = 5, hidden: int = 6, feature_dim: int = 5, proj_dim: int = 4,
                     num_classes: int = 3) -> Architecture:
    """Two-affine-layer extractor with a batch-norm projector, small enough for finite differences."""
    return Architecture(
        extractor=mlp_specs([in_dim, hidden, feature_dim]),
        projector=(LayerSpec("affine", feature_dim, proj_dim), LayerSpec("batchnorm", proj_dim, proj_dim)),
        classifier=mlp_specs([feature_dim, num_classes]),
    )


def check_model(rng, weights: losses.LossWeights | None = None, variant=Variant.FULL) -> float:
    """Whole-stack parameter gradient of the combined loss."""
    weights = weights or losses.LossWeights(lam=1.0, mu=0.5)
    arch = toy_architecture()
    params = init_params(arch, int(rng.integers(2**31)), dtype=np.float64)
    for k, v in params.arrays.items():
        if k.endswith((".bias", ".beta")):
            v += 0.1 * rng.normal(size=v.shape)
        elif k.endswith(".gamma"):
            v *= rng.uniform(0.5, 1.5, size=v.shape)
    b = 4
    x_s = rng.normal(size=(b, arch.in_dim))
    x_t = rng.normal(size=(b, arch.in_dim)) * 1.3 + 0.5
    y_s = rng.integers(0, arch.num_classes, size=b)

    def f():
        return step_objective(params, x_s, y_s, x_t, weights, variant)[0].total

    _, grads, _ = step_objective(params, x_s, y_s, x_t, weights, variant)
    return _worst((grads[k], numeric_grad(f, params.arrays[k])) for k in params.arrays)


CHECKS = {
    "batch_normalize": check_batch_normalize,
    "cross_correlation": check_cross_correlation,
    "covariance": check_covariance,
    "bfal": check_bfal,
    "coral": check_coral,
    "cross_entropy": check_cross_entropy,
    "model": check_model,
}


@dataclass
class CheckResult:
    op: str
    trials: int
    worst: float
    tolerance: float
    seconds: float

    @property
    def passed(self) -> bool:
        return self.worst < self.tolerance


def run_suite(seed: int = 0, trials: int = 100, ops=None) -> list[CheckResult]:
    """Run each check on ``trials`` independently seeded random instances."""
    results = []
    for i, op in enumerate(ops or CHECKS):
        t0 = time.perf_counter()
        seqs = np.random.SeedSequence([seed, i]).spawn(trials)
        worst = max(CHECKS[op](np.random.default_rng(s)) for s in seqs)
        results.append(CheckResult(op, trials, worst, TOLERANCES[op], time.perf_counter() - t0))
    return results
