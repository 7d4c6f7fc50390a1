"""Loss values and input gradients for source cross-entropy, CORAL and the
Barlow feature alignment loss, plus their weighted combination."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .core import (
    ShapeError,
    as_matrix,
    covariance,
    covariance_backward,
    cross_correlation,
    cross_correlation_backward,
)

DEFAULT_LAMBDA = 0.001
DEFAULT_MU = 0.0039


@dataclass(frozen=True)
class LossWeights:
    lam: float = DEFAULT_LAMBDA
    mu: float = DEFAULT_MU

    def __post_init__(self):
        if not (self.lam >= 0 and math.isfinite(self.lam)):
            raise ValueError(f"lambda must be a finite non-negative number, got {self.lam}")
        if not (self.mu >= 0 and math.isfinite(self.mu)):
            raise ValueError(f"mu must be a finite non-negative number, got {self.mu}")


@dataclass(frozen=True)
class LossReport:
    ce: float
    coral: float
    bfal: float
    total: float


def combined_loss(ce: float, coral: float, bfal: float, w: LossWeights) -> LossReport:
    """``total = ce + lam * (coral + bfal)``."""
    for name, v in (("ce", ce), ("coral", coral), ("bfal", bfal)):
        if not math.isfinite(v):
            raise FloatingPointError(f"non-finite {name} loss: {v}")
    ce, coral, bfal = float(ce), float(coral), float(bfal)
    return LossReport(ce=ce, coral=coral, bfal=bfal, total=ce + w.lam * (coral + bfal))


# -- Barlow feature alignment -------------------------------------------------


@dataclass
class BFALCache:
    corr_cache: object
    mu: float


def bfal_forward(p_s, p_t, mu: float = DEFAULT_MU):
    """Squared distance of the source/target cross-correlation from identity.

    Diagonal entries are pulled to 1, every off-diagonal entry (both
    triangles) to 0 with weight ``mu``.
    """
    p_s = as_matrix(p_s)
    if p_s.shape[0] < 2:
        raise ShapeError(f"BFAL needs at least 2 rows, got {p_s.shape[0]}")
    corr, cc = cross_correlation(p_s, p_t)
    diag = np.diagonal(corr)
    off = corr - np.diag(diag)
    loss = float(((1.0 - diag) ** 2).sum() + mu * (off * off).sum())
    return loss, BFALCache(cc, mu)


def bfal_backward(cache: BFALCache):
    """Return ``(grad_ps, grad_pt)``."""
    corr = cache.corr_cache.corr
    grad_c = 2.0 * cache.mu * corr
    np.fill_diagonal(grad_c, -2.0 * (1.0 - np.diagonal(corr)))
    return cross_correlation_backward(grad_c, cache.corr_cache)


# -- CORAL ---------------------------------------------------------------------


@dataclass
class CoralCache:
    f_s: np.ndarray
    f_t: np.ndarray
    diff: np.ndarray


def coral_forward(f_s, f_t):
    """``|cov(f_s) - cov(f_t)|_F^2 / (4 D^2)``."""
    f_s = as_matrix(f_s)
    f_t = as_matrix(f_t)
    if f_s.shape[1] != f_t.shape[1]:
        raise ShapeError(f"feature dims differ: {f_s.shape[1]} vs {f_t.shape[1]}")
    d = f_s.shape[1]
    diff = covariance(f_s) - covariance(f_t)
    loss = float((diff * diff).sum() / (4.0 * d * d))
    return loss, CoralCache(f_s, f_t, diff)


def coral_backward(cache: CoralCache):
    """Return ``(grad_fs, grad_ft)``."""
    d = cache.diff.shape[0]
    g = cache.diff / (2.0 * d * d)
    return covariance_backward(g, cache.f_s), covariance_backward(-g, cache.f_t)


# -- cross-entropy -------------------------------------------------------------


@dataclass
class CrossEntropyCache:
    probs: np.ndarray
    labels: np.ndarray


def cross_entropy_forward(logits, labels):
    """Mean softmax negative log-likelihood of integer ``labels``."""
    logits = as_matrix(logits)
    labels = np.asarray(labels)
    n, m = logits.shape
    if labels.shape != (n,):
        raise ShapeError(f"expected {n} labels, got shape {labels.shape}")
    if not np.issubdtype(labels.dtype, np.integer):
        raise TypeError(f"labels must be integers, got {labels.dtype}")
    bad = np.flatnonzero((labels < 0) | (labels >= m))
    if bad.size:
        r = int(bad[0])
        raise ValueError(f"label {int(labels[r])} at row {r} is outside [0, {m})")
    shifted = logits - logits.max(axis=1, keepdims=True)
    log_z = np.log(np.exp(shifted).sum(axis=1, keepdims=True))
    log_probs = shifted - log_z
    loss = float(-log_probs[np.arange(n), labels].mean())
    return loss, CrossEntropyCache(np.exp(log_probs), labels)


def cross_entropy_backward(cache: CrossEntropyCache) -> np.ndarray:
    n = cache.probs.shape[0]
    grad = cache.probs.copy()
    grad[np.arange(n), cache.labels] -= 1.0
    return grad / n
