"""Dense linear-algebra primitives used by the loss stack.

Matrices are plain 2-D numpy arrays.  Every forward op that needs a backward
pass returns its cache as a value; nothing here holds state between calls.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

NORM_FLOOR = 1e-12
DEFAULT_BN_EPS = 1e-5


class ShapeError(ValueError):
    """Raised when operand shapes are incompatible."""


def as_matrix(a, dtype=None) -> np.ndarray:
    m = np.asarray(a, dtype=dtype)
    if m.ndim != 2 or m.shape[0] < 1 or m.shape[1] < 1:
        raise ShapeError(f"expected a non-empty 2-D matrix, got shape {m.shape}")
    return m


def matmul(a, b) -> np.ndarray:
    a = as_matrix(a)
    b = as_matrix(b)
    if a.shape[1] != b.shape[0]:
        raise ShapeError(f"cannot multiply {a.shape[0]}x{a.shape[1]} by {b.shape[0]}x{b.shape[1]}")
    return a @ b


@dataclass
class BatchNormState:
    """Learnable per-dimension affine parameters of a batch-norm layer."""

    gamma: np.ndarray
    beta: np.ndarray
    eps: float = DEFAULT_BN_EPS

    def __post_init__(self):
        self.gamma = np.asarray(self.gamma)
        self.beta = np.asarray(self.beta)
        if self.gamma.ndim != 1 or self.gamma.shape != self.beta.shape:
            raise ShapeError(
                f"gamma {self.gamma.shape} and beta {self.beta.shape} must be equal-length vectors"
            )
        if not self.eps > 0:
            raise ValueError(f"eps must be positive, got {self.eps}")

    @classmethod
    def identity(cls, dim: int, eps: float = DEFAULT_BN_EPS, dtype=np.float64) -> "BatchNormState":
        return cls(np.ones(dim, dtype=dtype), np.zeros(dim, dtype=dtype), eps)

    @property
    def dim(self) -> int:
        return self.gamma.shape[0]


@dataclass
class BatchNormCache:
    x_hat: np.ndarray
    mean: np.ndarray
    var: np.ndarray
    inv_std: np.ndarray
    gamma: np.ndarray = field(repr=False)


def batch_normalize(x, state: BatchNormState, eps: float | None = None):
    """Whiten each column of ``x`` with its batch statistics.

    Uses the biased variance (divide by B).  ``eps`` overrides ``state.eps``;
    passing ``eps=0`` is allowed for exact hand checks on non-degenerate
    columns.

    Returns ``(y, cache)``.
    """
    x = as_matrix(x)
    if x.shape[0] < 2:
        raise ShapeError(f"batch normalization needs at least 2 rows, got {x.shape[0]}")
    if x.shape[1] != state.dim:
        raise ShapeError(f"input has {x.shape[1]} columns but batch-norm state has {state.dim}")
    eps = state.eps if eps is None else eps
    mean = x.mean(axis=0)
    xc = x - mean
    var = (xc * xc).mean(axis=0)
    inv_std = 1.0 / np.sqrt(var + eps)
    x_hat = xc * inv_std
    y = state.gamma * x_hat + state.beta
    return y, BatchNormCache(x_hat=x_hat, mean=mean, var=var, inv_std=inv_std, gamma=state.gamma)


def batch_normalize_backward(grad_y, cache: BatchNormCache):
    """Return ``(grad_x, grad_gamma, grad_beta)`` for :func:`batch_normalize`."""
    grad_y = as_matrix(grad_y)
    if grad_y.shape != cache.x_hat.shape:
        raise ShapeError(f"upstream gradient {grad_y.shape} does not match cached input {cache.x_hat.shape}")
    n = grad_y.shape[0]
    grad_beta = grad_y.sum(axis=0)
    grad_gamma = (grad_y * cache.x_hat).sum(axis=0)
    g_hat = grad_y * cache.gamma
    grad_x = (cache.inv_std / n) * (
        n * g_hat - g_hat.sum(axis=0) - cache.x_hat * (g_hat * cache.x_hat).sum(axis=0)
    )
    return grad_x, grad_gamma, grad_beta


@dataclass
class CorrelationCache:
    p_s: np.ndarray
    p_t: np.ndarray
    norm_s: np.ndarray
    norm_t: np.ndarray
    clamped_s: np.ndarray
    clamped_t: np.ndarray
    corr: np.ndarray


def _column_norms(p: np.ndarray, guard: bool, name: str):
    norms = np.sqrt((p * p).sum(axis=0))
    clamped = norms < NORM_FLOOR
    if clamped.any() and not guard:
        cols = np.flatnonzero(clamped).tolist()
        raise ValueError(f"{name} has zero-norm columns {cols}")
    return np.maximum(norms, NORM_FLOOR), clamped


def cross_correlation(p_s, p_t, guard: bool = True):
    """Column-normalised cross-correlation between two projection batches.

    ``C[i, j] = sum_b p_s[b, i] p_t[b, j] / (|p_s[:, i]| |p_t[:, j]|)``.
    Column norms are floored at ``NORM_FLOOR`` unless ``guard`` is off, in
    which case a zero-norm column raises.

    Returns ``(C, cache)``.
    """
    p_s = as_matrix(p_s)
    p_t = as_matrix(p_t)
    if p_s.shape != p_t.shape:
        raise ShapeError(f"projection shapes differ: {p_s.shape} vs {p_t.shape}")
    norm_s, clamped_s = _column_norms(p_s, guard, "p_s")
    norm_t, clamped_t = _column_norms(p_t, guard, "p_t")
    # sqrt of the squared-norm product keeps C[i, i] exactly 1 for identical columns
    sq_s = np.maximum((p_s * p_s).sum(axis=0), NORM_FLOOR * NORM_FLOOR)
    sq_t = np.maximum((p_t * p_t).sum(axis=0), NORM_FLOOR * NORM_FLOOR)
    corr = (p_s.T @ p_t) / np.sqrt(np.outer(sq_s, sq_t))
    return corr, CorrelationCache(p_s, p_t, norm_s, norm_t, clamped_s, clamped_t, corr)


def cross_correlation_backward(grad_c, cache: CorrelationCache):
    """Gradient of a scalar through :func:`cross_correlation`, norms included."""
    grad_c = as_matrix(grad_c)
    if grad_c.shape != cache.corr.shape:
        raise ShapeError(f"upstream gradient {grad_c.shape} does not match correlation {cache.corr.shape}")
    h = grad_c / np.outer(cache.norm_s, cache.norm_t)
    gc = grad_c * cache.corr
    # d/d(norm): -sum of G*C over the other index, divided by the norm
    d_norm_s = np.where(cache.clamped_s, 0.0, -gc.sum(axis=1) / cache.norm_s)
    d_norm_t = np.where(cache.clamped_t, 0.0, -gc.sum(axis=0) / cache.norm_t)
    grad_ps = cache.p_t @ h.T + cache.p_s * (d_norm_s / cache.norm_s)
    grad_pt = cache.p_s @ h + cache.p_t * (d_norm_t / cache.norm_t)
    return grad_ps, grad_pt


def covariance(f) -> np.ndarray:
    """Unbiased feature covariance, ``(f^T f - (1/B) s^T s) / (B - 1)`` with ``s`` the column sums."""
    f = as_matrix(f)
    n = f.shape[0]
    if n < 2:
        raise ShapeError(f"covariance needs at least 2 rows, got {n}")
    fc = f - f.mean(axis=0)
    cov = (fc.T @ fc) / (n - 1)
    return 0.5 * (cov + cov.T)


def covariance_backward(grad_cov, f) -> np.ndarray:
    """Gradient w.r.t. ``f`` of a scalar whose gradient w.r.t. ``covariance(f)`` is ``grad_cov``."""
    f = as_matrix(f)
    grad_cov = as_matrix(grad_cov)
    d = f.shape[1]
    if grad_cov.shape != (d, d):
        raise ShapeError(f"upstream gradient {grad_cov.shape} does not match covariance ({d}, {d})")
    n = f.shape[0]
    fc = f - f.mean(axis=0)
    return fc @ (grad_cov + grad_cov.T) / (n - 1)
