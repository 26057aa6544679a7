"""Dense linear-algebra kernels: SVD, truncation, pseudo-inverse, Frobenius energy.

All functions take and return 2-D float64 ndarrays. Inputs are validated for
shape and finiteness; internal arithmetic stays in 64-bit floats.
"""
from dataclasses import dataclass

import numpy as np

from .errors import DimensionMismatchError, NonFiniteError, SvdConvergenceError, ValidationError

DEFAULT_RCOND = 1e-10


def as_matrix(a, name="matrix"):
    """Validate and return `a` as a 2-D float64 array with finite entries."""
    m = np.asarray(a, dtype=np.float64)
    if m.ndim != 2:
        raise DimensionMismatchError(f"{name}: expected a 2-D array, got ndim={m.ndim}")
    if m.shape[0] < 1 or m.shape[1] < 1:
        raise DimensionMismatchError(f"{name}: empty dimension in shape {m.shape}")
    if not np.isfinite(m).all():
        raise NonFiniteError(f"{name}: contains NaN or Inf entries")
    return m


@dataclass(frozen=True)
class SvdResult:
    """Thin SVD: u (n×k), s (length k, non-increasing), vt (k×d)."""

    u: np.ndarray
    s: np.ndarray
    vt: np.ndarray

    @property
    def rank_limit(self):
        return len(self.s)

    def reconstruct(self):
        return (self.u * self.s) @ self.vt


def svd(m):
    """Thin SVD of `m` with k = min(rows, cols) singular triplets."""
    m = as_matrix(m)
    try:
        u, s, vt = np.linalg.svd(m, full_matrices=False)
    except np.linalg.LinAlgError as exc:
        rows, cols = m.shape
        raise SvdConvergenceError(f"SVD did not converge for {rows}x{cols} matrix") from exc
    return SvdResult(u=u, s=s, vt=vt)


def truncate(result, r):
    """Keep the largest `r` singular triplets of a thin SVD."""
    k = result.rank_limit
    if not 1 <= r <= k:
        raise ValidationError(f"rank {r} out of range [1, {k}]")
    return SvdResult(u=result.u[:, :r], s=result.s[:r], vt=result.vt[:r, :])


def pinv(m, rcond=DEFAULT_RCOND):
    """Moore-Penrose pseudo-inverse; singular values below rcond*s_max are zeroed."""
    if not 0.0 < rcond < 1.0:
        raise ValidationError(f"rcond must lie in (0, 1), got {rcond}")
    res = svd(m)
    s = res.s
    cutoff = rcond * s[0] if s.size else 0.0
    inv = np.where(s > cutoff, np.divide(1.0, s, out=np.zeros_like(s), where=s > 0), 0.0)
    return (res.vt.T * inv) @ res.u.T


def frob_energy(m):
    """Squared Frobenius norm: sum of squared entries = sum of squared singular values."""
    m = as_matrix(m)
    return float(np.sum(m * m))
