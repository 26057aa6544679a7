"""Activation-aware low-rank approximation of a single layer.

The retained subspace comes from the SVD of x_rep·W (the representative
activation times the weight), so truncation minimizes layer *output* error
rather than weight error. The singular values of that product are cached per
layer and reused by the rank allocator.
"""
from dataclasses import dataclass

import numpy as np

from .errors import ValidationError
from .linalg import DEFAULT_RCOND, as_matrix, pinv, svd, truncate


@dataclass(frozen=True)
class SingularSpectrum:
    """Cached singular values of x_rep·W for one layer."""

    layer: str
    values: np.ndarray
    total_energy: float

    def __len__(self):
        return len(self.values)


@dataclass(frozen=True)
class LowRankFactors:
    """Factor pair whose product left·rightᵀ (n×d) replaces the weight."""

    left: np.ndarray   # n×r
    right: np.ndarray  # d×r
    rank: int

    def product(self):
        return self.left @ self.right.T


@dataclass(frozen=True)
class OutputError:
    """Mean normalized output error; zero-output samples are skipped, not averaged."""

    value: float
    skipped: int
    used: int


def activation_aware_spectrum(layer, x_rep):
    """Singular spectrum of x_rep·W. Computed once per layer, then reused."""
    x_rep = as_matrix(x_rep, "x_rep")
    if x_rep.shape[1] != layer.n:
        raise ValidationError(
            f"layer '{layer.name}': x_rep has {x_rep.shape[1]} columns, expected n={layer.n}"
        )
    values = svd(x_rep @ layer.weight).s
    return SingularSpectrum(
        layer=layer.name, values=values, total_energy=float(np.sum(values**2))
    )


def factorize(layer, x_rep, r, rcond=DEFAULT_RCOND):
    """Activation-aware rank-r factors for one layer.

    With P = x_rep·W truncated to U*ΣV*ᵀ, the factors are
    left = pinv(x_rep)·U*·√Σ and right = V*·√Σ, so x_rep·left·rightᵀ equals
    the rank-r truncation of P whenever the retained left singular vectors
    lie in the column space of x_rep (always true since P = x_rep·W).
    """
    x_rep = as_matrix(x_rep, "x_rep")
    if x_rep.shape[1] != layer.n:
        raise ValidationError(
            f"layer '{layer.name}': x_rep has {x_rep.shape[1]} columns, expected n={layer.n}"
        )
    top = truncate(svd(x_rep @ layer.weight), r)
    sqrt_s = np.sqrt(top.s)
    left = pinv(x_rep, rcond) @ (top.u * sqrt_s)
    right = top.vt.T * sqrt_s
    return LowRankFactors(left=left, right=right, rank=r)


def weight_svd_factors(layer, r):
    """Activation-oblivious baseline: same contract with x_rep = identity."""
    return factorize(layer, np.eye(layer.n), r)


def energy_loss(spec, keep):
    """Fraction of spectral energy lost when only `keep` singular values remain."""
    if not 0 <= keep <= len(spec):
        raise ValidationError(f"keep={keep} out of range [0, {len(spec)}]")
    if spec.total_energy == 0.0:
        return 0.0
    tail = float(np.sum(spec.values[keep:] ** 2))
    return tail / spec.total_energy


def layer_output_error(layer, factors, compensation, proxy_stack):
    """Mean over samples of ‖x·(Ŵ − W)‖²/‖x·W‖², with Ŵ the factored weight.

    `compensation` is an optional second factor pair added to the product.
    Samples whose reference output is exactly zero are skipped and counted.
    """
    if len(proxy_stack) == 0:
        raise ValidationError(f"layer '{layer.name}': empty proxy")
    approx = factors.product()
    if compensation is not None:
        approx = approx + compensation.product()
    delta = approx - layer.weight
    total = 0.0
    skipped = 0
    for x in proxy_stack:
        ref = x @ layer.weight
        denom = float(np.sum(ref * ref))
        if denom == 0.0:
            skipped += 1
            continue
        diff = x @ delta
        total += float(np.sum(diff * diff)) / denom
    used = len(proxy_stack) - skipped
    if used == 0:
        raise ValidationError(f"layer '{layer.name}': every proxy sample has zero output")
    return OutputError(value=total / used, skipped=skipped, used=used)
