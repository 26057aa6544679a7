"""Multiplication-count and storage-size accounting for factored layers."""
from dataclasses import dataclass

from .errors import ValidationError


@dataclass(frozen=True)
class LayerCost:
    layer: str
    original_mults: int
    factored_mults: int
    ratio: float


def multiplication_counts(n, k, m, r, q):
    """Raw counts for X(n×k)·W(k×m) vs the two-factor route at ranks r and q."""
    if min(n, k, m, r) < 1 or q < 0:
        raise ValidationError(f"dimensions must be positive (n={n}, k={k}, m={m}, r={r}, q={q})")
    original = n * k * m
    factored = n * k * r + n * r * m + n * k * q + n * q * m
    return original, factored


def cost_ratio(n, k, m, r, q):
    """Factored-to-original multiplication ratio, equal to (r+q)(k+m)/(k·m)."""
    original, factored = multiplication_counts(n, k, m, r, q)
    return factored / original


def layer_cost(name, n, k, m, r, q):
    original, factored = multiplication_counts(n, k, m, r, q)
    return LayerCost(layer=name, original_mults=original, factored_mults=factored,
                     ratio=factored / original)


@dataclass(frozen=True)
class SizeReport:
    total_bytes: float
    baseline_bytes: float
    reduction_factor: float


def size_report(groups, baseline_params, baseline_bits=16):
    """Byte totals for parameter groups of (count, bits_per_param) pairs.

    The reduction factor is against the baseline parameter count stored at
    `baseline_bits` (FP16 by default).
    """
    total_bits = 0
    for count, bits in groups:
        if count < 0 or bits <= 0:
            raise ValidationError(f"bad size group ({count}, {bits})")
        total_bits += count * bits
    total = total_bits / 8.0
    baseline = baseline_params * baseline_bits / 8.0
    if total <= 0:
        raise ValidationError("no parameters to report")
    return SizeReport(total_bytes=total, baseline_bytes=baseline,
                      reduction_factor=baseline / total)
