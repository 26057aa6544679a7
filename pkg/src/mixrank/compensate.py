"""Layer-wise error compensation.

A second, much lower-rank factor pair is fitted to the residual left by the
truncated factorization, by mini-batch gradient descent on the normalized
per-sample regression loss. Layers are independent: nothing here reads or
writes another layer's state.

Alternative residual structures (unstructured sparse, structured sparse,
diagonal) are provided as closed-form baseline evaluators for comparison
only; they take the same parameter budget and the same normalized loss.
"""
import math
from dataclasses import dataclass, field

import numpy as np

from .errors import DivergenceError, ValidationError
from .linalg import as_matrix


def comp_rank(layer, budget_fraction):
    """Rank q such that the two factors consume ~budget_fraction of n·d params."""
    if not 0.0 < budget_fraction < 1.0:
        raise ValidationError(f"budget_fraction must lie in (0, 1), got {budget_fraction}")
    n, d = layer.n, layer.d
    return max(1, math.floor(budget_fraction * n * d / (n + d)))


@dataclass(frozen=True)
class GdConfig:
    learning_rate: float = 1e-3
    iterations: int = 2000
    batch_size: int = 64
    seed: int = 0
    checkpoint_every: int = 100

    def __post_init__(self):
        if self.learning_rate <= 0:
            raise ValidationError(f"learning_rate must be positive, got {self.learning_rate}")
        if self.iterations < 1 or self.batch_size < 1:
            raise ValidationError("iterations and batch_size must be >= 1")


@dataclass(frozen=True)
class CompensationFactors:
    """Residual factor pair; product left·rightᵀ has rank <= rank."""

    left: np.ndarray   # n×q
    right: np.ndarray  # d×q
    rank: int

    def product(self):
        return self.left @ self.right.T


@dataclass(frozen=True)
class NormalizedPair:
    """One proxy sample scaled by its reference output norm."""

    a: np.ndarray  # s×n: x / ||x·W||_F
    b: np.ndarray  # s×d: x·(W − left·rightᵀ) / ||x·W||_F


@dataclass
class GdLogRow:
    iteration: int
    batch_loss: float
    full_loss: float | None = None


@dataclass
class CompensationResult:
    factors: CompensationFactors
    initial_loss: float
    final_loss: float
    log: list[GdLogRow] = field(default_factory=list)


def normalize_sample(x, layer, factors):
    """Build the (a, b) pair for one sample; None signals a zero-output skip."""
    x = as_matrix(x, "sample")
    ref = x @ layer.weight
    norm = float(np.linalg.norm(ref))
    if norm == 0.0:
        return None
    residual = layer.weight - factors.product()
    return NormalizedPair(a=x / norm, b=(x @ residual) / norm)


def _stack(pairs):
    a = np.stack([p.a for p in pairs])
    b = np.stack([p.b for p in pairs])
    return a, b


def _loss(a, b, g, y):
    diff = np.einsum("isn,nq,dq->isd", a, g, y, optimize=True) - b
    return float(np.sum(diff * diff)) / a.shape[0]


def _gradients(a, b, g, y):
    diff = np.einsum("isn,nq,dq->isd", a, g, y, optimize=True) - b
    scale = 2.0 / a.shape[0]
    dg = scale * np.einsum("isn,isd,dq->nq", a, diff, y, optimize=True)
    dy = scale * np.einsum("isd,isn,nq->dq", diff, a, g, optimize=True)
    return dg, dy


def loss(pairs, g, y):
    """Mean over the batch of ‖a·g·yᵀ − b‖²."""
    a, b = _stack(pairs)
    return _loss(a, b, g, y)


def gradients(pairs, g, y):
    """Closed-form batch gradients of `loss` with respect to g and y."""
    a, b = _stack(pairs)
    return _gradients(a, b, g, y)


def compensate(layer, factors, proxy_stack, cfg, budget_fraction=0.05):
    """Fit the compensation pair by mini-batch gradient descent.

    The left factor starts as small seeded Gaussian noise and the right as
    zero, so the product starts at zero without being a stationary point.
    The returned factors are the best full-proxy checkpoint seen, which is
    never worse than the zero-product start.
    """
    q = comp_rank(layer, budget_fraction)
    if q >= factors.rank:
        raise ValidationError(
            f"layer '{layer.name}': compensation rank {q} must stay below factor rank {factors.rank}"
        )
    pairs = [p for p in (normalize_sample(x, layer, factors) for x in proxy_stack) if p is not None]
    if not pairs:
        raise ValidationError(f"layer '{layer.name}': no usable proxy samples")
    a_all, b_all = _stack(pairs)
    count = a_all.shape[0]

    rng = np.random.default_rng(cfg.seed)
    g = rng.normal(0.0, 1e-3, size=(layer.n, q))
    y = np.zeros((layer.d, q))

    initial = _loss(a_all, b_all, g, y)
    best = (initial, g.copy(), y.copy())
    log = [GdLogRow(iteration=0, batch_loss=initial, full_loss=initial)]

    order = np.arange(count)
    pos = count  # force a shuffle before the first batch
    batch = min(cfg.batch_size, count)
    for it in range(1, cfg.iterations + 1):
        if pos + batch > count:
            rng.shuffle(order)
            pos = 0
        idx = order[pos : pos + batch]
        pos += batch
        a, b = a_all[idx], b_all[idx]
        batch_loss = _loss(a, b, g, y)
        if not math.isfinite(batch_loss):
            raise DivergenceError(
                f"layer '{layer.name}': loss diverged at iteration {it} "
                f"(learning_rate={cfg.learning_rate})"
            )
        dg, dy = _gradients(a, b, g, y)
        g = g - cfg.learning_rate * dg
        y = y - cfg.learning_rate * dy
        row = GdLogRow(iteration=it, batch_loss=batch_loss)
        if it % cfg.checkpoint_every == 0 or it == cfg.iterations:
            full = _loss(a_all, b_all, g, y)
            if not math.isfinite(full):
                raise DivergenceError(
                    f"layer '{layer.name}': loss diverged at iteration {it} "
                    f"(learning_rate={cfg.learning_rate})"
                )
            row.full_loss = full
            if full < best[0]:
                best = (full, g.copy(), y.copy())
        log.append(row)

    final, g, y = best
    return CompensationResult(
        factors=CompensationFactors(left=g, right=y, rank=q),
        initial_loss=initial,
        final_loss=final,
        log=log,
    )


def evaluate_z(pairs, z):
    """Mean normalized residual left by an explicit compensation matrix z."""
    a, b = _stack(pairs)
    diff = a @ z - b
    return float(np.sum(diff * diff)) / a.shape[0]


def unstructured_sparse_z(residual, budget_params):
    """Keep the largest-magnitude entries of the residual (value budget only)."""
    k = min(budget_params, residual.size)
    z = np.zeros_like(residual)
    if k == 0:
        return z
    flat = np.abs(residual).ravel()
    keep = np.argpartition(flat, residual.size - k)[residual.size - k :]
    z.ravel()[keep] = residual.ravel()[keep]
    return z


def structured_sparse_z(residual, budget_params):
    """Keep whole columns of the residual, strongest column norms first."""
    n, d = residual.shape
    cols = min(d, budget_params // n)
    z = np.zeros_like(residual)
    if cols == 0:
        return z
    norms = np.sum(residual * residual, axis=0)
    keep = np.argsort(norms)[::-1][:cols]
    z[:, keep] = residual[:, keep]
    return z


def diagonal_z(pairs, n, d):
    """Least-squares diagonal fit of the normalized residual pairs."""
    a, b = _stack(pairs)
    z = np.zeros((n, d))
    for j in range(min(n, d)):
        num = float(np.sum(a[:, :, j] * b[:, :, j]))
        den = float(np.sum(a[:, :, j] * a[:, :, j]))
        z[j, j] = num / den if den > 0 else 0.0
    return z
