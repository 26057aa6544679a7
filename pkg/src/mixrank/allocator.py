"""Greedy mixed-rank allocation under a parameter-count constraint.

Each iteration removes a slice of parameters sized by an exponential
schedule; the slice is taken from whichever layer loses the least normalized
spectral energy at its tentative reduced rank. Termination is by the actual
factored parameter count (the compression-ratio constraint), never by
iteration count alone.
"""
import csv
import math
from dataclasses import dataclass, field

from .compensate import comp_rank
from .errors import InfeasibleTargetError, ValidationError
from .factorize import energy_loss


def compression_ratio(model, ranks):
    """Original parameter count over factored count: Σ n·d / Σ (n+d)·r."""
    layers = model.layers
    if len(ranks) != len(layers):
        raise ValidationError(f"{len(ranks)} ranks for {len(layers)} layers")
    original = sum(l.n * l.d for l in layers)
    factored = sum((l.n + l.d) * r for l, r in zip(layers, ranks))
    return original / factored


@dataclass(frozen=True)
class ScheduleParams:
    """Exponential parameter-count trajectory from start_params to target_params."""

    start_params: float
    target_params: float
    decay: float = 80.0
    max_iters: int = 500

    def __post_init__(self):
        if self.target_params >= self.start_params:
            raise ValidationError(
                f"target_params {self.target_params} must be below start_params {self.start_params}"
            )
        if self.decay <= 0:
            raise ValidationError(f"decay must be positive, got {self.decay}")


def schedule_value(params, step):
    """Parameter count the schedule aims for after `step` iterations."""
    if step < 0:
        raise ValidationError(f"step must be >= 0, got {step}")
    gap = params.start_params - params.target_params
    return params.target_params + gap * math.exp(-step / params.decay)


@dataclass
class TraceStep:
    step: int
    layer: str
    rank_before: int
    rank_after: int
    loss: float
    params_remaining: int


@dataclass
class AllocationTrace:
    steps: list[TraceStep] = field(default_factory=list)
    refinements: list[TraceStep] = field(default_factory=list)  # post-loop slack repair
    final_ranks: list[int] = field(default_factory=list)

    def write_csv(self, path):
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(
                ["iter", "layer", "rank_before", "rank_after", "energy_loss", "params_remaining"]
            )
            for s in self.steps + self.refinements:
                writer.writerow(
                    [s.step, s.layer, s.rank_before, s.rank_after, repr(s.loss), s.params_remaining]
                )


def initial_ranks(model, spectra):
    """Full ranks, clamped by the spectrum length (at most min(n, d, s))."""
    return [min(l.n, l.d, len(spec)) for l, spec in zip(model.layers, spectra)]


def reserved_params(model, comp_budget_fraction):
    """Parameter count set aside for the compensation factors."""
    if comp_budget_fraction <= 0.0:
        return 0
    return sum(comp_rank(l, comp_budget_fraction) * (l.n + l.d) for l in model.layers)


def schedule_for(model, spectra, alpha, comp_budget_fraction=0.05, decay=80.0, max_iters=500):
    """ScheduleParams pacing the removal from full ranks down to the target.

    Returns None when the model already meets the target at full ranks.
    """
    original = sum(l.n * l.d for l in model.layers)
    target = original / alpha - reserved_params(model, comp_budget_fraction)
    start = sum((l.n + l.d) * r for l, r in zip(model.layers, initial_ranks(model, spectra)))
    if start <= target:
        return None
    return ScheduleParams(start_params=float(start), target_params=float(target),
                          decay=decay, max_iters=max_iters)


def allocate(model, spectra, alpha, params=None, comp_budget_fraction=0.05, refine=True):
    """Pick per-layer ranks meeting the compression target.

    Args:
        model: ModelBundle providing layer dimensions.
        spectra: per-layer SingularSpectrum, aligned with model.layers.
        alpha: required compression factor (> 1) on the *total* parameter
            count, compensation factors included.
        params: optional ScheduleParams; derived from the model when omitted.
        comp_budget_fraction: per-layer share reserved for the compensation
            factors; 0 disables the reservation.
        refine: after the greedy loop terminates, hand unspent budget back to
            the layers that lose the most energy, one rank at a time. The
            loop's final step can overshoot the target by up to one full rank
            slice; this pass reclaims that slack without breaking feasibility.

    Returns:
        (ranks, AllocationTrace).

    Raises:
        InfeasibleTargetError: the target cannot be met even at rank 1
            everywhere; carries the achievable maximum factor.
    """
    layers = model.layers
    if alpha <= 1.0:
        raise ValidationError(f"alpha must exceed 1, got {alpha}")
    if len(spectra) != len(layers):
        raise ValidationError(f"{len(spectra)} spectra for {len(layers)} layers")
    for layer, spec in zip(layers, spectra):
        if spec.layer != layer.name:
            raise ValidationError(f"spectrum for '{spec.layer}' does not match layer '{layer.name}'")

    original = sum(l.n * l.d for l in layers)
    reserved = reserved_params(model, comp_budget_fraction)
    target = original / alpha - reserved
    floor = sum(l.n + l.d for l in layers)
    if floor > target:
        achievable = original / (floor + reserved)
        raise InfeasibleTargetError(
            f"alpha={alpha} is infeasible: rank-1 everywhere achieves at most "
            f"{achievable:.4f}",
            achievable=achievable,
        )

    ranks = initial_ranks(model, spectra)
    cur = sum((l.n + l.d) * r for l, r in zip(layers, ranks))
    trace = AllocationTrace()
    if cur <= target:
        trace.final_ranks = list(ranks)
        return ranks, trace

    if params is None:
        params = ScheduleParams(start_params=float(cur), target_params=float(target))

    t = 1
    while cur > target:
        step = min(t, params.max_iters)  # past the cap, keep removing at the final rate
        amount = schedule_value(params, step - 1) - schedule_value(params, step)
        best = None
        for idx, (layer, spec) in enumerate(zip(layers, spectra)):
            if ranks[idx] <= 1:
                continue
            decrement = max(1, math.ceil(amount / (layer.n + layer.d)))
            tentative = max(1, ranks[idx] - decrement)
            loss = energy_loss(spec, tentative)
            if best is None or loss < best[1]:
                best = (idx, loss, tentative)
        if best is None:
            achievable = original / (floor + reserved)
            raise InfeasibleTargetError(
                f"all layers reached rank 1 at {cur} params, target {target:.0f}; "
                f"achievable maximum is {achievable:.4f}",
                achievable=achievable,
            )
        idx, loss, tentative = best
        layer = layers[idx]
        before = ranks[idx]
        ranks[idx] = tentative
        cur -= (layer.n + layer.d) * (before - tentative)
        trace.steps.append(
            TraceStep(
                step=t,
                layer=layer.name,
                rank_before=before,
                rank_after=tentative,
                loss=loss,
                params_remaining=cur,
            )
        )
        t += 1

    if refine:
        caps = initial_ranks(model, spectra)
        while True:
            best = None
            for idx, (layer, spec) in enumerate(zip(layers, spectra)):
                if ranks[idx] >= caps[idx]:
                    continue
                if cur + (layer.n + layer.d) > target:
                    continue
                gain = energy_loss(spec, ranks[idx]) - energy_loss(spec, ranks[idx] + 1)
                if best is None or gain > best[1]:
                    best = (idx, gain)
            if best is None:
                break
            idx, _ = best
            layer = layers[idx]
            before = ranks[idx]
            ranks[idx] = before + 1
            cur += layer.n + layer.d
            trace.refinements.append(
                TraceStep(
                    step=t,
                    layer=layer.name,
                    rank_before=before,
                    rank_after=ranks[idx],
                    loss=energy_loss(spectra[idx], ranks[idx]),
                    params_remaining=cur,
                )
            )
            t += 1

    trace.final_ranks = list(ranks)
    return ranks, trace
