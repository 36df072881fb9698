"""Pilot-run estimation of the convergence-bound constant ratio.

Two cheap pilot runs (uniform sampling and data-size-weighted sampling)
are stopped at a handful of predefined loss levels. The round counts they
needed, combined with the clients' observed gradient-norm bounds, pin down
the ratio between the bound's additive constant and its sampling-variance
coefficient; the unknown optimal loss cancels when the two pilots' round
counts are divided, so it is never needed.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, replace

import numpy as np

from .runtime import run_training
from .types import ConvergenceParams, FleetConfig, SamplingDistribution, TrainingConfig, TrainingTrace


class EstimationError(RuntimeError):
    """The pilot data cannot produce a usable estimate."""


class LossLevelNotReached(EstimationError):
    """A pilot run ended above one of the requested loss levels."""


def rounds_to_reach(trace: TrainingTrace, loss_level: float) -> int:
    """First (1-based) round whose global loss is at or below the level."""
    if not trace.rounds:
        raise LossLevelNotReached("empty trace: no rounds were run")
    for rec in trace.rounds:
        if rec.global_loss <= loss_level:
            return rec.round_index
    raise LossLevelNotReached(
        f"loss level {loss_level} not reached; final loss was "
        f"{trace.rounds[-1].global_loss:.6g}"
    )


def _moments(weights, grad_norms, sample_size):
    p = np.asarray(weights, dtype=float)
    g = np.asarray(grad_norms, dtype=float)
    uniform_term = len(p) * float(((p * g) ** 2).sum())
    weighted_term = float(p @ g**2)
    return uniform_term / sample_size, weighted_term / sample_size


def ratio_estimate(
    rounds_ratio: float, weights, grad_norms, sample_size: int
) -> float:
    """Invert the round-count ratio of the two pilots into the bound ratio.

    With u = N * sum (p_i g_i)^2 / K and w = sum p_i g_i^2 / K, the ratio
    rho of uniform-to-weighted round counts satisfies
    rho = (u + x) / (w + x); solving gives x = (u - rho * w) / (rho - 1).
    """
    if rounds_ratio == 1.0:
        raise ZeroDivisionError("rounds ratio of exactly 1 carries no information")
    u, w = _moments(weights, grad_norms, sample_size)
    return (u - rounds_ratio * w) / (rounds_ratio - 1.0)


def estimate_bound_ratio(
    rounds_uniform: list[int],
    rounds_weighted: list[int],
    weights,
    grad_norms,
    sample_size: int,
) -> ConvergenceParams:
    """Average the per-level ratio estimates into one bound ratio.

    Levels where both pilots took the same number of rounds are skipped
    (they carry no information); if every level is skipped the pilots were
    uninformative. A negative average is returned as is but flagged, since
    the optimizer clamps it to zero.
    """
    if len(rounds_uniform) != len(rounds_weighted):
        raise ValueError("round-count lists differ in length")
    if not rounds_uniform:
        raise ValueError("at least one loss level is required")
    if min(rounds_uniform) < 1 or min(rounds_weighted) < 1:
        raise ValueError("round counts must be positive")

    estimates = []
    for r_u, r_w in zip(rounds_uniform, rounds_weighted):
        rho = r_u / r_w
        if rho == 1.0:
            warnings.warn(
                f"skipping loss level with equal pilot round counts ({r_u})",
                stacklevel=2,
            )
            continue
        estimates.append(ratio_estimate(rho, weights, grad_norms, sample_size))
    if not estimates:
        raise EstimationError(
            "uninformative pilots: every loss level took the same number of "
            "rounds under both sampling schemes"
        )
    mean = float(np.mean(estimates))
    negative = mean < 0.0
    if negative:
        warnings.warn(
            f"negative bound-ratio estimate {mean:.6g}; it will be clamped to 0 "
            "for optimization",
            stacklevel=2,
        )
    return ConvergenceParams(
        bound_ratio=mean,
        grad_norms=np.asarray(grad_norms, dtype=float),
        negative_estimate=negative,
    )


@dataclass(frozen=True)
class EstimationReport:
    """Everything the pilot phase produced, including its simulated cost."""

    loss_levels: tuple[float, ...]
    rounds_uniform: tuple[int, ...]
    rounds_weighted: tuple[int, ...]
    per_level_estimates: tuple[float | None, ...]
    params: ConvergenceParams
    trace_uniform: TrainingTrace
    trace_weighted: TrainingTrace

    @property
    def pilot_time_s(self) -> float:
        return self.trace_uniform.total_time_s + self.trace_weighted.total_time_s

    def to_json_dict(self) -> dict:
        return {
            "f_s_levels": list(self.loss_levels),
            "rounds_q1": list(self.rounds_uniform),
            "rounds_q2": list(self.rounds_weighted),
            "per_s_estimates": list(self.per_level_estimates),
            "beta_over_alpha": self.params.bound_ratio,
            "negative_estimate": self.params.negative_estimate,
            "g_bounds": [float(g) for g in self.params.grad_norms],
            "pilot_time_s": self.pilot_time_s,
        }


def _pilot_seeds(seed: int) -> tuple[int, int]:
    children = np.random.SeedSequence(seed).spawn(2)
    return tuple(int(c.generate_state(1)[0]) for c in children)


def run_estimation(
    fleet: FleetConfig,
    data,
    cfg: TrainingConfig,
    loss_levels: list[float],
    test_set: tuple[np.ndarray, np.ndarray] | None = None,
) -> EstimationReport:
    """Run the two pilots, read off round counts, and estimate the ratio.

    Both pilots stop at the deepest loss level rather than training to
    convergence. Gradient-norm bounds are merged across the two pilot
    traces before the inversion.
    """
    if not loss_levels:
        raise ValueError("at least one loss level is required")
    n = fleet.n_clients
    deepest = min(loss_levels)
    seed_u, seed_w = _pilot_seeds(cfg.seed)
    pilot_cfg = replace(cfg, target_loss=deepest)

    dist_uniform = SamplingDistribution.uniform(n)
    dist_weighted = SamplingDistribution.from_weights(fleet.weights)
    trace_u = run_training(fleet, data, dist_uniform, replace(pilot_cfg, seed=seed_u), test_set)
    trace_w = run_training(fleet, data, dist_weighted, replace(pilot_cfg, seed=seed_w), test_set)

    rounds_u = [rounds_to_reach(trace_u, level) for level in loss_levels]
    rounds_w = [rounds_to_reach(trace_w, level) for level in loss_levels]
    grad_norms = np.maximum(trace_u.grad_norms_final, trace_w.grad_norms_final)

    per_level: list[float | None] = []
    for r_u, r_w in zip(rounds_u, rounds_w):
        if r_u == r_w:
            per_level.append(None)
        else:
            per_level.append(
                ratio_estimate(r_u / r_w, fleet.weights, grad_norms, fleet.sample_size)
            )
    params = estimate_bound_ratio(
        rounds_u, rounds_w, fleet.weights, grad_norms, fleet.sample_size
    )
    return EstimationReport(
        loss_levels=tuple(loss_levels),
        rounds_uniform=tuple(rounds_u),
        rounds_weighted=tuple(rounds_w),
        per_level_estimates=tuple(per_level),
        params=params,
        trace_uniform=trace_u,
        trace_weighted=trace_w,
    )
