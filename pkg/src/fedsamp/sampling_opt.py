"""Client-sampling optimization against the convergence-time surrogate.

The surrogate objective is (expected round time) x (rounds to target),
which for a sampling distribution q reduces to

    (sum_i q_i * cost_i) * (sum_i a_i / q_i + bound_ratio),

with per-client round costs cost_i and variance coefficients
a_i = (weight_i * grad_norm_i)^2 / sample_size. The product is non-convex
in q, but fixing the first factor to a value m leaves a convex problem, so
the optimizer scans m over a grid and solves each slice exactly via its
KKT system (two multipliers, probability-floor bounds handled by
clipping). When the bound ratio is zero the optimum has the closed form
q_i proportional to weight_i * grad_norm_i / sqrt(cost_i).
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .types import DEFAULT_PROB_FLOOR, FleetConfig, SamplingDistribution
from .wireless import TimeParams, effective_round_costs

#: Contractual ceiling on the inner solver's KKT residual (probability and
#: relative cost-constraint violations).
KKT_TOL = 1e-8

_SUM_TOL = 1e-13
_COST_RTOL = 1e-11


class InfeasibleCostError(ValueError):
    """The requested mean round cost is outside the feasible interval."""


@dataclass(frozen=True)
class OptInstance:
    """Inputs of one sampling-optimization problem."""

    weights: np.ndarray
    grad_norms: np.ndarray
    round_costs: np.ndarray
    sample_size: int
    bound_ratio: float
    floor: float = DEFAULT_PROB_FLOOR
    grid_step: float | None = None

    def __post_init__(self) -> None:
        object.__setattr__(self, "weights", np.asarray(self.weights, dtype=float))
        object.__setattr__(self, "grad_norms", np.asarray(self.grad_norms, dtype=float))
        object.__setattr__(self, "round_costs", np.asarray(self.round_costs, dtype=float))
        n = len(self.round_costs)
        if not (len(self.weights) == len(self.grad_norms) == n):
            raise ValueError("weights, grad_norms, round_costs lengths differ")
        if np.any(self.round_costs <= 0.0):
            raise ValueError("round costs must be positive")
        if not (np.isfinite(self.bound_ratio) and self.bound_ratio >= 0.0):
            raise ValueError(f"bound_ratio must be finite and >= 0, got {self.bound_ratio}")
        if self.floor <= 0.0 or self.floor * n >= 1.0:
            raise ValueError(f"floor {self.floor} infeasible for {n} clients")
        if self.grid_step is not None and self.grid_step <= 0.0:
            raise ValueError("grid_step must be positive")

    @classmethod
    def from_fleet(
        cls,
        fleet: FleetConfig,
        grad_norms,
        bound_ratio: float,
        floor: float = DEFAULT_PROB_FLOOR,
        grid_step: float | None = None,
    ) -> "OptInstance":
        """Build an instance from a validated fleet; clamps a negative ratio to 0."""
        return cls(
            weights=fleet.weights,
            grad_norms=np.asarray(grad_norms, dtype=float),
            round_costs=effective_round_costs(TimeParams.from_fleet(fleet)),
            sample_size=fleet.sample_size,
            bound_ratio=max(0.0, float(bound_ratio)),
            floor=floor,
            grid_step=grid_step,
        )

    @property
    def n_clients(self) -> int:
        return len(self.round_costs)

    @property
    def variance_coeffs(self) -> np.ndarray:
        return (self.weights * self.grad_norms) ** 2 / self.sample_size

    @property
    def cost_min(self) -> float:
        return float(self.round_costs.min())

    @property
    def cost_max(self) -> float:
        return float(self.round_costs.max())

    def feasible_cost_range(self) -> tuple[float, float]:
        """Mean-cost interval actually reachable with floored probabilities."""
        slack = 1.0 - self.floor * self.n_clients
        base = self.floor * float(self.round_costs.sum())
        return base + slack * self.cost_min, base + slack * self.cost_max


@dataclass(frozen=True)
class OptimizerResult:
    """Grid minimizer of the surrogate with its solve diagnostics."""

    dist: SamplingDistribution
    round_cost: float
    objective: float
    kkt_residual: float
    grid_size: int


def _probs(q) -> np.ndarray:
    return np.asarray(getattr(q, "probs", q), dtype=float)


def convergence_time_objective(q, instance: OptInstance) -> float:
    """Surrogate total-time objective, in units of the variance coefficient."""
    probs = _probs(q)
    variance = float((instance.variance_coeffs / probs).sum())
    return float(probs @ instance.round_costs) * (variance + instance.bound_ratio)


def closed_form_sampling(instance: OptInstance) -> SamplingDistribution:
    """Zero-ratio global optimum: q_i proportional to w_i g_i / sqrt(cost_i)."""
    scores = instance.weights * instance.grad_norms / np.sqrt(instance.round_costs)
    if scores.sum() <= 0.0:
        return SamplingDistribution.uniform(instance.n_clients, instance.floor)
    return SamplingDistribution.from_weights(scores, instance.floor)


def predicted_rounds(q, instance: OptInstance, precision: float) -> int:
    """Rounds the convergence bound predicts for a loss gap of ``precision``.

    Both the gap and the result are in units of the bound's variance
    coefficient, so this is an advisory relative measure, not wall clock.
    """
    if precision <= 0.0:
        raise ValueError(f"precision must be > 0, got {precision}")
    probs = _probs(q)
    variance = float((instance.variance_coeffs / probs).sum())
    return math.ceil((variance + instance.bound_ratio) / precision)


def check_monotonicity(q, instance: OptInstance, tol: float = 1e-9) -> list[tuple[int, int]]:
    """Pairs (i, j) violating the cheaper-and-more-important ordering.

    A violation is a pair where client i has round cost <= client j's and
    weight * grad_norm >= client j's, yet is sampled less often. An optimal
    distribution returns no pairs.
    """
    probs = _probs(q)
    costs = instance.round_costs
    importance = instance.weights * instance.grad_norms
    violations = []
    for i in range(len(probs)):
        for j in range(len(probs)):
            if i == j:
                continue
            if (
                costs[i] <= costs[j]
                and importance[i] >= importance[j]
                and probs[i] < probs[j] - tol
            ):
                violations.append((i, j))
    return violations


def _clipped_q(a: np.ndarray, scale: np.ndarray, floor: float) -> np.ndarray:
    """Stationarity probabilities max(floor, sqrt(a / scale))."""
    q = np.full(len(a), floor)
    pos = a > 0.0
    q[pos] = np.maximum(floor, np.sqrt(a[pos] / scale[pos]))
    return q


def _fill_level(
    a: np.ndarray, offsets: np.ndarray, mass: float, floor: float, x0: float | None = None
) -> float:
    """Solve sum_i max(floor, sqrt(a_i / (lam + offsets_i))) = mass for lam.

    Requires a.max() > 0 and mass > n * floor. The sum is strictly
    decreasing in lam wherever a coordinate is above the floor, so a
    bracketed, Newton-accelerated bisection converges unconditionally.
    ``x0`` warm-starts both the bracket and the iteration.
    """
    pos = a > 0.0
    a_pos = a[pos]
    off_pos = offsets[pos]
    rest_mass = floor * (len(a) - len(a_pos)) - mass
    bound = float(np.max(-off_pos))

    def excess(lam: float) -> float:
        q = np.sqrt(a_pos / (lam + off_pos))
        return float(np.maximum(q, floor).sum()) + rest_mass

    lo = hi = None
    if x0 is not None and x0 > bound:
        s0 = excess(x0)
        if abs(s0) <= _SUM_TOL:
            return x0
        if s0 > 0.0:
            lo = x0
            step = max(1e-3 * (x0 - bound), 1e-12)
            for _ in range(60):
                hi = lo + step
                if excess(hi) <= 0.0:
                    break
                step *= 8.0
            else:
                hi = None
        else:
            hi = x0
            for _ in range(60):
                lo = bound + (hi - bound) / 2.0
                if excess(lo) > 0.0:
                    break
                hi = lo
            else:
                lo = None
    if lo is None or hi is None:
        i_star = int(np.argmax(-off_pos))
        lo = bound + a_pos[i_star]  # binding coordinate's term equals 1 here
        for _ in range(200):
            if excess(lo) > 0.0:
                break
            lo = bound + (lo - bound) / 16.0
        step = max(1.0, lo - bound)
        hi = lo + step
        while excess(hi) > 0.0:
            step *= 8.0
            hi = lo + step

    x = x0 if x0 is not None and lo < x0 < hi else 0.5 * (lo + hi)
    for _ in range(200):
        scale = x + off_pos
        q = np.maximum(np.sqrt(a_pos / scale), floor)
        s = float(q.sum()) + rest_mass
        if abs(s) <= _SUM_TOL:
            return x
        if s > 0.0:
            lo = x
        else:
            hi = x
        if hi - lo <= 1e-15 * max(1.0, abs(hi)):
            return x
        free = q > floor
        slope = -0.5 * float((q[free] / scale[free]).sum()) if free.any() else 0.0
        x_new = x - s / slope if slope < 0.0 else 0.5 * (lo + hi)
        x = x_new if lo < x_new < hi else 0.5 * (lo + hi)
    return x


def _simplex_fill(a: np.ndarray, mass: float, floor: float) -> np.ndarray:
    """Minimize sum a_i / q_i over q >= floor with sum q = mass."""
    if a.max() <= 0.0:
        return np.full(len(a), mass / len(a))
    lam = _fill_level(a, np.zeros(len(a)), mass, floor)
    q = _clipped_q(a, np.full(len(a), lam), floor)
    return q * (mass / q.sum())


def _boundary_q(instance: OptInstance, at_min: bool) -> np.ndarray:
    """Floored extreme point: all slack on the cheapest (or dearest) ties."""
    costs = instance.round_costs
    extreme = costs.min() if at_min else costs.max()
    ties = np.flatnonzero(np.abs(costs - extreme) <= 1e-12 * max(1.0, extreme))
    q = np.full(instance.n_clients, instance.floor)
    mass = 1.0 - instance.floor * (instance.n_clients - len(ties))
    q[ties] = _simplex_fill(instance.variance_coeffs[ties], mass, instance.floor)
    return q


def min_variance_at_cost(
    cost: float, instance: OptInstance, state: dict | None = None
) -> tuple[np.ndarray, float, float]:
    """Exact convex solve on one mean-round-cost slice.

    Minimizes the inverse-probability variance term subject to the
    probabilities summing to one, the mean round cost equalling ``cost``,
    and the strict-positivity floor. Returns (q, variance term, KKT
    residual); raises :class:`InfeasibleCostError` outside the floored
    feasible interval. ``state`` is an optional scratch dict that carries
    dual warm starts between calls on nearby costs.
    """
    a = instance.variance_coeffs
    c = instance.round_costs
    floor = instance.floor
    n = instance.n_clients
    lo_cost, hi_cost = instance.feasible_cost_range()
    tol = _COST_RTOL * max(1.0, abs(cost))
    if cost < lo_cost - tol or cost > hi_cost + tol:
        raise InfeasibleCostError(
            f"mean round cost {cost} outside feasible [{lo_cost}, {hi_cost}]"
        )
    cost = min(max(cost, lo_cost), hi_cost)

    def finish(q: np.ndarray) -> tuple[np.ndarray, float, float]:
        # Renormalize, then restore exact floors (the division can nudge a
        # clipped coordinate below the floor by a few ulps).
        q = np.maximum(q / q.sum(), floor)
        pos = a > 0.0
        value = float((a[pos] / q[pos]).sum())
        residual = max(
            abs(float(q.sum()) - 1.0),
            abs(float(q @ c) - cost) / max(1.0, abs(cost)),
        )
        return q, value, residual

    if n == 1:
        return finish(np.array([1.0]))
    spread = instance.cost_max - instance.cost_min
    if spread <= 1e-12 * max(1.0, instance.cost_max):
        # Cost constraint is degenerate: plain simplex water-filling.
        return finish(_simplex_fill(a, 1.0, floor))
    if cost - lo_cost <= tol:
        return finish(_boundary_q(instance, at_min=True))
    if hi_cost - cost <= tol:
        return finish(_boundary_q(instance, at_min=False))
    if n == 2:
        # Two equality constraints pin the point.
        q1 = (cost - c[1]) / (c[0] - c[1])
        return finish(np.array([q1, 1.0 - q1]))
    if a.max() <= 0.0:
        # Objective vanishes; return the feasible interpolation of extremes.
        t = (cost - lo_cost) / (hi_cost - lo_cost)
        return finish((1.0 - t) * _boundary_q(instance, True) + t * _boundary_q(instance, False))

    q = _dual_solve(a, c, cost, floor, state if state is not None else {})
    return finish(q)


def _dual_solve(
    a: np.ndarray,
    c: np.ndarray,
    cost: float,
    floor: float,
    state: dict,
) -> np.ndarray:
    """Root-find the cost multiplier of the two-constraint KKT system.

    Costs are shifted by their minimum inside the dual parametrization so
    the two multipliers do not cancel each other near the boundary. The
    probability-sum multiplier is re-solved (warm-started) inside every
    evaluation; the cost residual is strictly decreasing in the cost
    multiplier, so a geometric sign probe brackets the root and a
    Newton-accelerated bisection polishes it. ``state`` carries multiplier
    warm starts across nearby calls.
    """
    c_shift = c - c.min()
    shifted_cost = cost - float(c.min())
    tol = 3e-10 * max(1.0, abs(cost))
    level_prev = state.get("level")

    def phi(mu: float):
        nonlocal level_prev
        level_prev = _fill_level(a, mu * c_shift, 1.0, floor, x0=level_prev)
        scale = level_prev + mu * c_shift
        q = _clipped_q(a, scale, floor)
        return float(q @ c_shift) - shifted_cost, q, scale

    def done(mu: float, q: np.ndarray) -> np.ndarray:
        state["mu"], state["level"] = mu, level_prev
        return q

    f0, q0, scale0 = phi(0.0)
    if abs(f0) <= tol:
        return done(0.0, q0)
    # Near the floored boundary the multipliers reach the a / floor^2
    # scale; cap the probes just above it.
    spacing = c_shift[c_shift > 0.0]
    mu_cap = 8.0 * (float(a.max()) / floor**2 + abs(float(scale0[0])) + 1.0) / float(
        spacing.min() if spacing.size else 1.0
    )
    hint = state.get("mu", 0.0)
    direction = 1.0 if f0 > 0.0 else -1.0  # phi decreases in mu
    base = (1.0 + abs(float(scale0[0]))) / float(c_shift.max() if c_shift.max() else 1.0)
    if hint * direction > 0.0:
        base = max(base, abs(hint) / 8.0)
    mu_a = 0.0  # orientation: phi(mu_a) > 0 > phi(mu_b) for f0 > 0
    probe = direction * base
    bracket = None
    q = q0
    capped = False
    for _ in range(200):
        f_p, q, scale = phi(probe)
        if abs(f_p) <= tol:
            return done(probe, q)
        if (f_p > 0.0) != (f0 > 0.0):
            bracket = (mu_a, probe) if direction > 0.0 else (probe, mu_a)
            break
        if capped:
            break
        mu_a = probe
        probe *= 8.0
        if abs(probe) >= mu_cap:
            probe = direction * mu_cap
            capped = True
    if bracket is None:
        raise RuntimeError("failed to bracket the cost multiplier")

    mu_lo, mu_hi = bracket  # phi(mu_lo) > 0 > phi(mu_hi)
    x = 0.5 * (mu_lo + mu_hi)
    q_best, f_best = q, math.inf
    for _ in range(80):
        fx, q, scale = phi(x)
        if abs(fx) < abs(f_best):
            q_best, f_best = q, fx
        if abs(fx) <= tol:
            return done(x, q)
        if fx > 0.0:
            mu_lo = x
        else:
            mu_hi = x
        if mu_hi - mu_lo <= 1e-15 * max(1.0, abs(mu_hi), abs(mu_lo)):
            break
        free = (a > 0.0) & (q > floor)
        if free.any():
            u = q[free] / scale[free]
            uc = float(u @ c_shift[free])
            uc2 = float(u @ c_shift[free] ** 2)
            us = float(u.sum())
            slope = -0.5 * (uc2 - uc * uc / us) if us > 0.0 else 0.0
        else:
            slope = 0.0
        x_new = x - fx / slope if slope < 0.0 else 0.5 * (mu_lo + mu_hi)
        x = x_new if mu_lo < x_new < mu_hi else 0.5 * (mu_lo + mu_hi)
    return done(x, q_best)


def cost_grid(instance: OptInstance) -> np.ndarray:
    """Scan points for the mean-cost search, clipped to the feasible range.

    The grid spans the per-client cost extremes with the instance's step
    (default: range / 1000) and always includes both endpoints; points that
    the probability floor makes unreachable are clipped onto the boundary.
    """
    lo, hi = instance.cost_min, instance.cost_max
    lo_feas, hi_feas = instance.feasible_cost_range()
    if hi - lo <= 1e-12 * max(1.0, hi):
        return np.array([float(np.clip(lo, lo_feas, hi_feas))])
    step = instance.grid_step if instance.grid_step is not None else (hi - lo) / 1000.0
    count = int(np.floor((hi - lo) / step)) + 1
    points = lo + step * np.arange(count)
    if points[-1] < hi:
        points = np.append(points, hi)
    return np.unique(np.clip(points, lo_feas, hi_feas))


def optimize_sampling(instance: OptInstance) -> OptimizerResult:
    """Grid search over the mean round cost, each slice solved exactly.

    Deterministic: ties in the objective resolve to the smaller cost.
    """
    best = None
    grid = cost_grid(instance)
    state: dict = {}
    for m in grid:
        q, variance, residual = min_variance_at_cost(float(m), instance, state)
        objective = convergence_time_objective(q, instance)
        if best is None or objective < best[0]:
            best = (objective, float(m), q, residual)
    objective, m_star, q_star, residual = best
    return OptimizerResult(
        dist=SamplingDistribution(q_star, instance.floor),
        round_cost=m_star,
        objective=objective,
        kkt_residual=residual,
        grid_size=len(grid),
    )


def optimizer_report(result: OptimizerResult, instance: OptInstance) -> dict:
    """JSON-ready report of one optimization."""
    return {
        "q_star": [float(v) for v in result.dist.probs],
        "m_star": result.round_cost,
        "objective": result.objective,
        "grid_size": result.grid_size,
        "kkt_residual": result.kkt_residual,
        "monotonicity_violations": check_monotonicity(result.dist, instance),
    }
