"""Round-time model under shared-bandwidth uploads.

A synchronized round ends when every sampled client has finished computing
and uploading. Splitting the total bandwidth so that all sampled clients
finish simultaneously minimizes the round time, which makes the realized
round time the root of a monotone rational equation; the expected round
time over the sampling distribution is bracketed by order-statistics bounds
and approximated by a linear-in-q expression.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .types import FleetConfig, RoundTimeSolution

#: Relative residual tolerance of the round-time root solve.
RESIDUAL_RTOL = 1e-9
_MAX_BISECT = 200


@dataclass(frozen=True)
class TimeParams:
    """System-time inputs of one fleet: per-client times plus bandwidth."""

    comp_times: np.ndarray
    comm_times: np.ndarray
    total_bandwidth: float
    sample_size: int

    @classmethod
    def from_fleet(cls, fleet: FleetConfig) -> "TimeParams":
        return cls(
            comp_times=fleet.comp_times,
            comm_times=fleet.comm_times,
            total_bandwidth=fleet.total_bandwidth,
            sample_size=fleet.sample_size,
        )


def _probs(q) -> np.ndarray:
    return np.asarray(getattr(q, "probs", q), dtype=float)


def solve_round_time(
    sampled, params: TimeParams, duplicate_uploads: bool = False
) -> RoundTimeSolution:
    """Realized round time and bandwidth shares for one sampled multiset.

    Finds the unique T above the slowest computation finishing time with
    sum_i comm_i / (T - comp_i) = total_bandwidth, by bracketed bisection to
    a residual of at most ``RESIDUAL_RTOL * total_bandwidth``; each client's
    share is then comm_i / (T - comp_i). Clients drawn multiple times upload
    once unless ``duplicate_uploads`` is set, in which case each extra draw
    costs an extra upload.
    """
    sampled = np.asarray(sampled, dtype=int)
    if sampled.size == 0:
        raise ValueError("sampled set is empty")
    members, counts = np.unique(sampled, return_counts=True)
    comp = params.comp_times[members]
    comm = params.comm_times[members].astype(float)
    if duplicate_uploads:
        comm = comm * counts
    f_tot = params.total_bandwidth

    if len(members) == 1:
        t_round = float(comp[0] + comm[0] / f_tot)
    else:
        lo = float(comp.max())
        hi = lo + float(comm.sum()) / f_tot
        # Invariant: residual(lo) > 0 >= residual(hi); the root is in (lo, hi].
        t_round = hi
        for _ in range(_MAX_BISECT):
            mid = 0.5 * (lo + hi)
            residual = float((comm / (mid - comp)).sum()) - f_tot
            if residual > 0.0:
                lo = mid
            else:
                hi = mid
            if abs(residual) <= RESIDUAL_RTOL * f_tot and hi - lo <= 1e-12 * max(1.0, hi):
                t_round = mid
                break
        else:
            t_round = hi
    shares = comm / (t_round - comp)
    return RoundTimeSolution(
        round_time_s=t_round,
        allocations={int(i): float(s) for i, s in zip(members, shares)},
    )


def _check_sorted(comp_times: np.ndarray) -> None:
    if np.any(np.diff(comp_times) < 0):
        raise ValueError("comp_times must be nondecreasing (validate the fleet first)")


def expected_min_comp_time(q, comp_times, sample_size: int) -> float:
    """Expected fastest computation time among the sampled clients.

    Exact order-statistics expression over sampling with replacement;
    requires ``comp_times`` nondecreasing.
    """
    probs = _probs(q)
    tau = np.asarray(comp_times, dtype=float)
    _check_sorted(tau)
    tail = np.concatenate([np.cumsum(probs[::-1])[::-1], [0.0]])
    weights = tail[:-1] ** sample_size - tail[1:] ** sample_size
    return float(weights @ tau)


def expected_max_comp_time(q, comp_times, sample_size: int) -> float:
    """Expected slowest computation time among the sampled clients."""
    probs = _probs(q)
    tau = np.asarray(comp_times, dtype=float)
    _check_sorted(tau)
    head = np.concatenate([[0.0], np.cumsum(probs)])
    weights = head[1:] ** sample_size - head[:-1] ** sample_size
    return float(weights @ tau)


def expected_round_time_bounds(q, params: TimeParams) -> tuple[float, float]:
    """Lower and upper bounds on the expected round time for ``q``.

    Both bounds share the expected total communication term; they differ by
    the expected fastest vs. slowest sampled computation time.
    """
    probs = _probs(q)
    comm = (
        params.sample_size * float(probs @ params.comm_times) / params.total_bandwidth
    )
    lower = comm + expected_min_comp_time(probs, params.comp_times, params.sample_size)
    upper = comm + expected_max_comp_time(probs, params.comp_times, params.sample_size)
    return lower, upper


def approx_expected_round_time(q, params: TimeParams) -> float:
    """Linear-in-q approximation of the expected round time.

    Replaces the sampled extreme computation time with the sampled mean,
    giving sum_i q_i (sample_size * comm_i / bandwidth + comp_i). Exact for
    homogeneous computation times and for single-client sampling.
    """
    probs = _probs(q)
    per_client = (
        params.sample_size * params.comm_times / params.total_bandwidth
        + params.comp_times
    )
    return float(probs @ per_client)


def effective_round_costs(params: TimeParams) -> np.ndarray:
    """Per-client coefficients of the round-time approximation."""
    return (
        params.sample_size * params.comm_times / params.total_bandwidth
        + params.comp_times
    )
