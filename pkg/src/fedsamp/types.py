"""Shared domain types for the federated sampling simulator.

Everything here is construction plus validation; behavior lives in the other
modules. Instances are immutable after validation and safe to share across
concurrent runs.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import Optional

import numpy as np

#: Default strict-positivity floor for sampling probabilities. Every client
#: must keep a nonzero chance of being drawn or the inverse-probability
#: aggregation weights blow up.
DEFAULT_PROB_FLOOR = 1e-6

#: Tolerance for "sums to one" checks on weights and probabilities.
SUM_TOL = 1e-9


class ValidationError(ValueError):
    """A domain invariant was violated during construction/validation."""


def _as_readonly(a) -> np.ndarray:
    arr = np.array(a, dtype=float)
    arr.setflags(write=False)
    return arr


@dataclass(frozen=True)
class ClientProfile:
    """Per-client system and statistical parameters.

    ``weight`` is the client's share of the global training data
    (n_i / n_total). ``comp_time`` is the seconds it spends on one round of
    local computation; ``comm_time`` the seconds one model upload takes at
    unit bandwidth, so the actual upload time is ``comm_time / bandwidth``.
    ``grad_norm_max`` is the running maximum stochastic-gradient norm
    observed for this client (0.0 until measured).
    """

    index: int
    weight: float
    comp_time: float
    comm_time: float
    grad_norm_max: float = 0.0

    def __post_init__(self) -> None:
        if not 0.0 < self.weight <= 1.0:
            raise ValidationError(
                f"client {self.index}: weight must be in (0, 1], got {self.weight}"
            )
        if self.comp_time < 0.0:
            raise ValidationError(
                f"client {self.index}: comp_time must be >= 0, got {self.comp_time}"
            )
        if self.comm_time <= 0.0:
            raise ValidationError(
                f"client {self.index}: comm_time must be > 0, got {self.comm_time}"
            )
        if self.grad_norm_max < 0.0:
            raise ValidationError(
                f"client {self.index}: grad_norm_max must be >= 0, got {self.grad_norm_max}"
            )


@dataclass(frozen=True)
class FleetConfig:
    """A validated fleet plus the per-round participation parameters.

    ``sample_size`` clients are drawn (with replacement) each round, each
    performing ``local_steps`` SGD steps; ``total_bandwidth`` is shared by
    the sampled clients while they upload.
    """

    clients: tuple[ClientProfile, ...]
    sample_size: int
    local_steps: int
    total_bandwidth: float

    @property
    def n_clients(self) -> int:
        return len(self.clients)

    @property
    def weights(self) -> np.ndarray:
        return _as_readonly([c.weight for c in self.clients])

    @property
    def comp_times(self) -> np.ndarray:
        return _as_readonly([c.comp_time for c in self.clients])

    @property
    def comm_times(self) -> np.ndarray:
        return _as_readonly([c.comm_time for c in self.clients])

    @property
    def grad_norm_maxes(self) -> np.ndarray:
        return _as_readonly([c.grad_norm_max for c in self.clients])

    def with_grad_norms(self, grad_norms: np.ndarray) -> "FleetConfig":
        """Copy of the fleet with updated running gradient-norm maxima."""
        if len(grad_norms) != self.n_clients:
            raise ValidationError("grad_norms length does not match fleet size")
        clients = tuple(
            replace(c, grad_norm_max=float(g)) for c, g in zip(self.clients, grad_norms)
        )
        return replace(self, clients=clients)


def validate_fleet(fleet: FleetConfig) -> FleetConfig:
    """Check fleet invariants and order clients by computation time.

    Returns a fleet whose clients are sorted so ``comp_time`` is
    nondecreasing (the ordering the round-time order statistics assume).
    The sort is stable and keeps each client's (weight, comp_time,
    comm_time, index) association intact, so traces stay joinable to the
    original inputs through ``ClientProfile.index``. Validating an already
    validated fleet is the identity.
    """
    n = fleet.n_clients
    if n == 0:
        raise ValidationError("fleet has no clients")
    if not 1 <= fleet.sample_size <= n:
        raise ValidationError(
            f"sample_size must be in [1, {n}], got {fleet.sample_size}"
        )
    if fleet.local_steps < 1:
        raise ValidationError(f"local_steps must be >= 1, got {fleet.local_steps}")
    if fleet.total_bandwidth <= 0.0:
        raise ValidationError(
            f"total_bandwidth must be > 0, got {fleet.total_bandwidth}"
        )
    total = sum(c.weight for c in fleet.clients)
    if abs(total - 1.0) > SUM_TOL:
        raise ValidationError(f"weights not normalized: sum is {total!r}")
    ordered = tuple(sorted(fleet.clients, key=lambda c: c.comp_time))
    return replace(fleet, clients=ordered)


@dataclass(frozen=True)
class SamplingDistribution:
    """Probability vector over the fleet, floored away from zero.

    Invariants: every entry is at least ``floor`` (> 0) and the entries sum
    to one within tolerance.
    """

    probs: np.ndarray
    floor: float = DEFAULT_PROB_FLOOR

    def __post_init__(self) -> None:
        object.__setattr__(self, "probs", _as_readonly(self.probs))
        if self.floor <= 0.0:
            raise ValidationError(f"floor must be > 0, got {self.floor}")
        if self.probs.ndim != 1 or self.probs.size == 0:
            raise ValidationError("probs must be a nonempty vector")
        if np.any(self.probs < self.floor - 1e-15):
            raise ValidationError(
                f"probabilities below the floor {self.floor}: min is {self.probs.min()!r}"
            )
        total = float(self.probs.sum())
        if abs(total - 1.0) > SUM_TOL:
            raise ValidationError(f"probabilities not normalized: sum is {total!r}")

    def __len__(self) -> int:
        return int(self.probs.size)

    @classmethod
    def uniform(cls, n: int, floor: float = DEFAULT_PROB_FLOOR) -> "SamplingDistribution":
        return cls(np.full(n, 1.0 / n), floor)

    @classmethod
    def from_weights(
        cls, weights, floor: float = DEFAULT_PROB_FLOOR
    ) -> "SamplingDistribution":
        """Normalize nonnegative weights into a floored distribution.

        Entries that would fall below the floor are clipped up to it and the
        remaining mass is rescaled over the others; weights already above
        the floor pass through as exact proportions.
        """
        w = np.array(weights, dtype=float)
        if np.any(w < 0.0) or w.sum() <= 0.0:
            raise ValidationError("weights must be nonnegative with positive sum")
        if floor * w.size >= 1.0:
            raise ValidationError(
                f"floor {floor} infeasible for {w.size} clients (floor * n >= 1)"
            )
        q = w / w.sum()
        clipped = np.zeros(len(q), dtype=bool)
        for _ in range(len(q)):
            below = (q < floor) & ~clipped
            if not below.any():
                break
            clipped |= below
            free = ~clipped
            mass = 1.0 - floor * clipped.sum()
            q = np.where(clipped, floor, 0.0)
            q[free] = mass * w[free] / w[free].sum()
        return cls(q, floor)


@dataclass(frozen=True)
class TrainingConfig:
    """SGD and stopping parameters for one training run.

    The learning rate decays across rounds as ``lr0 / (1 + r)`` with ``r``
    the zero-based round index, and stays constant within a round.
    """

    lr0: float = 0.1
    batch_size: int = 24
    max_rounds: int = 500
    target_loss: Optional[float] = None
    seed: int = 0
    l2: float = 0.0

    def __post_init__(self) -> None:
        if self.lr0 <= 0.0:
            raise ValidationError(f"lr0 must be > 0, got {self.lr0}")
        if self.batch_size < 1:
            raise ValidationError(f"batch_size must be >= 1, got {self.batch_size}")
        if self.max_rounds < 0:
            raise ValidationError(f"max_rounds must be >= 0, got {self.max_rounds}")
        if self.l2 < 0.0:
            raise ValidationError(f"l2 must be >= 0, got {self.l2}")

    def lr(self, round_index: int) -> float:
        return self.lr0 / (1.0 + round_index)


@dataclass(frozen=True)
class RoundRecord:
    """One row of a training trace. ``round_index`` is 1-based."""

    round_index: int
    sampled: tuple[int, ...]
    round_time_s: float
    cumulative_time_s: float
    global_loss: float
    test_accuracy: float


@dataclass(frozen=True)
class TrainingTrace:
    """Per-round records of one simulated training run."""

    rounds: tuple[RoundRecord, ...]
    grad_norms_final: np.ndarray
    #: Clients whose shard was smaller than the batch size, forcing
    #: minibatch sampling with replacement.
    undersized_shards: frozenset[int] = frozenset()

    def __post_init__(self) -> None:
        object.__setattr__(self, "grad_norms_final", _as_readonly(self.grad_norms_final))
        prev = 0.0
        for rec in self.rounds:
            if rec.round_time_s <= 0.0:
                raise ValidationError(
                    f"round {rec.round_index}: round_time_s must be > 0"
                )
            if rec.cumulative_time_s < prev - 1e-12:
                raise ValidationError("cumulative_time_s must be nondecreasing")
            prev = rec.cumulative_time_s

    @property
    def losses(self) -> np.ndarray:
        return np.array([r.global_loss for r in self.rounds])

    @property
    def total_time_s(self) -> float:
        return self.rounds[-1].cumulative_time_s if self.rounds else 0.0


@dataclass(frozen=True)
class RoundTimeSolution:
    """Realized round time and per-client bandwidth shares for one round.

    At the solution every uploading client finishes exactly at
    ``round_time_s``: comp_time + comm_time / share = round_time_s.
    """

    round_time_s: float
    allocations: dict[int, float] = field(default_factory=dict)

    @property
    def total_allocated(self) -> float:
        return float(sum(self.allocations.values()))


@dataclass(frozen=True)
class ConvergenceParams:
    """Estimated convergence-bound ratio plus the gradient norms behind it.

    ``bound_ratio`` is the additive-to-variance constant ratio that the
    sampling optimizer consumes. A negative estimate is kept as is but
    flagged; the optimizer clamps it to zero.
    """

    bound_ratio: float
    grad_norms: np.ndarray
    negative_estimate: bool = False

    def __post_init__(self) -> None:
        object.__setattr__(self, "grad_norms", _as_readonly(self.grad_norms))
        if not np.isfinite(self.bound_ratio):
            raise ValidationError(f"bound_ratio must be finite, got {self.bound_ratio}")
