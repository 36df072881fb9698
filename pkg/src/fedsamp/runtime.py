"""Federated training with arbitrary client sampling.

Each round draws a multiset of clients with replacement from the sampling
distribution, runs local SGD on every distinct drawn client, and merges the
results with inverse-probability weights so the expected aggregate equals
the full-participation weighted average. Wall-clock time is simulated with
the shared-bandwidth round-time model.
"""

from __future__ import annotations

import numpy as np

from . import model
from .types import (
    FleetConfig,
    RoundRecord,
    SamplingDistribution,
    TrainingConfig,
    TrainingTrace,
    ValidationError,
)
from .wireless import TimeParams, solve_round_time

#: Abort threshold: a round whose global loss exceeds this multiple of the
#: initial loss is treated as divergence.
DIVERGENCE_FACTOR = 10.0


class TrainingDiverged(RuntimeError):
    """The global loss blew up relative to its starting value."""


def sample_clients(
    dist: SamplingDistribution, sample_size: int, rng: np.random.Generator
) -> np.ndarray:
    """Draw a multiset of ``sample_size`` client positions, with replacement."""
    probs = dist.probs / dist.probs.sum()
    return rng.choice(len(probs), size=sample_size, replace=True, p=probs)


def aggregate(
    w_global: np.ndarray,
    updates: list[tuple[int, np.ndarray]],
    dist: SamplingDistribution,
    weights: np.ndarray,
    sample_size: int,
) -> np.ndarray:
    """Inverse-probability-weighted merge of the drawn clients' updates.

    ``updates`` holds one (client, new parameters) entry per draw, repeats
    included; each contributes weight_j / (sample_size * prob_j) times its
    parameter change. Unbiasedness needs exactly one entry per draw.
    """
    if len(updates) != sample_size:
        raise ValueError(
            f"expected {sample_size} updates (one per draw), got {len(updates)}"
        )
    merged = w_global.copy()
    for j, w_new in updates:
        prob = dist.probs[j]
        if prob < dist.floor - 1e-15:
            raise ValidationError(
                f"client {j} sampled with probability {prob} below the floor"
            )
        merged += (weights[j] / (sample_size * prob)) * (w_new - w_global)
    return merged


def _client_rng(seed: int, round_index: int, position: int) -> np.random.Generator:
    # Deterministic per-(round, client) stream, independent of execution order.
    return np.random.default_rng(
        np.random.SeedSequence(seed, spawn_key=(round_index, position))
    )


def initial_grad_norms(
    fleet: FleetConfig, data, w0: np.ndarray, l2: float = 0.0
) -> np.ndarray:
    """Full-pass gradient norms at the starting point, per fleet position.

    Cold-starts the running norm bound for clients that were never sampled;
    norms already recorded on the fleet are kept when larger.
    """
    norms = fleet.grad_norm_maxes.copy()
    for pos, profile in enumerate(fleet.clients):
        x, y = data.shards[profile.index]
        norms[pos] = max(
            norms[pos], float(np.linalg.norm(model.gradient(w0, x, y, l2)))
        )
    return norms


def run_training(
    fleet: FleetConfig,
    data,
    dist: SamplingDistribution,
    cfg: TrainingConfig,
    test_set: tuple[np.ndarray, np.ndarray] | None = None,
) -> TrainingTrace:
    """Simulate one training run and return its per-round trace.

    The fleet must be validated (clients ordered by computation time); all
    position-indexed vectors, including the returned gradient norms, follow
    that order while ``RoundRecord.sampled`` records the clients' stable
    ids. The global loss is evaluated exactly over all clients' data each
    round. Stops on reaching ``cfg.target_loss`` (when set), after
    ``cfg.max_rounds`` rounds, or with :class:`TrainingDiverged` if the
    loss exceeds ten times its initial value.
    """
    n = fleet.n_clients
    if len(dist) != n:
        raise ValidationError("sampling distribution size does not match fleet")
    if data.n_clients != n:
        raise ValidationError("dataset shard count does not match fleet")

    w = model.init_params(data.num_classes, data.dim)
    grad_norms = initial_grad_norms(fleet, data, w, cfg.l2)
    if cfg.max_rounds == 0:
        return TrainingTrace(rounds=(), grad_norms_final=grad_norms)

    # Pooled copy (in fleet position order) for exact global-loss evaluation.
    shards = [data.shards[profile.index] for profile in fleet.clients]
    pooled_x = model.augment(np.concatenate([x for x, _ in shards]))
    pooled_y = np.concatenate([y for _, y in shards])
    sample_weight = np.concatenate(
        [np.full(len(y), profile.weight / len(y)) for profile, (_, y) in zip(fleet.clients, shards)]
    )

    def global_loss(params: np.ndarray) -> float:
        return model.loss(params, pooled_x, pooled_y, cfg.l2, sample_weight)

    rng = np.random.default_rng(cfg.seed)
    time_params = TimeParams.from_fleet(fleet)
    initial_loss = global_loss(w)
    undersized: set[int] = set()
    records: list[RoundRecord] = []
    cumulative = 0.0

    for r in range(cfg.max_rounds):
        draws = sample_clients(dist, fleet.sample_size, rng)
        lr = cfg.lr(r)
        local: dict[int, np.ndarray] = {}
        for pos in sorted(set(int(d) for d in draws)):
            x, y = shards[pos]
            w_new, norm = model.local_update(
                w, x, y, fleet.local_steps, lr, cfg.batch_size,
                _client_rng(cfg.seed, r, pos), cfg.l2,
            )
            local[pos] = w_new
            grad_norms[pos] = max(grad_norms[pos], norm)
            if len(y) < cfg.batch_size:
                undersized.add(fleet.clients[pos].index)
        updates = [(int(pos), local[int(pos)]) for pos in draws]
        w = aggregate(w, updates, dist, fleet.weights, fleet.sample_size)

        loss = global_loss(w)
        acc = (
            model.accuracy(w, test_set[0], test_set[1])
            if test_set is not None and len(test_set[1])
            else float("nan")
        )
        solution = solve_round_time(draws, time_params)
        cumulative += solution.round_time_s
        records.append(
            RoundRecord(
                round_index=r + 1,
                sampled=tuple(fleet.clients[int(pos)].index for pos in draws),
                round_time_s=solution.round_time_s,
                cumulative_time_s=cumulative,
                global_loss=loss,
                test_accuracy=acc,
            )
        )
        if loss > DIVERGENCE_FACTOR * initial_loss:
            raise TrainingDiverged(
                f"loss {loss:.4g} exceeded {DIVERGENCE_FACTOR}x the initial "
                f"loss {initial_loss:.4g} at round {r + 1}"
            )
        if cfg.target_loss is not None and loss <= cfg.target_loss:
            break

    return TrainingTrace(
        rounds=tuple(records),
        grad_norms_final=grad_norms,
        undersized_shards=frozenset(undersized),
    )
