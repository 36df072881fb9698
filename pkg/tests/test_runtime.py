import itertools
import math

import numpy as np
import pytest

from fedsamp import model
from fedsamp.dataset import FederatedDataset, generate_synthetic
from fedsamp.runtime import (
    TrainingDiverged,
    aggregate,
    initial_grad_norms,
    run_training,
    sample_clients,
)
from fedsamp.types import (
    ClientProfile,
    FleetConfig,
    SamplingDistribution,
    TrainingConfig,
    validate_fleet,
)


def even_dataset(n_clients=4, per_client=30, dim=3, seed=0, num_classes=3):
    rng = np.random.default_rng(seed)
    shards = tuple(
        (
            rng.normal(size=(per_client, dim)),
            rng.integers(0, num_classes, size=per_client),
        )
        for _ in range(n_clients)
    )
    return FederatedDataset(shards, num_classes, dim)


def fleet_for(data, sample_size=2, local_steps=2, comp=None, comm=None):
    n = data.n_clients
    weights = data.weights
    comp = comp if comp is not None else np.linspace(0.5, 1.5, n)
    comm = comm if comm is not None else np.full(n, 1.0)
    clients = tuple(
        ClientProfile(index=i, weight=float(weights[i]), comp_time=float(comp[i]), comm_time=float(comm[i]))
        for i in range(n)
    )
    return validate_fleet(FleetConfig(clients, sample_size, local_steps, 1.0))


class TestSampleClients:
    def test_one_hot_distribution(self):
        dist = SamplingDistribution.from_weights([1e-9, 1e-9, 1e-9, 1.0], floor=1e-9)
        draws = sample_clients(dist, 4, np.random.default_rng(0))
        assert draws.tolist() == [3, 3, 3, 3]

    def test_pair_frequency_matches_multinomial(self):
        dist = SamplingDistribution.uniform(2)
        rng = np.random.default_rng(1)
        hits = sum(
            1
            for _ in range(100_000)
            if sample_clients(dist, 2, rng).tolist() == [1, 1]
        )
        assert hits / 100_000 == pytest.approx(0.25, abs=0.01)

    def test_marginal_frequencies_within_binomial_band(self):
        rng = np.random.default_rng(2)
        q = np.array([0.4, 0.3, 0.2, 0.1])
        dist = SamplingDistribution(q)
        k, rounds = 3, 20_000
        counts = np.zeros(4)
        for _ in range(rounds):
            counts += np.bincount(sample_clients(dist, k, rng), minlength=4)
        freq = counts / (k * rounds)
        sigma = np.sqrt(q * (1 - q) / (k * rounds))
        assert (np.abs(freq - q) <= 3 * sigma).all()


def enumeration_mean(w_global, w_new, q, p, k):
    """Probability-weighted aggregate over every ordered draw."""
    n = len(p)
    acc = np.zeros_like(w_global)
    for draw in itertools.product(range(n), repeat=k):
        prob = math.prod(q.probs[j] for j in draw)
        acc += prob * aggregate(w_global, [(j, w_new[j]) for j in draw], q, p, k)
    return acc


class TestAggregate:
    def test_fixed_point_when_updates_equal_global(self):
        w = np.ones((2, 3))
        dist = SamplingDistribution.uniform(3)
        out = aggregate(w, [(0, w.copy()), (2, w.copy())], dist, np.array([0.2, 0.5, 0.3]), 2)
        np.testing.assert_array_equal(out, w)

    def test_single_draw_weights_cancel(self):
        rng = np.random.default_rng(3)
        w = rng.normal(size=(2, 3))
        w_new = rng.normal(size=(2, 3))
        p = np.array([0.7, 0.3])
        dist = SamplingDistribution(p)  # probabilities equal to weights
        out = aggregate(w, [(1, w_new)], dist, p, 1)
        np.testing.assert_allclose(out, w_new, atol=1e-15)

    def test_enumeration_is_unbiased_to_full_participation(self):
        rng = np.random.default_rng(4)
        n, k = 3, 2
        w = rng.normal(size=(2, 2))
        w_new = [rng.normal(size=(2, 2)) for _ in range(n)]
        p = rng.dirichlet(np.ones(n))
        dist = SamplingDistribution(rng.dirichlet(np.ones(n)) * (1 - 3e-6) + 1e-6)
        mean = enumeration_mean(w, w_new, dist, p, k)
        full = sum(p[i] * w_new[i] for i in range(n))
        np.testing.assert_allclose(mean, full, atol=1e-12)

    def test_rejects_wrong_update_count(self):
        dist = SamplingDistribution.uniform(2)
        with pytest.raises(ValueError, match="one per draw"):
            aggregate(np.zeros((1, 1)), [(0, np.zeros((1, 1)))], dist, np.array([0.5, 0.5]), 2)

    def test_sampling_variance_within_analytic_bound(self):
        # Frozen updates: the spread of the aggregate around the
        # full-participation average stays under the inverse-probability
        # variance bound with the norm cap taken from the largest update.
        rng = np.random.default_rng(5)
        n, k = 4, 2
        w = np.zeros((2, 3))
        w_new = [rng.normal(size=(2, 3)) for _ in range(n)]
        p = rng.dirichlet(np.ones(n))
        q = SamplingDistribution(rng.dirichlet(np.ones(n) * 5) * (1 - 4e-6) + 1e-6)
        full = sum(p[i] * w_new[i] for i in range(n))
        sq_devs = []
        for _ in range(3000):
            draws = sample_clients(q, k, rng)
            agg = aggregate(w, [(int(j), w_new[int(j)]) for j in draws], q, p, k)
            sq_devs.append(float(((agg - full) ** 2).sum()))
        cap = max(float(((wi - w) ** 2).sum()) for wi in w_new)
        bound = (4.0 / k) * cap * float((p**2 / q.probs).sum())
        assert np.mean(sq_devs) <= bound


class TestRunTraining:
    def test_zero_rounds_gives_empty_trace(self):
        data = even_dataset()
        fleet = fleet_for(data)
        trace = run_training(
            fleet, data, SamplingDistribution.uniform(4), TrainingConfig(max_rounds=0)
        )
        assert trace.rounds == ()
        assert trace.total_time_s == 0.0
        assert (trace.grad_norms_final > 0).all()

    def test_uniform_equals_weighted_for_equal_shards(self):
        data = even_dataset()
        fleet = fleet_for(data)
        test_set = data.shards[0]
        cfg = TrainingConfig(max_rounds=5, batch_size=8, seed=11)
        uniform = run_training(fleet, data, SamplingDistribution.uniform(4), cfg, test_set)
        weighted = run_training(
            fleet, data, SamplingDistribution.from_weights(fleet.weights), cfg, test_set
        )
        assert uniform.rounds == weighted.rounds

    def test_cumulative_time_is_running_sum(self):
        data = even_dataset()
        fleet = fleet_for(data)
        trace = run_training(
            fleet, data, SamplingDistribution.uniform(4),
            TrainingConfig(max_rounds=8, batch_size=8, seed=3),
        )
        total = 0.0
        for rec in trace.rounds:
            total += rec.round_time_s
            assert rec.cumulative_time_s == total

    def test_sampled_ids_survive_comp_time_sort(self):
        data = even_dataset()
        comp = np.array([2.0, 0.5, 1.5, 1.0])  # force a reorder
        fleet = fleet_for(data, comp=comp)
        assert [c.index for c in fleet.clients] == [1, 3, 2, 0]
        trace = run_training(
            fleet, data, SamplingDistribution.uniform(4),
            TrainingConfig(max_rounds=3, batch_size=8, seed=5),
        )
        for rec in trace.rounds:
            assert set(rec.sampled) <= {0, 1, 2, 3}

    def test_divergence_guard_raises(self):
        data = even_dataset()
        fleet = fleet_for(data)
        cfg = TrainingConfig(lr0=4000.0, max_rounds=20, batch_size=4, seed=2)
        with pytest.raises(TrainingDiverged):
            run_training(fleet, data, SamplingDistribution.uniform(4), cfg)

    def test_target_loss_stops_early(self):
        data = generate_synthetic(5, 4, 400, 0.5, 3.0, seed=6, num_classes=3)
        fleet = fleet_for(data, sample_size=2, local_steps=10)
        cfg = TrainingConfig(max_rounds=200, batch_size=8, seed=7, target_loss=0.9)
        trace = run_training(fleet, data, SamplingDistribution.uniform(5), cfg)
        assert trace.rounds[-1].global_loss <= 0.9
        assert len(trace.rounds) < 200

    def test_undersized_shards_flagged(self):
        rng = np.random.default_rng(8)
        shards = tuple(
            (rng.normal(size=(n, 2)), rng.integers(0, 2, size=n)) for n in (3, 40)
        )
        data = FederatedDataset(shards, 2, 2)
        fleet = fleet_for(data, sample_size=2, local_steps=1)
        cfg = TrainingConfig(max_rounds=4, batch_size=8, seed=9)
        trace = run_training(fleet, data, SamplingDistribution.uniform(2), cfg)
        assert trace.undersized_shards == {0}

    def test_grad_norm_cold_start_is_full_pass_norm(self):
        data = even_dataset()
        fleet = fleet_for(data)
        w0 = model.init_params(data.num_classes, data.dim)
        norms = initial_grad_norms(fleet, data, w0)
        for pos, profile in enumerate(fleet.clients):
            x, y = data.shards[profile.index]
            assert norms[pos] == pytest.approx(
                np.linalg.norm(model.gradient(w0, x, y))
            )

    def test_deterministic_given_seed(self):
        data = even_dataset()
        fleet = fleet_for(data)
        test_set = data.shards[1]
        cfg = TrainingConfig(max_rounds=4, batch_size=8, seed=21)
        a = run_training(fleet, data, SamplingDistribution.uniform(4), cfg, test_set)
        b = run_training(fleet, data, SamplingDistribution.uniform(4), cfg, test_set)
        assert a.rounds == b.rounds
        assert np.array_equal(a.grad_norms_final, b.grad_norms_final)
