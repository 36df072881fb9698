import struct

import numpy as np
import pytest

from fedsamp.dataset import (
    FederatedDataset,
    FlatDataset,
    IdxFormatError,
    PartitionError,
    even_shard_sizes,
    generate_synthetic,
    load_dataset,
    load_idx,
    partition_noniid,
    power_law_shard_sizes,
    save_dataset,
    subsample,
    train_test_split,
)


class TestShardSizes:
    def test_power_law_matches_normalization_oracle(self):
        # Independent oracle: shares 1, 1/2, 1/3 of 100, floored, then the
        # largest fractional remainder takes the leftover unit.
        shares = np.array([1.0, 0.5, 1.0 / 3.0])
        ideal = 100 * shares / shares.sum()
        base = np.floor(ideal).astype(int)
        order = np.argsort(-(ideal - base))
        expected = base.copy()
        expected[order[: 100 - base.sum()]] += 1

        sizes = power_law_shard_sizes(100, 3)
        assert sizes.tolist() == expected.tolist() == [55, 27, 18]
        assert (np.diff(sizes) <= 0).all()
        assert sizes.sum() == 100

    def test_power_law_always_positive_and_conserving(self):
        for total, n in [(10, 10), (101, 7), (20509, 100)]:
            sizes = power_law_shard_sizes(total, n)
            assert sizes.sum() == total
            assert (sizes >= 1).all()
            assert (np.diff(sizes) <= 0).all()

    def test_even_split(self):
        assert even_shard_sizes(100, 2).tolist() == [50, 50]
        assert even_shard_sizes(7, 3).tolist() == [3, 2, 2]

    def test_rejects_too_few_samples(self):
        with pytest.raises(PartitionError):
            power_law_shard_sizes(3, 5)


class TestGenerateSynthetic:
    def test_shard_count_and_total(self):
        data = generate_synthetic(100, 60, 20509, 1.0, 1.0, seed=7)
        assert data.n_clients == 100
        assert data.total == 20509
        assert data.dim == 60
        assert data.num_classes == 10

    def test_deterministic(self):
        a = generate_synthetic(10, 5, 500, 1.0, 1.0, seed=3)
        b = generate_synthetic(10, 5, 500, 1.0, 1.0, seed=3)
        for (xa, ya), (xb, yb) in zip(a.shards, b.shards):
            assert np.array_equal(xa, xb)
            assert np.array_equal(ya, yb)

    def test_zero_skew_is_iid(self):
        # With both skews at zero every client draws from one generative
        # distribution, so per-client label histograms agree with the
        # global one within sampling noise.
        data = generate_synthetic(10, 20, 20000, 0.0, 0.0, seed=11)
        _, y_all = data.pooled()
        global_freq = np.bincount(y_all, minlength=10) / len(y_all)
        for _, y in data.shards:
            freq = np.bincount(y, minlength=10) / len(y)
            sigma = np.sqrt(np.maximum(global_freq * (1 - global_freq), 1e-6) / len(y))
            assert (np.abs(freq - global_freq) < 5 * sigma + 0.01).all()

    def test_skew_creates_heterogeneity(self):
        data = generate_synthetic(10, 20, 20000, 1.0, 1.0, seed=11)
        freqs = np.stack(
            [np.bincount(y, minlength=10) / len(y) for _, y in data.shards]
        )
        assert freqs.std(axis=0).max() > 0.05

    def test_rejects_fewer_samples_than_clients(self):
        with pytest.raises(ValueError):
            generate_synthetic(10, 5, 9, 1.0, 1.0, seed=0)


def idx_bytes(images, rows, cols):
    payload = struct.pack(">IIII", 2051, len(images), rows, cols)
    return payload + bytes(bytearray(v for img in images for v in img))


def label_bytes(labels, magic=2049):
    return struct.pack(">II", magic, len(labels)) + bytes(bytearray(labels))


class TestLoadIdx:
    def write(self, tmp_path, image_data, label_data):
        ip, lp = tmp_path / "img.idx", tmp_path / "lab.idx"
        ip.write_bytes(image_data)
        lp.write_bytes(label_data)
        return ip, lp

    def test_two_images(self, tmp_path):
        images = [[0, 51, 102, 255], [255, 204, 153, 0]]
        ip, lp = self.write(tmp_path, idx_bytes(images, 2, 2), label_bytes([1, 0]))
        data = load_idx(ip, lp)
        assert data.x.shape == (2, 4)
        np.testing.assert_allclose(data.x[0], [0.0, 0.2, 0.4, 1.0])
        assert data.y.tolist() == [1, 0]
        assert data.num_classes == 2

    def test_truncated_file(self, tmp_path):
        full = idx_bytes([[1, 2, 3, 4]], 2, 2)
        ip, lp = self.write(tmp_path, full[:-2], label_bytes([0]))
        with pytest.raises(IdxFormatError, match="unexpected end of file"):
            load_idx(ip, lp)

    def test_count_mismatch(self, tmp_path):
        ip, lp = self.write(
            tmp_path, idx_bytes([[1, 2, 3, 4], [5, 6, 7, 8]], 2, 2), label_bytes([0, 1, 1])
        )
        with pytest.raises(IdxFormatError, match="count mismatch"):
            load_idx(ip, lp)

    def test_bad_magic(self, tmp_path):
        bad = struct.pack(">IIII", 2052, 1, 2, 2) + bytes(4)
        ip, lp = self.write(tmp_path, bad, label_bytes([0]))
        with pytest.raises(IdxFormatError, match="magic"):
            load_idx(ip, lp)


def flat_fixture(per_class, num_classes=10, dim=4, seed=0):
    rng = np.random.default_rng(seed)
    y = np.repeat(np.arange(num_classes), per_class)
    x = rng.normal(size=(len(y), dim))
    return FlatDataset(x=x, y=y, num_classes=num_classes)


class TestPartitionNoniid:
    def test_mnist_like_class_counts(self):
        flat = flat_fixture(per_class=1500)
        data = partition_noniid(flat, 100, classes_per_client=(1, 6), seed=5)
        assert data.n_clients == 100
        assert data.total == len(flat)
        for _, y in data.shards:
            assert 1 <= len(np.unique(y)) <= 6

    def test_conserves_every_sample(self):
        flat = flat_fixture(per_class=100)
        data = partition_noniid(flat, 20, classes_per_client=(1, 6), seed=2)
        counts = np.zeros(10, dtype=int)
        for _, y in data.shards:
            counts += np.bincount(y, minlength=10)
        assert counts.tolist() == [100] * 10

    def test_single_client_holds_everything(self):
        flat = flat_fixture(per_class=30)
        data = partition_noniid(flat, 1, classes_per_client=(1, 10), seed=0)
        assert data.n_clients == 1
        assert data.total == len(flat)
        assert len(np.unique(data.shards[0][1])) == 10

    def test_two_clients_even_split(self):
        flat = flat_fixture(per_class=10)
        data = partition_noniid(
            flat, 2, classes_per_client=(1, 10), power_law=False, seed=0
        )
        assert sorted(data.sizes.tolist()) == [50, 50]

    def test_deterministic(self):
        flat = flat_fixture(per_class=50)
        a = partition_noniid(flat, 10, seed=9)
        b = partition_noniid(flat, 10, seed=9)
        for (xa, ya), (xb, yb) in zip(a.shards, b.shards):
            assert np.array_equal(xa, xb)
            assert np.array_equal(ya, yb)

    def test_infeasible_partition_names_a_class(self):
        # Two single-class clients cannot absorb three classes.
        flat = flat_fixture(per_class=10, num_classes=3)
        with pytest.raises(PartitionError, match="class"):
            partition_noniid(flat, 2, classes_per_client=(1, 1), seed=1)


class TestTrainTestSplit:
    def test_conservation_and_determinism(self):
        data = generate_synthetic(10, 6, 1000, 1.0, 1.0, seed=4)
        train_a, (tx_a, ty_a) = train_test_split(data, 0.1, seed=8)
        train_b, (tx_b, ty_b) = train_test_split(data, 0.1, seed=8)
        assert train_a.total + len(ty_a) == data.total
        assert np.array_equal(tx_a, tx_b) and np.array_equal(ty_a, ty_b)
        for (xa, _), (xb, _) in zip(train_a.shards, train_b.shards):
            assert np.array_equal(xa, xb)

    def test_every_shard_keeps_a_sample(self):
        data = generate_synthetic(5, 3, 10, 0.0, 0.0, seed=1)
        train, _ = train_test_split(data, 0.5, seed=0)
        assert (train.sizes >= 1).all()


class TestCacheRoundTrip:
    def test_save_load_identical(self, tmp_path):
        data = generate_synthetic(6, 4, 300, 1.0, 0.5, seed=13)
        path = tmp_path / "cache.npz"
        save_dataset(data, path)
        loaded = load_dataset(path)
        assert loaded.num_classes == data.num_classes and loaded.dim == data.dim
        for (xa, ya), (xb, yb) in zip(data.shards, loaded.shards):
            assert np.array_equal(xa, xb)
            assert np.array_equal(ya, yb)


class TestSubsample:
    def test_size_and_determinism(self):
        flat = flat_fixture(per_class=20)
        a = subsample(flat, 50, seed=3)
        b = subsample(flat, 50, seed=3)
        assert len(a) == 50
        assert np.array_equal(a.x, b.x) and np.array_equal(a.y, b.y)

    def test_rejects_oversample(self):
        flat = flat_fixture(per_class=2)
        with pytest.raises(ValueError):
            subsample(flat, 100, seed=0)


class TestFederatedDatasetInvariants:
    def test_rejects_empty_shard(self):
        with pytest.raises(ValueError, match="empty"):
            FederatedDataset(
                shards=((np.zeros((0, 2)), np.zeros(0, dtype=int)),),
                num_classes=2,
                dim=2,
            )

    def test_rejects_out_of_range_labels(self):
        with pytest.raises(ValueError, match="labels"):
            FederatedDataset(
                shards=((np.zeros((2, 2)), np.array([0, 5])),), num_classes=2, dim=2
            )
