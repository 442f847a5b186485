from itertools import combinations

import numpy as np
import pytest

from dnp import sampler as sp
from dnp import tensor_store as ts
from dnp.errors import ConfigurationError, DataError, ShapeError


class TestDownsampleLabels:
    def test_constant_map(self):
        mask = ts.LabelMask(np.full((4, 4), 7, np.int32))
        out = sp.downsample_labels(mask, 2, 2)
        assert np.all(out.data == 7) and out.data.shape == (2, 2)

    def test_center_mapping_rule(self):
        mask = ts.LabelMask(np.array([[1, 2], [3, 4]], np.int32))
        out = sp.downsample_labels(mask, 1, 1)
        # target center (0.5, 0.5) maps into source pixel (1, 1)
        assert out.data[0, 0] == 4

    def test_identity_when_dims_match(self, rng):
        data = rng.integers(0, 5, (6, 7)).astype(np.int32)
        out = sp.downsample_labels(ts.LabelMask(data), 6, 7)
        assert np.array_equal(out.data, data)

    def test_ignore_propagates(self):
        data = np.full((4, 4), 255, np.int32)
        out = sp.downsample_labels(ts.LabelMask(data), 2, 2)
        assert np.all(out.data == 255)

    def test_zero_target_rejected(self):
        mask = ts.LabelMask(np.zeros((4, 4), np.int32))
        with pytest.raises(ShapeError):
            sp.downsample_labels(mask, 0, 2)

    def test_upsample_rejected(self):
        mask = ts.LabelMask(np.zeros((2, 2), np.int32))
        with pytest.raises(ShapeError):
            sp.downsample_labels(mask, 4, 4)


class FakeSample:
    def __init__(self, image_id, feature_path, label_path=None):
        self.image_id = image_id
        self.feature_path = feature_path
        self.label_path = label_path


def write_sample(tmp_path, rng, image_id, h=3, w=4, c=6, labels=None):
    fpath = tmp_path / f"{image_id}_f.npy"
    ts.save_tensor(ts.FeatureMap(rng.standard_normal((h, w, c)).astype(np.float32)), fpath)
    lpath = None
    if labels is not None:
        lpath = tmp_path / f"{image_id}_l.npy"
        ts.save_tensor(ts.LabelMask(labels), lpath)
    return FakeSample(image_id, fpath, lpath)


class TestBuildPool:
    def test_uncapped_pool_size(self, tmp_path, rng):
        pool = sp.build_pool([write_sample(tmp_path, rng, "a")])
        assert pool.size == 12 and pool.channels == 6
        assert pool.labels is None

    def test_capped_pool_reproducible(self, tmp_path, rng):
        sample = write_sample(tmp_path, rng, "a")
        p1 = sp.build_pool([sample], max_per_image=5, seed=11)
        p2 = sp.build_pool([sample], max_per_image=5, seed=11)
        assert p1.size == 5
        assert np.array_equal(p1.features, p2.features)
        assert np.array_equal(p1.positions, p2.positions)

    def test_different_seeds_pick_different_rows(self, tmp_path, rng):
        sample = write_sample(tmp_path, rng, "a", h=10, w=10)
        p1 = sp.build_pool([sample], max_per_image=10, seed=1)
        p2 = sp.build_pool([sample], max_per_image=10, seed=2)
        assert not np.array_equal(p1.positions, p2.positions)

    def test_ignore_rows_excluded(self, tmp_path, rng):
        labels = np.zeros((6, 8), np.int32)
        labels[:3] = 255  # top half ignored at full resolution
        sample = write_sample(tmp_path, rng, "a", h=3, w=4, labels=labels)
        pool = sp.build_pool([sample])
        assert pool.labels is not None
        assert pool.size < 12
        assert 255 not in pool.labels

    def test_all_ignored_is_error(self, tmp_path, rng):
        labels = np.full((6, 8), 255, np.int32)
        sample = write_sample(tmp_path, rng, "a", h=3, w=4, labels=labels)
        with pytest.raises(DataError, match="empty"):
            sp.build_pool([sample])

    def test_empty_dataset_is_error(self):
        with pytest.raises(DataError):
            sp.build_pool([])


def pool_from(features, labels=None):
    features = np.asarray(features, np.float32)
    return sp.CandidatePool(
        features=features,
        labels=None if labels is None else np.asarray(labels, np.int32),
        image_ids=("synth",),
        source_index=np.zeros(len(features), np.int64),
        positions=np.arange(len(features), dtype=np.int64),
    )


class TestSampleRandom:
    def test_full_budget_keeps_all(self, rng):
        pool = pool_from(rng.random((10, 3)))
        refs = sp.sample_random(pool, sp.SamplingSpec(sp.SamplingMethod.RANDOM, 10, seed=4))
        assert refs.count == 10
        assert refs.manifest["sampling_method"] == "random"

    def test_deterministic_given_seed(self, rng):
        pool = pool_from(rng.random((10_000, 4)))
        spec = sp.SamplingSpec(sp.SamplingMethod.RANDOM, 1000, seed=9)
        r1 = sp.sample_random(pool, spec)
        r2 = sp.sample_random(pool, spec)
        assert np.array_equal(r1.features, r2.features)

    def test_selection_is_uniform(self, rng):
        # budget-1 draws over a 10-row pool: binomial 3-sigma band per row
        pool = pool_from(np.arange(10, dtype=np.float32).reshape(10, 1))
        trials = 10_000
        hits = np.zeros(10)
        for seed in range(trials):
            refs = sp.sample_random(pool, sp.SamplingSpec(sp.SamplingMethod.RANDOM, 1, seed=seed))
            hits[int(refs.features[0, 0])] += 1
        p = 0.1
        sigma = np.sqrt(trials * p * (1 - p))
        assert np.all(np.abs(hits - trials * p) < 3 * sigma)

    def test_subset_property(self, rng):
        pool = pool_from(rng.random((50, 6)))
        refs = sp.sample_random(pool, sp.SamplingSpec(sp.SamplingMethod.RANDOM, 20, seed=0))
        rows = {row.tobytes() for row in pool.features}
        assert all(row.tobytes() in rows for row in refs.features)


def coverage_radius(features, selected):
    d = np.sqrt(((features[:, None, :] - features[None, selected, :]) ** 2).sum(-1))
    return d.min(axis=1).max()


class TestGreedyKCenter:
    def test_farthest_point_forced(self):
        feats = np.array([[0.0], [1.0], [2.0], [10.0]], np.float32)
        assert list(sp.greedy_k_center(feats, 2, start_index=0)) == [0, 3]

    def test_hand_run_third_pick(self):
        feats = np.array([[0.0], [1.0], [2.0], [10.0]], np.float32)
        # after {0, 10}: min-dists are 0,1,2,0 -> row 2 wins
        assert list(sp.greedy_k_center(feats, 3, start_index=0)) == [0, 3, 2]

    def test_coverage_radius_non_increasing(self, rng):
        for _ in range(50):
            feats = rng.standard_normal((rng.integers(5, 30), 2)).astype(np.float32)
            start = int(rng.integers(len(feats)))
            prev = None
            for budget in range(1, len(feats) + 1):
                sel = sp.greedy_k_center(feats, budget, start_index=start)
                radius = coverage_radius(feats.astype(np.float64), sel)
                if prev is not None:
                    assert radius <= prev + 1e-12
                prev = radius

    def test_two_approximation_small_pools(self, rng):
        for _ in range(30):
            n = int(rng.integers(4, 10))
            feats = rng.standard_normal((n, 2)).astype(np.float32)
            work = feats.astype(np.float64)
            for budget in range(1, n):
                sel = sp.greedy_k_center(feats, budget, start_index=0)
                greedy_radius = coverage_radius(work, sel)
                best = min(
                    coverage_radius(work, np.array(subset))
                    for subset in combinations(range(n), budget)
                )
                assert greedy_radius <= 2.0 * best + 1e-9


class TestSampleGcs:
    def test_budget_exceeding_pool_keeps_all(self, rng, caplog):
        pool = pool_from(rng.random((5, 3)))
        refs = sp.sample_gcs(pool, sp.SamplingSpec(sp.SamplingMethod.GCS, 9, seed=1))
        assert refs.count == 5

    def test_deterministic_and_subset(self, rng):
        pool = pool_from(rng.standard_normal((200, 8)))
        spec = sp.SamplingSpec(sp.SamplingMethod.GCS, 40, seed=5)
        r1 = sp.sample_gcs(pool, spec)
        r2 = sp.sample_gcs(pool, spec)
        assert np.array_equal(r1.features, r2.features)
        rows = {row.tobytes() for row in pool.features}
        assert all(row.tobytes() in rows for row in r1.features)

    def test_seed_changes_start(self, rng):
        pool = pool_from(rng.standard_normal((300, 4)))
        r1 = sp.sample_gcs(pool, sp.SamplingSpec(sp.SamplingMethod.GCS, 10, seed=1))
        r2 = sp.sample_gcs(pool, sp.SamplingSpec(sp.SamplingMethod.GCS, 10, seed=2))
        assert not np.array_equal(r1.features, r2.features)

    def test_projection_returns_original_rows(self, rng):
        pool = pool_from(rng.standard_normal((100, 16)))
        spec = sp.SamplingSpec(sp.SamplingMethod.GCS, 20, seed=3, projection_dim=4)
        refs = sp.sample_gcs(pool, spec)
        rows = {row.tobytes() for row in pool.features}
        assert refs.count == 20
        assert all(row.tobytes() in rows for row in refs.features)

    def test_projection_dim_must_be_below_channels(self, rng):
        pool = pool_from(rng.standard_normal((10, 4)))
        spec = sp.SamplingSpec(sp.SamplingMethod.GCS, 5, seed=3, projection_dim=4)
        with pytest.raises(ConfigurationError):
            sp.sample_gcs(pool, spec)


class TestAllocateBudgets:
    def test_even_split(self):
        assert list(sp.allocate_class_budgets(np.array([50, 50]), 10)) == [5, 5]

    def test_proportional_split(self):
        assert list(sp.allocate_class_budgets(np.array([70, 30]), 10)) == [7, 3]

    def test_remainder_to_largest(self):
        assert list(sp.allocate_class_budgets(np.array([5, 3, 2]), 7)) == [4, 2, 1]

    def test_remainder_favors_larger_class(self):
        budgets = sp.allocate_class_budgets(np.array([8, 2]), 9)
        assert list(budgets) == [8, 1]
        assert budgets.sum() == 9

    def test_conservation_on_random_splits(self, rng):
        for _ in range(50):
            counts = rng.integers(1, 50, size=int(rng.integers(2, 7)))
            budget = int(rng.integers(1, counts.sum()))
            budgets = sp.allocate_class_budgets(counts, budget)
            assert budgets.sum() == budget
            assert np.all(budgets <= counts)


class TestSamplePcgcs:
    def test_even_classes(self, rng):
        feats = rng.standard_normal((100, 4)).astype(np.float32)
        labels = np.repeat([0, 1], 50)
        pool = pool_from(feats, labels)
        refs = sp.sample_pcgcs(pool, sp.SamplingSpec(sp.SamplingMethod.PCGCS, 10, seed=0))
        assert refs.count == 10
        assert list(np.bincount(refs.class_labels)) == [5, 5]

    def test_proportional_classes(self, rng):
        feats = rng.standard_normal((100, 4)).astype(np.float32)
        labels = np.repeat([0, 1], [70, 30])
        pool = pool_from(feats, labels)
        refs = sp.sample_pcgcs(pool, sp.SamplingSpec(sp.SamplingMethod.PCGCS, 10, seed=0))
        assert list(np.bincount(refs.class_labels)) == [7, 3]

    def test_budget_exceeding_pool_keeps_all(self, rng, caplog):
        feats = rng.standard_normal((10, 4)).astype(np.float32)
        labels = np.repeat([0, 1, 2], [5, 3, 2])
        pool = pool_from(feats, labels)
        with caplog.at_level("WARNING"):
            refs = sp.sample_pcgcs(pool, sp.SamplingSpec(sp.SamplingMethod.PCGCS, 100, seed=0))
        assert refs.count == 10
        assert any("exceeds pool size" in r.message for r in caplog.records)

    def test_budget_conservation_random_pools(self, rng):
        for _ in range(25):
            p = int(rng.integers(20, 200))
            feats = rng.standard_normal((p, 3)).astype(np.float32)
            labels = rng.integers(0, int(rng.integers(2, 6)), p)
            budget = int(rng.integers(1, p + 20))
            pool = pool_from(feats, labels)
            refs = sp.sample_pcgcs(pool, sp.SamplingSpec(sp.SamplingMethod.PCGCS, budget, seed=7))
            assert refs.count == min(budget, p)

    def test_missing_labels_is_configuration_error(self, rng):
        pool = pool_from(rng.random((10, 3)))
        with pytest.raises(ConfigurationError, match="label"):
            sp.sample_pcgcs(pool, sp.SamplingSpec(sp.SamplingMethod.PCGCS, 5, seed=0))

    def test_deterministic(self, rng):
        feats = rng.standard_normal((120, 5)).astype(np.float32)
        labels = rng.integers(0, 3, 120)
        pool = pool_from(feats, labels)
        spec = sp.SamplingSpec(sp.SamplingMethod.PCGCS, 30, seed=21)
        r1 = sp.sample_pcgcs(pool, spec)
        r2 = sp.sample_pcgcs(pool, spec)
        assert np.array_equal(r1.features, r2.features)
        assert np.array_equal(r1.class_labels, r2.class_labels)
