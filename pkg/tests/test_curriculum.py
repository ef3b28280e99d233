import numpy as np
import pytest

from discdiff.curriculum import (
    CurriculumConfig,
    EntropyIndex,
    build_entropy_index,
    curriculum_mu,
    default_sigma,
    nearest_entropy_ids,
    sample_batch_indices,
    sample_entropy_targeted,
    shannon_entropy,
)

from .helpers import clipped_normal_mean


class TestShannonEntropy:
    def test_constant_image(self):
        assert shannon_entropy(np.full((8, 8), 3.7)) == 0.0

    def test_fair_coin(self):
        img = np.array([[0.0, 1.0], [1.0, 0.0]])
        assert shannon_entropy(img) == pytest.approx(1.0, rel=1e-12)

    def test_uniform_256_bins(self):
        img = np.linspace(0.0, 1.0, 256).reshape(16, 16)
        assert shannon_entropy(img, 256) == pytest.approx(8.0, rel=1e-12)

    def test_errors(self):
        with pytest.raises(ValueError):
            shannon_entropy(np.array([]))
        with pytest.raises(ValueError):
            shannon_entropy(np.ones((2, 2)), n_bins=1)
        with pytest.raises(ValueError):
            shannon_entropy(np.array([np.nan, 1.0]))


class TestEntropyIndex:
    def test_sorting_contract(self):
        idx = EntropyIndex([("a", 2.0), ("b", 1.0), ("c", 3.0)])
        assert [e for _, e in idx.entries] == [1.0, 2.0, 3.0]
        assert idx.e_min == 1.0 and idx.e_max == 3.0

    def test_tie_break_by_slice_id(self):
        idx = EntropyIndex([("z", 1.0), ("a", 1.0)])
        assert [sid for sid, _ in idx.entries] == ["a", "z"]

    def test_single_slice(self):
        idx = EntropyIndex([("only", 2.5)])
        assert idx.e_min == idx.e_max == 2.5

    def test_empty_rejected(self):
        with pytest.raises(ValueError):
            EntropyIndex([])

    def test_build_from_grids(self):
        slices = [
            ("flat", np.zeros((4, 4))),
            ("coin", np.array([[0.0, 1.0], [1.0, 0.0]])),
        ]
        idx = build_entropy_index(slices)
        assert idx.entries[0] == ("flat", 0.0)
        assert idx.entries[1][0] == "coin"


class TestCurriculumMu:
    def test_ramp_endpoints(self):
        assert curriculum_mu(0, 100, 1.0, 3.0) == 1.0
        assert curriculum_mu(100, 100, 1.0, 3.0) == 3.0
        assert curriculum_mu(50, 100, 1.0, 3.0) == 2.0

    def test_zero_horizon(self):
        assert curriculum_mu(0, 0, 1.0, 3.0) == 3.0

    def test_nondecreasing_and_saturating(self):
        values = [curriculum_mu(i, 20, 0.5, 4.5) for i in range(50)]
        assert all(b >= a for a, b in zip(values, values[1:]))
        assert all(v == 4.5 for v in values[20:])

    def test_negative_iteration_rejected(self):
        with pytest.raises(ValueError):
            curriculum_mu(-1, 10, 0.0, 1.0)


def uniform_index(n=10, lo=1.0, hi=3.0):
    ents = np.linspace(lo, hi, n)
    return EntropyIndex([(f"s{i:03d}", float(e)) for i, e in enumerate(ents)])


class TestSampleBatch:
    def test_degenerate_sigma_picks_minimum(self):
        idx = uniform_index()
        cfg = CurriculumConfig(M=100, N=16, sigma=1e-9, seed=0)
        ids = sample_batch_indices(idx, 0, cfg)
        assert ids == ["s000"] * 16

    def test_deterministic_given_seed_and_iteration(self):
        idx = uniform_index()
        cfg = CurriculumConfig(M=100, N=8, sigma=0.3, seed=5)
        assert sample_batch_indices(idx, 7, cfg) == sample_batch_indices(idx, 7, cfg)
        assert sample_batch_indices(idx, 7, cfg) != sample_batch_indices(idx, 8, cfg)

    def test_all_ids_exist(self):
        idx = uniform_index(7)
        cfg = CurriculumConfig(M=10, N=64, sigma=0.5, seed=1)
        known = set(idx.slice_ids)
        for iteration in (0, 5, 10, 50):
            assert set(sample_batch_indices(idx, iteration, cfg)) <= known

    def test_uniform_phase_roughly_uniform(self):
        idx = uniform_index(10)
        cfg = CurriculumConfig(M=5, N=20000, sigma=0.5, seed=2)
        ids = sample_batch_indices(idx, 5, cfg)
        counts = np.array([ids.count(sid) for sid in idx.slice_ids])
        assert counts.min() > 0.9 * 2000 and counts.max() < 1.1 * 2000

    def test_tie_goes_to_lower_slice_id(self):
        idx = EntropyIndex([("b", 1.0), ("a", 3.0)])
        assert nearest_entropy_ids(idx, [2.0]) == ["a"]
        assert nearest_entropy_ids(idx, [1.9]) == ["b"]
        assert nearest_entropy_ids(idx, [2.1]) == ["a"]

    def test_equal_entropies_pick_lowest_id(self):
        idx = EntropyIndex([("y", 2.0), ("x", 2.0), ("w", 5.0)])
        # 2.2 is nearest the tied pair {x, y}; 3.5 ties across both
        # entropy values, so the pool is {x, y, w}
        assert nearest_entropy_ids(idx, [2.2, 5.0, 3.5]) == ["x", "w", "w"]

    def test_empty_index_rejected(self):
        with pytest.raises(ValueError):
            EntropyIndex([])


class TestTargetedStatistics:
    def test_mean_tracks_clipped_normal(self):
        idx = uniform_index(400, 1.0, 4.0)
        sigma = default_sigma(1.0, 4.0)
        rng = np.random.default_rng(3)
        lookup = dict(idx.entries)
        for mu in (1.0, 2.5, 4.0):
            ids = sample_entropy_targeted(idx, mu, sigma, 10000, rng)
            drawn = np.array([lookup[sid] for sid in ids])
            want = clipped_normal_mean(mu, sigma, 1.0, 4.0)
            se = drawn.std(ddof=1) / np.sqrt(len(drawn))
            assert abs(drawn.mean() - want) < 3 * se + (4.0 - 1.0) / 399

    def test_monotone_difficulty_ramp(self):
        idx = uniform_index(50, 0.5, 6.5)
        cfg = CurriculumConfig(M=1000, N=4000, sigma=0.4, seed=4)
        lookup = dict(idx.entries)
        early = np.mean([lookup[s] for s in sample_batch_indices(idx, 0, cfg)])
        late = np.mean([lookup[s] for s in sample_batch_indices(idx, 999, cfg)])
        assert early < late


class TestConfigValidation:
    def test_bounds(self):
        CurriculumConfig(M=0, N=1, sigma=0.1, seed=0)
        with pytest.raises(ValueError):
            CurriculumConfig(M=-1, N=1, sigma=0.1, seed=0)
        with pytest.raises(ValueError):
            CurriculumConfig(M=0, N=0, sigma=0.1, seed=0)
        with pytest.raises(ValueError):
            CurriculumConfig(M=0, N=1, sigma=0.0, seed=0)


def test_default_sigma_covers_range():
    assert default_sigma(1.0, 7.0) == pytest.approx(1.0)
    assert default_sigma(2.0, 2.0) > 0
