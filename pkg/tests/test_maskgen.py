import numpy as np
import pytest

from src.attention.config import AttnConfig
from src.attention.maskgen import (
    BlockMask,
    band_mask,
    mask_overlap,
    mean_row_overlap,
    retention_bounds,
    static_window_for_sparsity,
    static_window_mask,
    target_sparsity_mask,
    threshold_mask,
    tie_break_rank,
)
from src.attention.prober import SPARSE_PROBE, ImportanceMap
from src.utils.errors import ValidationError


def random_maps(gen, count=40, n_b=25):
    """count * n_b rows of heavy-tailed importance in [0, 1]."""
    for _ in range(count):
        raw = gen.exponential(size=(n_b, n_b)) ** 3
        yield (raw / raw.max()).astype(np.float32)


class TestThresholdMask:
    def test_examples(self):
        cfg = AttnConfig(block_size=4, samples=4, tau=0.9, min_keep=0.0)
        row = np.array([[0.5, 0.3, 0.15, 0.05]] * 4, dtype=np.float32)
        mask = threshold_mask(row, cfg)
        np.testing.assert_array_equal(mask.bits[0], [True, True, True, False])

    def test_exact_hit_keeps_minimal_prefix(self):
        cfg = AttnConfig(block_size=4, samples=4, tau=0.8, min_keep=0.0)
        row = np.array([[0.5, 0.3, 0.15, 0.05]] * 4)
        np.testing.assert_array_equal(threshold_mask(row, cfg).bits[0], [True, True, False, False])

    def test_tau_one_keeps_everything(self, rng):
        cfg = AttnConfig(block_size=4, samples=4, tau=1.0, min_keep=0.0)
        mask = threshold_mask(rng.random((6, 6)), cfg)
        assert mask.kept == 36

    def test_scale_invariance(self, rng):
        cfg = AttnConfig(block_size=4, samples=4, tau=0.85, min_keep=0.0)
        for p in random_maps(rng):
            base = threshold_mask(p, cfg).bits
            for c in (0.5, 2.0, 1024.0):
                np.testing.assert_array_equal(threshold_mask(p.astype(np.float64) * c, cfg).bits, base)

    def test_monotone_in_tau(self, rng):
        cfg = AttnConfig(block_size=4, samples=4, min_keep=0.0)
        for p in random_maps(rng):
            low = threshold_mask(p, cfg.with_overrides(tau=0.6)).bits
            high = threshold_mask(p, cfg.with_overrides(tau=0.95)).bits
            assert np.all(high | ~low)

    def test_retention_clamps(self, rng):
        cfg = AttnConfig(block_size=4, samples=4, tau=0.99, min_keep=0.2, max_keep=0.4)
        for p in random_maps(rng, count=10, n_b=10):
            mask = threshold_mask(p, cfg)
            mask.check_retention(0.2, 0.4)
            assert mask.kept_per_row.min() >= 2 and mask.kept_per_row.max() <= 4

    def test_single_spike_row_respects_min_keep(self):
        p = np.zeros((8, 8))
        np.fill_diagonal(p, 1.0)
        mask = threshold_mask(p, AttnConfig(block_size=4, samples=4, tau=0.5, min_keep=0.25))
        assert np.all(mask.kept_per_row == 2)
        assert np.all(np.diag(mask.bits))

    def test_zero_row_falls_back_to_diagonal(self):
        p = np.ones((5, 5))
        p[3] = 0.0
        mask = threshold_mask(p, AttnConfig(block_size=4, samples=4, tau=0.5, min_keep=0.0))
        assert mask.degenerate_rows == (3,)
        np.testing.assert_array_equal(np.flatnonzero(mask.bits[3]), [3])

    def test_ties_prefer_lower_index(self):
        p = np.full((4, 4), 0.25)
        mask = threshold_mask(p, AttnConfig(block_size=4, samples=4, tau=0.5, min_keep=0.0))
        np.testing.assert_array_equal(mask.bits[0], [True, True, False, False])

    def test_accepts_importance_map(self):
        p = ImportanceMap(np.eye(3, dtype=np.float32), SPARSE_PROBE)
        assert threshold_mask(p, AttnConfig(block_size=4, samples=4, tau=0.9, min_keep=0.0)).kept == 3

    def test_negative_rejected(self):
        with pytest.raises(ValidationError):
            threshold_mask(-np.ones((2, 2)), AttnConfig(block_size=4, samples=4))


class TestRetentionBounds:
    def test_lower_wins_conflict(self):
        assert retention_bounds(10, 0.5, 0.3) == (5, 5)

    def test_never_below_one(self):
        assert retention_bounds(10, 0.0, 0.0) == (1, 1)

    def test_tie_break_rank_is_stable(self):
        np.testing.assert_array_equal(tie_break_rank([0.2, 0.5, 0.2, 0.5]), [1, 3, 0, 2])


class TestStaticWindow:
    def test_band(self):
        mask = static_window_mask(5, 3)
        assert mask.kept_per_row.tolist() == [2, 3, 3, 3, 2]

    def test_closest_sparsity(self):
        n_b = 32
        mask = static_window_for_sparsity(n_b, 0.75)
        for width in range(1, 2 * n_b):
            band = band_mask(n_b, (width - 1) // 2, width // 2)
            assert abs(mask.sparsity - 0.75) <= abs(band.sparsity - 0.75)

    def test_even_widths_tighten_the_match(self):
        n_b, target = 16, 0.77
        odd_gap = min(abs(static_window_mask(n_b, w).sparsity - target) for w in range(1, 2 * n_b, 2))
        gap = abs(static_window_for_sparsity(n_b, target).sparsity - target)
        assert gap < odd_gap

    def test_band_mask(self):
        mask = band_mask(4, 0, 1)
        assert mask.kept_per_row.tolist() == [2, 2, 2, 1]
        assert mask.bits[0, 1] and not mask.bits[1, 0]
        np.testing.assert_array_equal(static_window_mask(6, 5).bits, band_mask(6, 2, 2).bits)

    def test_bad_window(self):
        with pytest.raises(ValidationError):
            static_window_mask(4, 0)


class TestTargetSparsity:
    def test_reaches_target(self, rng):
        cfg = AttnConfig(block_size=4, samples=4, min_keep=0.0)
        for p in random_maps(rng, count=5, n_b=16):
            mask = target_sparsity_mask(p, cfg, 0.6)
            assert mask.sparsity >= 0.6

    def test_unreachable_returns_sparsest(self, rng):
        cfg = AttnConfig(block_size=4, samples=4, min_keep=0.5)
        mask = target_sparsity_mask(rng.random((8, 8)), cfg, 0.9)
        assert mask.kept_per_row.min() == 4

    def test_zero_target_keeps_all(self, rng):
        cfg = AttnConfig(block_size=4, samples=4, min_keep=0.0)
        assert target_sparsity_mask(rng.random((6, 6)), cfg, 0.0).sparsity == 0.0


class TestBlockMask:
    def test_does_not_freeze_caller_array(self):
        bits = np.eye(3, dtype=bool)
        BlockMask(bits)
        bits[0, 1] = True

    def test_token_mask(self):
        mask = BlockMask(np.array([[1, 0], [0, 1]]))
        tm = mask.token_mask(6, 4)
        assert tm.shape == (6, 6)
        assert tm[0, 3] and not tm[0, 4] and tm[5, 4]

    def test_non_square_rejected(self):
        with pytest.raises(ValidationError):
            BlockMask(np.ones((2, 3), dtype=bool))

    def test_overlap(self):
        a = BlockMask(np.eye(2, dtype=bool))
        b = BlockMask.full(2)
        assert mask_overlap(a, b) == pytest.approx(0.5)
        assert mean_row_overlap(a, b) == pytest.approx(0.5)
        assert mask_overlap(a, a) == 1.0
