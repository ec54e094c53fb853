import numpy as np
import pytest

from src.attention.config import AttnConfig
from src.attention.maskgen import threshold_mask
from src.attention.prober import (
    FULL_ORACLE,
    SPARSE_PROBE,
    ImportanceMap,
    block_sample,
    compute_block_importance,
    dense_importance_map,
    max_pooled_attn_map,
    pad_to_block,
    two_pass_sampled_map,
)
from src.tensor.core import FlopCounter, RngStream
from src.utils.errors import ValidationError


def gaussian(gen, n, d, gain=1.0):
    return (gain * gen.standard_normal((n, d))).astype(np.float32)


class TestBlockSample:
    def test_distinct_sorted_in_block(self, rng, stream):
        x = gaussian(rng, 100, 4)
        cfg = AttnConfig(block_size=16, samples=5)
        s = block_sample(x, cfg, stream)
        assert s.n_blocks == 7
        for i in range(s.n_blocks):
            idx = s.indices[s.offsets[i]:s.offsets[i + 1]]
            assert np.all(np.diff(idx) > 0)
            assert idx.min() >= 16 * i and idx.max() < min(16 * (i + 1), 100)

    def test_short_tail_block_yields_all_valid_rows(self, rng, stream):
        x, valid = pad_to_block(gaussian(rng, 35, 4), 16)
        s = block_sample(x, AttnConfig(block_size=16, samples=8), stream, valid_len=valid)
        tail = s.indices[s.offsets[2]:s.offsets[3]]
        np.testing.assert_array_equal(tail, [32, 33, 34])

    def test_replay(self, rng):
        x = gaussian(rng, 64, 4)
        cfg = AttnConfig(block_size=16, samples=4)
        a = block_sample(x, cfg, RngStream(3))
        b = block_sample(x, cfg, RngStream(3))
        np.testing.assert_array_equal(a.indices, b.indices)

    def test_strided(self, rng, stream):
        x = gaussian(rng, 32, 2)
        s = block_sample(x, AttnConfig(block_size=16, samples=4, sampling="strided"), stream)
        np.testing.assert_array_equal(s.indices, [2, 6, 10, 14, 18, 22, 26, 30])

    def test_pad_to_block(self):
        padded, valid = pad_to_block(np.ones((10, 3), dtype=np.float32), 4)
        assert padded.shape == (12, 3) and valid == 10
        assert np.all(padded[10:] == 0)


class TestStreamingMap:
    def test_matches_two_pass(self, rng, stream):
        for _ in range(10):
            n = int(rng.integers(32, 200))
            q, k = gaussian(rng, n, 8, gain=2.0), gaussian(rng, n, 8)
            cfg = AttnConfig(block_size=16, samples=4)
            qp, valid = pad_to_block(q, 16)
            kp, _ = pad_to_block(k, 16)
            qs = block_sample(qp, cfg, stream.split(0), valid_len=valid)
            ks = block_sample(kp, cfg, stream.split(1), valid_len=valid)
            streamed = max_pooled_attn_map(qs, ks, cfg)
            np.testing.assert_allclose(streamed.values, two_pass_sampled_map(qs, ks, cfg), rtol=1e-5, atol=1e-7)

    def test_mismatched_k_rejected(self, rng, stream):
        x = gaussian(rng, 32, 4)
        qs = block_sample(x, AttnConfig(block_size=16, samples=4), stream)
        ks = block_sample(x, AttnConfig(block_size=16, samples=8), stream)
        with pytest.raises(ValidationError):
            max_pooled_attn_map(qs, ks, AttnConfig(block_size=16, samples=4))


class TestComputeBlockImportance:
    def test_exhaustive_sampling_equals_oracle(self, rng):
        for trial in range(50):
            b = int(rng.choice([8, 16, 32]))
            n = int(rng.integers(b, 513))
            d = int(rng.choice([4, 8, 16]))
            q, k = gaussian(rng, n, d, gain=1.5), gaussian(rng, n, d)
            cfg = AttnConfig(block_size=b, samples=b, tau=0.9, min_keep=0.0)
            sparse = compute_block_importance(q, k, cfg, RngStream(trial))
            full = dense_importance_map(q, k, cfg)
            assert sparse.provenance == SPARSE_PROBE and full.provenance == FULL_ORACLE
            np.testing.assert_allclose(sparse.values, full.values, atol=1e-6)
            assert np.array_equal(threshold_mask(sparse, cfg).bits, threshold_mask(full, cfg).bits)

    def test_uniform_logits_scale_by_b_over_k(self, stream):
        q = np.ones((512, 16), dtype=np.float32)
        cfg = AttnConfig(block_size=128, samples=16)
        sparse = compute_block_importance(q, q, cfg, stream)
        full = dense_importance_map(q, q, cfg)
        np.testing.assert_allclose(sparse.values / full.values, 8.0, atol=1e-6)

    @pytest.mark.parametrize("b,k", [(128, 16), (64, 8), (32, 8)])
    def test_probe_flops_scale_with_sampling_ratio(self, rng, b, k):
        q, k_ = gaussian(rng, 1024, 64), gaussian(rng, 1024, 64)
        cfg = AttnConfig(block_size=b, samples=k)
        probe, dense = FlopCounter(), FlopCounter()
        compute_block_importance(q, k_, cfg, RngStream(0), flops=probe)
        dense_importance_map(q, k_, cfg, flops=dense)
        assert probe.total <= 1.1 * (k / b) ** 2 * dense.total

    def test_multi_head_uses_head_streams(self, rng):
        q, k = gaussian(rng, 3 * 64, 8).reshape(3, 64, 8), gaussian(rng, 3 * 64, 8).reshape(3, 64, 8)
        cfg = AttnConfig(block_size=16, samples=4)
        maps = compute_block_importance(q, k, cfg, RngStream(9))
        assert len(maps) == 3
        single = compute_block_importance(q[2], k[2], cfg, RngStream(9).split(2))
        np.testing.assert_array_equal(maps[2].values, single.values)

    def test_values_in_unit_interval(self, rng, stream):
        q, k = gaussian(rng, 200, 8, gain=4.0), gaussian(rng, 200, 8)
        p = compute_block_importance(q, k, AttnConfig(block_size=32, samples=8), stream)
        assert p.values.min() >= 0.0 and p.values.max() <= 1.0

    def test_shape_mismatch(self, rng, stream):
        with pytest.raises(ValidationError):
            compute_block_importance(gaussian(rng, 32, 4), gaussian(rng, 16, 4), AttnConfig(16, 4), stream)


class TestImportanceMap:
    def test_rejects_out_of_range(self):
        with pytest.raises(ValidationError):
            ImportanceMap(np.array([[1.5]]), SPARSE_PROBE)

    def test_rejects_unknown_provenance(self):
        with pytest.raises(ValidationError):
            ImportanceMap(np.zeros((2, 2)), "guess")
