import numpy as np
import pytest

from src.attention.config import AttnConfig
from src.attention.maskgen import BlockMask
from src.attention.sparse_attn import sparse_attention
from src.distill.student import (
    AffineStudent,
    AttnStudent,
    batch_importance,
    build_student,
    masked_attention_backward,
    masked_attention_forward,
)
from src.tensor.core import RngStream
from src.utils.errors import ValidationError


def attn_params(gen, c=3, h=4, tokens=6):
    return {
        "Wq": gen.standard_normal((c, h)),
        "Wk": gen.standard_normal((c, h)),
        "Wv": gen.standard_normal((c, h)),
        "Wo": gen.standard_normal((h, c)),
        "U": gen.standard_normal((tokens, c)),
    }


def loss(params, X, G, token_mask):
    Y, _ = masked_attention_forward(params, X, token_mask)
    return float((Y * G).sum())


def random_token_mask(gen, n_b=3, block=2):
    """Random block mask with a kept diagonal; row 0 keeps only its diagonal block."""
    bits = gen.random((n_b, n_b)) < 0.5
    np.fill_diagonal(bits, True)
    bits[0] = False
    bits[0, 0] = True
    return BlockMask(bits).token_mask(n_b * block, block)


class TestMaskedAttentionBackward:
    @pytest.mark.parametrize("seed", range(12))
    def test_matches_finite_differences(self, seed):
        gen = np.random.default_rng(seed)
        params = attn_params(gen)
        X = gen.standard_normal((2, 6, 3))
        G = gen.standard_normal((2, 6, 3))
        token_mask = random_token_mask(gen)
        _, cache = masked_attention_forward(params, X, token_mask)
        grads = masked_attention_backward(params, cache, G)

        eps = 1e-6
        for name in ("Wq", "Wk", "Wv", "Wo", "U"):
            for _ in range(3):
                idx = tuple(int(gen.integers(0, n)) for n in params[name].shape)
                plus = {k: v.copy() for k, v in params.items()}
                minus = {k: v.copy() for k, v in params.items()}
                plus[name][idx] += eps
                minus[name][idx] -= eps
                numeric = (loss(plus, X, G, token_mask) - loss(minus, X, G, token_mask)) / (2 * eps)
                assert grads[name][idx] == pytest.approx(numeric, rel=1e-4, abs=1e-7), (name, idx)
        for _ in range(4):
            idx = tuple(int(gen.integers(0, n)) for n in X.shape)
            Xp, Xm = X.copy(), X.copy()
            Xp[idx] += eps
            Xm[idx] -= eps
            numeric = (loss(params, Xp, G, token_mask) - loss(params, Xm, G, token_mask)) / (2 * eps)
            assert grads["X"][idx] == pytest.approx(numeric, rel=1e-4, abs=1e-7)

    def test_dead_key_block_gets_zero_gradient(self, rng):
        params = attn_params(rng, tokens=4)
        X = rng.standard_normal((3, 4, 3))
        token_mask = BlockMask(np.array([[True, False], [True, False]])).token_mask(4, 2)
        _, cache = masked_attention_forward(params, X, token_mask)
        grads = masked_attention_backward(params, cache, rng.standard_normal((3, 4, 3)))
        assert np.all(grads["K_tokens"][:, 2:] == 0.0)
        assert np.all(grads["V_tokens"][:, 2:] == 0.0)
        assert np.any(grads["K_tokens"][:, :2] != 0.0)

    def test_query_without_keys_rejected(self, rng):
        params = attn_params(rng, tokens=2)
        with pytest.raises(ValidationError):
            masked_attention_forward(params, rng.standard_normal((1, 2, 3)), np.array([[True, False], [False, False]]))


class TestForwardAgreement:
    def test_attention_part_equals_block_sparse_executor(self, rng):
        c = h = 4
        params = attn_params(rng, c=c, h=h, tokens=8)
        params["Wo"] = np.eye(h)
        params["U"] = np.zeros((8, c))
        bits = rng.random((4, 4)) < 0.5
        np.fill_diagonal(bits, True)
        mask = BlockMask(bits)
        X = rng.standard_normal((1, 8, c))
        Y, cache = masked_attention_forward(params, X, mask.token_mask(8, 2))
        expected = sparse_attention(cache.Q[0], cache.K[0], cache.V[0], mask, AttnConfig(block_size=2, samples=1))
        np.testing.assert_allclose(Y[0], expected.out, atol=1e-5)

    def test_batch_importance_is_oracle_map(self, rng):
        params = attn_params(rng, tokens=8)
        imp = batch_importance(params, rng.standard_normal((5, 8, 3)), 2)
        assert imp.values.shape == (4, 4)
        assert imp.values.max() <= 1.0


class TestStudents:
    def test_affine_identity_start(self):
        s = AffineStudent(2, 3)
        x = np.arange(6.0).reshape(2, 3)
        y, cache = s.forward(x, 1)
        np.testing.assert_array_equal(y, x)
        grads = s.vjp(1, cache, np.ones((2, 3)))
        np.testing.assert_allclose(grads["W"], np.tile(x.mean(axis=0), (3, 1)))
        np.testing.assert_allclose(grads["u"], 1.0)

    def test_apply_update(self):
        s = AffineStudent(1, 1)
        s.apply_update(0, {"W": np.array([[1.0]]), "u": np.array([-2.0])}, 0.5)
        np.testing.assert_allclose(s.params[0]["W"], [[0.5]])
        np.testing.assert_allclose(s.params[0]["u"], [1.0])

    def test_affine_param_shape_checked(self):
        with pytest.raises(ValidationError):
            AffineStudent(1, 2, params={0: {"W": np.eye(3), "u": np.zeros(3)}})

    def test_attn_student_shapes(self, stream):
        s = build_student("attn", 2, 16, stream, tokens=8, head_dim=4, block_size=2)
        assert isinstance(s, AttnStudent) and s.n_blocks == 4
        x = np.random.default_rng(0).standard_normal((5, 16))
        mask = s.select_mask(x, 0, AttnConfig(block_size=2, samples=2, tau=0.9, min_keep=0.25))
        y, cache = s.forward(x, 0, mask)
        assert y.shape == (5, 16)
        grads = s.vjp(0, cache, np.ones_like(y))
        assert set(grads) == set(s.parameter_names())

    def test_attn_init_replays(self):
        a = AttnStudent(2, 4, 2, 3, 2, RngStream(8))
        b = AttnStudent(2, 4, 2, 3, 2, RngStream(8))
        np.testing.assert_array_equal(a.params[1]["Wq"], b.params[1]["Wq"])

    def test_bad_variant(self, stream):
        with pytest.raises(ValidationError):
            build_student("mlp", 1, 4, stream)

    def test_attn_dim_must_factor(self, stream):
        with pytest.raises(ValidationError):
            build_student("attn", 1, 10, stream, tokens=4, channels=3)
