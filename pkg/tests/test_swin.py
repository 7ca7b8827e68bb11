import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from swindiff import tensor as T
from swindiff.swin import (SwinBlock, SwinConfig, SwinVNet, WindowAttention, cyclic_shift,
                           cyclic_unshift, effective_window, interp_matrix, level_extents,
                           scale_shift, sinusoidal_embed, window_merge, window_partition,
                           windowed_attention)
from swindiff.tensor import ShapeError, Tensor

TINY = SwinConfig(widths=(8, 16, 16, 16, 16), heads=2, time_dim=16)


def randomize_head(model, seed=0):
    rng = np.random.default_rng(seed)
    model.head.weight.data = rng.normal(0, 0.05, model.head.weight.shape)
    model.head.bias.data = rng.normal(0, 0.05, model.head.bias.shape)


class TestEmbedding:
    def test_zero_timestep(self):
        e = sinusoidal_embed(0, 128)
        np.testing.assert_array_equal(e[:64], 0.0)
        np.testing.assert_array_equal(e[64:], 1.0)

    def test_dimension_and_first_frequency(self):
        e = sinusoidal_embed(1, 128, 1e6)
        assert e.shape == (128,)
        assert e[0] == pytest.approx(math.sin(1.0), abs=1e-15)     # omega_0 = 1
        assert e[63] == pytest.approx(math.sin(1e-6), rel=1e-9)    # omega_63 = 1/max_period

    def test_sign_flip_near_pi(self):
        assert sinusoidal_embed(3, 128)[0] > 0 > sinusoidal_embed(4, 128)[0]
        assert abs(sinusoidal_embed(3, 128)[0]) < 0.15

    def test_distinct_timesteps(self):
        e = sinusoidal_embed(np.arange(1, 1001), 128)
        assert e.shape == (1000, 128)
        assert len(np.unique(e.round(12), axis=0)) == 1000

    def test_odd_dimension_rejected(self):
        with pytest.raises(ValueError):
            sinusoidal_embed(1, 7)


class TestScaleShift:
    def test_identity(self):
        h = np.random.default_rng(0).standard_normal((2, 2, 2, 1, 3))
        out = scale_shift(h, np.zeros((2, 3)), np.zeros((2, 3)))
        np.testing.assert_array_equal(out.data, h)

    def test_minus_one_scale_gives_shift(self):
        h = np.random.default_rng(1).standard_normal((2, 2, 2, 1, 3))
        sh = np.array([[1.0, 2.0, 3.0], [-1.0, 0.5, 0.0]])
        out = scale_shift(h, -np.ones((2, 3)), sh).data
        np.testing.assert_array_equal(out, np.broadcast_to(sh[:, None, None, None, :], h.shape))

    def test_elementwise_oracle(self):
        rng = np.random.default_rng(2)
        h = rng.standard_normal((2, 2, 3, 1, 4))
        sc, sh = rng.standard_normal((2, 4)), rng.standard_normal((2, 4))
        out = scale_shift(h, sc, sh).data
        for b in range(2):
            for idx in np.ndindex(2, 3, 1):
                for c in range(4):
                    assert out[(b, *idx, c)] == pytest.approx(h[(b, *idx, c)] * (1 + sc[b, c]) + sh[b, c],
                                                              abs=1e-15)


class TestWindows:
    def test_counts(self):
        x = np.zeros((1, 8, 8, 4, 2))
        assert window_partition(x, (4, 4, 4)).shape == (4, 64, 2)
        y = np.random.default_rng(0).standard_normal((1, 4, 4, 2, 3))
        w = window_partition(y, (4, 4, 2))
        assert w.shape == (1, 32, 3)
        np.testing.assert_array_equal(w.data[0], y.reshape(32, 3))

    def test_indivisible_rejected(self):
        with pytest.raises(ShapeError):
            window_partition(np.zeros((1, 6, 8, 4, 1)), (4, 4, 4))
        with pytest.raises(ShapeError):
            effective_window((6, 8, 4), (4, 4, 4))

    def test_effective_window_clamps(self):
        assert effective_window((2, 2, 4), (4, 4, 2)) == (2, 2, 2)
        assert effective_window((1, 1, 4), (2, 2, 2)) == (1, 1, 2)

    @settings(max_examples=100, deadline=None)
    @given(win=st.tuples(st.integers(1, 4), st.integers(1, 4), st.integers(1, 3)),
           mult=st.tuples(st.integers(1, 3), st.integers(1, 3), st.integers(1, 3)),
           B=st.integers(1, 2), C=st.integers(1, 3), seed=st.integers(0, 2**31))
    def test_partition_merge_shift_roundtrip(self, win, mult, B, C, seed):
        shape = (B,) + tuple(w * m for w, m in zip(win, mult)) + (C,)
        x = np.random.default_rng(seed).standard_normal(shape)
        back = window_merge(window_partition(x, win), win, shape).data
        assert np.array_equal(back, x)
        shift = tuple(w // 2 for w in win)
        assert np.array_equal(cyclic_unshift(cyclic_shift(Tensor(x), shift), shift).data, x)


def numpy_attention(tokens, attn):
    """Straight multi-head attention over all tokens of one window."""
    P = attn.heads
    C = tokens.shape[-1]
    dk = C // P
    q = tokens @ attn.q.weight.data + attn.q.bias.data
    k = tokens @ attn.k.weight.data + attn.k.bias.data
    v = tokens @ attn.v.weight.data + attn.v.bias.data
    heads = []
    for p in range(P):
        sl = slice(p * dk, (p + 1) * dk)
        s = q[:, sl] @ k[:, sl].T / math.sqrt(dk)
        s = np.exp(s - s.max(axis=1, keepdims=True))
        heads.append((s / s.sum(axis=1, keepdims=True)) @ v[:, sl])
    return np.concatenate(heads, axis=1) @ attn.proj.weight.data + attn.proj.bias.data


class TestAttention:
    def test_zero_qk_gives_mean_of_values(self):
        rng = np.random.default_rng(0)
        attn = WindowAttention(4, 2, rng)
        for lin in (attn.q, attn.k):
            lin.weight.data[:] = 0
            lin.bias.data[:] = 0
        tokens = rng.standard_normal((3, 5, 4))
        out = attn(Tensor(tokens)).data
        v = tokens @ attn.v.weight.data + attn.v.bias.data
        expect = v.mean(axis=1, keepdims=True) @ attn.proj.weight.data + attn.proj.bias.data
        np.testing.assert_allclose(out, np.broadcast_to(expect, out.shape), atol=1e-14)

    def test_two_token_hand_case(self):
        attn = WindowAttention(2, 1, np.random.default_rng(0))
        for lin in (attn.q, attn.k, attn.v, attn.proj):
            lin.bias.data[:] = 0
        attn.q.weight.data = np.array([[1.0, 0.0], [0.0, 2.0]])
        attn.k.weight.data = np.array([[0.5, 0.0], [1.0, 1.0]])
        attn.v.weight.data = np.eye(2)
        attn.proj.weight.data = np.eye(2)
        x = np.array([[1.0, 0.0], [0.0, 1.0]])
        q, k = x @ attn.q.weight.data, x @ attn.k.weight.data
        # q k^T = Wq Wk^T = [[0.5, 1], [0, 2]], scaled by 1/sqrt(2)
        s = np.array([[0.5, 1.0], [0.0, 2.0]]) / math.sqrt(2)
        np.testing.assert_allclose(q @ k.T / math.sqrt(2), s, atol=1e-15)
        e0 = math.exp(s[0, 0]) / (math.exp(s[0, 0]) + math.exp(s[0, 1]))
        e1 = 1.0 / (1.0 + math.exp(s[1, 1]))
        expect = np.array([[e0, 1 - e0], [e1, 1 - e1]])
        out = attn(Tensor(x[None])).data[0]
        np.testing.assert_allclose(out, expect, atol=1e-12)

    def test_shape_contract(self):
        attn = WindowAttention(8, 4, np.random.default_rng(1))
        x = np.random.default_rng(2).standard_normal((2, 4, 4, 2, 8))
        assert windowed_attention(Tensor(x), attn, (2, 2, 2), (1, 1, 1)).shape == x.shape

    def test_single_window_equals_global_attention(self):
        attn = WindowAttention(6, 3, np.random.default_rng(3))
        x = np.random.default_rng(4).standard_normal((1, 4, 4, 2, 6))
        out = windowed_attention(Tensor(x), attn, (4, 4, 2)).data
        ref = numpy_attention(x.reshape(-1, 6), attn).reshape(x.shape)
        np.testing.assert_allclose(out, ref, atol=1e-10)

    def test_heads_must_divide(self):
        with pytest.raises(ShapeError):
            WindowAttention(6, 4, np.random.default_rng(0))


def test_swin_block_zero_input_zero_biases():
    cfg = TINY
    block = SwinBlock(16, 16, 16, (2, 2, 2), cfg, np.random.default_rng(0), resample=False)
    for name, p in block.named_parameters():
        if name.endswith("bias") or name.startswith("time"):
            p.data[:] = 0
    x = np.zeros((1, 4, 4, 2, 16))
    temb = Tensor(sinusoidal_embed(np.array([5.0]), cfg.time_dim))
    np.testing.assert_array_equal(block(Tensor(x), temb).data, 0.0)


def test_interp_matrix_rows_sum_to_one():
    for n_in, n_out in ((4, 2), (2, 4), (1, 1), (8, 4), (1, 3)):
        m = interp_matrix(n_in, n_out)
        np.testing.assert_allclose(m.sum(axis=1), 1.0)
    # halving averages neighbour pairs
    np.testing.assert_allclose(interp_matrix(4, 2), [[0.5, 0.5, 0, 0], [0, 0, 0.5, 0.5]])


def test_level_extents_inplane_only():
    assert level_extents((16, 16, 4)) == [(16, 16, 4), (8, 8, 4), (4, 4, 4), (2, 2, 4), (1, 1, 4),
                                          (1, 1, 4)]
    assert level_extents((64, 64, 4))[-1] == (2, 2, 4)
    with pytest.raises(ShapeError):
        level_extents((24, 24, 4))


class TestNetwork:
    def test_zero_head_outputs_zero(self):
        model = SwinVNet(TINY, seed=0)
        x = np.random.default_rng(0).standard_normal((2, 16, 16, 4))
        eps, k = model.predict(x, x, np.array([3, 700]))
        assert eps.shape == k.shape == (2, 16, 16, 4)
        np.testing.assert_array_equal(eps, 0.0)
        np.testing.assert_array_equal(k, 0.0)

    def test_default_config_prostate_patch(self):
        model = SwinVNet(SwinConfig(), seed=0)
        randomize_head(model)
        x = np.random.default_rng(1).standard_normal((1, 128, 128, 4))
        eps, k = model.predict(x, x, 500)
        assert eps.shape == k.shape == (1, 128, 128, 4)
        assert np.all(np.abs(k) <= 1)

    def test_timestep_sensitivity_and_determinism(self):
        model = SwinVNet(TINY, seed=1)
        randomize_head(model)
        rng = np.random.default_rng(2)
        x, c = rng.standard_normal((1, 16, 16, 4)), rng.standard_normal((1, 16, 16, 4))
        a1, _ = model.predict(x, c, 1)
        a2, _ = model.predict(x, c, 1000)
        assert not np.allclose(a1, a2)
        b1, _ = model.predict(x, c, 1)
        assert np.array_equal(a1, b1)

    def test_same_seed_same_parameters(self):
        a = dict(SwinVNet(TINY, seed=5).named_parameters())
        b = dict(SwinVNet(TINY, seed=5).named_parameters())
        assert all(np.array_equal(a[k].data, b[k].data) for k in a)

    def test_extents_rejected_with_reason(self):
        model = SwinVNet(TINY)
        with pytest.raises(ShapeError, match="halvings"):
            model.predict(np.zeros((1, 24, 24, 4)), np.zeros((1, 24, 24, 4)), 1)
        with pytest.raises(ShapeError, match="divisible"):
            model.predict(np.zeros((1, 16, 16, 3)), np.zeros((1, 16, 16, 3)), 1)
        with pytest.raises(ShapeError):
            model.forward(np.zeros((1, 16, 16, 4)), np.zeros((1, 16, 16, 8)), 1)

    def test_config_validation(self):
        with pytest.raises(ValueError):
            SwinConfig(widths=(8, 16, 16, 16))
        with pytest.raises(ValueError):
            SwinConfig(widths=(8, 18, 16, 16, 16), heads=4)

    def test_parameters_receive_gradients(self):
        model = SwinVNet(TINY, seed=3)
        randomize_head(model)
        rng = np.random.default_rng(4)
        x = rng.standard_normal((2, 16, 16, 4))
        eps, k = model.forward(x, x, np.array([10, 900]))
        (T.sum_(eps * eps) + T.sum_(k)).backward()
        missing = [n for n, p in model.named_parameters() if p.grad is None or not np.any(p.grad)]
        assert not missing
