import itertools

import numpy as np
import pytest

from lambdaflow import diffcore as dc
from lambdaflow.diffcore import Tensor
from lambdaflow.nn import (CAUSAL, LAMBDA, AdaLNBlock, ConfigError, MaskSpec, Module, Linear,
                           SelfAttention, Standardizer, TimestepEmbedder, TokenLayout, apply_rope, attention, build_mask,
                           mask_from_ascii, mask_to_ascii, rope_indices, sinusoid_features)

from conftest import leaf

LAMBDA_T5_P2_W2 = """\
1......
11.....
111....
1111...
11111..
11.111.
11..111"""


def brute_mask(n_lead, plen, nlen, kind, w):
    """Visibility rule written out token by token."""
    n = n_lead + plen + nlen
    m = np.zeros((n, n), dtype=bool)
    for q in range(n):
        for key in range(n):
            if kind == CAUSAL:
                m[q, key] = key <= q
            elif q < n_lead:
                m[q, key] = key <= q
            elif key < n_lead:
                m[q, key] = True
            else:
                p, t = q - n_lead, key - n_lead
                m[q, key] = max(0, p - w) <= t <= p
    return m


class TestMasks:
    def test_causal_lower_triangular(self):
        m = build_mask(TokenLayout(0, 3), MaskSpec(CAUSAL))
        assert np.array_equal(m, np.tril(np.ones((5, 5), dtype=bool)))

    def test_lambda_worked_example(self):
        m = build_mask(TokenLayout(2, 3), MaskSpec(LAMBDA, 2))
        assert set(np.nonzero(m[6])[0]) == {0, 1, 4, 5, 6}
        assert set(np.nonzero(m[4])[0]) == {0, 1, 2, 3, 4}
        assert mask_to_ascii(m) == LAMBDA_T5_P2_W2

    def test_wide_window_is_causal(self):
        for plen, nlen in [(0, 5), (2, 3), (6, 6)]:
            lay = TokenLayout(plen, nlen)
            assert np.array_equal(build_mask(lay, MaskSpec(LAMBDA, plen + nlen)), build_mask(lay, MaskSpec(CAUSAL)))

    def test_exhaustive_against_rule(self):
        for t in range(1, 13):
            for plen in range(0, min(6, t) + 1):
                for w in range(1, 9):
                    got = build_mask(TokenLayout(plen, t - plen), MaskSpec(LAMBDA, w))
                    assert np.array_equal(got, brute_mask(2, plen, t - plen, LAMBDA, w)), (t, plen, w)

    def test_prefix_hidden_beyond_window(self):
        for t, plen, w in itertools.product(range(1, 13), range(0, 7), range(1, 9)):
            if plen > t:
                continue
            m = build_mask(TokenLayout(plen, t - plen), MaskSpec(LAMBDA, w))
            for p in range(plen, t):
                if p - w > plen - 1:
                    assert not m[2 + p, 2:2 + plen].any()

    def test_bad_specs(self):
        with pytest.raises(ConfigError):
            MaskSpec(LAMBDA, 0)
        with pytest.raises(ConfigError):
            MaskSpec("diagonal")

    def test_ascii_round_trip(self):
        m = build_mask(TokenLayout(3, 4), MaskSpec(LAMBDA, 2))
        assert np.array_equal(mask_from_ascii(mask_to_ascii(m)), m)


class TestRope:
    def test_indices(self):
        assert rope_indices(TokenLayout(0, 3), 10).tolist() == [0, 1, 12, 13, 14]
        assert rope_indices(TokenLayout(2, 2), 10).tolist() == [0, 1, 2, 3, 14, 15]
        assert rope_indices(TokenLayout(0, 1), 0).tolist() == [0, 1, 2]

    def test_no_collisions_between_bands(self):
        for t in range(6, 31):
            for plen in range(0, 7):
                idx = rope_indices(TokenLayout(plen, t - plen), 10)
                assert len(set(idx.tolist())) == len(idx)
                assert np.all(np.diff(idx[2:2 + plen]) > 0) and np.all(np.diff(idx[2 + plen:]) > 0)

    def test_index_zero_is_identity(self, rng):
        v = rng.normal(size=(1, 8))
        assert np.array_equal(apply_rope(Tensor(v), np.array([0])).data, v)

    def test_norm_preserved(self, rng):
        v = rng.normal(size=(6, 8))
        out = apply_rope(Tensor(v), np.arange(6) * 7).data
        np.testing.assert_allclose(np.linalg.norm(out, axis=1), np.linalg.norm(v, axis=1), atol=1e-12)

    def test_relative_position(self, rng):
        q, kk = rng.normal(size=8), rng.normal(size=8)

        def dot(i, j):
            a = apply_rope(Tensor(q[None]), np.array([i])).data[0]
            b = apply_rope(Tensor(kk[None]), np.array([j])).data[0]
            return a @ b

        assert abs(dot(5, 3) - dot(12, 10)) < 1e-10

    def test_odd_width(self):
        with pytest.raises(ConfigError):
            apply_rope(Tensor(np.ones((2, 3))), np.arange(2))


class TestAttention:
    def test_single_token_returns_value(self, rng):
        q, kk, v = (Tensor(rng.normal(size=(1, 4))) for _ in range(3))
        out = attention(q, kk, v, np.ones((1, 1), dtype=bool))
        np.testing.assert_allclose(out.data, v.data, atol=1e-15)

    def test_dominant_context(self, rng):
        q = Tensor(np.full((1, 4), 10.0))
        kself, vself = Tensor(np.zeros((1, 4))), Tensor(rng.normal(size=(1, 4)))
        kc, vc = Tensor(np.full((1, 4), 10.0)), Tensor(rng.normal(size=(1, 4)))
        out = attention(q, kself, vself, np.ones((1, 1), dtype=bool), context=(kc, vc)).data
        w = (out - vself.data) / (vc.data - vself.data)
        assert np.all(w > 1 - 1e-6)

    def test_masked_column_content_is_irrelevant(self, rng):
        q, kk, v = rng.normal(size=(3, 3, 4))
        vis = np.tril(np.ones((3, 3), dtype=bool))
        base = attention(Tensor(q), Tensor(kk), Tensor(v), vis).data
        k2, v2 = kk.copy(), v.copy()
        k2[2] += 100.0
        v2[2] -= 50.0
        moved = attention(Tensor(q), Tensor(k2), Tensor(v2), vis).data
        assert np.array_equal(base[:2], moved[:2])

    def test_degenerate_without_context(self, rng):
        x = Tensor(rng.normal(size=(2, 4)))
        with pytest.raises(dc.DegenerateMaskError):
            attention(x, x, x, np.array([[True, False], [False, False]]))

    def test_context_keeps_masked_row_alive(self, rng):
        x = Tensor(rng.normal(size=(2, 4)))
        c = Tensor(rng.normal(size=(1, 4)))
        out = attention(x, x, x, np.array([[True, False], [False, False]]), context=(c, c))
        np.testing.assert_allclose(out.data[1], c.data[0], atol=1e-15)

    def test_attention_block_gradients(self, rng):
        attn = SelfAttention(8, 2, rng)
        x = leaf(rng.normal(size=(2, 4, 8)))
        ctx = (leaf(rng.normal(size=(2, 2, 3, 4))), leaf(rng.normal(size=(2, 2, 3, 4))))
        vis = build_mask(TokenLayout(1, 1), MaskSpec(LAMBDA, 1))
        rope = rope_indices(TokenLayout(1, 1))
        w = rng.normal(size=(2, 4, 8))
        params = [x, *ctx] + attn.parameters()
        err = dc.grad_check(lambda ps: dc.sum_(attn(x, vis, rope, ctx) * Tensor(w)), params)
        assert err < 1e-6


class _Affine(Module):
    def __init__(self, rng):
        self.lin = Linear(6, 6, rng)

    def __call__(self, h):
        return self.lin(h)


class TestAdaLN:
    def test_fresh_block_is_identity(self, rng):
        blk = AdaLNBlock(6, _Affine(rng), rng)
        x = Tensor(rng.normal(size=(2, 3, 6)))
        assert np.array_equal(blk(x, Tensor(rng.normal(size=(2, 6)))).data, x.data)

    def test_unit_gate_is_plain_residual(self, rng):
        blk = AdaLNBlock(6, _Affine(rng), rng)
        blk.modulation.bias.data[12:] = 1.0
        x = Tensor(rng.normal(size=(2, 3, 6)))
        ref = x.data + blk.sub(dc.layer_norm(x)).data
        np.testing.assert_allclose(blk(x, Tensor(rng.normal(size=(2, 6)))).data, ref, atol=1e-12)

    def test_condition_gradient(self, rng):
        blk = AdaLNBlock(6, _Affine(rng), rng).jitter_(rng, 0.3)
        x = Tensor(rng.normal(size=(2, 3, 6)))
        cond = leaf(rng.normal(size=(2, 6)))
        w = rng.normal(size=(2, 3, 6))
        f = lambda ps: dc.sum_(blk(x, ps[0]) * Tensor(w))
        assert dc.grad_check(f, [cond]) <= 1e-4
        dc.backward(f([cond]))
        assert np.abs(cond.grad).max() > 0


class TestTimestep:
    def test_zero_features_alternate(self):
        assert sinusoid_features(0.0, 8).tolist() == [0.0, 1.0] * 4

    def test_range_error(self):
        with pytest.raises(ValueError):
            sinusoid_features(1.5, 8)
        with pytest.raises(ValueError):
            sinusoid_features(-0.1, 8)

    def test_distinct_times_differ(self):
        assert np.linalg.norm(sinusoid_features(0.1, 32) - sinusoid_features(0.9, 32)) > 0.1

    def test_embedder_deterministic(self, rng):
        emb = TimestepEmbedder(8, rng)
        assert np.array_equal(emb(np.array([0.3])).data, emb(np.array([0.3])).data)


class TestModule:
    def test_state_dict_round_trip(self, rng):
        a, b = SelfAttention(8, 2, rng), SelfAttention(8, 2, np.random.default_rng(9))
        b.load_state_dict(a.state_dict())
        for (na, pa), (nb, pb) in zip(a.named_parameters(), b.named_parameters()):
            assert na == nb and np.array_equal(pa.data, pb.data)

    def test_strict_load(self, rng):
        a = SelfAttention(8, 2, rng)
        state = a.state_dict()
        state.pop("wo.bias")
        with pytest.raises(KeyError):
            a.load_state_dict(state)

    def test_heads_must_divide(self, rng):
        with pytest.raises(ConfigError):
            SelfAttention(10, 3, rng)


class TestStandardizer:
    def test_fit_and_round_trip(self, rng):
        x = rng.normal(size=(400, 3)) * [0.05, 1.0, 7.0] + [1.0, 0.0, -2.0]
        s = Standardizer(3)
        s.fit(x)
        z = s.encode(x)
        np.testing.assert_allclose(z.mean(0), 0.0, atol=1e-12)
        np.testing.assert_allclose(z.std(0), 1.0, atol=1e-12)
        np.testing.assert_allclose(s.decode(z), x, atol=1e-12)

    def test_floor_for_constant_columns(self):
        s = Standardizer(2)
        s.fit(np.tile([[3.0, 4.0]], (5, 1)), floor=0.5)
        assert s.scale.data.tolist() == [0.5, 0.5]

    def test_buffers_not_trainable_but_saved(self, rng):
        s = Standardizer(2)
        s.fit(rng.normal(size=(10, 2)))
        assert s.parameters() == []
        t = Standardizer(2)
        t.load_state_dict(s.state_dict())
        assert np.array_equal(t.shift.data, s.shift.data) and np.array_equal(t.scale.data, s.scale.data)
        with pytest.raises(KeyError):
            t.load_state_dict({"shift": s.shift.data})
