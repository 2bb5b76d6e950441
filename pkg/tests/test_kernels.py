"""Numba loop kernels against their vectorised numpy twins and brute-force oracles."""

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from lambdaflow import kernels as k


def test_softmax_variants_agree(rng):
    x = rng.normal(size=(3, 4, 7, 9)) * 5
    vis = rng.random((7, 9)) < 0.5
    vis[:, 0] = True
    np.testing.assert_allclose(k.masked_softmax_fwd_nb(x, vis), k.masked_softmax_fwd_np(x, vis), atol=1e-14)
    p = k.masked_softmax_fwd_np(x, vis)
    g = rng.normal(size=x.shape)
    np.testing.assert_allclose(k.softmax_bwd_nb(p, g), k.softmax_bwd_np(p, g), atol=1e-13)


def test_layernorm_variants_agree(rng):
    x = rng.normal(size=(5, 6, 8)) * 3 + 1
    y1, i1 = k.layernorm_fwd_nb(x, 1e-6)
    y2, i2 = k.layernorm_fwd_np(x, 1e-6)
    np.testing.assert_allclose(y1, y2, atol=1e-12)
    np.testing.assert_allclose(i1, i2, rtol=1e-12)
    g = rng.normal(size=x.shape)
    np.testing.assert_allclose(k.layernorm_bwd_nb(y1, i1, g), k.layernorm_bwd_np(y2, i2, g), atol=1e-12)


def test_gelu_variants_agree_and_match_tanh_form(rng):
    x = rng.normal(size=(4, 33)) * 4
    y1, d1 = k.gelu_nb(x)
    y2, d2 = k.gelu_np(x)
    np.testing.assert_allclose(y1, y2, atol=1e-14)
    np.testing.assert_allclose(d1, d2, atol=1e-14)
    c = np.sqrt(2 / np.pi)
    ref = 0.5 * x * (1 + np.tanh(c * (x + 0.044715 * x ** 3)))
    np.testing.assert_allclose(y1, ref, atol=1e-12)
    h = 1e-6
    fd = (k.gelu_np(x + h)[0] - k.gelu_np(x - h)[0]) / (2 * h)
    np.testing.assert_allclose(d1, fd, atol=1e-7)


@pytest.mark.parametrize("lam", [False, True])
def test_visibility_variants_agree(lam):
    for lead in (0, 1, 2):
        for plen in range(0, 5):
            for nlen in range(0, 6):
                for w in (1, 2, 5):
                    a = k.visibility_nb(lead, plen, nlen, w, lam)
                    b = k.visibility_np(lead, plen, nlen, w, lam)
                    assert np.array_equal(a, b)


def brute_nearest(stamps, ticks):
    out = []
    for t in ticks:
        best, bd = 0, abs(stamps[0] - t)
        for j, s in enumerate(stamps):
            d = abs(s - t)
            if d < bd:
                best, bd = j, d
        out.append(best)
    return np.array(out)


@settings(max_examples=200, deadline=None)
@given(st.lists(st.floats(0, 2, allow_nan=False), min_size=1, max_size=25, unique=True),
       st.lists(st.floats(-0.5, 2.5, allow_nan=False), min_size=1, max_size=25))
def test_nearest_indices_match_brute_force(stamps, ticks):
    stamps = np.sort(np.array(stamps))
    ticks = np.sort(np.array(ticks))
    ref = brute_nearest(stamps, ticks)
    assert np.array_equal(k.nearest_indices_nb(stamps, ticks), ref)
    assert np.array_equal(k.nearest_indices_np(stamps, ticks), ref)


def test_nearest_tie_goes_earlier():
    stamps = np.array([0.0, 1.0])
    assert k.nearest_indices_nb(stamps, np.array([0.5])).tolist() == [0]
    assert k.nearest_indices_np(stamps, np.array([0.5])).tolist() == [0]
