import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from dawnfm.core import fft2, make_rng, sample_standard_normal
from dawnfm.errors import ShapeError


def dft_matrix(n):
    k = np.arange(n)
    return np.exp(-2j * np.pi * np.outer(k, k) / n)


def test_same_seed_same_draws():
    a = sample_standard_normal(make_rng(7), (4,))
    b = sample_standard_normal(make_rng(7), (4,))
    assert a.shape == (4,)
    assert np.array_equal(a, b)


def test_streams_are_distinct():
    a = make_rng(7, 1).standard_normal(8)
    b = make_rng(7, 2).standard_normal(8)
    assert not np.array_equal(a, b)


def test_moments_of_large_draw():
    x = sample_standard_normal(make_rng(0), (10000,))
    assert abs(x.mean()) < 0.05
    assert abs(x.var() - 1.0) < 0.1


@pytest.mark.parametrize("shape", [(0,), (3, 0), ()])
def test_degenerate_shapes_rejected(shape):
    with pytest.raises(ShapeError):
        sample_standard_normal(make_rng(0), shape)


def test_fft_of_zeros():
    z = np.zeros((5, 7))
    assert np.all(fft2(z) == 0)
    assert np.all(fft2(z, inverse=True) == 0)


def test_fft_of_delta_is_flat():
    d = np.zeros((4, 4))
    d[0, 0] = 1.0
    np.testing.assert_allclose(fft2(d), np.ones((4, 4)), atol=1e-15)


def test_fft_matches_dft_matrices(rng):
    # non power of two on both axes
    x = rng.standard_normal((6, 28))
    want = dft_matrix(6) @ x @ dft_matrix(28).T
    np.testing.assert_allclose(fft2(x), want, atol=1e-10)


def test_fft_roundtrip_28():
    x = make_rng(3).standard_normal((28, 28))
    assert np.max(np.abs(fft2(fft2(x), inverse=True) - x)) < 1e-12


def test_fft_rejects_non_2d():
    with pytest.raises(ShapeError):
        fft2(np.zeros(4))
    with pytest.raises(ShapeError):
        fft2(np.zeros((2, 2, 2)))


@settings(max_examples=30, deadline=None)
@given(h=st.integers(1, 12), w=st.integers(1, 12), seed=st.integers(0, 2**32 - 1))
def test_fft_parseval(h, w, seed):
    x = np.random.default_rng(seed).standard_normal((h, w))
    X = fft2(x)
    assert np.isclose(np.sum(np.abs(X) ** 2), h * w * np.sum(x ** 2), rtol=1e-10)
