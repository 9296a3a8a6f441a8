import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from dawnfm.errors import ParameterError, ShapeError
from oracles import brute_circular_conv, brute_radon_matrix
from dawnfm.operators import (DenseOperator, GaussianBlurOperator, LinearOperator, RadonOperator,
                              SumOperator, adjoint_dot_test, blur_build_kernel, make_operator,
                              top_singular_value)


# ------------------------------------------------------------------ blur

def test_blur_kernel_values():
    k = blur_build_kernel(8, 3.0, 3.0)
    off = np.array([0, 1, 2, 3, 4, -3, -2, -1], dtype=float)
    raw = np.exp(-off[None, :] ** 2 / 9.0 - off[:, None] ** 2 / 9.0)
    np.testing.assert_allclose(k, raw / raw.sum(), rtol=1e-14)
    assert k[0, 0] == k.max()
    assert math.isclose(k.sum(), 1.0, rel_tol=1e-14)


@pytest.mark.parametrize("sx,sy", [(0.0, 1.0), (1.0, -2.0)])
def test_blur_kernel_rejects_bad_width(sx, sy):
    with pytest.raises(ParameterError):
        blur_build_kernel(8, sx, sy)


def test_blur_delta_gives_kernel():
    op = GaussianBlurOperator(8, 2.0, 1.5)
    d = np.zeros((8, 8))
    d[0, 0] = 1.0
    np.testing.assert_allclose(op.apply(d), op.kernel, atol=1e-15)


def test_blur_constant_preserved():
    op = GaussianBlurOperator(9)
    np.testing.assert_allclose(op.apply(np.full((9, 9), 0.7)), 0.7, atol=1e-14)


def test_blur_matches_direct_convolution(rng):
    op = GaussianBlurOperator(6, 2.0, 1.0)
    x = rng.standard_normal((6, 6))
    np.testing.assert_allclose(op.apply(x), brute_circular_conv(x, op.kernel), atol=1e-12)
    # adjoint = correlation = convolution with the flipped kernel
    kf = np.roll(op.kernel[::-1, ::-1], 1, axis=(0, 1))
    np.testing.assert_allclose(op.adjoint(x), brute_circular_conv(x, kf), atol=1e-12)


@pytest.mark.parametrize("side", [16, 28])
def test_blur_dot_test(side):
    assert adjoint_dot_test(GaussianBlurOperator(side), trials=20) < 1e-10


def test_blur_norm_is_peak_of_spectrum():
    op = GaussianBlurOperator(16)
    want = np.max(np.abs(np.fft.fft2(op.kernel)))
    assert abs(top_singular_value(op, iters=100) - want) < 1e-6
    assert abs(want - 1.0) < 1e-12


def test_blur_shape_mismatch():
    with pytest.raises(ShapeError):
        GaussianBlurOperator(8).apply(np.zeros((8, 7)))


# ----------------------------------------------------------------- radon

@pytest.mark.parametrize("side", [2, 3, 5, 6])
def test_radon_matches_brute_force(side, rng):
    n_angles = 12
    op = RadonOperator(side, n_angles)
    mat = brute_radon_matrix(side, n_angles)
    for _ in range(3):
        x = rng.standard_normal((side, side))
        y = rng.standard_normal(op.range_shape)
        np.testing.assert_allclose(op.apply(x).ravel(), mat @ x.ravel(), atol=1e-9, rtol=0)
        np.testing.assert_allclose(op.adjoint(y).ravel(), mat.T @ y.ravel(), atol=1e-9, rtol=0)


@pytest.mark.parametrize("backend", ["numpy", "numba"])
def test_radon_backends_agree_with_brute_force(backend, rng):
    op = RadonOperator(4, 7, backend=backend)
    mat = brute_radon_matrix(4, 7)
    x = rng.standard_normal((4, 4))
    np.testing.assert_allclose(op.apply(x).ravel(), mat @ x.ravel(), atol=1e-10)


@pytest.mark.parametrize("side", [8, 16])
def test_radon_dot_test(side):
    assert adjoint_dot_test(RadonOperator(side), trials=20) < 1e-9


def test_radon_zeros():
    op = RadonOperator(8, 30)
    assert np.all(op.apply(np.zeros((8, 8))) == 0)
    assert np.all(op.adjoint(np.zeros(op.range_shape)) == 0)


def test_radon_shapes():
    op = RadonOperator(16)
    assert op.range_shape == (360, 33)
    assert op.pad == 8 and op.padded_side == 32
    with pytest.raises(ShapeError):
        op.apply(np.zeros((16, 15)))


def test_radon_projection_of_disk():
    # a disk of radius R projects to 2 sqrt(R^2 - u^2) at every angle
    side, radius = 32, 9.0
    c = (side - 1) / 2.0
    yy, xx = np.mgrid[:side, :side]
    sub = np.zeros((side, side))
    for dy in np.linspace(-0.45, 0.45, 10):
        for dx in np.linspace(-0.45, 0.45, 10):
            sub += ((yy + dy - c) ** 2 + (xx + dx - c) ** 2 <= radius ** 2)
    disk = sub / 100.0
    op = RadonOperator(side, 8)
    sino = op.apply(disk)
    u = np.arange(op.n_detectors) - side
    want = 2 * np.sqrt(np.clip(radius ** 2 - u ** 2, 0, None))
    inner = np.abs(u) < radius - 1.5
    assert np.max(np.abs(sino[:, inner] - want[inner])) < 0.25
    # every projection carries the image mass
    np.testing.assert_allclose(sino.sum(axis=1), disk.sum(), rtol=5e-3)


def test_radon_batched_apply(rng):
    op = RadonOperator(6, 10)
    xs = rng.standard_normal((3, 2, 6, 6))
    out = op.apply(xs)
    assert out.shape == (3, 2) + op.range_shape
    np.testing.assert_allclose(out[1, 1], op.apply(xs[1, 1]), atol=1e-13)
    back = op.adjoint(out)
    np.testing.assert_allclose(back[2, 0], op.adjoint(out[2, 0]), atol=1e-12)


def test_radon_norm_matches_svd():
    op = RadonOperator(6, 20)
    smax = np.linalg.svd(brute_radon_matrix(6, 20), compute_uv=False)[0]
    assert abs(top_singular_value(op, iters=200) - smax) < 1e-6 * smax


# ------------------------------------------------------------- sum / dense

def test_sum_operator():
    op = SumOperator()
    np.testing.assert_array_equal(op.apply(np.array([1.0, 2.0])), [3.0])
    np.testing.assert_array_equal(op.adjoint(np.array([5.0])), [5.0, 5.0])
    assert adjoint_dot_test(op) < 1e-14
    assert abs(top_singular_value(op) - math.sqrt(2)) < 1e-10
    with pytest.raises(ShapeError):
        op.apply(np.zeros(3))


def test_dense_operator_norm():
    op = DenseOperator(np.diag([3.0, 1.0]))
    assert abs(top_singular_value(op, iters=200) - 3.0) < 1e-8


def test_power_iteration_history_nondecreasing():
    op = DenseOperator(np.random.default_rng(1).standard_normal((7, 5)))
    hist = top_singular_value(op, iters=40, history=True)
    assert all(b >= a - 1e-12 for a, b in zip(hist, hist[1:]))


def test_dot_test_catches_corrupted_adjoint():
    mat = np.random.default_rng(2).standard_normal((6, 4))

    class Broken(LinearOperator):
        def __init__(self):
            super().__init__((4,), (6,))
            self.bad = mat.T.copy()
            self.bad[1, 2] += 1e-3

        def _apply(self, x):
            return x @ mat.T

        def _adjoint(self, y):
            return y @ self.bad.T

    assert adjoint_dot_test(Broken()) > 1e-6


def test_make_operator():
    assert isinstance(make_operator("blur", 8), GaussianBlurOperator)
    assert isinstance(make_operator("radon", 8, n_angles=4), RadonOperator)
    assert isinstance(make_operator("sum"), SumOperator)
    with pytest.raises(ParameterError):
        make_operator("fft", 8)


@settings(max_examples=25, deadline=None)
@given(side=st.integers(2, 12), sx=st.floats(0.3, 5.0), sy=st.floats(0.3, 5.0),
       seed=st.integers(0, 2**31))
def test_blur_adjoint_property(side, sx, sy, seed):
    op = GaussianBlurOperator(side, sx, sy)
    assert adjoint_dot_test(op, np.random.default_rng(seed), trials=3) < 1e-9


@settings(max_examples=15, deadline=None)
@given(side=st.integers(2, 9), n_angles=st.integers(1, 17), seed=st.integers(0, 2**31))
def test_radon_linearity_property(side, n_angles, seed):
    r = np.random.default_rng(seed)
    op = RadonOperator(side, n_angles)
    x, y = r.standard_normal((2, side, side))
    a, b = r.standard_normal(2)
    lhs = op.apply(a * x + b * y)
    rhs = a * op.apply(x) + b * op.apply(y)
    assert np.max(np.abs(lhs - rhs)) < 1e-10 * (1 + np.max(np.abs(rhs)))
