import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from dawnfm import _kernels
from dawnfm.operators import RadonOperator


def naive_im2col(x, k):
    n, h, w, c = x.shape
    p = k // 2
    out = np.zeros((n, h, w, k, k, c))
    for b in range(n):
        for i in range(h):
            for j in range(w):
                for di in range(k):
                    for dj in range(k):
                        y, z = i + di - p, j + dj - p
                        if 0 <= y < h and 0 <= z < w:
                            out[b, i, j, di, dj] = x[b, y, z]
    return out.reshape(n * h * w, k * k * c)


@pytest.mark.parametrize("backend", ["numpy", "numba"])
@pytest.mark.parametrize("k", [1, 3])
def test_im2col_matches_loops(backend, k, rng):
    x = rng.standard_normal((2, 5, 4, 3))
    np.testing.assert_array_equal(_kernels.im2col(x, k, backend=backend), naive_im2col(x, k))


@settings(max_examples=20, deadline=None)
@given(n=st.integers(1, 3), h=st.integers(1, 7), w=st.integers(1, 7), c=st.integers(1, 4),
       seed=st.integers(0, 2**31))
def test_im2col_backends_identical(n, h, w, c, seed):
    x = np.random.default_rng(seed).standard_normal((n, h, w, c))
    a = _kernels.im2col(x, 3, backend="numpy")
    b = _kernels.im2col(x, 3, backend="numba")
    np.testing.assert_array_equal(a, b)


def test_radon_backends_agree(rng):
    fast = RadonOperator(10, 45, backend="numba")
    slow = RadonOperator(10, 45, backend="numpy")
    x = rng.standard_normal((2, 10, 10))
    y = rng.standard_normal((2,) + fast.range_shape)
    np.testing.assert_allclose(fast.apply(x), slow.apply(x), atol=1e-11)
    np.testing.assert_allclose(fast.adjoint(y), slow.adjoint(y), atol=1e-11)


def test_env_flag_selects_numpy(monkeypatch):
    monkeypatch.setenv("DAWNFM_NO_NUMBA", "1")
    assert not _kernels.numba_enabled()
    assert _kernels._resolve(None) == "numpy"
    monkeypatch.delenv("DAWNFM_NO_NUMBA")
    assert _kernels.numba_enabled() == _kernels.NUMBA_AVAILABLE


def test_unknown_backend():
    with pytest.raises(ValueError):
        _kernels._resolve("cuda")


def test_mallopt_opt_out(monkeypatch):
    monkeypatch.setenv("DAWNFM_NO_MALLOPT", "1")
    assert _kernels.retain_freed_memory() is False
