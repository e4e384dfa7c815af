import os
import subprocess
import sys

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from hypothesis.extra import numpy as hnp

from drft import kernels

matrices = hnp.arrays(
    np.float64,
    st.tuples(st.integers(1, 9), st.integers(1, 9)),
    elements=st.floats(-30, 30, allow_nan=False),
)


@pytest.fixture
def numba_backend():
    prev = kernels.set_backend("numba")
    yield
    kernels.set_backend(prev)


def both(fn, *args):
    prev = kernels.set_backend("numpy")
    try:
        ref = fn(*args)
        kernels.set_backend("numba")
        fast = fn(*args)
    finally:
        kernels.set_backend(prev)
    return ref, fast


class TestBackendParity:
    @given(matrices)
    def test_softmax_forward(self, x):
        ref, fast = both(kernels.softmax_fwd, x)
        np.testing.assert_allclose(fast, ref, rtol=1e-12, atol=1e-15)

    @given(matrices, st.integers(0, 2**31))
    def test_softmax_backward(self, x, seed):
        g = np.random.default_rng(seed).normal(size=x.shape)
        y = kernels.softmax_fwd_np(x)
        ref, fast = both(kernels.softmax_bwd, y, g)
        np.testing.assert_allclose(fast, ref, rtol=1e-9, atol=1e-12)

    @given(matrices, st.integers(0, 2**31))
    def test_layernorm_roundtrip(self, x, seed):
        r = np.random.default_rng(seed)
        gamma, beta = r.normal(size=x.shape[1]), r.normal(size=x.shape[1])
        g = r.normal(size=x.shape)
        ref, fast = both(kernels.layernorm_fwd, x, gamma, beta, 1e-5)
        for a, b in zip(ref, fast):
            np.testing.assert_allclose(b, a, rtol=1e-9, atol=1e-9)
        ref_b, fast_b = both(kernels.layernorm_bwd, g, ref[1], ref[2], gamma)
        for a, b in zip(ref_b, fast_b):
            np.testing.assert_allclose(b, a, rtol=1e-7, atol=1e-8)

    @given(hnp.arrays(np.float64, st.tuples(st.integers(1, 20), st.just(4)),
                      elements=st.floats(0, 1)))
    def test_tiou(self, x):
        a, b = np.sort(x[:, :2], axis=1), np.sort(x[:, 2:], axis=1)
        ref, fast = both(kernels.tiou, a, b)
        np.testing.assert_array_equal(fast, ref)


class TestKernels:
    def test_tiou_zero_length_convention(self):
        a = np.array([[0.3, 0.3], [0.3, 0.3]])
        b = np.array([[0.3, 0.3], [0.5, 0.5]])
        for name in ("numpy", "numba"):
            prev = kernels.set_backend(name)
            assert kernels.tiou(a, b).tolist() == [1.0, 0.0]
            kernels.set_backend(prev)

    def test_softmax_float32_dtype(self, numba_backend):
        x = np.random.default_rng(0).normal(size=(3, 5)).astype(np.float32)
        assert kernels.softmax_fwd(x).dtype == np.float32

    def test_unknown_backend(self):
        with pytest.raises(ValueError):
            kernels.set_backend("cuda")

    def test_non_contiguous_input(self):
        x = np.random.default_rng(0).normal(size=(6, 4))[:, ::2]
        ref, fast = both(kernels.softmax_fwd, x)
        np.testing.assert_allclose(fast, ref, atol=1e-15)


@pytest.mark.parametrize("flag,expected", [("0", "numpy"), ("off", "numpy"), ("1", "numba")])
def test_env_flag_selects_backend(flag, expected):
    env = dict(os.environ, DRFT_NUMBA=flag)
    out = subprocess.run(
        [sys.executable, "-c", "from drft import kernels; print(kernels.backend)"],
        env=env, capture_output=True, text=True, check=True,
    )
    assert out.stdout.strip() == expected
