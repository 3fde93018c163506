import os
import subprocess
import sys

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from ticl import _kernels

pairs = pytest.mark.skipif(_kernels.active is _kernels.numpy_impl and _kernels.numba_impl is None,
                           reason="numba unavailable")

shapes = st.tuples(st.integers(1, 7), st.integers(1, 9))
vals = st.floats(-8, 8, allow_nan=False, width=32)


def _both(name):
    return getattr(_kernels.numba_impl, name), getattr(_kernels.numpy_impl, name)


@pairs
@settings(max_examples=40, deadline=None)
@given(shapes.flatmap(lambda s: arrays(np.float32, s, elements=vals)))
def test_softmax_paths_agree(x):
    fast, ref = _both("softmax_fwd")
    y = fast(x)
    np.testing.assert_allclose(y, ref(x), rtol=1e-5, atol=1e-7)
    g = np.ones_like(x)
    bfast, bref = _both("softmax_bwd")
    np.testing.assert_allclose(bfast(g, y), bref(g, y), atol=1e-6)


@pairs
@settings(max_examples=40, deadline=None)
@given(shapes.flatmap(lambda s: arrays(np.float32, s, elements=vals)))
def test_gelu_paths_agree(x):
    fast, ref = _both("gelu_fwd")
    np.testing.assert_allclose(fast(x), ref(x), rtol=1e-5, atol=1e-6)
    bfast, bref = _both("gelu_bwd")
    g = np.full_like(x, 0.5)
    np.testing.assert_allclose(bfast(g, x), bref(g, x), rtol=1e-5, atol=1e-6)


@pairs
@settings(max_examples=40, deadline=None)
@given(shapes.flatmap(lambda s: arrays(np.float32, s, elements=vals)))
def test_layer_norm_paths_agree(x):
    d = x.shape[1]
    gamma = np.linspace(0.5, 1.5, d, dtype=np.float32)
    beta = np.linspace(-1, 1, d, dtype=np.float32)
    fast, ref = _both("layer_norm_fwd")
    y1, xh1, r1 = fast(x, gamma, beta, 1e-5)
    y2, xh2, r2 = ref(x, gamma, beta, 1e-5)
    np.testing.assert_allclose(y1, y2, rtol=1e-4, atol=1e-5)
    g = np.ones_like(x)
    bfast, bref = _both("layer_norm_bwd")
    for a, b in zip(bfast(g, xh1, r1, gamma), bref(g, xh2, r2, gamma)):
        np.testing.assert_allclose(a, b, rtol=1e-4, atol=1e-4)


def test_env_flag_selects_numpy():
    code = "from ticl import _kernels; print(_kernels.active is _kernels.numpy_impl)"
    env = dict(os.environ, TICL_DISABLE_NUMBA="1")
    out = subprocess.run([sys.executable, "-c", code], env=env, capture_output=True, text=True, check=True)
    assert out.stdout.strip() == "True"
