import os
import subprocess
import sys

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from vmoge import _kernels_py as P
from vmoge import kernels

C = pytest.importorskip("vmoge._ckernels")


def close(a, b):
    return np.allclose(a, b, rtol=1e-12, atol=1e-12)


@settings(max_examples=60)
@given(M=st.integers(1, 5), T=st.integers(8, 60), k=st.integers(1, 8), D=st.integers(1, 6),
       stride=st.integers(1, 5), seed=st.integers(0, 10**6))
def test_conv1d_matches(M, T, k, D, stride, seed):
    rng = np.random.default_rng(seed)
    x, w, b = rng.normal(size=(M, T)), rng.normal(size=(D, k)), rng.normal(size=D)
    out = P.conv1d_forward(x, w, b, stride)
    assert close(out, C.conv1d_forward(x, w, b, stride))
    g = rng.normal(size=out.shape)
    for need_x in (True, False):
        for a, c in zip(P.conv1d_backward(g, x, w, stride, need_x), C.conv1d_backward(g, x, w, stride, need_x)):
            assert (a is None and c is None) or close(a, c)


@settings(max_examples=60)
@given(M=st.integers(1, 4), L=st.integers(2, 15), D=st.integers(1, 5), seed=st.integers(0, 10**6))
def test_maxpool_matches(M, L, D, seed):
    rng = np.random.default_rng(seed)
    x = rng.normal(size=(M, L, D))
    (a, ia), (c, ic) = P.maxpool2_forward(x), C.maxpool2_forward(x)
    assert np.array_equal(a, c) and np.array_equal(ia, ic)
    g = rng.normal(size=a.shape)
    assert np.array_equal(P.maxpool2_backward(g, ia, L), C.maxpool2_backward(g, ic, L))


def test_maxpool_ties_pick_first():
    x = np.ones((1, 4, 2))
    _, idx = C.maxpool2_forward(x)
    assert np.all(idx == 0)


@settings(max_examples=60)
@given(shape=st.sampled_from([(3, 5), (2, 3, 8), (2, 2, 2, 4)]), seed=st.integers(0, 10**6))
def test_layernorm_matches(shape, seed):
    rng = np.random.default_rng(seed)
    x = rng.normal(size=shape)
    gain, bias = rng.normal(size=shape[-1]), rng.normal(size=shape[-1])
    fp, fc = P.layernorm_forward(x, gain, bias, 1e-5), C.layernorm_forward(x, gain, bias, 1e-5)
    for a, c in zip(fp, fc):
        assert a.shape == c.shape and close(a, c)
    g = rng.normal(size=shape)
    for a, c in zip(P.layernorm_backward(g, fp[1], fp[2], gain), C.layernorm_backward(g, fc[1], fc[2], gain)):
        assert close(a, c)


@settings(max_examples=60)
@given(M=st.integers(1, 4), L=st.integers(1, 9), heads=st.sampled_from([1, 2, 4]),
       dh=st.integers(1, 4), seed=st.integers(0, 10**6))
def test_attention_matches(M, L, heads, dh, seed):
    rng = np.random.default_rng(seed)
    D = heads * dh
    q, k, v = (rng.normal(size=(M, L, D)) for _ in range(3))
    (a, pa), (c, pc) = P.mha_forward(q, k, v, heads), C.mha_forward(q, k, v, heads)
    assert close(a, c) and close(pa, pc)
    g = rng.normal(size=a.shape)
    for x, y in zip(P.mha_backward(g, q, k, v, pa, heads), C.mha_backward(g, q, k, v, pc, heads)):
        assert close(x, y)


def _backend(env):
    code = "from vmoge import kernels; print(kernels.BACKEND)"
    out = subprocess.run([sys.executable, "-c", code], capture_output=True, text=True,
                         env={**os.environ, "VMOGE_KERNELS": env})
    return out.stdout.strip()


def test_backend_selection():
    assert kernels.BACKEND in ("cython", "python")
    assert _backend("python") == "python"
    assert _backend("c") == "cython"
