import os
import subprocess
import sys

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from diffqc import _kernels as K
from diffqc import autodiff as ad

needs_numba = pytest.mark.skipif(K.nb is None, reason="numba not installed")


def antisym(rng, b, n, scale=1.0):
    a = rng.normal(size=(b, n, n)) * scale
    return a - np.transpose(a, (0, 2, 1))


def heun_tape(M, x, n_sub, dt):
    """The same interval built from primitive tape ops, one Heun step at a time."""
    cur = x
    for _ in range(n_sub):
        k1 = ad.stack([ad.matvec(ad.take(M, r), ad.take(cur, r)) for r in range(M.shape[0])])
        y = ad.add(cur, ad.scale(k1, dt))
        k2 = ad.stack([ad.matvec(ad.take(M, r), ad.take(y, r)) for r in range(M.shape[0])])
        cur = ad.add(cur, ad.scale(ad.add(k1, k2), 0.5 * dt))
    return cur


@needs_numba
@given(st.integers(0, 2**31 - 1), st.integers(1, 5), st.sampled_from([2, 4, 8, 16]), st.integers(1, 12))
def test_numba_forward_matches_numpy(seed, b, n, n_sub):
    rng = np.random.default_rng(seed)
    M = antisym(rng, b, n)
    x = rng.normal(size=(b, n))
    a = K.heun_interval_numpy(M, x, n_sub, 0.01)
    c = K.heun_interval_numba(M, x, n_sub, 0.01)
    assert np.allclose(a, c, rtol=1e-12, atol=1e-13)


@needs_numba
@given(st.integers(0, 2**31 - 1), st.integers(1, 5), st.sampled_from([2, 4, 8]), st.integers(1, 12))
def test_numba_vjp_matches_numpy(seed, b, n, n_sub):
    rng = np.random.default_rng(seed)
    M = antisym(rng, b, n)
    x, g = rng.normal(size=(b, n)), rng.normal(size=(b, n))
    gx_a, gM_a = K.heun_interval_vjp_numpy(M, x, g, n_sub, 0.01)
    gx_c, gM_c = K.heun_interval_vjp_numba(M, x, g, n_sub, 0.01)
    assert np.allclose(gx_a, gx_c, rtol=1e-12, atol=1e-13)
    assert np.allclose(gM_a, gM_c, rtol=1e-12, atol=1e-13)


@pytest.mark.parametrize("impl", ["numpy", "numba"])
def test_kernel_vjp_matches_stepwise_tape(impl):
    if impl == "numba" and K.nb is None:
        pytest.skip("numba not installed")
    fwd = getattr(K, f"heun_interval_{impl}")
    vjp = getattr(K, f"heun_interval_vjp_{impl}")
    rng = np.random.default_rng(7)
    b, n, n_sub, dt = 3, 4, 6, 0.05
    M = antisym(rng, b, n)
    x = rng.normal(size=(b, n))
    w = rng.normal(size=(b, n))
    Mt, xt = ad.leaf(M, "M"), ad.leaf(x, "x")
    out = heun_tape(Mt, xt, n_sub, dt)
    assert np.allclose(ad.value(out), fwd(M, x, n_sub, dt), atol=1e-14)
    ref = ad.backward(ad.sum(ad.mul(out, w)), {"M": Mt, "x": xt})
    gx, gM = vjp(M, x, w, n_sub, dt)
    assert np.allclose(gx, ref["x"], rtol=1e-12, atol=1e-13)
    assert np.allclose(gM, ref["M"], rtol=1e-12, atol=1e-13)


def test_env_flag_selects_numpy_backend():
    env = dict(os.environ, DIFFQC_DISABLE_NUMBA="1")
    out = subprocess.run(
        [sys.executable, "-c", "from diffqc import backend; print(backend())"], env=env, capture_output=True, text=True, check=True
    )
    assert out.stdout.strip() == "numpy"


@needs_numba
def test_default_backend_is_numba():
    if os.environ.get("DIFFQC_DISABLE_NUMBA", "") not in ("", "0"):
        pytest.skip("numba disabled by environment")
    assert K.backend() == "numba"
