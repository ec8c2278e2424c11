import os
import subprocess
import sys

import numpy as np
from hypothesis import given, settings, strategies as st

from jcast import _kernels as K
from oracles import random_log_probs


def as_tuple(x):
    return x if isinstance(x, tuple) else (x,)


def assert_same(a, b):
    for u, v in zip(as_tuple(a), as_tuple(b), strict=True):
        u, v = np.asarray(u), np.asarray(v)
        assert u.shape == v.shape
        np.testing.assert_array_equal(np.isneginf(u), np.isneginf(v))
        fin = np.isfinite(u)
        np.testing.assert_allclose(u[fin], v[fin], rtol=1e-12, atol=1e-12)


@settings(max_examples=60, deadline=None)
@given(seed=st.integers(0, 2 ** 31), T=st.integers(1, 12), V=st.integers(2, 6),
       L=st.integers(0, 5))
def test_alpha_beta_backends_agree(seed, T, V, L):
    rng = np.random.default_rng(seed)
    lp = random_log_probs(rng, T, V, 2.0)
    ext, skip = K.extend_with_blanks(rng.integers(1, V, size=L), 0)
    assert_same(K.ctc_alpha_beta_numba(lp, ext, skip), K.ctc_alpha_beta_numpy(lp, ext, skip))


@settings(max_examples=60, deadline=None)
@given(seed=st.integers(0, 2 ** 31), T=st.integers(1, 10), V=st.integers(3, 7),
       empty=st.booleans())
def test_prefix_extend_backends_agree(seed, T, V, empty):
    rng = np.random.default_rng(seed)
    x = random_log_probs(rng, T, V, 2.0)
    r_prev = np.full((T, 2), -np.inf)
    if empty:
        r_prev[:, 1] = np.cumsum(x[:, 0])
        last = -1
    else:
        r_prev[:] = np.log(rng.random((T, 2)))
        last = int(rng.integers(1, V))
    cands = np.arange(1, V)
    assert_same(K.ctc_prefix_extend_numba(x, r_prev, last, cands, 0, empty),
                K.ctc_prefix_extend_numpy(x, r_prev, last, cands, 0, empty))


@settings(max_examples=100, deadline=None)
@given(a=st.lists(st.integers(0, 4), max_size=15), b=st.lists(st.integers(0, 4), max_size=15))
def test_edit_distance_backends_agree(a, b):
    a, b = np.array(a, dtype=np.int64), np.array(b, dtype=np.int64)
    assert K.edit_distance_numba(a, b) == K.edit_distance_numpy(a, b)


def test_env_flag_selects_backend():
    code = "from jcast import _kernels as K; print(K.USE_NUMBA, K.edit_distance.__name__)"
    for flag, want in (("0", "False edit_distance_numpy"), ("1", "True edit_distance_numba")):
        env = {**os.environ, "JCAST_NUMBA": flag}
        out = subprocess.run([sys.executable, "-c", code], env=env, capture_output=True,
                             text=True, check=True).stdout.strip()
        assert out == want


def test_numpy_backend_runs_the_ctc_suite_subset():
    """The CTC tests pass on the fallback backend too."""
    env = {**os.environ, "JCAST_NUMBA": "0"}
    r = subprocess.run([sys.executable, "-m", "pytest", "-q", "-x", "-p", "no:cacheprovider",
                        os.path.join(os.path.dirname(__file__), "test_ctc.py")],
                       env=env, capture_output=True, text=True)
    assert r.returncode == 0, r.stdout[-2000:]
