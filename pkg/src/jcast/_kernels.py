"""Hot dynamic-programming kernels.

Each kernel has two implementations with identical contracts: a loop
version compiled with numba ``@njit`` and a vectorized pure-numpy version.
``JCAST_NUMBA=0`` in the environment (or numba missing) selects numpy.
Both are importable under explicit names for testing and benchmarks.
"""

from __future__ import annotations

import math
import os

import numpy as np

NEG_INF = -np.inf

try:
    from numba import njit

    _HAVE_NUMBA = True
except ImportError:  # pragma: no cover
    _HAVE_NUMBA = False

    def njit(*args, **kwargs):
        if args and callable(args[0]):
            return args[0]
        return lambda f: f


USE_NUMBA = _HAVE_NUMBA and os.environ.get("JCAST_NUMBA", "1").lower() not in ("0", "false", "no")
BACKEND = "numba" if USE_NUMBA else "numpy"


def extend_with_blanks(target: np.ndarray, blank: int = 0) -> tuple[np.ndarray, np.ndarray]:
    """Blank-interleaved label sequence and its skip-transition mask.

    ``skip[s]`` is true where the lattice may jump from ``s - 2`` to ``s``,
    i.e. ``s`` is a label differing from the label two positions back.
    """
    target = np.asarray(target, dtype=np.int64)
    S = 2 * len(target) + 1
    ext = np.full(S, blank, dtype=np.int64)
    ext[1::2] = target
    skip = np.zeros(S, dtype=np.bool_)
    if len(target) > 1:
        skip[3::2] = target[1:] != target[:-1]
    return ext, skip


# ---------------------------------------------------------------- CTC alpha/beta


@njit(cache=True)
def _lae(a, b):
    if a == -np.inf:
        return b
    if b == -np.inf:
        return a
    if a > b:
        return a + math.log1p(math.exp(b - a))
    return b + math.log1p(math.exp(a - b))


@njit(cache=True)
def ctc_alpha_beta_numba(log_probs, ext, skip):
    T = log_probs.shape[0]
    S = ext.shape[0]
    alpha = np.full((T, S), -np.inf)
    beta = np.full((T, S), -np.inf)
    alpha[0, 0] = log_probs[0, ext[0]]
    if S > 1:
        alpha[0, 1] = log_probs[0, ext[1]]
    for t in range(1, T):
        for s in range(S):
            a = alpha[t - 1, s]
            if s >= 1:
                a = _lae(a, alpha[t - 1, s - 1])
            if s >= 2 and skip[s]:
                a = _lae(a, alpha[t - 1, s - 2])
            if a != -np.inf:
                alpha[t, s] = a + log_probs[t, ext[s]]
    beta[T - 1, S - 1] = 0.0
    if S > 1:
        beta[T - 1, S - 2] = 0.0
    for t in range(T - 2, -1, -1):
        for s in range(S):
            b = beta[t + 1, s] + log_probs[t + 1, ext[s]]
            if s + 1 < S:
                b = _lae(b, beta[t + 1, s + 1] + log_probs[t + 1, ext[s + 1]])
            if s + 2 < S and skip[s + 2]:
                b = _lae(b, beta[t + 1, s + 2] + log_probs[t + 1, ext[s + 2]])
            beta[t, s] = b
    total = alpha[T - 1, S - 1]
    if S > 1:
        total = _lae(total, alpha[T - 1, S - 2])
    return total, alpha, beta


def ctc_alpha_beta_numpy(log_probs, ext, skip):
    T = log_probs.shape[0]
    S = ext.shape[0]
    alpha = np.full((T, S), NEG_INF)
    beta = np.full((T, S), NEG_INF)
    emit = log_probs[:, ext]
    alpha[0, 0] = emit[0, 0]
    if S > 1:
        alpha[0, 1] = emit[0, 1]
    pad1 = np.full(1, NEG_INF)
    pad2 = np.full(2, NEG_INF)
    for t in range(1, T):
        prev = alpha[t - 1]
        a = np.logaddexp(prev, np.concatenate([pad1, prev])[:S])
        a = np.logaddexp(a, np.where(skip, np.concatenate([pad2, prev])[:S], NEG_INF))
        alpha[t] = a + emit[t]
    beta[T - 1, S - 1] = 0.0
    if S > 1:
        beta[T - 1, S - 2] = 0.0
    skip_next = np.concatenate([skip[2:], [False, False]])[:S]
    for t in range(T - 2, -1, -1):
        nxt = beta[t + 1] + emit[t + 1]
        b = np.logaddexp(nxt, np.concatenate([nxt[1:], pad1]))
        b = np.logaddexp(b, np.where(skip_next, np.concatenate([nxt[2:], pad2])[:S], NEG_INF))
        beta[t] = b
    total = alpha[T - 1, S - 1]
    if S > 1:
        total = np.logaddexp(total, alpha[T - 1, S - 2])
    return float(total), alpha, beta


# ---------------------------------------------------------------- CTC prefix extension


@njit(cache=True)
def ctc_prefix_extend_numba(x, r_prev, last, cands, blank, empty):
    """Extend one prefix by each candidate label.

    ``r_prev[t, 0]`` / ``r_prev[t, 1]`` are the log-probabilities of the
    prefix ending at frame ``t`` in a non-blank / blank label.
    Returns the extended lattices (K, T, 2) and cumulative prefix scores (K,).
    """
    T = x.shape[0]
    K = cands.shape[0]
    r = np.full((K, T, 2), -np.inf)
    psi = np.full(K, -np.inf)
    for k in range(K):
        c = cands[k]
        if empty:
            r[k, 0, 0] = x[0, c]
        lp = r[k, 0, 0]
        for t in range(1, T):
            if c == last:
                phi = r_prev[t - 1, 1]
            else:
                phi = _lae(r_prev[t - 1, 0], r_prev[t - 1, 1])
            r[k, t, 0] = _lae(r[k, t - 1, 0], phi) + x[t, c]
            r[k, t, 1] = _lae(r[k, t - 1, 0], r[k, t - 1, 1]) + x[t, blank]
            lp = _lae(lp, phi + x[t, c])
        psi[k] = lp
    return r, psi


def ctc_prefix_extend_numpy(x, r_prev, last, cands, blank, empty):
    T = x.shape[0]
    K = cands.shape[0]
    r = np.full((K, T, 2), NEG_INF)
    xc = x[:, cands].T  # (K, T)
    if empty:
        r[:, 0, 0] = xc[:, 0]
    phi_all = np.logaddexp(r_prev[:, 0], r_prev[:, 1])
    is_last = (cands == last)[:, None]
    phi = np.where(is_last, r_prev[None, :, 1], phi_all[None, :])  # (K, T)
    for t in range(1, T):
        r[:, t, 0] = np.logaddexp(r[:, t - 1, 0], phi[:, t - 1]) + xc[:, t]
        r[:, t, 1] = np.logaddexp(r[:, t - 1, 0], r[:, t - 1, 1]) + x[t, blank]
    psi = r[:, 0, 0].copy()
    for t in range(1, T):
        psi = np.logaddexp(psi, phi[:, t - 1] + xc[:, t])
    return r, psi


# ---------------------------------------------------------------- edit distance


@njit(cache=True)
def edit_distance_numba(a, b):
    n = a.shape[0]
    m = b.shape[0]
    prev = np.arange(m + 1)
    cur = np.empty(m + 1, dtype=prev.dtype)
    for i in range(1, n + 1):
        cur[0] = i
        for j in range(1, m + 1):
            best = prev[j - 1] + (0 if a[i - 1] == b[j - 1] else 1)
            if prev[j] + 1 < best:
                best = prev[j] + 1
            if cur[j - 1] + 1 < best:
                best = cur[j - 1] + 1
            cur[j] = best
        prev, cur = cur, prev
    return prev[m]


def edit_distance_numpy(a, b):
    m = b.shape[0]
    ramp = np.arange(m + 1)
    prev = ramp.copy()
    for i in range(1, a.shape[0] + 1):
        c = np.minimum(prev[:-1] + (b != a[i - 1]), prev[1:] + 1)
        cc = np.concatenate(([i], c))
        prev = np.minimum.accumulate(cc - ramp) + ramp
    return prev[m]


if USE_NUMBA:
    ctc_alpha_beta = ctc_alpha_beta_numba
    ctc_prefix_extend = ctc_prefix_extend_numba
    edit_distance = edit_distance_numba
else:
    ctc_alpha_beta = ctc_alpha_beta_numpy
    ctc_prefix_extend = ctc_prefix_extend_numpy
    edit_distance = edit_distance_numpy
