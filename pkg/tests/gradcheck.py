"""Central finite differences shared by the gradient tests."""

import numpy as np

from jcast import tensor as T

EPS = 1e-5


def numeric_grad(f, x: np.ndarray, indices=None, eps: float = EPS) -> np.ndarray:
    """d f / d x[i] for each flat index (all of them by default); ``f`` reads ``x`` in place."""
    flat = x.reshape(-1)
    indices = range(flat.size) if indices is None else indices
    out = []
    for i in indices:
        old = flat[i]
        flat[i] = old + eps
        hi = f()
        flat[i] = old - eps
        lo = f()
        flat[i] = old
        out.append((hi - lo) / (2 * eps))
    return np.array(out)


def rel_error(a: np.ndarray, b: np.ndarray) -> float:
    """Norm-wise relative error ||a - b|| / max(||a||, ||b||)."""
    a, b = np.ravel(a), np.ravel(b)
    denom = max(np.linalg.norm(a), np.linalg.norm(b))
    return 0.0 if denom == 0 else float(np.linalg.norm(a - b) / denom)


def check_op(fn, *arrays, seed=0, tol=1e-7):
    """Compare autodiff and finite-difference gradients of sum(w * fn(*inputs))."""
    rng = np.random.default_rng(seed)
    ts = [T.tensor(a.copy(), requires_grad=True) for a in arrays]
    out = fn(*ts)
    w = rng.normal(size=out.shape)
    T.backward(T.sum(T.mul(out, w)))

    for t in ts:
        def f():
            with T.no_grad():
                return float(np.sum(fn(*ts).data * w))
        num = numeric_grad(f, t.data)
        err = rel_error(t.grad, num)
        assert err < tol, f"relative error {err:.2e}"
