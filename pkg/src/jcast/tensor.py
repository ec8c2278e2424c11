"""Dense tensors with reverse-mode automatic differentiation.

Every op takes :class:`Tensor` (or python scalar) operands, computes its
result with numpy and, when gradient recording is on and some input
requires grad, attaches a closure mapping the output gradient to input
gradients. :func:`backward` walks the recorded graph in reverse
topological order.

Broadcasting is deliberately narrow: two operands must have equal shapes,
or the shape of one must be a trailing suffix of the other (a bias of
shape ``(D,)`` against ``(B, T, D)``). Anything else needs :func:`expand`.
"""

from __future__ import annotations

import contextlib
from typing import Callable, Iterable, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import ContractError, NumericError, ShapeError

DEFAULT_DTYPE = np.float64
CHECK_NUMERICS = True

_grad_enabled = True


@contextlib.contextmanager
def no_grad():
    """Disable graph recording inside the block."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


def is_grad_enabled() -> bool:
    return _grad_enabled


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "name")
    __array_priority__ = 100

    def __init__(self, data, requires_grad: bool = False, dtype=None, name: str | None = None):
        if dtype is None:
            if isinstance(data, np.ndarray) and data.dtype in (np.float32, np.float64):
                dtype = data.dtype
            else:
                dtype = DEFAULT_DTYPE
        self.data = np.asarray(data, dtype=dtype)
        self.grad: np.ndarray | None = None
        self.requires_grad = bool(requires_grad)
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable | None = None
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data, dtype=self.data.dtype)

    def zero_grad(self) -> None:
        self.grad = np.zeros_like(self.data)

    def backward(self) -> None:
        backward(self)

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{flag})"

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        if isinstance(other, Tensor):
            raise ShapeError("tensor/tensor division is not supported; multiply by a reciprocal")
        return mul(self, 1.0 / other)

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, idx):
        return getitem(self, idx)


def tensor(data, requires_grad: bool = False, dtype=None, name: str | None = None) -> Tensor:
    t = Tensor(data, requires_grad=requires_grad, dtype=dtype, name=name)
    if CHECK_NUMERICS and np.isnan(t.data).any():
        raise NumericError("NaN in tensor input")
    return t


def _as_tensor(x, like: Tensor | None = None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    dtype = like.dtype if like is not None else DEFAULT_DTYPE
    return Tensor(np.asarray(x, dtype=dtype))


def _make(data: np.ndarray, parents: Sequence[Tensor], backward_fn: Callable, op: str) -> Tensor:
    if CHECK_NUMERICS and np.isnan(data).any():
        raise NumericError(f"{op}: NaN in output")
    out = Tensor(data, dtype=data.dtype)
    if _grad_enabled and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward_fn
    return out


def _check_suffix(a: tuple, b: tuple, op: str) -> None:
    if a == b:
        return
    short, long_ = (a, b) if len(a) <= len(b) else (b, a)
    if long_[len(long_) - len(short):] != short:
        raise ShapeError(f"{op}: incompatible shapes {a} and {b}")


def _sum_to_shape(g: np.ndarray, shape: tuple) -> np.ndarray:
    if g.shape == shape:
        return g
    lead = g.ndim - len(shape)
    if lead:
        g = g.sum(axis=tuple(range(lead)))
    axes = tuple(i for i, (gs, s) in enumerate(zip(g.shape, shape)) if s == 1 and gs != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


# ---------------------------------------------------------------- backward


def _topo_order(root: Tensor) -> list[Tensor]:
    order: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))
    return order


def backward(loss: Tensor, leaves: Iterable[Tensor] | None = None) -> None:
    """Accumulate d(loss)/d(leaf) into ``leaf.grad`` for every reachable leaf.

    Gradients accumulate across calls; reset with ``Tensor.zero_grad``.
    Leaves passed in ``leaves`` that are not on the graph get a zero grad.
    """
    if loss.data.ndim != 0:
        raise ContractError(f"backward needs a scalar loss, got shape {loss.shape}")
    if leaves is not None:
        for leaf in leaves:
            if leaf.grad is None:
                leaf.grad = np.zeros_like(leaf.data)
    if not loss.requires_grad:
        raise ContractError("loss is not connected to any tensor that requires grad")
    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    for node in reversed(_topo_order(loss)):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node._backward is None:
            if node.grad is None:
                node.grad = np.array(g, dtype=node.dtype, copy=True)
            else:
                node.grad = node.grad + g
            continue
        for p, pg in zip(node._parents, node._backward(g)):
            if pg is None or not p.requires_grad:
                continue
            k = id(p)
            grads[k] = grads[k] + pg if k in grads else pg


# ---------------------------------------------------------------- elementwise


def add(a, b) -> Tensor:
    a = _as_tensor(a, b if isinstance(b, Tensor) else None)
    b = _as_tensor(b, a)
    _check_suffix(a.shape, b.shape, "add")
    sa, sb = a.shape, b.shape

    def bw(g):
        return _sum_to_shape(g, sa), _sum_to_shape(g, sb)

    return _make(a.data + b.data, (a, b), bw, "add")


def sub(a, b) -> Tensor:
    a = _as_tensor(a, b if isinstance(b, Tensor) else None)
    b = _as_tensor(b, a)
    _check_suffix(a.shape, b.shape, "sub")
    sa, sb = a.shape, b.shape

    def bw(g):
        return _sum_to_shape(g, sa), -_sum_to_shape(g, sb)

    return _make(a.data - b.data, (a, b), bw, "sub")


def mul(a, b) -> Tensor:
    a = _as_tensor(a, b if isinstance(b, Tensor) else None)
    b = _as_tensor(b, a)
    _check_suffix(a.shape, b.shape, "mul")
    ad, bd = a.data, b.data

    def bw(g):
        return _sum_to_shape(g * bd, ad.shape), _sum_to_shape(g * ad, bd.shape)

    return _make(ad * bd, (a, b), bw, "mul")


def exp(x: Tensor) -> Tensor:
    out = np.exp(x.data)
    return _make(out, (x,), lambda g: (g * out,), "exp")


def log(x: Tensor) -> Tensor:
    xd = x.data
    with np.errstate(divide="ignore", invalid="ignore"):
        out = np.log(xd)
    return _make(out, (x,), lambda g: (g / xd,), "log")


def relu(x: Tensor) -> Tensor:
    pos = x.data > 0
    return _make(np.where(pos, x.data, 0.0).astype(x.dtype), (x,), lambda g: (g * pos,), "relu")


def masked_fill(x: Tensor, mask: np.ndarray, value: float) -> Tensor:
    """Replace entries where ``mask`` is true by ``value``; the mask may broadcast."""
    mask = np.broadcast_to(np.asarray(mask, dtype=bool), x.shape)
    out = np.where(mask, np.asarray(value, dtype=x.dtype), x.data)
    return _make(out, (x,), lambda g: (np.where(mask, 0.0, g),), "masked_fill")


def where(cond: np.ndarray, a, b) -> Tensor:
    """Select from ``a`` where ``cond`` holds, else from ``b`` (equal shapes)."""
    a = _as_tensor(a, b if isinstance(b, Tensor) else None)
    b = _as_tensor(b, a)
    _check_suffix(a.shape, b.shape, "where")
    shape = a.shape if len(a.shape) >= len(b.shape) else b.shape
    cond = np.broadcast_to(np.asarray(cond, dtype=bool), shape)
    sa, sb = a.shape, b.shape

    def bw(g):
        return _sum_to_shape(np.where(cond, g, 0.0), sa), _sum_to_shape(np.where(cond, 0.0, g), sb)

    return _make(np.where(cond, a.data, b.data), (a, b), bw, "where")


def dropout(x: Tensor, p: float, seed) -> Tensor:
    """Inverted dropout with a mask drawn from a Philox stream keyed by ``seed``.

    ``seed`` is an int or a tuple of ints; equal seeds give equal masks.
    """
    if p <= 0.0:
        return x
    if p >= 1.0:
        raise ContractError(f"dropout probability must be < 1, got {p}")
    rng = np.random.Generator(np.random.Philox(np.random.SeedSequence(seed)))
    keep = (rng.random(x.shape) >= p) * (1.0 / (1.0 - p))
    keep = keep.astype(x.dtype)
    return _make(x.data * keep, (x,), lambda g: (g * keep,), "dropout")


# ---------------------------------------------------------------- shape ops


def reshape(x: Tensor, shape: Sequence[int]) -> Tensor:
    src = x.shape
    return _make(x.data.reshape(shape), (x,), lambda g: (g.reshape(src),), "reshape")


def transpose(x: Tensor, axes: Sequence[int]) -> Tensor:
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))
    return _make(x.data.transpose(axes), (x,), lambda g: (g.transpose(inv),), "transpose")


def swapaxes(x: Tensor, a: int = -1, b: int = -2) -> Tensor:
    return _make(np.swapaxes(x.data, a, b), (x,), lambda g: (np.swapaxes(g, a, b),), "swapaxes")


def expand(x: Tensor, shape: Sequence[int]) -> Tensor:
    """Explicit numpy-style broadcast of ``x`` to ``shape``."""
    shape = tuple(shape)
    try:
        out = np.broadcast_to(x.data, shape)
    except ValueError:
        raise ShapeError(f"expand: cannot broadcast {x.shape} to {shape}") from None
    src = x.shape
    return _make(np.ascontiguousarray(out), (x,), lambda g: (_sum_to_shape(g, src),), "expand")


def _is_basic_index(idx) -> bool:
    parts = idx if isinstance(idx, tuple) else (idx,)
    return all(isinstance(p, (int, np.integer, slice)) or p is None or p is Ellipsis for p in parts)


def getitem(x: Tensor, idx) -> Tensor:
    out = x.data[idx]
    src, dtype = x.shape, x.dtype
    basic = _is_basic_index(idx)

    def bw(g):
        full = np.zeros(src, dtype=dtype)
        if basic:
            full[idx] = g
        else:
            np.add.at(full, idx, g)
        return (full,)

    return _make(np.array(out, copy=True), (x,), bw, "getitem")


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = [_as_tensor(t) for t in tensors]
    ref = tensors[0].shape
    ax = axis % len(ref)
    for t in tensors[1:]:
        if len(t.shape) != len(ref) or any(s != r for i, (s, r) in enumerate(zip(t.shape, ref)) if i != ax):
            raise ShapeError(f"concat: incompatible shapes {ref} and {t.shape}")
    sizes = np.cumsum([t.shape[ax] for t in tensors])[:-1]

    def bw(g):
        return tuple(np.split(g, sizes, axis=ax))

    return _make(np.concatenate([t.data for t in tensors], axis=ax), tensors, bw, "concat")


def stack(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = [_as_tensor(t) for t in tensors]
    ref = tensors[0].shape
    for t in tensors[1:]:
        if t.shape != ref:
            raise ShapeError(f"stack: incompatible shapes {ref} and {t.shape}")
    ax = axis % (len(ref) + 1)

    def bw(g):
        return tuple(np.take(g, i, axis=ax) for i in range(len(tensors)))

    return _make(np.stack([t.data for t in tensors], axis=ax), tensors, bw, "stack")


# ---------------------------------------------------------------- reductions


def sum(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:  # noqa: A001
    src = x.shape

    def bw(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, src).copy(),)

    return _make(np.asarray(x.data.sum(axis=axis, keepdims=keepdims)), (x,), bw, "sum")


def mean(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    n = x.data.size if axis is None else np.prod([x.shape[a] for a in np.atleast_1d(axis)])
    return mul(sum(x, axis=axis, keepdims=keepdims), 1.0 / float(n))


def log_sum_exp(x: Tensor, axis: int = -1, keepdims: bool = False) -> Tensor:
    """Stable ``log(sum(exp(x)))``; rows that are entirely -inf give -inf."""
    xd = x.data
    m = np.max(xd, axis=axis, keepdims=True)
    m = np.where(np.isfinite(m), m, 0.0)
    with np.errstate(divide="ignore"):
        out_k = np.log(np.sum(np.exp(xd - m), axis=axis, keepdims=True)) + m
    out = out_k if keepdims else np.squeeze(out_k, axis=axis)

    def bw(g):
        finite = np.isfinite(out_k)
        with np.errstate(invalid="ignore"):
            w = np.exp(xd - np.where(finite, out_k, 0.0))
        w = np.where(finite, w, 0.0)
        gk = g if keepdims else np.expand_dims(g, axis)
        return (gk * w,)

    return _make(out, (x,), bw, "log_sum_exp")


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    xd = x.data
    if not -xd.ndim <= axis < xd.ndim:
        raise ShapeError(f"softmax: axis {axis} invalid for shape {xd.shape}")
    e = np.exp(xd - np.max(xd, axis=axis, keepdims=True))
    s = e / np.sum(e, axis=axis, keepdims=True)

    def bw(g):
        return (s * (g - np.sum(g * s, axis=axis, keepdims=True)),)

    return _make(s, (x,), bw, "softmax")


def log_softmax(x: Tensor, axis: int = -1) -> Tensor:
    xd = x.data
    if not -xd.ndim <= axis < xd.ndim:
        raise ShapeError(f"log_softmax: axis {axis} invalid for shape {xd.shape}")
    m = np.max(xd, axis=axis, keepdims=True)
    shifted = xd - m
    out = shifted - np.log(np.sum(np.exp(shifted), axis=axis, keepdims=True))

    def bw(g):
        return (g - np.exp(out) * np.sum(g, axis=axis, keepdims=True),)

    return _make(out, (x,), bw, "log_softmax")


# ---------------------------------------------------------------- linear algebra


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeError(f"matmul: operands need rank >= 2, got {a.shape} and {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul: incompatible shapes {a.shape} and {b.shape}")
    _check_suffix(a.shape[:-2], b.shape[:-2], "matmul")
    ad, bd = a.data, b.data

    def bw(g):
        ga = _sum_to_shape(g @ np.swapaxes(bd, -1, -2), ad.shape)
        gb = _sum_to_shape(np.swapaxes(ad, -1, -2) @ g, bd.shape)
        return ga, gb

    return _make(ad @ bd, (a, b), bw, "matmul")


def linear(x: Tensor, w: Tensor, b: Tensor | None = None) -> Tensor:
    y = matmul(x, w)
    return y if b is None else add(y, b)


def layer_norm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalize over the last axis, then scale and shift."""
    xd = x.data
    mu = xd.mean(axis=-1, keepdims=True)
    xc = xd - mu
    rstd = 1.0 / np.sqrt((xc * xc).mean(axis=-1, keepdims=True) + eps)
    xhat = xc * rstd
    gd = gamma.data

    def bw(g):
        dxhat = g * gd
        dx = rstd * (dxhat - dxhat.mean(axis=-1, keepdims=True)
                     - xhat * (dxhat * xhat).mean(axis=-1, keepdims=True))
        return dx, _sum_to_shape(g * xhat, gd.shape), _sum_to_shape(g, beta.shape)

    return _make(xhat * gd + beta.data, (x, gamma, beta), bw, "layer_norm")


def embedding_lookup(weight: Tensor, ids: np.ndarray) -> Tensor:
    ids = np.asarray(ids, dtype=np.int64)
    if ids.size and (ids.min() < 0 or ids.max() >= weight.shape[0]):
        raise ShapeError(f"embedding_lookup: ids out of range for table {weight.shape}")
    wshape, dtype = weight.shape, weight.dtype

    def bw(g):
        full = np.zeros(wshape, dtype=dtype)
        np.add.at(full, ids, g)
        return (full,)

    return _make(weight.data[ids], (weight,), bw, "embedding_lookup")


def take_last(x: Tensor, idx: np.ndarray) -> Tensor:
    """Gather along the last axis: ``out[..., j] = x[..., idx[..., j]]``.

    ``idx`` may omit middle axes of ``x`` as long as it broadcasts to them.
    """
    idx = np.asarray(idx, dtype=np.int64)
    full_idx = np.broadcast_to(idx, x.shape[:-1] + idx.shape[-1:])
    out = np.take_along_axis(x.data, full_idx, axis=-1)
    src, dtype = x.shape, x.dtype

    def bw(g):
        flat = np.zeros((int(np.prod(src[:-1])), src[-1]), dtype=dtype)
        rows = np.arange(flat.shape[0])[:, None]
        np.add.at(flat, (rows, full_idx.reshape(flat.shape[0], -1)), g.reshape(flat.shape[0], -1))
        return (flat.reshape(src),)

    return _make(out, (x,), bw, "take_last")


def cross_entropy_with_label_smoothing(log_probs: Tensor, targets: np.ndarray,
                                       smoothing: float = 0.1) -> Tensor:
    """Per-position cross entropy against a smoothed one-hot target.

    The target token keeps ``1 - smoothing`` of the mass and the remaining
    ``smoothing`` is spread evenly over the other ``V - 1`` tokens.
    """
    targets = np.asarray(targets, dtype=np.int64)
    if log_probs.shape[:-1] != targets.shape:
        raise ShapeError(f"cross_entropy: shapes {log_probs.shape} and {targets.shape} disagree")
    V = log_probs.shape[-1]
    lp = log_probs.data
    off = smoothing / (V - 1) if V > 1 else 0.0
    on = 1.0 - smoothing
    at_target = np.take_along_axis(lp, targets[..., None], axis=-1)[..., 0]
    if off:
        loss = -on * at_target - off * (lp.sum(axis=-1) - at_target)
    else:
        loss = -on * at_target

    def bw(g):
        coef = np.full(lp.shape, -off, dtype=lp.dtype)
        np.put_along_axis(coef, targets[..., None], -on, axis=-1)
        return (coef * g[..., None],)

    return _make(loss, (log_probs,), bw, "cross_entropy")


def conv2d(x: Tensor, w: Tensor, b: Tensor, stride: tuple[int, int] = (2, 2),
           pad_f: int = 1) -> Tensor:
    """2-D convolution over (time, feature) with no time padding.

    ``x`` is (B, Cin, T, F), ``w`` is (Cout, Cin, kh, kw); the feature axis
    is zero-padded by ``pad_f`` on both sides.
    """
    B, cin, T, F = x.shape
    cout, cin_w, kh, kw = w.shape
    if cin != cin_w:
        raise ShapeError(f"conv2d: input channels {x.shape} vs weight {w.shape}")
    st, sf = stride
    if T < kh:
        raise ShapeError(f"conv2d: time length {T} shorter than kernel {kh}")
    xp = np.pad(x.data, ((0, 0), (0, 0), (0, 0), (pad_f, pad_f))) if pad_f else x.data
    win = sliding_window_view(xp, (kh, kw), axis=(2, 3))[:, :, ::st, ::sf]
    To, Fo = win.shape[2], win.shape[3]
    K = cin * kh * kw
    cols = np.ascontiguousarray(win.transpose(0, 2, 3, 1, 4, 5)).reshape(B, To, Fo, K)
    wmat = w.data.reshape(cout, K)
    out = (cols @ wmat.T + b.data).transpose(0, 3, 1, 2)
    xp_shape, dtype = xp.shape, x.dtype

    def bw(g):
        g2 = np.ascontiguousarray(g.transpose(0, 2, 3, 1))
        gw = (g2.reshape(-1, cout).T @ cols.reshape(-1, K)).reshape(w.shape)
        gb = g2.sum(axis=(0, 1, 2))
        dcols = (g2 @ wmat).reshape(B, To, Fo, cin, kh, kw)
        dxp = np.zeros(xp_shape, dtype=dtype)
        for i in range(kh):
            for j in range(kw):
                dxp[:, :, i:i + st * (To - 1) + 1:st, j:j + sf * (Fo - 1) + 1:sf] += \
                    dcols[..., i, j].transpose(0, 3, 1, 2)
        gx = dxp[..., pad_f:pad_f + F] if pad_f else dxp
        return gx, gw, gb

    return _make(np.ascontiguousarray(out), (x, w, b), bw, "conv2d")
