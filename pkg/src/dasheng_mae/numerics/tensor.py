"""Dense tensors with taped reverse-mode autodiff.

A :class:`Tensor` wraps a numpy array. Every differentiable op returns a new
tensor that remembers its parents and a closure mapping the output gradient to
parent gradients. :meth:`Tensor.backward` walks that graph in reverse
topological order.

Broadcasting is deliberately narrow: a binary op accepts either equal shapes
or a right operand whose shape is a suffix of the left one (leading-batch and
per-last-axis affine). Anything else is a :class:`ShapeError`.
"""

from __future__ import annotations

import contextlib

import numpy as np

from .. import kernels
from ..errors import ContractError, ShapeError

_DEFAULT_DTYPE = np.dtype(np.float32)
_GRAD_ENABLED = True


def get_default_dtype() -> np.dtype:
    return _DEFAULT_DTYPE


def set_default_dtype(dtype) -> None:
    global _DEFAULT_DTYPE
    dtype = np.dtype(dtype)
    if dtype not in (np.float32, np.float64):
        raise ValueError(f"unsupported dtype {dtype}")
    _DEFAULT_DTYPE = dtype


@contextlib.contextmanager
def default_dtype(dtype):
    """Temporarily switch the dtype of newly created tensors (e.g. float64 for gradient checks)."""
    prev = _DEFAULT_DTYPE
    set_default_dtype(dtype)
    try:
        yield
    finally:
        set_default_dtype(prev)


@contextlib.contextmanager
def no_grad():
    """Run ops without recording the autodiff tape (inference, validation)."""
    global _GRAD_ENABLED
    prev = _GRAD_ENABLED
    _GRAD_ENABLED = False
    try:
        yield
    finally:
        _GRAD_ENABLED = prev


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        if isinstance(data, Tensor):
            data = data.data
        dtype = np.dtype(dtype) if dtype is not None else None
        arr = np.asarray(data)
        if dtype is None:
            dtype = arr.dtype if arr.dtype in (np.float32, np.float64) else _DEFAULT_DTYPE
        self.data = np.ascontiguousarray(arr, dtype=dtype)
        self.requires_grad = bool(requires_grad)
        self.grad = None
        self._parents = ()
        self._backward = None

    # -- basic properties ------------------------------------------------

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def dtype(self) -> np.dtype:
        return self.data.dtype

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float(self.data)

    def detach(self) -> Tensor:
        return Tensor(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{flag})"

    # -- autodiff --------------------------------------------------------

    def backward(self) -> None:
        """Accumulate d(self)/d(leaf) into ``.grad`` of every leaf that requires grad."""
        if self.data.size != 1:
            raise ContractError(f"backward() needs a scalar loss, got shape {self.shape}")
        if not self.requires_grad:
            raise ContractError("loss does not depend on any tensor that requires grad")

        order = _topo_order(self)
        grads = {id(self): np.ones_like(self.data)}
        for node in order:
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node._backward is None:
                node.grad = g.copy() if node.grad is None else node.grad + g
                continue
            for parent, pg in zip(node._parents, node._backward(g)):
                if pg is None or not parent.requires_grad:
                    continue
                key = id(parent)
                if key in grads:
                    grads[key] = grads[key] + pg
                else:
                    grads[key] = pg

    # -- operator sugar --------------------------------------------------

    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return add(neg(self), other)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(self, other)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, key):
        return getitem(self, key)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes)

    def sum(self):
        return sum_all(self)

    def mean(self):
        return mean_all(self)


def _topo_order(root: Tensor) -> list:
    order, seen = [], set()
    stack = [(root, False)]
    while stack:
        node, done = stack.pop()
        if done:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))
    order.reverse()
    return order


def _as_tensor(x, like: Tensor | None = None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    dtype = like.dtype if like is not None else None
    return Tensor(np.asarray(x), dtype=dtype)


def _make(data: np.ndarray, parents: tuple, backward) -> Tensor:
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    needs = _GRAD_ENABLED and any(p.requires_grad for p in parents)
    out.requires_grad = needs
    out._parents = parents if needs else ()
    out._backward = backward if needs else None
    return out


def _check_suffix(a: Tensor, b: Tensor, op: str) -> None:
    if a.shape == b.shape or b.ndim == 0:
        return
    if b.ndim > a.ndim or a.shape[a.ndim - b.ndim :] != b.shape:
        raise ShapeError(f"{op}: shape {b.shape} does not broadcast onto {a.shape} (suffix rule)")


def _reduce_to(g: np.ndarray, shape: tuple) -> np.ndarray:
    if g.shape == shape:
        return g
    if len(shape) == 0:
        return np.asarray(g.sum(), dtype=g.dtype)
    lead = g.ndim - len(shape)
    return g.reshape((-1,) + shape).sum(axis=0) if lead > 0 else g


# ---------------------------------------------------------------------------
# elementwise
# ---------------------------------------------------------------------------


def add(a, b) -> Tensor:
    a = _as_tensor(a, b if isinstance(b, Tensor) else None)
    b = _as_tensor(b, a)
    if b.ndim > a.ndim:
        a, b = b, a
    _check_suffix(a, b, "add")
    sb = b.shape

    def backward(g):
        return g, _reduce_to(g, sb)

    return _make(a.data + b.data, (a, b), backward)


def neg(a: Tensor) -> Tensor:
    return _make(-a.data, (a,), lambda g: (-g,))


def sub(a, b) -> Tensor:
    return add(a, neg(_as_tensor(b, a if isinstance(a, Tensor) else None)))


def mul(a, b) -> Tensor:
    if not isinstance(b, Tensor) and np.ndim(b) == 0:
        return scale(a, float(b))
    if not isinstance(a, Tensor) and np.ndim(a) == 0:
        return scale(b, float(a))
    a, b = _as_tensor(a), _as_tensor(b)
    if b.ndim > a.ndim:
        a, b = b, a
    _check_suffix(a, b, "mul")
    sb = b.shape
    ad, bd = a.data, b.data

    def backward(g):
        return g * bd, _reduce_to(g * ad, sb)

    return _make(ad * bd, (a, b), backward)


def scale(a: Tensor, c: float) -> Tensor:
    c_arr = a.dtype.type(c)
    return _make(a.data * c_arr, (a,), lambda g: (g * c_arr,))


def square(a: Tensor) -> Tensor:
    ad = a.data
    return _make(ad * ad, (a,), lambda g: (2 * g * ad,))


def gelu(x: Tensor) -> Tensor:
    """Exact GeLU, ``x * Phi(x)`` with the Gaussian CDF via erf."""
    xd = x.data
    return _make(kernels.gelu_fwd(xd), (x,), lambda g: (kernels.gelu_bwd(xd, np.ascontiguousarray(g)),))


# ---------------------------------------------------------------------------
# linear algebra
# ---------------------------------------------------------------------------


def _swap(x: np.ndarray) -> np.ndarray:
    return np.swapaxes(x, -1, -2)


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product over the last two axes.

    ``b`` is either a 2-D matrix shared across ``a``'s leading axes, or has
    exactly ``a``'s leading axes.
    """
    a, b = _as_tensor(a), _as_tensor(b, a)
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeError(f"matmul needs rank >= 2 operands, got {a.shape} and {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul inner dimensions differ: {a.shape} @ {b.shape}")
    if b.ndim != 2 and b.shape[:-2] != a.shape[:-2]:
        raise ShapeError(f"matmul leading dimensions differ: {a.shape} @ {b.shape}")
    ad, bd = a.data, b.data

    def backward(g):
        ga = g @ _swap(bd)
        if bd.ndim == 2:
            gb = ad.reshape(-1, ad.shape[-1]).T @ g.reshape(-1, g.shape[-1])
        else:
            gb = _swap(ad) @ g
        return ga, gb

    return _make(ad @ bd, (a, b), backward)


def linear(x: Tensor, weight: Tensor, bias: Tensor | None = None) -> Tensor:
    y = matmul(x, weight)
    return y if bias is None else add(y, bias)


# ---------------------------------------------------------------------------
# normalisation / activations
# ---------------------------------------------------------------------------


def layernorm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-6) -> Tensor:
    """Normalise over the last axis (population variance), then scale and shift."""
    d = x.shape[-1]
    if gamma.shape != (d,) or beta.shape != (d,):
        raise ShapeError(f"layernorm params must have shape ({d},), got {gamma.shape} and {beta.shape}")
    x2 = np.ascontiguousarray(x.data.reshape(-1, d))
    y, xhat, rstd = kernels.layernorm_fwd(x2, gamma.data, beta.data, x.dtype.type(eps))
    gd = gamma.data

    def backward(g):
        dx, dgamma, dbeta = kernels.layernorm_bwd(np.ascontiguousarray(g.reshape(-1, d)), xhat, rstd, gd)
        return dx.reshape(x.shape), dgamma, dbeta

    return _make(y.reshape(x.shape), (x, gamma, beta), backward)


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    """Max-subtracted softmax along ``axis`` (only the last axis is supported)."""
    if axis not in (-1, x.ndim - 1):
        raise ShapeError("softmax is implemented over the last axis only")
    d = x.shape[-1]
    y = kernels.softmax_fwd(np.ascontiguousarray(x.data.reshape(-1, d)))

    def backward(g):
        return (kernels.softmax_bwd(y, np.ascontiguousarray(g.reshape(-1, d))).reshape(x.shape),)

    return _make(y.reshape(x.shape), (x,), backward)


def cross_entropy(logits: Tensor, labels: np.ndarray) -> Tensor:
    """Mean softmax cross-entropy of ``logits`` (M x C) against integer ``labels``."""
    if logits.ndim != 2:
        raise ShapeError(f"cross_entropy expects 2-D logits, got {logits.shape}")
    labels = np.asarray(labels, dtype=np.int64)
    m = logits.shape[0]
    z = logits.data - logits.data.max(axis=1, keepdims=True)
    logz = np.log(np.exp(z).sum(axis=1, keepdims=True))
    logp = z - logz
    loss = -logp[np.arange(m), labels].mean()

    def backward(g):
        p = np.exp(logp)
        p[np.arange(m), labels] -= 1.0
        return (p * (g / m),)

    return _make(np.asarray(loss, dtype=logits.dtype), (logits,), backward)


# ---------------------------------------------------------------------------
# reductions
# ---------------------------------------------------------------------------


def sum_all(x: Tensor) -> Tensor:
    shape = x.shape
    return _make(np.asarray(x.data.sum(), dtype=x.dtype), (x,), lambda g: (np.broadcast_to(g, shape).copy(),))


def mean_all(x: Tensor) -> Tensor:
    shape, n = x.shape, x.size
    return _make(
        np.asarray(x.data.mean(), dtype=x.dtype),
        (x,),
        lambda g: (np.full(shape, g / n, dtype=g.dtype),),
    )


# ---------------------------------------------------------------------------
# shape plumbing
# ---------------------------------------------------------------------------


def reshape(x: Tensor, shape: tuple) -> Tensor:
    src = x.shape
    return _make(x.data.reshape(shape), (x,), lambda g: (g.reshape(src),))


def transpose(x: Tensor, axes: tuple) -> Tensor:
    inv = tuple(np.argsort(axes))
    return _make(np.ascontiguousarray(x.data.transpose(axes)), (x,), lambda g: (np.ascontiguousarray(g.transpose(inv)),))


def _is_basic_index(key) -> bool:
    parts = key if isinstance(key, tuple) else (key,)
    return all(isinstance(k, (int, np.integer, slice)) or k is Ellipsis or k is None for k in parts)


def getitem(x: Tensor, key) -> Tensor:
    shape, dtype = x.shape, x.dtype
    basic = _is_basic_index(key)

    def backward(g):
        out = np.zeros(shape, dtype=dtype)
        if basic:
            out[key] += g
        else:
            np.add.at(out, key, g)
        return (out,)

    return _make(np.ascontiguousarray(x.data[key]), (x,), backward)


def gather_rows(x: Tensor, index: np.ndarray) -> Tensor:
    """Select rows along axis -2: ``out[b, i] = x[b, index[b, i]]``.

    ``x`` is (B, N, D) with ``index`` (B, n), or (N, D) with ``index`` (n,).
    """
    index = np.asarray(index, dtype=np.int64)
    squeeze = x.ndim == 2
    xd = x.data[None] if squeeze else x.data
    idx = index[None] if squeeze else index
    if idx.ndim != 2 or idx.shape[0] != xd.shape[0]:
        raise ShapeError(f"gather_rows: index shape {index.shape} does not match tensor {x.shape}")
    out = np.take_along_axis(xd, idx[:, :, None], axis=1)

    def backward(g):
        g3 = g[None] if squeeze else g
        full = np.zeros_like(xd)
        for b in range(idx.shape[0]):
            np.add.at(full[b], idx[b], g3[b])
        return (full[0] if squeeze else full,)

    return _make(out[0] if squeeze else out, (x,), backward)


def scatter_rows(rows: Tensor, index: np.ndarray, fill: Tensor, length: int) -> Tensor:
    """Inverse of :func:`gather_rows` with a learnable filler.

    Builds a (B, length, D) tensor whose row ``index[b, i]`` is ``rows[b, i]``
    and whose every other row is ``fill`` (a single D-vector). Indices must be
    unique per batch element.
    """
    index = np.asarray(index, dtype=np.int64)
    if rows.ndim != 3 or index.shape != rows.shape[:2]:
        raise ShapeError(f"scatter_rows: rows {rows.shape} vs index {index.shape}")
    b, _, d = rows.shape
    if fill.shape != (d,):
        raise ShapeError(f"scatter_rows: fill must have shape ({d},), got {fill.shape}")
    out = np.empty((b, length, d), dtype=rows.dtype)
    out[...] = fill.data
    np.put_along_axis(out, index[:, :, None], rows.data, axis=1)
    kept = np.zeros((b, length), dtype=bool)
    np.put_along_axis(kept, index, True, axis=1)

    def backward(g):
        g_rows = np.take_along_axis(g, index[:, :, None], axis=1)
        return g_rows, g[~kept].sum(axis=0)

    return _make(out, (rows, fill), backward)
