"""Reverse-mode automatic differentiation over float64 numpy arrays.

Each operation returns a :class:`Tensor` that remembers its parents and a
closure mapping the output gradient to parent gradients. :meth:`Tensor.backward`
walks the recorded graph once in reverse topological order and then releases
it, so a second backward over the same graph raises.
"""
from __future__ import annotations

import contextlib
import threading

import numpy as np
import scipy.sparse as sp

_state = threading.local()


def grad_enabled() -> bool:
    return getattr(_state, "enabled", True)


@contextlib.contextmanager
def no_grad():
    prev = grad_enabled()
    _state.enabled = False
    try:
        yield
    finally:
        _state.enabled = prev


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "name", "_parents", "_backward", "_released")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        self.data = np.asarray(data, dtype=np.float64)
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self.name = name
        self._parents: tuple[Tensor, ...] = ()
        self._backward = None
        self._released = False

    # -- basics ------------------------------------------------------------
    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def __len__(self) -> int:
        return len(self.data)

    def __repr__(self) -> str:
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}{tag}, requires_grad={self.requires_grad})"

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def detach(self) -> Tensor:
        return Tensor(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    # -- graph -------------------------------------------------------------
    def backward(self, grad=None) -> None:
        if self._released:
            raise RuntimeError("backward called twice on the same graph")
        if grad is None:
            if self.data.size != 1:
                raise ValueError("backward needs a scalar loss (or an explicit gradient)")
            grad = np.ones_like(self.data)
        order: list[Tensor] = []
        seen: set[int] = set()
        stack = [(self, False)]
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
                if id(p) not in seen:
                    stack.append((p, False))
        grads = {id(self): np.asarray(grad, dtype=np.float64)}
        for node in reversed(order):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node._released:
                raise RuntimeError("graph segment already released by an earlier backward")
            if node._backward is None:
                if node.requires_grad:
                    node.grad = g.copy() if node.grad is None else node.grad + g
                continue
            for parent, pg in zip(node._parents, node._backward(g)):
                if pg is None or not parent.requires_grad:
                    continue
                key = id(parent)
                grads[key] = pg if key not in grads else grads[key] + pg
            node._parents = ()
            node._backward = None
            node._released = True

    # -- operator sugar ----------------------------------------------------
    def __add__(self, o):
        return add(self, o)

    __radd__ = __add__

    def __sub__(self, o):
        return sub(self, o)

    def __rsub__(self, o):
        return sub(o, self)

    def __mul__(self, o):
        return mul(self, o)

    __rmul__ = __mul__

    def __truediv__(self, o):
        return div(self, o)

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, o):
        return matmul(self, o)

    def __getitem__(self, idx):
        return getitem(self, idx)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis, keepdims)

    def reshape(self, *shape):
        return reshape(self, shape[0] if len(shape) == 1 and isinstance(shape[0], tuple) else shape)

    def transpose(self, *axes):
        return transpose(self, axes or None)

    @property
    def T(self):
        return transpose(self, None)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _make(data, parents, backward) -> Tensor:
    parents = tuple(parents)
    track = grad_enabled() and any(p.requires_grad for p in parents)
    out = Tensor(data, requires_grad=track)
    if track:
        out._parents = parents
        out._backward = backward
    return out


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


# -- elementwise -------------------------------------------------------------
def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return _make(a.data + b.data, (a, b), lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)))


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return _make(a.data - b.data, (a, b), lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)))


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return _make(a.data * b.data, (a, b),
                 lambda g: (_unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)))


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return _make(a.data / b.data, (a, b), lambda g: (
        _unbroadcast(g / b.data, a.shape),
        _unbroadcast(-g * a.data / (b.data * b.data), b.shape),
    ))


def exp(x) -> Tensor:
    x = as_tensor(x)
    y = np.exp(x.data)
    return _make(y, (x,), lambda g: (g * y,))


def sqrt(x) -> Tensor:
    x = as_tensor(x)
    y = np.sqrt(x.data)
    return _make(y, (x,), lambda g: (0.5 * g / y,))


def square(x) -> Tensor:
    x = as_tensor(x)
    return _make(x.data * x.data, (x,), lambda g: (2.0 * g * x.data,))


def elu(x, alpha: float = 1.0) -> Tensor:
    x = as_tensor(x)
    neg = x.data < 0
    em1 = np.expm1(np.minimum(x.data, 0.0))
    y = np.where(neg, alpha * em1, x.data)
    return _make(y, (x,), lambda g: (g * np.where(neg, alpha * (em1 + 1.0), 1.0),))


def leaky_relu(x, slope: float = 0.2) -> Tensor:
    x = as_tensor(x)
    pos = x.data > 0
    return _make(np.where(pos, x.data, slope * x.data), (x,), lambda g: (g * np.where(pos, 1.0, slope),))


def relu(x) -> Tensor:
    return leaky_relu(x, 0.0)


# -- reductions and shape ----------------------------------------------------
def tsum(x, axis=None, keepdims=False) -> Tensor:
    x = as_tensor(x)

    def back(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, x.shape).copy(),)

    return _make(np.sum(x.data, axis=axis, keepdims=keepdims), (x,), back)


def mean(x, axis=None, keepdims=False) -> Tensor:
    x = as_tensor(x)
    n = x.data.size if axis is None else np.prod([x.shape[a] for a in np.atleast_1d(axis)])
    return tsum(x, axis, keepdims) * (1.0 / n)


def reshape(x, shape) -> Tensor:
    x = as_tensor(x)
    return _make(x.data.reshape(shape), (x,), lambda g: (g.reshape(x.shape),))


def transpose(x, axes=None) -> Tensor:
    x = as_tensor(x)
    inv = None if axes is None else np.argsort(axes)
    return _make(np.transpose(x.data, axes), (x,), lambda g: (np.transpose(g, inv),))


def getitem(x, idx) -> Tensor:
    x = as_tensor(x)

    def back(g):
        out = np.zeros_like(x.data)
        np.add.at(out, idx, g)
        return (out,)

    return _make(x.data[idx], (x,), back)


def gather_rows(x, index) -> Tensor:
    """``x[index]`` along axis 0 with a scatter-add backward."""
    x = as_tensor(x)
    index = np.asarray(index, dtype=np.int64)

    def back(g):
        out = np.zeros_like(x.data)
        np.add.at(out, index, g)
        return (out,)

    return _make(x.data[index], (x,), back)


def concat(tensors, axis: int = -1) -> Tensor:
    ts = [as_tensor(t) for t in tensors]
    sizes = [t.shape[axis] for t in ts]
    cuts = np.cumsum(sizes)[:-1]
    return _make(np.concatenate([t.data for t in ts], axis=axis), ts,
                 lambda g: tuple(np.split(g, cuts, axis=axis)))


# -- linear algebra ----------------------------------------------------------
def matmul(a, b) -> Tensor:
    """Batched ``a @ b`` (broadcasting over leading dims); 1-D operands are not supported."""
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2:
        raise ValueError("matmul operands must be at least 2-D")
    if a.shape[-1] != b.shape[-2]:
        raise ValueError(f"matmul shape mismatch {a.shape} @ {b.shape}")
    return _make(a.data @ b.data, (a, b), lambda g: (
        _unbroadcast(g @ np.swapaxes(b.data, -1, -2), a.shape),
        _unbroadcast(np.swapaxes(a.data, -1, -2) @ g, b.shape),
    ))


def sparse_matmul(A, x) -> Tensor:
    """Constant matrix (scipy sparse or dense ndarray) times a dense tensor."""
    x = as_tensor(x)
    if not isinstance(A, np.ndarray):
        A = sp.csr_matrix(A)
    return _make(A @ x.data, (x,), lambda g: (A.T @ g,))


def spmm(values, rows, cols, n_rows: int, x) -> Tensor:
    """``out[r] = sum_e values[e] * x[cols[e]]`` over edges with ``rows[e] == r``.

    Differentiable in both the edge values and ``x``.
    """
    values, x = as_tensor(values), as_tensor(x)
    rows = np.asarray(rows, dtype=np.int64)
    cols = np.asarray(cols, dtype=np.int64)
    A = sp.csr_matrix((values.data, (rows, cols)), shape=(n_rows, x.shape[0]))

    def back(g):
        gv = np.einsum("ef,ef->e", g[rows], x.data[cols]) if values.requires_grad else None
        gx = A.T @ g if x.requires_grad else None
        return gv, gx

    return _make(A @ x.data, (values, x), back)


# -- normalisations ----------------------------------------------------------
def softmax(x, axis: int = -1) -> Tensor:
    x = as_tensor(x)
    z = x.data - np.max(x.data, axis=axis, keepdims=True)
    e = np.exp(z)
    y = e / np.sum(e, axis=axis, keepdims=True)
    return _make(y, (x,), lambda g: (y * (g - np.sum(g * y, axis=axis, keepdims=True)),))


def segment_softmax(logits, segments, n_segments: int) -> Tensor:
    """Softmax of a 1-D tensor within groups given by ``segments`` (one id per entry)."""
    x = as_tensor(logits)
    seg = np.asarray(segments, dtype=np.int64)
    mx = np.full(n_segments, -np.inf)
    np.maximum.at(mx, seg, x.data)
    e = np.exp(x.data - mx[seg])
    tot = np.bincount(seg, weights=e, minlength=n_segments)
    y = e / tot[seg]

    def back(g):
        s = np.bincount(seg, weights=g * y, minlength=n_segments)
        return (y * (g - s[seg]),)

    return _make(y, (x,), back)


def masked_softmax(x, mask: np.ndarray) -> Tensor:
    """Row softmax of a 2-D tensor restricted to ``mask``; masked entries are exactly 0.

    Every row must have at least one unmasked entry.
    """
    x = as_tensor(x)
    z = np.where(mask, x.data, -np.inf)
    z = z - np.max(z, axis=1, keepdims=True)
    e = np.exp(z)
    y = e / np.sum(e, axis=1, keepdims=True)
    return _make(y, (x,), lambda g: (y * (g - np.sum(g * y, axis=1, keepdims=True)),))


def csr_segment_softmax(logits, indptr: np.ndarray) -> Tensor:
    """:func:`segment_softmax` for entries grouped contiguously by row (``indptr`` as in CSR).

    Every row must be non-empty.
    """
    x = as_tensor(logits)
    starts = indptr[:-1]
    counts = np.diff(indptr)
    mx = np.maximum.reduceat(x.data, starts)
    e = np.exp(x.data - np.repeat(mx, counts))
    y = e / np.repeat(np.add.reduceat(e, starts), counts)
    return _make(y, (x,), lambda g: (y * (g - np.repeat(np.add.reduceat(g * y, starts), counts)),))


def csr_spmm(values, indices: np.ndarray, indptr: np.ndarray, x) -> Tensor:
    """:func:`spmm` with a prebuilt CSR pattern (``rows`` implied by ``indptr``)."""
    values, x = as_tensor(values), as_tensor(x)
    n = len(indptr) - 1
    A = sp.csr_matrix((values.data, indices, indptr), shape=(n, x.shape[0]))

    def back(g):
        gv = None
        if values.requires_grad:
            rows = np.repeat(np.arange(n), np.diff(indptr))
            gv = np.einsum("ef,ef->e", g[rows], x.data[indices])
        gx = A.T @ g if x.requires_grad else None
        return gv, gx

    return _make(A @ x.data, (values, x), back)


def segment_sum(x, segments, n_segments: int) -> Tensor:
    x = as_tensor(x)
    seg = np.asarray(segments, dtype=np.int64)
    out = np.zeros((n_segments,) + x.shape[1:])
    np.add.at(out, seg, x.data)
    return _make(out, (x,), lambda g: (g[seg],))


def complex_quadratic(x, Z: np.ndarray, V: np.ndarray) -> Tensor:
    """``||Z u - V||^2`` for complex ``u = x[..., 0::2] + j x[..., 1::2]`` flattened row-major.

    ``x`` has shape (K, 6) for three complex components per row.
    """
    x = as_tensor(x)
    u = (x.data[:, 0::2] + 1j * x.data[:, 1::2]).reshape(-1)
    r = Z @ u - V
    val = float(np.vdot(r, r).real)

    def back(g):
        w = (r.conj() @ Z).conj().reshape(-1, x.shape[1] // 2)
        out = np.empty_like(x.data)
        out[:, 0::2] = 2.0 * w.real
        out[:, 1::2] = 2.0 * w.imag
        return (g * out,)

    return _make(np.array(val), (x,), back)


__all__ = [
    "Tensor", "add", "as_tensor", "complex_quadratic", "concat", "csr_segment_softmax", "csr_spmm", "div",
    "elu", "exp", "gather_rows", "getitem", "grad_enabled", "leaky_relu", "masked_softmax", "matmul", "mean", "mul", "no_grad", "relu", "reshape",
    "segment_softmax", "segment_sum", "softmax", "sparse_matmul", "spmm", "sqrt", "square", "sub",
    "transpose", "tsum",
]
