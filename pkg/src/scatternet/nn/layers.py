"""Layer primitives: affine maps, graph attention/convolution, batch norm,
multi-head attention and kernel-point feature transfer.

Functional forms take explicit parameter tensors (handy for gradient checks);
the module classes create their parameters in a :class:`ParameterStore`.
"""
from __future__ import annotations

import logging
import math

import numpy as np
import scipy.sparse as sp
from scipy.spatial import cKDTree

from .. import kernels
from . import tensor as T
from .params import ParameterStore
from .tensor import Tensor

logger = logging.getLogger(__name__)

LEAKY_SLOPE = 0.2
BN_EPS = 1e-5
BN_MOMENTUM = 0.1


# -- functional ----------------------------------------------------------------
def linear(x, W, b=None) -> Tensor:
    y = T.matmul(x, W)
    return y if b is None else y + b


def ffn2(x, W1, b1, W2, b2, activation: str | None = None) -> Tensor:
    """Two stacked affine maps; ``activation`` (``relu``/``elu``) between them is off by default."""
    h = linear(x, W1, b1)
    if activation == "relu":
        h = T.relu(h)
    elif activation == "elu":
        h = T.elu(h)
    elif activation is not None:
        raise ValueError(f"unknown activation {activation!r}")
    return linear(h, W2, b2)


def softmax_norm(logits, axis: int = -1) -> Tensor:
    return T.softmax(logits, axis)


def gat_layer(h, rows, cols, weights, W, a_dst, a_src, return_attention: bool = False):
    """Single-head graph attention.

    ``e_ij = LeakyReLU(a_dst . Wh_i + a_src . Wh_j) * w_ij`` over directed edges
    ``(rows, cols)``; ``alpha`` is the softmax of ``e`` within each row and
    ``h'_i = sum_j alpha_ij W h_j``.
    """
    n = h.shape[0]
    Wh = T.matmul(h, W)
    s = T.reshape(T.matmul(Wh, a_dst), (n,))
    t = T.reshape(T.matmul(Wh, a_src), (n,))
    e = T.leaky_relu(T.gather_rows(s, rows) + T.gather_rows(t, cols), LEAKY_SLOPE) * np.asarray(weights, float)
    alpha = T.segment_softmax(e, rows, n)
    out = T.spmm(alpha, rows, cols, n, Wh)
    return (out, alpha) if return_attention else out


def gcn_adjacency(rows, cols, weights, n: int) -> sp.csr_matrix:
    """``D^-1/2 (A_w + I) D^-1/2`` as a sparse matrix (``rows``/``cols`` exclude self loops)."""
    rows = np.asarray(rows, dtype=np.int64)
    cols = np.asarray(cols, dtype=np.int64)
    w = np.asarray(weights, dtype=float)
    keep = rows != cols
    A = sp.csr_matrix((w[keep], (rows[keep], cols[keep])), shape=(n, n)) + sp.identity(n, format="csr")
    d = np.asarray(A.sum(axis=1)).reshape(-1)
    s = sp.diags(1.0 / np.sqrt(d))
    return sp.csr_matrix(s @ A @ s)


def gcn_layer(h, A_hat, W) -> Tensor:
    return T.sparse_matmul(A_hat, T.matmul(h, W))


def batchnorm(x, gamma, beta, running_mean=None, running_var=None, training: bool = True,
              momentum: float = BN_MOMENTUM, eps: float = BN_EPS) -> Tensor:
    """Per-channel standardisation over rows; updates running stats in place when training."""
    x = T.as_tensor(x)
    if training:
        n = x.shape[0]
        mu = T.mean(x, axis=0, keepdims=True)
        xc = x - mu
        var = T.mean(T.square(xc), axis=0, keepdims=True)
        if running_mean is not None:
            running_mean *= 1.0 - momentum
            running_mean += momentum * mu.data.reshape(-1)
            unbiased = var.data.reshape(-1) * (n / (n - 1) if n > 1 else 1.0)
            running_var *= 1.0 - momentum
            running_var += momentum * unbiased
        xhat = xc / T.sqrt(var + eps)
    else:
        xhat = (x - running_mean) * (1.0 / np.sqrt(running_var + eps))
    return xhat * gamma + beta


def batchnorm_elu(x, gamma, beta, running_mean=None, running_var=None, training: bool = True,
                  momentum: float = BN_MOMENTUM, eps: float = BN_EPS) -> Tensor:
    return T.elu(batchnorm(x, gamma, beta, running_mean, running_var, training, momentum, eps))


def _split_heads(x: Tensor, heads: int) -> Tensor:
    n, d = x.shape
    return T.transpose(T.reshape(x, (n, heads, d // heads)), (1, 0, 2))


def multihead_attention(q, k, v, p: dict, heads: int, return_attention: bool = False):
    """Scaled dot-product attention with ``heads`` heads.

    ``p`` holds ``Wq, bq, Wk, bk, Wv, bv, Wo, bo`` (all ``d x d`` / ``d``).
    """
    d = p["Wq"].shape[0]
    if d % heads:
        raise ValueError(f"model width {d} not divisible by {heads} heads")
    if q.shape[-1] != d or k.shape[-1] != d or v.shape[-1] != d:
        raise ValueError("query/key/value width must equal the model width")
    if k.shape[0] != v.shape[0]:
        raise ValueError("keys and values need the same number of rows")
    dk = d // heads
    if not return_attention and not T.grad_enabled():
        return T.Tensor(_mha_nograd(T.as_tensor(q).data, T.as_tensor(k).data, T.as_tensor(v).data, p, heads))
    Q = _split_heads(linear(q, p["Wq"], p["bq"]), heads)
    K = _split_heads(linear(k, p["Wk"], p["bk"]), heads)
    V = _split_heads(linear(v, p["Wv"], p["bv"]), heads)
    scores = T.matmul(Q, T.transpose(K, (0, 2, 1))) * (1.0 / math.sqrt(dk))
    A = T.softmax(scores, axis=-1)
    out = T.matmul(A, V)  # heads, nq, dk
    out = T.reshape(T.transpose(out, (1, 0, 2)), (q.shape[0], d))
    out = linear(out, p["Wo"], p["bo"])
    return (out, A) if return_attention else out


def _mha_nograd(q, k, v, p, heads, chunk: int = 32):
    """Inference path of :func:`multihead_attention`: query-row chunks, softmax normalised after ``A V``.

    Rows are shifted by the Cauchy-Schwarz bound ``|q_i| max_j |k_j|`` folded into
    the score matmul, and row sums come from a ones column appended to V. Rows
    whose bound is too loose (sum underflows) are redone with the exact max.
    """
    d = q.shape[1]
    dk = d // heads
    scale = 1.0 / math.sqrt(dk)
    nq, nk = len(q), len(k)
    Q = ((q @ p["Wq"].data + p["bq"].data) * scale).reshape(nq, heads, dk).transpose(1, 0, 2)
    K = (k @ p["Wk"].data + p["bk"].data).reshape(nk, heads, dk).transpose(1, 2, 0)
    V = (v @ p["Wv"].data + p["bv"].data).reshape(nk, heads, dk).transpose(1, 0, 2)
    bound = np.linalg.norm(Q, axis=2) * np.linalg.norm(K, axis=1).max(axis=1)[:, None]
    Qx = np.concatenate([Q, -bound[..., None]], axis=2)
    Kx = np.concatenate([K, np.ones((heads, 1, nk))], axis=1)
    Vx = np.concatenate([V, np.ones((heads, nk, 1))], axis=2)
    out = np.empty((heads, nq, dk))
    for s in range(0, nq, chunk):
        e = Qx[:, s : s + chunk] @ Kx
        np.exp(e, out=e)
        ev = e @ Vx
        den = ev[..., dk:]
        if not (den > 1e-200).all():
            e = Q[:, s : s + chunk] @ K
            kernels.shift_rows(e.reshape(-1, nk))
            np.exp(e, out=e)
            ev = e @ Vx
            den = ev[..., dk:]
        out[:, s : s + chunk] = ev[..., :dk] / den
    return out.transpose(1, 0, 2).reshape(nq, d) @ p["Wo"].data + p["bo"].data


def kernel_offsets(count: int, radius: float) -> np.ndarray:
    """Centre point plus up to six octahedron vertices; larger counts add a Fibonacci sphere."""
    if count < 1:
        raise ValueError("need at least one kernel point")
    octa = np.array([[0, 0, 0], [1, 0, 0], [-1, 0, 0], [0, 1, 0], [0, -1, 0], [0, 0, 1], [0, 0, -1]], float)
    if count <= 7:
        return octa[:count] * radius
    extra = count - 7
    i = np.arange(extra) + 0.5
    z = 1.0 - 2.0 * i / extra
    r = np.sqrt(1.0 - z * z)
    phi = math.pi * (1.0 + math.sqrt(5.0)) * i
    fib = np.stack([r * np.cos(phi), r * np.sin(phi), z], axis=1)
    return np.concatenate([octa, fib]) * radius


def kpconv_influence(coarse_pos, fine_pos, offsets, sigma: float) -> sp.csr_matrix:
    """Stacked influence matrix, shape (N_k * n_fine, n_coarse).

    Row ``i * n_fine + f`` holds ``max(0, 1 - |c - (x_f + o_i)| / sigma)`` over
    coarse points ``c``. A fine point that no kernel point reaches falls back to
    weight 1 on its nearest coarse point for every kernel point.
    """
    if not sigma > 0:
        raise ValueError("influence radius must be positive")
    coarse = np.asarray(coarse_pos, float).reshape(-1, 3)
    fine = np.asarray(fine_pos, float).reshape(-1, 3)
    offs = np.asarray(offsets, float).reshape(-1, 3)
    nf, nk = len(fine), len(offs)
    tree = cKDTree(coarse)
    rows, cols, vals = [], [], []
    for i, o in enumerate(offs):
        hits = tree.query_ball_point(fine + o, sigma)
        for f, cs in enumerate(hits):
            if not cs:
                continue
            cs = np.asarray(sorted(cs), dtype=np.int64)
            w = 1.0 - np.linalg.norm(coarse[cs] - (fine[f] + o), axis=1) / sigma
            keep = w > 0
            rows.append(np.full(int(keep.sum()), i * nf + f))
            cols.append(cs[keep])
            vals.append(w[keep])
    M = sp.csr_matrix(
        (np.concatenate(vals) if vals else np.zeros(0),
         (np.concatenate(rows) if rows else np.zeros(0, np.int64), np.concatenate(cols) if cols else np.zeros(0, np.int64))),
        shape=(nk * nf, len(coarse)),
    )
    reached = np.asarray(abs(M).sum(axis=1)).reshape(nk, nf).sum(axis=0) > 0
    lonely = np.flatnonzero(~reached)
    if len(lonely):
        logger.debug("kpconv: %d fine points fall back to their nearest coarse point", len(lonely))
        _, nearest = tree.query(fine[lonely])
        nearest = np.atleast_1d(nearest)
        fr = np.concatenate([i * nf + lonely for i in range(nk)])
        fc = np.tile(nearest, nk)
        M = M + sp.csr_matrix((np.ones(len(fr)), (fr, fc)), shape=M.shape)
    return sp.csr_matrix(M)


def kpconv_expand(coarse_features, influence: sp.csr_matrix, W) -> Tensor:
    """``f_out = sum_i (M_i F) W_i`` with ``W`` of shape (N_k, in, out)."""
    nk = W.shape[0]
    G = T.sparse_matmul(influence, coarse_features)
    nf = influence.shape[0] // nk
    G = T.reshape(G, (nk, nf, coarse_features.shape[1]))
    return T.tsum(T.matmul(G, W), axis=0)


# -- modules -------------------------------------------------------------------
class Module:
    def __init__(self, store: ParameterStore, prefix: str):
        self.store = store
        self.prefix = prefix

    def param(self, name: str, shape, init: str = "glorot") -> Tensor:
        return self.store.create(f"{self.prefix}.{name}", tuple(shape), init)


class Linear(Module):
    def __init__(self, store, prefix, n_in: int, n_out: int, bias: bool = True):
        super().__init__(store, prefix)
        self.W = self.param("W", (n_in, n_out))
        self.b = self.param("b", (n_out,), "zeros") if bias else None

    def __call__(self, x) -> Tensor:
        return linear(x, self.W, self.b)


class FFN2(Module):
    def __init__(self, store, prefix, n_in: int, n_hidden: int, n_out: int, activation: str | None = None):
        super().__init__(store, prefix)
        self.W1 = self.param("W1", (n_in, n_hidden))
        self.b1 = self.param("b1", (n_hidden,), "zeros")
        self.W2 = self.param("W2", (n_hidden, n_out))
        self.b2 = self.param("b2", (n_out,), "zeros")
        self.activation = activation

    def __call__(self, x) -> Tensor:
        return ffn2(x, self.W1, self.b1, self.W2, self.b2, self.activation)


class GAT(Module):
    def __init__(self, store, prefix, n_in: int, n_out: int):
        super().__init__(store, prefix)
        self.W = self.param("W", (n_in, n_out))
        self.a_dst = self.param("a_dst", (n_out, 1))
        self.a_src = self.param("a_src", (n_out, 1))

    def __call__(self, h, rows, cols, weights) -> Tensor:
        return gat_layer(h, rows, cols, weights, self.W, self.a_dst, self.a_src)


class GCN(Module):
    def __init__(self, store, prefix, n_in: int, n_out: int):
        super().__init__(store, prefix)
        self.W = self.param("W", (n_in, n_out))

    def __call__(self, h, A_hat) -> Tensor:
        return gcn_layer(h, A_hat, self.W)


class BatchNorm(Module):
    """Batch norm over the rows of one forward pass.

    ``eval_running_stats`` selects what eval mode normalises with: the tracked
    running statistics (classic behaviour) or, when False, the statistics of
    the current input, which is what the graph model uses because its "batch"
    is one mesh whose feature statistics shift from sample to sample.
    """

    def __init__(self, store, prefix, channels: int, eval_running_stats: bool = True):
        super().__init__(store, prefix)
        self.gamma = self.param("gamma", (channels,), "ones")
        self.beta = self.param("beta", (channels,), "zeros")
        self.running_mean = store.buffer(f"{prefix}.running_mean", np.zeros(channels))
        self.running_var = store.buffer(f"{prefix}.running_var", np.ones(channels))
        self.training = True
        self.momentum = BN_MOMENTUM
        self.eps = BN_EPS
        self.eval_running_stats = eval_running_stats

    def __call__(self, x) -> Tensor:
        if not self.training and not self.eval_running_stats:
            return batchnorm(x, self.gamma, self.beta, None, None, True, self.momentum, self.eps)
        if self.training and self.eval_running_stats and T.as_tensor(x).shape[0] == 1:
            # one row has no variance: normalise as eval mode will, leave the stats alone
            return batchnorm(x, self.gamma, self.beta, self.running_mean, self.running_var, False,
                             self.momentum, self.eps)
        return batchnorm(x, self.gamma, self.beta, self.running_mean, self.running_var, self.training,
                         self.momentum, self.eps)


class MultiHeadAttention(Module):
    def __init__(self, store, prefix, width: int, heads: int):
        super().__init__(store, prefix)
        if width % heads:
            raise ValueError(f"width {width} not divisible by {heads} heads")
        self.heads = heads
        self.p = {}
        for name in ("q", "k", "v", "o"):
            self.p[f"W{name}"] = self.param(f"W{name}", (width, width))
            self.p[f"b{name}"] = self.param(f"b{name}", (width,), "zeros")

    def __call__(self, q, k, v, return_attention: bool = False):
        return multihead_attention(q, k, v, self.p, self.heads, return_attention)


class KPConv(Module):
    def __init__(self, store, prefix, n_in: int, n_out: int, kernel_count: int = 7):
        super().__init__(store, prefix)
        self.kernel_count = kernel_count
        bound = math.sqrt(6.0 / (n_in * kernel_count + n_out))
        self.W = store.add(f"{prefix}.W", store.rng.uniform(-bound, bound, size=(kernel_count, n_in, n_out)))

    def __call__(self, coarse_features, influence) -> Tensor:
        return kpconv_expand(coarse_features, influence, self.W)


__all__ = [
    "BN_EPS", "BatchNorm", "FFN2", "GAT", "GCN", "KPConv", "LEAKY_SLOPE", "Linear", "Module",
    "MultiHeadAttention", "batchnorm", "batchnorm_elu", "ffn2", "gat_layer", "gcn_adjacency", "gcn_layer",
    "kernel_offsets", "kpconv_expand", "kpconv_influence", "linear", "multihead_attention", "softmax_norm",
]
