import math

import numpy as np
import pytest
import scipy.sparse as sp
from hypothesis import given, settings
from hypothesis import strategies as st

from conftest import check_gradients
from scatternet.nn import Adam, CheckpointError, ParameterStore, Tensor, load_checkpoint, no_grad, save_checkpoint
from scatternet.nn import layers as L
from scatternet.nn import tensor as T


def P(rng, *shape):
    return Tensor(rng.normal(size=shape), requires_grad=True)


@pytest.fixture
def rng():
    return np.random.default_rng(42)


# --------------------------------------------------------------- engine basics

def test_sum_of_squares_gradient():
    w = Tensor(np.array([1.0, -2.0, 3.0]), requires_grad=True)
    unused = Tensor(np.ones(2), requires_grad=True)
    (T.tsum(T.square(w)) + 0.0 * T.tsum(unused)).backward()
    np.testing.assert_array_equal(w.grad, [2.0, -4.0, 6.0])
    np.testing.assert_array_equal(unused.grad, [0.0, 0.0])


def test_backward_errors():
    w = Tensor(np.ones(3), requires_grad=True)
    y = w * 2.0
    with pytest.raises(ValueError):
        y.backward()
    loss = T.tsum(y)
    loss.backward()
    with pytest.raises(RuntimeError):
        loss.backward()


def test_no_grad_records_nothing():
    w = Tensor(np.ones(3), requires_grad=True)
    with no_grad():
        y = T.tsum(w * 3.0)
    assert not y.requires_grad and y._backward is None


@pytest.mark.parametrize("op", [
    lambda a, b: T.tsum(a * b + a / (b * b + 1.0) - b),
    lambda a, b: T.tsum(T.exp(a * 0.3) * T.sqrt(T.square(b) + 1.0)),
    lambda a, b: T.tsum(T.elu(a) * T.leaky_relu(b, 0.2)),
    lambda a, b: T.tsum(T.square(T.matmul(a, T.transpose(b)))),
    lambda a, b: T.mean(T.concat([a, b], axis=1) * T.concat([b, a], axis=1)),
    lambda a, b: T.tsum(T.softmax(a, axis=1) * b),
    lambda a, b: T.tsum(T.getitem(a, (slice(1, 3),)) * T.reshape(T.getitem(b, (slice(0, 2),)), (2, 6))),
])
def test_elementary_ops_gradcheck(rng, op):
    a, b = P(rng, 5, 6), P(rng, 5, 6)
    check_gradients(lambda: op(a, b), [a, b])


def test_scatter_ops_gradcheck(rng):
    x = P(rng, 7, 4)
    seg = np.array([0, 2, 2, 1, 0, 2, 1])
    idx = np.array([3, 3, 0, 6, 1])
    v = P(rng, 9)
    rows = np.array([0, 0, 1, 2, 2, 2, 3, 4, 4])
    cols = np.array([1, 3, 0, 0, 5, 6, 2, 4, 1])
    indptr = np.array([0, 2, 3, 6, 7, 9])
    w = rng.uniform(size=(3, 4))
    check_gradients(lambda: T.tsum(T.segment_sum(x, seg, 3) * w), [x])
    check_gradients(lambda: T.tsum(T.square(T.gather_rows(x, idx))), [x])
    check_gradients(lambda: T.tsum(T.spmm(T.segment_softmax(v, rows, 5), rows, cols, 5, x) * x[:5]), [v, x])
    check_gradients(lambda: T.tsum(T.csr_spmm(T.csr_segment_softmax(v, indptr), cols, indptr, x) * x[:5]), [v, x])
    A = sp.random(5, 7, density=0.5, random_state=1, format="csr")
    check_gradients(lambda: T.tsum(T.square(T.sparse_matmul(A, x))), [x])
    mask = rng.uniform(size=(7, 4)) < 0.6
    mask[:, 0] = True
    check_gradients(lambda: T.tsum(T.masked_softmax(x, mask) * w[0]), [x])


def test_complex_quadratic_gradcheck_and_value(rng):
    K = 4
    Z = rng.normal(size=(3 * K, 3 * K)) + 1j * rng.normal(size=(3 * K, 3 * K))
    V = rng.normal(size=3 * K) + 1j * rng.normal(size=3 * K)
    x = P(rng, K, 6)
    check_gradients(lambda: T.complex_quadratic(x, Z, V), [x])
    u = np.linalg.solve(Z, V).reshape(K, 3)
    exact = np.empty((K, 6))
    exact[:, 0::2], exact[:, 1::2] = u.real, u.imag
    assert T.complex_quadratic(Tensor(exact), Z, V).item() < 1e-20
    assert T.complex_quadratic(Tensor(np.zeros((K, 6))), Z, V).item() == pytest.approx(np.vdot(V, V).real)


# ---------------------------------------------------------------- softmax

def test_softmax_examples():
    np.testing.assert_allclose(L.softmax_norm(np.zeros((1, 4))).data, 0.25)
    np.testing.assert_allclose(L.softmax_norm(np.array([[0.0, math.log(3)]])).data, [[0.25, 0.75]], rtol=1e-15)
    x = np.random.default_rng(0).normal(size=(3, 5))
    np.testing.assert_allclose(L.softmax_norm(x + 1000).data, L.softmax_norm(x).data, rtol=1e-12)


@settings(max_examples=50, deadline=None)
@given(st.integers(1, 6), st.integers(1, 12), st.floats(-1e3, 1e3), st.integers(0, 10_000))
def test_softmax_row_stochastic(rows, cols, shift, seed):
    x = np.random.default_rng(seed).normal(scale=30, size=(rows, cols)) + shift
    y = L.softmax_norm(x).data
    assert np.all(np.abs(y.sum(axis=1) - 1) <= 1e-12) and np.all(y >= 0)


# ---------------------------------------------------------------- layers

def test_ffn2_examples_and_grad(rng):
    x = rng.normal(size=(4, 5))
    I, z = np.eye(5), np.zeros(5)
    np.testing.assert_array_equal(L.ffn2(x, I, z, I, z).data, x)
    W1, b1, W2, b2 = rng.normal(size=(5, 3)), rng.normal(size=3), rng.normal(size=(3, 2)), rng.normal(size=2)
    np.testing.assert_allclose(L.ffn2(np.zeros((1, 5)), W1, b1, W2, b2).data[0], b1 @ W2 + b2, rtol=1e-14)
    ps = [P(rng, 8, 5), P(rng, 5, 7), P(rng, 7), P(rng, 7, 3), P(rng, 3)]
    for act in (None, "relu", "elu"):
        check_gradients(lambda: T.tsum(T.square(L.ffn2(*ps, activation=act))), ps)
    with pytest.raises(ValueError):
        L.ffn2(x, I, z, I, z, activation="tanh")


def ring_graph(n):
    rows = np.concatenate([np.arange(n), np.arange(n)])
    cols = np.concatenate([(np.arange(n) + 1) % n, (np.arange(n) - 1) % n])
    order = np.lexsort((cols, rows))
    return rows[order], cols[order]


def test_gat_examples_and_grad(rng):
    rows, cols = ring_graph(6)
    w = rng.uniform(0.2, 1.0, size=len(rows))
    h = np.tile(rng.normal(size=(1, 4)), (6, 1))
    W, ad, as_ = rng.normal(size=(4, 3)), rng.normal(size=(3, 1)), rng.normal(size=(3, 1))
    _, alpha = L.gat_layer(h, rows, cols, np.ones(len(rows)), W, ad, as_, return_attention=True)
    np.testing.assert_allclose(alpha.data, 0.5, rtol=1e-14)
    hh = rng.normal(size=(2, 4))
    out = L.gat_layer(hh, np.array([0, 1]), np.array([1, 0]), np.ones(2), W, ad, as_)
    np.testing.assert_allclose(out.data, (hh @ W)[[1, 0]], rtol=1e-14)
    _, alpha = L.gat_layer(rng.normal(size=(6, 4)), rows, cols, w, W, ad, as_, return_attention=True)
    np.testing.assert_allclose(np.bincount(rows, alpha.data), 1.0, atol=1e-12)
    ps = [P(rng, 6, 4), P(rng, 4, 3), P(rng, 3, 1), P(rng, 3, 1)]
    check_gradients(lambda: T.tsum(T.square(L.gat_layer(ps[0], rows, cols, w, *ps[1:]))), ps)


def test_gcn_examples_and_grad(rng):
    h, W = rng.normal(size=(1, 3)), rng.normal(size=(3, 2))
    A1 = L.gcn_adjacency([], [], [], 1)
    np.testing.assert_allclose(L.gcn_layer(h, A1, W).data, h @ W, rtol=1e-15)
    rows, cols = ring_graph(5)
    A = L.gcn_adjacency(rows, cols, np.full(len(rows), 0.7), 5)
    out = L.gcn_layer(np.ones((5, 3)), A, W).data
    np.testing.assert_allclose(out, out[0:1].repeat(5, 0), rtol=1e-14)
    Aw = L.gcn_adjacency(rows, cols, rng.uniform(size=len(rows)), 5)
    ps = [P(rng, 5, 3), P(rng, 3, 4)]
    check_gradients(lambda: T.tsum(T.square(L.gcn_layer(ps[0], Aw, ps[1]))), ps)


def test_batchnorm_examples_and_grad(rng):
    x = rng.normal(size=(50, 3))
    x = (x - x.mean(0)) / x.std(0)
    y = L.batchnorm(x, np.ones(3), np.zeros(3), eps=0.0).data
    np.testing.assert_allclose(y, x, rtol=1e-12, atol=1e-12)
    assert L.batchnorm_elu(np.zeros((2, 1)), np.ones(1), np.zeros(1)).data.tolist() == [[0.0], [0.0]]
    assert T.elu(Tensor(np.array([-1e3]))).data[0] == pytest.approx(-1.0)
    ps = [P(rng, 10, 4), P(rng, 4), P(rng, 4)]
    check_gradients(lambda: T.tsum(T.square(L.batchnorm_elu(*ps)) * np.arange(4.0)), ps)
    # constant channel: eps keeps it finite
    assert np.all(np.isfinite(L.batchnorm(np.ones((4, 2)), np.ones(2), np.zeros(2)).data))


def test_batchnorm_running_stats_module():
    store = ParameterStore(0)
    bn = L.BatchNorm(store, "bn", 2)
    x = np.random.default_rng(0).normal(loc=3.0, size=(100, 2))
    for _ in range(200):
        bn(x)
    bn.training = False
    y = bn(x).data
    assert np.abs(y.mean(0)).max() < 0.05  # running stats have converged to the batch stats
    store2 = ParameterStore(0)
    per_fwd = L.BatchNorm(store2, "bn", 2, eval_running_stats=False)
    per_fwd.training = False
    np.testing.assert_allclose(per_fwd(x).data.mean(0), 0, atol=1e-12)
    # a single-row batch in training mode uses the running stats and leaves them untouched
    bn.training = True
    before = store.buffers["bn.running_mean"].copy()
    assert np.all(np.isfinite(bn(x[:1]).data))
    np.testing.assert_array_equal(store.buffers["bn.running_mean"], before)


def mha_params(rng, d):
    return {k: P(rng, d, d) if k.startswith("W") else P(rng, d) for k in ("Wq", "bq", "Wk", "bk", "Wv", "bv", "Wo", "bo")}


def test_mha_examples(rng):
    d, heads = 8, 2
    p = mha_params(rng, d)
    q = rng.normal(size=(5, d))
    kv1 = rng.normal(size=(1, d))
    out = L.multihead_attention(q, kv1, kv1, p, heads).data
    ref = (kv1 @ p["Wv"].data + p["bv"].data) @ p["Wo"].data + p["bo"].data
    np.testing.assert_allclose(out, np.repeat(ref, 5, 0), rtol=1e-12)
    k = np.repeat(kv1, 4, 0)
    v = rng.normal(size=(4, d))
    out, A = L.multihead_attention(q, k, v, p, heads, return_attention=True)
    np.testing.assert_allclose(A.data, 0.25, rtol=1e-12)
    ref = (v @ p["Wv"].data + p["bv"].data).mean(0) @ p["Wo"].data + p["bo"].data
    np.testing.assert_allclose(out.data, np.repeat(ref[None], 5, 0), rtol=1e-12)
    with pytest.raises(ValueError):
        L.multihead_attention(q, k, v, p, 3)
    with pytest.raises(ValueError):
        L.multihead_attention(q[:, :4], k, v, p, heads)


def test_mha_grad_and_nograd_path(rng):
    d, heads = 6, 3
    p = mha_params(rng, d)
    q, k, v = P(rng, 5, d), P(rng, 7, d), P(rng, 7, d)
    check_gradients(lambda: T.tsum(T.square(L.multihead_attention(q, k, v, p, heads))), [q, k, v, *p.values()])
    qq, kk = rng.normal(scale=20, size=(70, d)), rng.normal(scale=20, size=(40, d))
    vv = rng.normal(size=(40, d))
    ref = L.multihead_attention(qq, kk, vv, p, heads).data
    with no_grad():
        fast = L.multihead_attention(qq, kk, vv, p, heads).data
    np.testing.assert_allclose(fast, ref, rtol=1e-10, atol=1e-12)


def test_kpconv_examples_and_grad(rng):
    c = rng.normal(size=(1, 3))
    M = L.kpconv_influence(c, c, L.kernel_offsets(1, 0.1), 0.5)
    F = rng.normal(size=(1, 4))
    np.testing.assert_allclose(L.kpconv_expand(F, M, np.eye(4)[None]).data, F, rtol=1e-15)
    coarse, fine = rng.uniform(size=(6, 3)), rng.uniform(size=(15, 3))
    offs = L.kernel_offsets(7, 0.1)
    M = L.kpconv_influence(coarse, fine, offs, 0.4)
    assert M.shape == (7 * 15, 6)
    assert not np.any(L.kpconv_expand(np.zeros((6, 4)), M, rng.normal(size=(7, 4, 2))).data)
    ps = [P(rng, 6, 4), P(rng, 7, 4, 2)]
    check_gradients(lambda: T.tsum(T.square(L.kpconv_expand(ps[0], M, ps[1]))), ps)
    far = L.kpconv_influence(coarse, fine + 100.0, offs, 0.1)  # nothing in range: nearest fallback
    np.testing.assert_array_equal(np.asarray(far.sum(axis=1)).ravel(), 1.0)
    assert len(L.kernel_offsets(12, 1.0)) == 12
    with pytest.raises(ValueError):
        L.kpconv_influence(coarse, fine, offs, 0.0)


# ---------------------------------------------------------------- store/adam/io

def test_store_determinism_and_adam():
    a, b = ParameterStore(7), ParameterStore(7)
    for s in (a, b):
        s.create("W", (4, 3))
        s.create("b", (3,), "zeros")
    np.testing.assert_array_equal(a["W"].data, b["W"].data)
    with pytest.raises(KeyError):
        a.create("W", (1,))
    w0 = a["W"].data.copy()
    opt = Adam(a, lr=0.0)
    a["W"].grad = np.ones((4, 3))
    opt.step()
    np.testing.assert_array_equal(a["W"].data, w0)
    opt = Adam(b, lr=0.1)
    b["W"].grad = np.ones((4, 3))
    opt.step()
    np.testing.assert_allclose(b["W"].data, w0 - 0.1, rtol=1e-6)
    with pytest.raises(ValueError):
        Adam(a, lr=-1)


def test_checkpoint_roundtrip_and_errors(tmp_path):
    s = ParameterStore(1)
    s.create("layer.W", (3, 2))
    s.buffer("bn.running_var", np.ones(2))
    path = tmp_path / "m.snck"
    save_checkpoint(path, s.state(), {"width": 2})
    tensors, cfg = load_checkpoint(path)
    assert cfg == {"width": 2} and list(tensors) == ["layer.W", "bn.running_var"]
    t = ParameterStore(2)
    t.create("layer.W", (3, 2))
    t.buffer("bn.running_var", np.zeros(2))
    t.load_state(tensors)
    np.testing.assert_array_equal(t["layer.W"].data, s["layer.W"].data)
    raw = path.read_bytes()
    (tmp_path / "bad.snck").write_bytes(b"XXXX" + raw[4:])
    with pytest.raises(CheckpointError):
        load_checkpoint(tmp_path / "bad.snck")
    (tmp_path / "short.snck").write_bytes(raw[:-3])
    with pytest.raises(CheckpointError):
        load_checkpoint(tmp_path / "short.snck")
    with pytest.raises(KeyError):
        ParameterStore(0).load_state(tensors)
