"""U-shaped hierarchical graph model that predicts surface currents.

Down path: at each level a point-attention block (density scaling plus
normal-difference attention) feeds a local propagation stack
(GAT -> BN -> ELU -> GCN -> BN -> ELU -> GCN -> Linear); the next level's
input is the mean of each representative's children. Up path: starting from
the coarsest level, near features attend to near + expanded-far features
(multi-head attention followed by a residual FFN); the result, plus the near
features when skip connections are on, is carried to the next finer level by
kernel-point convolution. A linear head maps finest-level features to six real
channels (Re/Im of Jx, Jy, Jz) that are projected onto each face's tangent plane.
"""
from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass, field

import numpy as np
import scipy.sparse as sp

from . import kernels
from .emoracle import ETA0, IncidentWave, SurfaceCurrentField, incident_field
from .geometry import TriangleMesh, to_point_cloud
from .graph import PhysicsGraph, build_level_graphs
from .hierarchy import LevelHierarchy, build_octree
from .nn import layers as L
from .nn import tensor as T
from .nn.params import ParameterStore
from .nn.tensor import Tensor, no_grad

N_CHANNELS = 6
KV_SOURCES = ("sum", "expanded")
DENSE_FILL = 0.2  # levels whose directed-edge fill exceeds this use dense attention


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class UPINetConfig:
    levels: int = 3
    width: int = 64
    heads: int = 4
    kpconv_kernels: int = 7
    skip_connections: bool = True
    edge_constraint: bool = True
    kv_source: str = "sum"
    use_coordinates: bool = False
    ffn_activation: str | None = None
    density_hidden: int = 8
    normal_hidden: int = 8
    bn_running_stats: bool = False  # eval-mode batch norm: running stats, or per-mesh stats
    seed: int = 0

    def __post_init__(self):
        if self.levels < 1:
            raise ConfigError("levels must be >= 1")
        if self.width < 1 or self.heads < 1 or self.width % self.heads:
            raise ConfigError(f"width {self.width} must be a positive multiple of heads {self.heads}")
        if self.kpconv_kernels < 1:
            raise ConfigError("kpconv_kernels must be >= 1")
        if self.kv_source not in KV_SOURCES:
            raise ConfigError(f"kv_source must be one of {KV_SOURCES}")
        if self.ffn_activation not in (None, "relu", "elu"):
            raise ConfigError("ffn_activation must be null, 'relu' or 'elu'")

    @property
    def n_inputs(self) -> int:
        return 11 + (3 if self.use_coordinates else 0)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> UPINetConfig:
        known = set(cls.__dataclass_fields__)
        extra = set(d) - known
        if extra:
            raise ConfigError(f"unknown model config keys: {sorted(extra)}")
        return cls(**d)

    def digest(self) -> str:
        return hashlib.sha256(json.dumps(self.to_dict(), sort_keys=True).encode()).hexdigest()[:16]


# --------------------------------------------------------------------------
# Per-mesh precomputation (geometry only; shared by every incidence angle)


@dataclass(eq=False)
class LevelOps:
    """Message-passing operators of one level, in sparse and (if dense enough) dense form."""

    n: int
    positions: np.ndarray
    normals: np.ndarray
    inv_density: np.ndarray  # (n, 1)
    curvature: np.ndarray  # (n, 1)
    indices: np.ndarray  # CSR column indices, rows sorted, isolated nodes self-looped
    indptr: np.ndarray
    weights: np.ndarray
    a_hat: object
    a_hat_unit: object
    dense: bool
    mask: np.ndarray | None = None
    weight_matrix: np.ndarray | None = None
    _pattern: object = None
    _mask_u8: np.ndarray | None = None

    @classmethod
    def from_graph(cls, g: PhysicsGraph, dense: bool | None = None) -> LevelOps:
        rows, cols, w = g.directed(self_loops_for_isolated=True)
        n = g.n_nodes
        indptr = np.concatenate([[0], np.cumsum(np.bincount(rows, minlength=n))]).astype(np.int64)
        if dense is None:
            dense = len(rows) > DENSE_FILL * n * n
        a_hat = L.gcn_adjacency(rows, cols, w, n)
        a_unit = L.gcn_adjacency(rows, cols, np.ones_like(w), n)
        ops = cls(n, g.positions, g.normals, g.inv_density.reshape(-1, 1), g.curvature.reshape(-1, 1),
                  cols, indptr, w, a_hat, a_unit, bool(dense))
        if dense:
            ops.mask = np.zeros((n, n), dtype=bool)
            ops.mask[rows, cols] = True
            ops.weight_matrix = np.zeros((n, n))
            ops.weight_matrix[rows, cols] = w
            ops.a_hat = a_hat.toarray()
            ops.a_hat_unit = a_unit.toarray()
        return ops

    @property
    def rows(self) -> np.ndarray:
        return np.repeat(np.arange(self.n), np.diff(self.indptr))

    def adjacency(self, edge_constraint: bool):
        return self.a_hat if edge_constraint else self.a_hat_unit

    def attend(self, a: Tensor, b: Tensor, x: Tensor, edge_constraint: bool | None = None,
               leaky: bool = False, return_attention: bool = False):
        """``sum_j alpha_ij x_j`` with ``alpha = softmax_j(f(a_i + b_j) * w_ij)`` over near(i).

        ``a`` and ``b`` have shape (n,). ``f`` is LeakyReLU(0.2) when ``leaky``,
        else identity. Edge weights apply when ``edge_constraint`` is True, unit
        weights when False, and none at all when None.
        """
        n = self.n
        if self.dense and not return_attention and not T.grad_enabled():
            return T.Tensor(self._attend_dense_nograd(a.data, b.data, x.data, edge_constraint, leaky))
        if self.dense:
            e = T.reshape(a, (n, 1)) + T.reshape(b, (1, n))
            if leaky:
                e = T.leaky_relu(e, L.LEAKY_SLOPE)
            if edge_constraint:
                e = e * self.weight_matrix
            alpha = T.masked_softmax(e, self.mask)
            out = T.matmul(alpha, x)
        else:
            rows = self.rows
            e = T.gather_rows(a, rows) + T.gather_rows(b, self.indices)
            if leaky:
                e = T.leaky_relu(e, L.LEAKY_SLOPE)
            if edge_constraint:
                e = e * self.weights
            alpha = T.csr_segment_softmax(e, self.indptr)
            out = T.csr_spmm(alpha, self.indices, self.indptr, x)
        return (out, alpha) if return_attention else out

    def _attend_dense_nograd(self, a, b, x, edge_constraint, leaky, chunk: int = 128):
        # inference path: one fused pass per row block, shifted by an upper bound of the
        # row's logits (weights lie in (0, 1]); row sums ride along as a ones column
        if self._mask_u8 is None:
            self._mask_u8 = np.ascontiguousarray(self.mask, dtype=np.uint8)
        a = np.ascontiguousarray(a, dtype=np.float64)
        b = np.ascontiguousarray(b, dtype=np.float64)
        top = a + b.max()
        if leaky:
            top = np.where(top < 0, top * L.LEAKY_SLOPE, top)
        # clamping at 0 bounds weighted logits too; applied unconditionally so unit
        # weights and no weights round identically
        shift = np.ascontiguousarray(np.maximum(top, 0.0))
        weighted = bool(edge_constraint)
        xa = np.concatenate([x, np.ones((self.n, 1))], axis=1)
        d = x.shape[1]
        out = np.empty((self.n, d))
        e_buf = np.empty((min(chunk, self.n), self.n))
        for s in range(0, self.n, chunk):
            e = e_buf[: min(chunk, self.n - s)]
            kernels.masked_logits_shifted(a, b, self.weight_matrix, self._mask_u8, L.LEAKY_SLOPE, leaky,
                                          weighted, s, shift, e)
            np.exp(e, out=e)
            r = e @ xa
            if not (r[:, d] > 1e-200).all():
                kernels.masked_logits(a, b, self.weight_matrix, self._mask_u8, L.LEAKY_SLOPE, leaky,
                                      weighted, s, e)
                np.exp(e, out=e)
                r = e @ xa
            out[s : s + len(e)] = r[:, :d] / r[:, d:]
        return out

    def attend_separable(self, s: Tensor, x: Tensor) -> Tensor:
        """Attention with logits ``s_j - s_i + c``: row terms cancel in the softmax, so
        ``alpha_ij = m_ij exp(s_j) / sum_j m_ij exp(s_j)`` needs no per-edge logits."""
        shift = float(np.max(s.data)) if s.shape[0] else 0.0
        e = T.reshape(T.exp(s - shift), (self.n, 1))
        pattern = self.pattern()
        num = T.sparse_matmul(pattern, x * e)
        den = T.sparse_matmul(pattern, e)
        if np.any(den.data <= 0):
            return self.attend(-s, s, x)
        return num / den

    def pattern(self):
        if self._pattern is None:
            if self.dense:
                self._pattern = self.mask.astype(np.float64)
            else:
                self._pattern = sp.csr_matrix((np.ones(len(self.indices)), self.indices, self.indptr),
                                              shape=(self.n, self.n))
        return self._pattern


@dataclass(eq=False)
class MeshContext:
    """Hierarchy, graphs and inter-level operators for one mesh."""

    mesh: TriangleMesh
    hierarchy: LevelHierarchy
    graphs: list[PhysicsGraph]
    levels: list[LevelOps]
    pool: list[sp.csr_matrix]  # level l -> l+1 child means, shape (n_{l+1}, n_l)
    expand: list[dict] = field(default_factory=list)  # per fine level: {kernel_count: influence}

    @property
    def depth(self) -> int:
        return len(self.levels)

    def influence(self, level: int, kernel_count: int) -> sp.csr_matrix:
        """KPConv influence from level ``level + 1`` onto ``level``."""
        cache = self.expand[level]
        if kernel_count not in cache:
            coarse_edge = self.hierarchy.levels[level + 1].cube_edge
            offs = L.kernel_offsets(kernel_count, coarse_edge / 2.0)
            cache[kernel_count] = L.kpconv_influence(
                self.levels[level + 1].positions, self.levels[level].positions, offs, coarse_edge)
        return cache[kernel_count]


def prepare_mesh(mesh: TriangleMesh, wavelength: float, levels: int = 3, seed_index: int = 0,
                 hierarchy: LevelHierarchy | None = None, dense: bool | None = None,
                 kernel_count: int | None = 7) -> MeshContext:
    cloud = to_point_cloud(mesh)
    hier = hierarchy or build_octree(cloud, wavelength, levels, seed_index)
    if hier.levels[0].point_indices.tolist() != list(range(mesh.n_faces)):
        raise ConfigError("hierarchy level 0 must cover every face in order")
    graphs = build_level_graphs(cloud, hier)
    ops = [LevelOps.from_graph(g, dense) for g in graphs]
    pool = []
    for l in range(len(hier) - 1):
        pm = hier.levels[l].parent_map
        counts = np.bincount(pm, minlength=len(hier.levels[l + 1]))
        pool.append(sp.csr_matrix((1.0 / counts[pm], (pm, np.arange(len(pm)))),
                                  shape=(len(hier.levels[l + 1]), len(pm))))
    ctx = MeshContext(mesh, hier, graphs, ops, pool, [dict() for _ in range(len(hier) - 1)])
    if kernel_count:
        for l in range(len(hier) - 1):
            ctx.influence(l, kernel_count)
    return ctx


def with_unit_weights(ctx: MeshContext) -> MeshContext:
    """Same mesh and hierarchy with every edge weight set to 1."""
    graphs = [g.unit_weights() for g in ctx.graphs]
    ops = [LevelOps.from_graph(g, lv.dense) for g, lv in zip(graphs, ctx.levels)]
    return MeshContext(ctx.mesh, ctx.hierarchy, graphs, ops, ctx.pool, [dict(e) for e in ctx.expand])


def input_features(ctx: MeshContext, wave: IncidentWave, use_coordinates: bool = False) -> np.ndarray:
    """Per-face inputs: Re E, Im E (unit-amplitude), normal, D_norm, curvature[, centroid]."""
    lv = ctx.levels[0]
    unit = IncidentWave(wave.frequency, 1.0, wave.theta_inc, wave.phi_inc)
    E = incident_field(unit, lv.positions) if wave.amplitude > 0 else np.zeros((lv.n, 3), complex)
    cols = [E.real, E.imag, lv.normals, lv.inv_density, lv.curvature]
    if use_coordinates:
        cols.append(lv.positions - lv.positions.mean(axis=0))
    return np.concatenate(cols, axis=1)


# --------------------------------------------------------------------------
# Blocks


class PointAttentionBlock(L.Module):
    def __init__(self, store, prefix, n_in: int, width: int, cfg: UPINetConfig):
        super().__init__(store, prefix)
        self.density = L.FFN2(store, f"{prefix}.density", 1, cfg.density_hidden, 1, cfg.ffn_activation)
        self.normal = L.FFN2(store, f"{prefix}.normal", 3, cfg.normal_hidden, 1, cfg.ffn_activation)
        self.proj = L.Linear(store, f"{prefix}.proj", 3 * n_in, width)

    def normal_attention(self, x: Tensor, lv: LevelOps, return_attention: bool = False):
        f = self.normal
        if f.activation is None:
            # linear map of n_j - n_i splits into per-node terms: logit = u.n_j - u.n_i + c
            u = T.matmul(f.W1, f.W2)
            s = T.reshape(T.matmul(lv.normals, u), (lv.n,))
            if return_attention:
                c = T.matmul(T.reshape(f.b1, (1, -1)), f.W2) + f.b2
                return lv.attend(T.reshape(c, (1,)) - s, s, x, None, False, True)
            return lv.attend_separable(s, x)
        rows, cols = lv.rows, lv.indices
        logits = T.reshape(f(lv.normals[cols] - lv.normals[rows]), (-1,))
        alpha = T.csr_segment_softmax(logits, lv.indptr)
        out = T.csr_spmm(alpha, cols, lv.indptr, x)
        return (out, alpha) if return_attention else out

    def __call__(self, x: Tensor, lv: LevelOps) -> Tensor:
        scale = self.density(lv.inv_density)  # (n, 1)
        agg = self.normal_attention(x, lv)
        return self.proj(T.concat([x, x * scale, agg], axis=1))


class LocalPropagationBlock(L.Module):
    def __init__(self, store, prefix, width: int, bn_running_stats: bool = False):
        super().__init__(store, prefix)
        self.gat = L.GAT(store, f"{prefix}.gat", width, width)
        self.bn1 = L.BatchNorm(store, f"{prefix}.bn1", width, bn_running_stats)
        self.gcn1 = L.GCN(store, f"{prefix}.gcn1", width, width)
        self.bn2 = L.BatchNorm(store, f"{prefix}.bn2", width, bn_running_stats)
        self.gcn2 = L.GCN(store, f"{prefix}.gcn2", width, width)
        self.out = L.Linear(store, f"{prefix}.out", width, width)

    def __call__(self, h: Tensor, lv: LevelOps, edge_constraint: bool) -> Tensor:
        g = self.gat
        Wh = T.matmul(h, g.W)
        s = T.reshape(T.matmul(Wh, g.a_dst), (lv.n,))
        t = T.reshape(T.matmul(Wh, g.a_src), (lv.n,))
        h = lv.attend(s, t, Wh, edge_constraint, leaky=True)
        h = T.elu(self.bn1(h))
        A = lv.adjacency(edge_constraint)
        h = T.elu(self.bn2(self.gcn1(h, A)))
        h = self.gcn2(h, A)
        return self.out(h)


class Translation(L.Module):
    def __init__(self, store, prefix, width: int, heads: int):
        super().__init__(store, prefix)
        self.mha = L.MultiHeadAttention(store, f"{prefix}.mha", width, heads)
        self.ffn = L.FFN2(store, f"{prefix}.ffn", width, width, width, "elu")

    def __call__(self, near: Tensor, expanded: Tensor | None, kv_source: str = "sum") -> Tensor:
        if expanded is None:
            kv = near
        elif kv_source == "sum":
            kv = near + expanded
        else:
            kv = expanded
        a = self.mha(near, kv, kv)
        return a + self.ffn(a)


# --------------------------------------------------------------------------
# Model


class UPINet:
    def __init__(self, config: UPINetConfig, store: ParameterStore | None = None):
        self.config = config
        self.store = store or ParameterStore(config.seed)
        s, w = self.store, config.width
        self.pab, self.lpb, self.trans, self.kpconv = [], [], [], []
        for l in range(config.levels):
            n_in = config.n_inputs if l == 0 else w
            self.pab.append(PointAttentionBlock(s, f"down{l}.pab", n_in, w, config))
            self.lpb.append(LocalPropagationBlock(s, f"down{l}.lpb", w, config.bn_running_stats))
        for l in range(config.levels):
            self.trans.append(Translation(s, f"up{l}.translate", w, config.heads))
        for l in range(config.levels - 1):
            self.kpconv.append(L.KPConv(s, f"up{l}.kpconv", w, w, config.kpconv_kernels))
        self.head = L.Linear(s, "head", w, N_CHANNELS)
        self._bns = [b for blk in self.lpb for b in (blk.bn1, blk.bn2)]

    def train(self, mode: bool = True) -> UPINet:
        for b in self._bns:
            b.training = mode
        return self

    def eval(self) -> UPINet:
        return self.train(False)

    @property
    def training(self) -> bool:
        return self._bns[0].training

    def channels(self, ctx: MeshContext, wave: IncidentWave, features: np.ndarray | None = None,
                 near_override: dict | None = None) -> Tensor:
        """Differentiable (K, 6) prediction in A/m.

        ``near_override`` maps level -> tensor replacing the skip-connection
        term on the up path (used to check that the skip ablation disconnects it).
        """
        cfg = self.config
        depth = min(cfg.levels, ctx.depth)
        x = T.Tensor(input_features(ctx, wave, cfg.use_coordinates) if features is None else features)
        near = []
        for l in range(depth):
            lv = ctx.levels[l]
            if l > 0:
                x = T.sparse_matmul(ctx.pool[l - 1], near[-1])
            h = self.pab[l](x, lv)
            near.append(self.lpb[l](h, lv, cfg.edge_constraint))
        carried = None
        for l in reversed(range(depth)):
            expanded = None
            if carried is not None:
                expanded = self.kpconv[l](carried, ctx.influence(l, cfg.kpconv_kernels))
            far = self.trans[l](near[l], expanded, cfg.kv_source)
            if cfg.skip_connections:
                skip = near[l] if near_override is None or l not in near_override else near_override[l]
                far = far + skip
            carried = far
        out = self.head(carried)
        out = out * (2.0 * wave.amplitude / ETA0)
        # tangential projection of the Re and Im parts: (K, 3, 2) -> P (K, 3, 3) @ ...
        K = ctx.levels[0].n
        n = ctx.levels[0].normals
        P = np.eye(3)[None] - n[:, :, None] * n[:, None, :]
        return T.reshape(T.matmul(P, T.reshape(out, (K, 3, 2))), (K, N_CHANNELS))

    def predict(self, ctx: MeshContext, wave: IncidentWave) -> SurfaceCurrentField:
        with no_grad():
            ch = self.channels(ctx, wave)
        return SurfaceCurrentField.from_channels(ch.data)


__all__ = [
    "ConfigError", "LevelOps", "LocalPropagationBlock", "MeshContext", "N_CHANNELS", "PointAttentionBlock",
    "Translation", "UPINet", "UPINetConfig", "input_features", "prepare_mesh",
    "with_unit_weights",
]
