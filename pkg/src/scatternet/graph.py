"""Weighted point graphs over one hierarchy level.

Edges are the near pairs of the level. Each edge carries its length ``delta``,
a curvature similarity ``S = exp(-|kappa_i - kappa_j| / sigma_kappa)`` and the
weight ``w = S / (1 + alpha * delta)`` with ``alpha = 1 / mean(delta)``. Nodes
carry a Gaussian KDE density, its normalised inverse and a curvature proxy
(mean angle between the node normal and its neighbours' normals).
"""
from __future__ import annotations

import csv
import math
from dataclasses import dataclass, replace
from typing import Sequence

import numpy as np
from scipy.spatial import cKDTree

from .geometry import PointCloud
from .hierarchy import LevelHierarchy

_KDE_NORM = (2.0 * math.pi) ** 1.5
KAPPA_TOL = 1e-12  # rad; mean curvature differences below this count as zero


class EmptyNeighborhoodError(ValueError):
    pass


def _pairs_from_lists(neighborhoods: Sequence[Sequence[int]], include_self: bool) -> tuple[np.ndarray, np.ndarray]:
    rows, cols = [], []
    for i, nb in enumerate(neighborhoods):
        nb = np.asarray(nb, dtype=np.int64)
        if include_self and not np.any(nb == i):
            nb = np.concatenate([[i], nb])
        rows.append(np.full(len(nb), i, dtype=np.int64))
        cols.append(nb)
    if not rows:
        return np.zeros(0, np.int64), np.zeros(0, np.int64)
    return np.concatenate(rows), np.concatenate(cols)


def mean_nn_distance(points: np.ndarray) -> float:
    """Mean distance to the nearest distinct point; 0 if there is none."""
    pts = np.asarray(points, dtype=float).reshape(-1, 3)
    if len(pts) < 2:
        return 0.0
    d, _ = cKDTree(pts).query(pts, k=2)
    return float(np.mean(d[:, 1]))


def default_bandwidth(points: np.ndarray) -> float:
    h = mean_nn_distance(points)
    return h if h > 0 else 1.0  # single or fully coincident points: any h gives uniform density


def kde_density(points, neighborhoods: Sequence[Sequence[int]], h: float) -> np.ndarray:
    """Gaussian KDE per point over its neighbourhood (self always included), 1/m^3."""
    if not h > 0:
        raise ValueError("bandwidth must be positive")
    pts = np.asarray(points.points if isinstance(points, PointCloud) else points, dtype=float).reshape(-1, 3)
    if len(neighborhoods) != len(pts):
        raise ValueError("one neighbourhood per point required")
    rows, cols = _pairs_from_lists(neighborhoods, include_self=True)
    d2 = np.sum((pts[rows] - pts[cols]) ** 2, axis=1)
    total = np.bincount(rows, weights=np.exp(-0.5 * d2 / (h * h)), minlength=len(pts))
    count = np.bincount(rows, minlength=len(pts))
    return total / (count * h**3 * _KDE_NORM)


def normalized_inverse_density(density) -> np.ndarray:
    f = np.asarray(density, dtype=float)
    if f.size == 0:
        return f.copy()
    if np.any(~(f > 0)):
        raise ValueError("densities must be positive")
    inv = 1.0 / f
    return inv / inv.max()


def curvature_proxy(normals, neighborhoods: Sequence[Sequence[int]], isolated: str = "error") -> np.ndarray:
    """Mean angle (rad) between each normal and its neighbours' normals.

    ``isolated="zero"`` assigns 0 to nodes without neighbours instead of raising.
    """
    n = np.asarray(normals.normals if isinstance(normals, PointCloud) else normals, dtype=float).reshape(-1, 3)
    rows, cols = _pairs_from_lists(neighborhoods, include_self=False)
    keep = rows != cols
    rows, cols = rows[keep], cols[keep]
    count = np.bincount(rows, minlength=len(n))
    if np.any(count == 0) and isolated != "zero":
        raise EmptyNeighborhoodError(f"node {int(np.argmin(count))} has no neighbours")
    ang = np.arccos(np.clip(np.einsum("ij,ij->i", n[rows], n[cols]), -1.0, 1.0))
    total = np.bincount(rows, weights=ang, minlength=len(n))
    return np.divide(total, count, out=np.zeros(len(n)), where=count > 0)


@dataclass(frozen=True, eq=False)
class PhysicsGraph:
    """Undirected weighted graph; ``edges`` rows are (i, j) with i < j."""

    positions: np.ndarray
    normals: np.ndarray
    edges: np.ndarray
    delta: np.ndarray
    similarity: np.ndarray
    weights: np.ndarray
    density: np.ndarray
    inv_density: np.ndarray
    curvature: np.ndarray
    node_indices: np.ndarray | None = None

    @property
    def n_nodes(self) -> int:
        return len(self.positions)

    @property
    def n_edges(self) -> int:
        return len(self.edges)

    def unit_weights(self) -> PhysicsGraph:
        """Copy with every edge weight set to 1 (the edge-constraint ablation)."""
        return replace(self, weights=np.ones_like(self.weights))

    def directed(self, self_loops_for_isolated: bool = True):
        """Both edge directions as ``(row, col, weight)`` sorted by (row, col).

        Message passing aggregates over ``col`` into ``row``. Isolated nodes get
        a unit-weight self loop when requested.
        """
        i, j = self.edges[:, 0], self.edges[:, 1]
        rows = np.concatenate([i, j])
        cols = np.concatenate([j, i])
        w = np.concatenate([self.weights, self.weights])
        if self_loops_for_isolated:
            lone = np.flatnonzero(np.bincount(rows, minlength=self.n_nodes) == 0)
            rows = np.concatenate([rows, lone])
            cols = np.concatenate([cols, lone])
            w = np.concatenate([w, np.ones(len(lone))])
        order = np.lexsort((cols, rows))
        return rows[order], cols[order], w[order]

    def neighbor_lists(self) -> list[np.ndarray]:
        rows, cols, _ = self.directed(self_loops_for_isolated=False)
        split = np.searchsorted(rows, np.arange(1, self.n_nodes))
        return np.split(cols, split)

    def write_csv(self, edge_path, node_path, header_comment: str | None = None) -> None:
        with open(edge_path, "w", newline="") as fh:
            if header_comment:
                fh.write(f"# {header_comment}\n")
            wr = csv.writer(fh)
            wr.writerow(["i", "j", "delta_m", "S", "w"])
            for (i, j), d, s, w in zip(self.edges, self.delta, self.similarity, self.weights):
                wr.writerow([int(i), int(j), repr(float(d)), repr(float(s)), repr(float(w))])
        with open(node_path, "w", newline="") as fh:
            if header_comment:
                fh.write(f"# {header_comment}\n")
            wr = csv.writer(fh)
            wr.writerow(["node", "x", "y", "z", "nx", "ny", "nz", "density", "D_norm", "kappa"])
            for k in range(self.n_nodes):
                vals = [*self.positions[k], *self.normals[k], self.density[k], self.inv_density[k], self.curvature[k]]
                wr.writerow([k] + [repr(float(v)) for v in vals])


def edge_weights(points, neighborhoods: Sequence[Sequence[int]], curvature, normals=None,
                 density=None, node_indices=None) -> PhysicsGraph:
    """Build the weighted graph from near lists and per-node curvature."""
    pts = np.asarray(points.points if isinstance(points, PointCloud) else points, dtype=float).reshape(-1, 3)
    kappa = np.asarray(curvature, dtype=float)
    rows, cols = _pairs_from_lists(neighborhoods, include_self=False)
    keep = rows < cols
    edges = np.unique(np.stack([rows[keep], cols[keep]], axis=1), axis=0).reshape(-1, 2)
    i, j = edges[:, 0], edges[:, 1]
    delta = np.sqrt(np.sum((pts[i] - pts[j]) ** 2, axis=1))
    mean_delta = float(np.mean(delta)) if len(delta) else 0.0
    dk = np.abs(kappa[i] - kappa[j])
    sigma = float(np.mean(dk)) if len(dk) else 0.0
    if sigma <= KAPPA_TOL:
        # constant curvature up to rounding: normalising by the noise would amplify it
        sigma = 1.0
    S = np.exp(-dk / sigma)
    # delta / mean(delta) rather than alpha * delta keeps the ratio exactly scale-free
    scaled = delta / mean_delta if mean_delta > 0 else np.zeros_like(delta)
    w = S / (1.0 + scaled)
    nrm = np.zeros_like(pts) if normals is None else np.asarray(normals, dtype=float).reshape(-1, 3)
    dens = np.ones(len(pts)) if density is None else np.asarray(density, dtype=float)
    return PhysicsGraph(pts, nrm, edges, delta, S, w, dens, normalized_inverse_density(dens), kappa,
                        None if node_indices is None else np.asarray(node_indices, dtype=np.int64))


def build_graph(cloud: PointCloud, neighborhoods: Sequence[Sequence[int]], bandwidth: float | None = None,
                node_indices=None) -> PhysicsGraph:
    """Full attribute pipeline for one point set; isolated nodes get curvature 0."""
    h = default_bandwidth(cloud.points) if bandwidth is None else bandwidth
    dens = kde_density(cloud.points, neighborhoods, h)
    kappa = curvature_proxy(cloud.normals, neighborhoods, isolated="zero")
    return edge_weights(cloud.points, neighborhoods, kappa, cloud.normals, dens, node_indices)


def build_level_graphs(cloud: PointCloud, hierarchy: LevelHierarchy) -> list[PhysicsGraph]:
    out = []
    for lv in hierarchy.levels:
        sub = cloud.subset(lv.point_indices)
        out.append(build_graph(sub, lv.near_lists, node_indices=lv.point_indices))
    return out


__all__ = [
    "EmptyNeighborhoodError",
    "PhysicsGraph",
    "build_graph",
    "build_level_graphs",
    "curvature_proxy",
    "default_bandwidth",
    "edge_weights",
    "kde_density",
    "mean_nn_distance",
    "normalized_inverse_density",
]
