"""Multi-resolution point hierarchy.

Level 0 holds every point of the cloud. Points at level ``l`` are binned into
cubes of edge ``(lambda / 2) * 2**l`` on a grid anchored at the bounding-box
minimum of the whole cloud; level ``l + 1`` keeps one representative per
occupied level-``l`` cube, and ``parent_map`` sends each level-``l`` point to
the representative of its cube. Near lists pair points whose cubes touch
(Chebyshev cube distance <= 1).
"""
from __future__ import annotations

import json
from dataclasses import dataclass
from itertools import product
from typing import Sequence

import numpy as np

from . import kernels
from .geometry import PointCloud

FORMAT_VERSION = 1
_OFFSETS = np.array(list(product((-1, 0, 1), repeat=3)), dtype=np.int64)


def _as_points(cloud) -> np.ndarray:
    pts = cloud.points if isinstance(cloud, PointCloud) else cloud
    return np.asarray(pts, dtype=np.float64).reshape(-1, 3)


def farthest_point_sampling(cloud, m: int, seed_index: int = 0) -> np.ndarray:
    """Greedy farthest point sampling; ties go to the lowest index.

    ``cloud`` may be a :class:`PointCloud` or an (N, 3) array.
    """
    pts = _as_points(cloud)
    n = len(pts)
    if not 1 <= m <= n:
        raise ValueError(f"m must lie in [1, {n}], got {m}")
    if not 0 <= seed_index < n:
        raise ValueError(f"seed index {seed_index} out of range for {n} points")
    return np.asarray(kernels.farthest_point_sampling(pts, int(m), int(seed_index)), dtype=np.int64)


def cube_coordinates(points: np.ndarray, anchor: np.ndarray, edge: float) -> np.ndarray:
    return np.floor((np.asarray(points) - anchor) / edge).astype(np.int64)


def neighbor_lists(coords: np.ndarray) -> list[np.ndarray]:
    """Indices whose integer cube coordinates are within Chebyshev distance 1, excluding self."""
    cells: dict[tuple, list[int]] = {}
    for i, c in enumerate(map(tuple, coords)):
        cells.setdefault(c, []).append(i)
    out = []
    for i, c in enumerate(coords):
        found = []
        for off in _OFFSETS:
            found.extend(cells.get(tuple(c + off), ()))
        found = np.array(sorted(set(found) - {i}), dtype=np.int64)
        out.append(found)
    return out


@dataclass(frozen=True, eq=False)
class Level:
    point_indices: np.ndarray  # into the base cloud
    cube_edge: float
    cube_coords: np.ndarray  # (n, 3) integer grid coordinates
    leaf_assignment: np.ndarray  # point -> occupied-cube id (lexicographic cube order)
    parent_map: np.ndarray | None  # point -> index into the next level, None at the top
    near_lists: tuple[np.ndarray, ...]

    def __len__(self) -> int:
        return len(self.point_indices)

    @property
    def n_cubes(self) -> int:
        return int(self.leaf_assignment.max()) + 1 if len(self.leaf_assignment) else 0

    def edges(self) -> np.ndarray:
        """Undirected near pairs (i < j), row-sorted."""
        rows = [(i, j) for i, nb in enumerate(self.near_lists) for j in nb if j > i]
        return np.array(rows, dtype=np.int64).reshape(-1, 2)


@dataclass(frozen=True, eq=False)
class LevelHierarchy:
    levels: tuple[Level, ...]
    anchor: np.ndarray
    wavelength: float
    seed_index: int = 0

    def __len__(self) -> int:
        return len(self.levels)

    @property
    def sizes(self) -> list[int]:
        return [len(lv) for lv in self.levels]

    def positions(self, cloud: PointCloud, level: int) -> np.ndarray:
        return cloud.points[self.levels[level].point_indices]

    def to_dict(self) -> dict:
        return {
            "format_version": FORMAT_VERSION,
            "wavelength": self.wavelength,
            "seed_index": self.seed_index,
            "anchor": [float(x) for x in self.anchor],
            "levels": [
                {
                    "level": l,
                    "cube_edge": lv.cube_edge,
                    "point_indices": lv.point_indices.tolist(),
                    "cube_coords": lv.cube_coords.tolist(),
                    "leaf_assignment": lv.leaf_assignment.tolist(),
                    "parent_map": None if lv.parent_map is None else lv.parent_map.tolist(),
                    "near_lists": [nb.tolist() for nb in lv.near_lists],
                }
                for l, lv in enumerate(self.levels)
            ],
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))

    def save(self, path, metadata: dict | None = None) -> None:
        """Write JSON; ``metadata`` keys are stored alongside and ignored on load."""
        d = self.to_dict()
        if metadata:
            d.update({k: v for k, v in metadata.items() if k not in d})
        with open(path, "w") as fh:
            fh.write(json.dumps(d, sort_keys=True, separators=(",", ":")))
            fh.write("\n")

    @classmethod
    def from_dict(cls, d: dict) -> LevelHierarchy:
        if d.get("format_version") != FORMAT_VERSION:
            raise ValueError(f"unsupported hierarchy format {d.get('format_version')!r}")
        levels = []
        for rec in d["levels"]:
            levels.append(Level(
                np.asarray(rec["point_indices"], dtype=np.int64),
                float(rec["cube_edge"]),
                np.asarray(rec["cube_coords"], dtype=np.int64).reshape(-1, 3),
                np.asarray(rec["leaf_assignment"], dtype=np.int64),
                None if rec["parent_map"] is None else np.asarray(rec["parent_map"], dtype=np.int64),
                tuple(np.asarray(nb, dtype=np.int64) for nb in rec["near_lists"]),
            ))
        return cls(tuple(levels), np.asarray(d["anchor"], dtype=float), float(d["wavelength"]), int(d["seed_index"]))

    @classmethod
    def load(cls, path) -> LevelHierarchy:
        with open(path) as fh:
            return cls.from_dict(json.load(fh))


def _bin(coords: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Occupied cubes in lexicographic order and each point's cube id."""
    cubes, inverse = np.unique(coords, axis=0, return_inverse=True)
    return cubes, inverse.reshape(-1)


def _representatives(pts, coords, cube_ids, cubes, anchor, edge, seed) -> np.ndarray:
    """One member per occupied cube: the FPS pick nearest the cube centre, else the nearest member."""
    picks = set(kernels.farthest_point_sampling(pts, len(cubes), seed).tolist())
    reps = np.empty(len(cubes), dtype=np.int64)
    for c in range(len(cubes)):
        members = np.flatnonzero(cube_ids == c)
        pool = [i for i in members if i in picks] or list(members)
        centre = anchor + (cubes[c] + 0.5) * edge
        d = np.sum((pts[pool] - centre) ** 2, axis=1)
        reps[c] = pool[int(np.argmin(d))]  # argmin: first (lowest index) on ties
    return reps


def build_octree(cloud, wavelength: float, max_levels: int = 3, seed_index: int = 0) -> LevelHierarchy:
    """Build the level hierarchy; stops early once a level would not shrink or holds one point."""
    pts = _as_points(cloud)
    if len(pts) == 0:
        raise ValueError("cloud is empty")
    if not wavelength > 0:
        raise ValueError("wavelength must be positive")
    if max_levels < 1:
        raise ValueError("max_levels must be at least 1")
    anchor = pts.min(axis=0)
    leaf = wavelength / 2.0

    idx = np.arange(len(pts), dtype=np.int64)
    seed = int(seed_index)
    levels: list[dict] = []
    for l in range(max_levels):
        edge = leaf * 2.0**l
        sub = pts[idx]
        coords = cube_coordinates(sub, anchor, edge)
        cubes, cube_ids = _bin(coords)
        levels.append(dict(point_indices=idx, cube_edge=edge, cube_coords=coords,
                           leaf_assignment=cube_ids, near_lists=tuple(neighbor_lists(coords))))
        if l == max_levels - 1 or len(idx) == 1 or len(cubes) == len(idx):
            break
        reps = _representatives(sub, coords, cube_ids, cubes, anchor, edge, seed)
        levels[-1]["parent_map"] = cube_ids  # cube c's representative is next-level point c
        idx = idx[reps]
        seed = 0
    out = [Level(parent_map=lv.pop("parent_map", None), **lv) for lv in levels]
    return LevelHierarchy(tuple(out), anchor, float(wavelength), int(seed_index))


def brute_force_near_lists(points: np.ndarray, anchor: np.ndarray, edge: float) -> list[np.ndarray]:
    """O(n^2) reference for :func:`neighbor_lists`."""
    c = cube_coordinates(points, anchor, edge)
    cheb = np.max(np.abs(c[:, None, :] - c[None, :, :]), axis=2)
    np.fill_diagonal(cheb, 2)
    return [np.flatnonzero(row <= 1) for row in cheb]


def children(parent_map: np.ndarray, n_parents: int) -> list[np.ndarray]:
    return [np.flatnonzero(parent_map == p) for p in range(n_parents)]


__all__: Sequence[str] = [
    "Level",
    "LevelHierarchy",
    "brute_force_near_lists",
    "build_octree",
    "children",
    "cube_coordinates",
    "farthest_point_sampling",
    "neighbor_lists",
]
