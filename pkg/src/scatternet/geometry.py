"""Triangle meshes, canonical PEC shapes and per-face geometric attributes.

Meshes are immutable. Every mesh carries its per-face centroid, unit normal and
area, computed once at construction. Faces follow the right-hand rule; the
generated closed shapes are oriented with outward normals.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping, NamedTuple, Sequence

import numpy as np

MIN_FACE_AREA = 1e-12


class MeshError(ValueError):
    """Malformed mesh input."""


class MeshParseError(MeshError):
    pass


class DegenerateFaceError(MeshError):
    def __init__(self, face_index: int, area: float):
        super().__init__(f"face {face_index} is degenerate (area {area:.3e} m^2)")
        self.face_index = face_index
        self.area = area


class NonManifoldEdgeError(MeshError):
    def __init__(self, edge: tuple[int, int], faces: Sequence[int]):
        super().__init__(f"edge {edge} is shared by {len(faces)} faces {list(faces)}")
        self.edge = edge
        self.faces = tuple(faces)


@dataclass(frozen=True, eq=False)
class TriangleMesh:
    """Triangulated surface in meters.

    ``centroids``, ``normals`` and ``areas`` are derived in ``__post_init__``
    and validated there; a zero-area face raises :class:`DegenerateFaceError`.
    """

    vertices: np.ndarray
    faces: np.ndarray
    centroids: np.ndarray = field(init=False, repr=False)
    normals: np.ndarray = field(init=False, repr=False)
    areas: np.ndarray = field(init=False, repr=False)

    def __post_init__(self):
        vertices = np.ascontiguousarray(self.vertices, dtype=np.float64).reshape(-1, 3)
        faces = np.ascontiguousarray(self.faces, dtype=np.int64).reshape(-1, 3)
        if faces.size and (faces.min() < 0 or faces.max() >= len(vertices)):
            raise MeshError("face index out of range")
        tri = vertices[faces]
        cross = np.cross(tri[:, 1] - tri[:, 0], tri[:, 2] - tri[:, 0])
        twice_area = np.linalg.norm(cross, axis=1)
        areas = 0.5 * twice_area
        bad = np.flatnonzero(~(areas > MIN_FACE_AREA))
        if bad.size:
            raise DegenerateFaceError(int(bad[0]), float(areas[bad[0]]))
        vertices.setflags(write=False)
        faces.setflags(write=False)
        object.__setattr__(self, "vertices", vertices)
        object.__setattr__(self, "faces", faces)
        derived = {
            "centroids": tri.mean(axis=1),
            "normals": cross / twice_area[:, None],
            "areas": areas,
        }
        for name, value in derived.items():
            value.setflags(write=False)
            object.__setattr__(self, name, value)

    @property
    def n_faces(self) -> int:
        return len(self.faces)

    @property
    def n_vertices(self) -> int:
        return len(self.vertices)

    @property
    def total_area(self) -> float:
        return float(self.areas.sum())

    def edge_lengths(self) -> np.ndarray:
        """Lengths of the unique undirected edges."""
        edges = unique_edges(self.faces)
        return np.linalg.norm(self.vertices[edges[:, 0]] - self.vertices[edges[:, 1]], axis=1)

    def mean_edge_length(self) -> float:
        return float(self.edge_lengths().mean())

    def euler_characteristic(self) -> int:
        return self.n_vertices - len(unique_edges(self.faces)) + self.n_faces

    def is_closed(self) -> bool:
        _, counts = np.unique(_sorted_edges(self.faces), axis=0, return_counts=True)
        return bool(np.all(counts == 2))

    def translated(self, offset: Sequence[float]) -> TriangleMesh:
        return TriangleMesh(self.vertices + np.asarray(offset, dtype=float), self.faces)

    def rotated(self, rotation: np.ndarray) -> TriangleMesh:
        return TriangleMesh(self.vertices @ np.asarray(rotation, dtype=float).T, self.faces)

    def scaled(self, factor: float) -> TriangleMesh:
        return TriangleMesh(self.vertices * factor, self.faces)


@dataclass(frozen=True, eq=False)
class PointCloud:
    points: np.ndarray
    normals: np.ndarray
    areas: np.ndarray
    features: np.ndarray | None = None

    def __post_init__(self):
        pts = np.asarray(self.points, dtype=np.float64).reshape(-1, 3)
        nrm = np.asarray(self.normals, dtype=np.float64).reshape(-1, 3)
        ar = np.asarray(self.areas, dtype=np.float64).reshape(-1)
        if not (len(pts) == len(nrm) == len(ar)):
            raise ValueError("points, normals and areas must have equal length")
        if np.any(ar <= 0):
            raise ValueError("point areas must be positive")
        object.__setattr__(self, "points", pts)
        object.__setattr__(self, "normals", nrm)
        object.__setattr__(self, "areas", ar)
        if self.features is not None:
            feats = np.asarray(self.features, dtype=np.float64)
            if len(feats) != len(pts):
                raise ValueError("features must have one row per point")
            object.__setattr__(self, "features", feats)

    def __len__(self) -> int:
        return len(self.points)

    def subset(self, indices: Sequence[int]) -> PointCloud:
        idx = np.asarray(indices, dtype=np.int64)
        feats = None if self.features is None else self.features[idx]
        return PointCloud(self.points[idx], self.normals[idx], self.areas[idx], feats)


class RWGEdge(NamedTuple):
    face_a: int
    face_b: int
    vertices: tuple[int, int]
    length: float


def _sorted_edges(faces: np.ndarray) -> np.ndarray:
    e = np.concatenate([faces[:, [0, 1]], faces[:, [1, 2]], faces[:, [2, 0]]])
    return np.sort(e, axis=1)


def unique_edges(faces: np.ndarray) -> np.ndarray:
    return np.unique(_sorted_edges(np.asarray(faces)), axis=0)


def to_point_cloud(mesh: TriangleMesh) -> PointCloud:
    """One point per face at its centroid, in face order."""
    return PointCloud(mesh.centroids.copy(), mesh.normals.copy(), mesh.areas.copy())


def rwg_edges(mesh: TriangleMesh) -> list[RWGEdge]:
    """Interior edges (shared by exactly two faces), sorted by vertex pair.

    Boundary edges are skipped. An edge with more than two incident faces
    raises :class:`NonManifoldEdgeError`.
    """
    incident: dict[tuple[int, int], list[int]] = {}
    for f, tri in enumerate(mesh.faces.tolist()):
        for a, b in ((tri[0], tri[1]), (tri[1], tri[2]), (tri[2], tri[0])):
            key = (a, b) if a < b else (b, a)
            incident.setdefault(key, []).append(f)
    out = []
    for key in sorted(incident):
        fs = incident[key]
        if len(fs) > 2:
            raise NonManifoldEdgeError(key, fs)
        if len(fs) == 2:
            length = float(np.linalg.norm(mesh.vertices[key[0]] - mesh.vertices[key[1]]))
            out.append(RWGEdge(fs[0], fs[1], key, length))
    return out


# --------------------------------------------------------------------------
# File I/O


def load_mesh(path: str | Path, format: str | None = None) -> TriangleMesh:
    """Read an ASCII OFF or OBJ triangle mesh.

    Non-triangular faces are rejected, not split.
    """
    path = Path(path)
    fmt = (format or path.suffix.lstrip(".")).upper()
    text = path.read_text()
    if fmt == "OFF":
        vertices, faces = _parse_off(text)
    elif fmt == "OBJ":
        vertices, faces = _parse_obj(text)
    else:
        raise MeshParseError(f"unsupported mesh format {fmt!r}")
    return TriangleMesh(vertices, faces)


def _parse_off(text: str):
    tokens = []
    for line in text.splitlines():
        line = line.split("#", 1)[0].strip()
        if line:
            tokens.append(line)
    if not tokens or not tokens[0].startswith("OFF"):
        raise MeshParseError("missing OFF header")
    header = tokens[0][3:].split()
    body = tokens[1:]
    if not header:
        if not body:
            raise MeshParseError("missing OFF counts")
        header, body = body[0].split(), body[1:]
    try:
        nv, nf = int(header[0]), int(header[1])
    except (IndexError, ValueError) as exc:
        raise MeshParseError("bad OFF counts line") from exc
    if len(body) < nv + nf:
        raise MeshParseError(f"expected {nv} vertices and {nf} faces, got {len(body)} lines")
    try:
        vertices = [[float(x) for x in body[i].split()[:3]] for i in range(nv)]
    except ValueError as exc:
        raise MeshParseError("bad vertex line") from exc
    if any(len(v) != 3 for v in vertices):
        raise MeshParseError("vertex lines need three coordinates")
    faces = []
    for i in range(nf):
        parts = body[nv + i].split()
        try:
            n = int(parts[0])
            idx = [int(x) for x in parts[1 : 1 + n]]
        except (IndexError, ValueError) as exc:
            raise MeshParseError(f"bad face line {i}") from exc
        if n != 3 or len(idx) != 3:
            raise MeshParseError(f"face {i} has {n} vertices; only triangles are supported")
        faces.append(idx)
    return np.array(vertices, dtype=float).reshape(-1, 3), np.array(faces, dtype=np.int64).reshape(-1, 3)


def _parse_obj(text: str):
    vertices, faces = [], []
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].split()
        if not line:
            continue
        tag, rest = line[0], line[1:]
        try:
            if tag == "v":
                if len(rest) < 3:
                    raise MeshParseError(f"line {lineno}: vertex needs three coordinates")
                vertices.append([float(x) for x in rest[:3]])
            elif tag == "f":
                if len(rest) != 3:
                    raise MeshParseError(
                        f"line {lineno}: face has {len(rest)} vertices; only triangles are supported"
                    )
                idx = []
                for token in rest:
                    i = int(token.split("/")[0])
                    idx.append(i - 1 if i > 0 else len(vertices) + i)
                faces.append(idx)
        except ValueError as exc:
            raise MeshParseError(f"line {lineno}: {raw.strip()!r}") from exc
    return np.array(vertices, dtype=float).reshape(-1, 3), np.array(faces, dtype=np.int64).reshape(-1, 3)


def write_off(mesh: TriangleMesh, path: str | Path, header_comment: str | None = None) -> None:
    lines = ["OFF"] + ([f"# {header_comment}"] if header_comment else []) + [f"{mesh.n_vertices} {mesh.n_faces} 0"]
    lines += [" ".join(repr(float(x)) for x in v) for v in mesh.vertices]
    lines += ["3 " + " ".join(str(int(i)) for i in f) for f in mesh.faces]
    Path(path).write_text("\n".join(lines) + "\n")


# --------------------------------------------------------------------------
# Shape generation


class _VertexPool:
    """Deduplicates vertices that coincide to 1e-9 relative to ``scale``."""

    def __init__(self, scale: float):
        self.quantum = 1e-9 * max(scale, 1e-12)
        self.index: dict[tuple[int, int, int], int] = {}
        self.points: list[np.ndarray] = []

    def add(self, p) -> int:
        p = np.asarray(p, dtype=float)
        key = tuple(int(round(c / self.quantum)) for c in p)
        if key not in self.index:
            self.index[key] = len(self.points)
            self.points.append(p)
        return self.index[key]

    def array(self) -> np.ndarray:
        return np.array(self.points, dtype=float).reshape(-1, 3)


def _orient_outward(vertices: np.ndarray, faces: np.ndarray, center: np.ndarray) -> np.ndarray:
    """Flip faces whose normal points toward ``center`` (valid for convex solids)."""
    tri = vertices[faces]
    normal = np.cross(tri[:, 1] - tri[:, 0], tri[:, 2] - tri[:, 0])
    flip = np.einsum("ij,ij->i", normal, tri.mean(axis=1) - center) < 0
    faces = faces.copy()
    faces[flip] = faces[flip][:, [0, 2, 1]]
    return faces


def _icosahedron():
    t = (1.0 + 5.0**0.5) / 2.0
    v = np.array(
        [[-1, t, 0], [1, t, 0], [-1, -t, 0], [1, -t, 0],
         [0, -1, t], [0, 1, t], [0, -1, -t], [0, 1, -t],
         [t, 0, -1], [t, 0, 1], [-t, 0, -1], [-t, 0, 1]],
        dtype=float,
    )
    f = [[0, 11, 5], [0, 5, 1], [0, 1, 7], [0, 7, 10], [0, 10, 11],
         [1, 5, 9], [5, 11, 4], [11, 10, 2], [10, 7, 6], [7, 1, 8],
         [3, 9, 4], [3, 4, 2], [3, 2, 6], [3, 6, 8], [3, 8, 9],
         [4, 9, 5], [2, 4, 11], [6, 2, 10], [8, 6, 7], [9, 8, 1]]
    return v / np.linalg.norm(v, axis=1, keepdims=True), f


def _sphere(radius: float, frequency: int) -> TriangleMesh:
    """Geodesic sphere: each icosahedron face split into ``frequency**2`` triangles."""
    base, base_faces = _icosahedron()
    pool = _VertexPool(radius)
    faces = []
    n = frequency
    for a, b, c in base_faces:
        A, B, C = base[a], base[b], base[c]
        grid = {}
        for i in range(n + 1):
            for j in range(n + 1 - i):
                p = A + (B - A) * (i / n) + (C - A) * (j / n)
                grid[i, j] = pool.add(radius * p / np.linalg.norm(p))
        for i in range(n):
            for j in range(n - i):
                faces.append([grid[i, j], grid[i + 1, j], grid[i, j + 1]])
                if i + j < n - 1:
                    faces.append([grid[i + 1, j], grid[i + 1, j + 1], grid[i, j + 1]])
    v = pool.array()
    f = _orient_outward(v, np.array(faces, dtype=np.int64), np.zeros(3))
    return TriangleMesh(v, f)


def _cube(side: float, divisions: int) -> TriangleMesh:
    """Axis-aligned cube centred at the origin, each face an n x n quad grid split in two."""
    pool = _VertexPool(side)
    h = side / 2.0
    n = divisions
    faces = []
    ticks = np.linspace(-h, h, n + 1)
    for axis in range(3):
        u_ax, v_ax = [a for a in range(3) if a != axis]
        for sign in (-1.0, 1.0):
            grid = np.empty((n + 1, n + 1), dtype=np.int64)
            for i, u in enumerate(ticks):
                for j, v in enumerate(ticks):
                    p = np.zeros(3)
                    p[axis], p[u_ax], p[v_ax] = sign * h, u, v
                    grid[i, j] = pool.add(p)
            for i in range(n):
                for j in range(n):
                    a, b, c, d = grid[i, j], grid[i + 1, j], grid[i + 1, j + 1], grid[i, j + 1]
                    faces.append([a, b, c])
                    faces.append([a, c, d])
    v = pool.array()
    f = _orient_outward(v, np.array(faces, dtype=np.int64), np.zeros(3))
    return TriangleMesh(v, f)


def _plate(width: float, height: float, nx: int, ny: int) -> TriangleMesh:
    """Open rectangular plate in the z = 0 plane, normals along +z."""
    pool = _VertexPool(max(width, height))
    xs = np.linspace(-width / 2, width / 2, nx + 1)
    ys = np.linspace(-height / 2, height / 2, ny + 1)
    grid = [[pool.add([x, y, 0.0]) for y in ys] for x in xs]
    faces = []
    for i in range(nx):
        for j in range(ny):
            a, b, c, d = grid[i][j], grid[i + 1][j], grid[i + 1][j + 1], grid[i][j + 1]
            faces.append([a, b, c])
            faces.append([a, c, d])
    return TriangleMesh(pool.array(), np.array(faces, dtype=np.int64))


def _ring(pool: _VertexPool, radius: float, z: float, count: int, phase: float) -> list[tuple[int, float]]:
    if count == 1:
        return [(pool.add([0.0, 0.0, z]), 0.0)]
    out = []
    for i in range(count):
        ang = phase + 2.0 * math.pi * i / count
        out.append((pool.add([radius * math.cos(ang), radius * math.sin(ang), z]), ang))
    return out


def _stitch(inner: list[tuple[int, float]], outer: list[tuple[int, float]]) -> list[list[int]]:
    """Triangulate the band between two closed loops, zipping by angle."""
    if len(inner) == 1 or len(outer) == 1:
        apex, loop = (inner, outer) if len(inner) == 1 else (outer, inner)
        c = apex[0][0]
        return [[c, loop[i][0], loop[(i + 1) % len(loop)][0]] for i in range(len(loop))]
    na, nb = len(inner), len(outer)
    a_ang = [ang for _, ang in inner] + [inner[0][1] + 2 * math.pi]
    b_ang = [ang for _, ang in outer] + [outer[0][1] + 2 * math.pi]
    tris = []
    i = j = 0
    while i < na or j < nb:
        a0, b0 = inner[i % na][0], outer[j % nb][0]
        advance_a = j >= nb or (i < na and a_ang[i + 1] <= b_ang[j + 1])
        if advance_a:
            tris.append([a0, inner[(i + 1) % na][0], b0])
            i += 1
        else:
            tris.append([a0, outer[(j + 1) % nb][0], b0])
            j += 1
    return tris


def _revolved(profile: list[tuple[float, float]], target: float, scale: float) -> TriangleMesh:
    """Closed surface of revolution about z from a (radius, z) polyline.

    The polyline runs from a point on the axis to another point on the axis;
    every segment is subdivided to ``target`` length and every ring gets about
    ``2*pi*r / target`` vertices.
    """
    pool = _VertexPool(scale)
    rings: list[list[tuple[int, float]]] = []
    pts: list[tuple[float, float]] = []
    for (r0, z0), (r1, z1) in zip(profile[:-1], profile[1:]):
        seg = math.hypot(r1 - r0, z1 - z0)
        steps = max(1, round(seg / target))
        for s in range(steps):
            t = s / steps
            pts.append((r0 + (r1 - r0) * t, z0 + (z1 - z0) * t))
    pts.append(profile[-1])
    for idx, (r, z) in enumerate(pts):
        count = 1 if r < 1e-12 * scale else max(3, round(2 * math.pi * r / target))
        phase = (math.pi / count) * (idx % 2) if count > 1 else 0.0
        rings.append(_ring(pool, r, z, count, phase))
    faces = []
    for a, b in zip(rings[:-1], rings[1:]):
        faces.extend(_stitch(a, b))
    v = pool.array()
    f = np.array(faces, dtype=np.int64)
    center = np.array([0.0, 0.0, v[:, 2].mean()])
    f = _orient_outward(v, f, center)
    return TriangleMesh(v, f)


def _frustum(bottom: float, top: float, height: float, target: float) -> TriangleMesh:
    profile = [(0.0, 0.0), (bottom, 0.0), (top, height)]
    if top > 0:
        profile.append((0.0, height))
    return _revolved(profile, target, max(bottom, top, height))


def _best_resolution(build, estimate: float, target: float, lo: int = 1):
    """Build at integer resolutions around ``estimate`` and keep the closest mean edge."""
    base = max(lo, int(round(estimate)))
    best = None
    for res in sorted({max(lo, base - 1), base, base + 1}):
        mesh = build(res)
        err = abs(mesh.mean_edge_length() - target)
        if best is None or err < best[0]:
            best = (err, mesh)
    return best[1]


SHAPE_KINDS = ("sphere", "cube", "cone", "frustum", "cylinder", "plate", "assembly")


def _require(params: Mapping, *names: str) -> list[float]:
    out = []
    for name in names:
        if name not in params:
            raise ValueError(f"missing size parameter {name!r}")
        value = float(params[name])
        if not value > 0:
            raise ValueError(f"size parameter {name!r} must be positive, got {value}")
        out.append(value)
    return out


def generate_shape(kind: str, size_params: Mapping, target_edge_len: float) -> TriangleMesh:
    """Mesh a canonical PEC target with mean edge length near ``target_edge_len``.

    Kinds and their size parameters (meters):

    * ``sphere``: ``radius``
    * ``cube``: ``side``
    * ``cone``: ``radius``, ``height``
    * ``frustum``: ``bottom_radius``, ``top_radius``, ``height``
    * ``cylinder``: ``radius``, ``height``
    * ``plate``: ``width``, ``height`` (open surface, z = 0, normal +z)
    * ``assembly``: ``components``, a list of ``{"kind", "params", "offset"}``

    Simple shapes are centred on the origin (cones and frustums stand on the
    z = 0 plane).
    """
    if not target_edge_len > 0:
        raise ValueError("target_edge_len must be positive")
    t = float(target_edge_len)
    if kind == "sphere":
        (r,) = _require(size_params, "radius")
        # icosahedron edge on the unit sphere is 1.0515
        return _best_resolution(lambda f: _sphere(r, f), 1.0515 * r / t, t)
    if kind == "cube":
        (s,) = _require(size_params, "side")
        return _best_resolution(lambda n: _cube(s, n), 1.14 * s / t, t)
    if kind == "cone":
        r, h = _require(size_params, "radius", "height")
        return _frustum(r, 0.0, h, t)
    if kind == "frustum":
        rb, rt, h = _require(size_params, "bottom_radius", "top_radius", "height")
        if rt >= rb:
            raise ValueError("frustum top_radius must be smaller than bottom_radius")
        return _frustum(rb, rt, h, t)
    if kind == "cylinder":
        r, h = _require(size_params, "radius", "height")
        return _frustum(r, r, h, t)
    if kind == "plate":
        wd, ht = _require(size_params, "width", "height")
        return _best_resolution(
            lambda n: _plate(wd, ht, n, max(1, round(n * ht / wd))), 1.14 * wd / t, t
        )
    if kind == "assembly":
        comps = size_params.get("components")
        if not comps:
            raise ValueError("assembly needs a non-empty 'components' list")
        meshes = []
        for comp in comps:
            if comp.get("kind") == "assembly":
                raise ValueError("nested assemblies are not supported")
            m = generate_shape(comp["kind"], comp.get("params", {}), t)
            meshes.append(m.translated(comp.get("offset", (0.0, 0.0, 0.0))))
        return merge_meshes(meshes)
    raise ValueError(f"unknown shape kind {kind!r}; expected one of {SHAPE_KINDS}")


def merge_meshes(meshes: Sequence[TriangleMesh]) -> TriangleMesh:
    """Concatenate meshes without welding vertices."""
    verts, faces, offset = [], [], 0
    for m in meshes:
        verts.append(m.vertices)
        faces.append(m.faces + offset)
        offset += m.n_vertices
    return TriangleMesh(np.concatenate(verts), np.concatenate(faces))


def default_assembly(scale: float = 0.1) -> dict:
    """Cone on a cube next to a cylinder, sized by ``scale`` (m)."""
    s = scale
    return {
        "components": [
            {"kind": "cube", "params": {"side": 2 * s}, "offset": [0.0, 0.0, 0.0]},
            {"kind": "cone", "params": {"radius": s, "height": 1.5 * s}, "offset": [0.0, 0.0, 1.05 * s]},
            {"kind": "cylinder", "params": {"radius": 0.6 * s, "height": 2 * s}, "offset": [2.5 * s, 0.0, -s]},
        ]
    }
