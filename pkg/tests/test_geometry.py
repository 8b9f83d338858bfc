import math

import numpy as np
import pytest
from conftest import single_triangle, unit_cube_12
from hypothesis import given, settings
from hypothesis import strategies as st

from scatternet.geometry import (
    DegenerateFaceError,
    MeshError,
    MeshParseError,
    NonManifoldEdgeError,
    TriangleMesh,
    generate_shape,
    load_mesh,
    rwg_edges,
    to_point_cloud,
    write_off,
)

LAMBDA = 299792458.0 / 1e9


def test_single_triangle_off(tmp_path):
    p = tmp_path / "tri.off"
    p.write_text("OFF\n3 1 0\n0 0 0\n1 0 0\n0 1 0\n3 0 1 2\n")
    m = load_mesh(p)
    assert m.n_faces == 1
    assert m.areas[0] == pytest.approx(0.5)
    np.testing.assert_allclose(m.normals[0], [0, 0, 1])
    np.testing.assert_allclose(m.centroids[0], [1 / 3, 1 / 3, 0])


def test_cube_off_roundtrip_area(tmp_path):
    m = unit_cube_12().scaled(0.7)
    write_off(m, tmp_path / "c.off", "hello")
    back = load_mesh(tmp_path / "c.off")
    assert back.n_faces == 12
    assert back.total_area == pytest.approx(6 * 0.49, abs=1e-12)
    np.testing.assert_array_equal(back.faces, m.faces)


def test_obj_reader(tmp_path):
    p = tmp_path / "t.obj"
    p.write_text("# c\nv 0 0 0\nv 1 0 0\nv 0 1 0\nf 1 2 3\n")
    assert load_mesh(p).n_faces == 1


def test_repeated_vertex_face_is_degenerate(tmp_path):
    p = tmp_path / "bad.off"
    p.write_text("OFF\n3 1 0\n0 0 0\n1 0 0\n0 1 0\n3 0 1 1\n")
    with pytest.raises(DegenerateFaceError) as exc:
        load_mesh(p)
    assert exc.value.face_index == 0


def test_quad_rejected_and_parse_errors(tmp_path):
    p = tmp_path / "q.off"
    p.write_text("OFF\n4 1 0\n0 0 0\n1 0 0\n1 1 0\n0 1 0\n4 0 1 2 3\n")
    with pytest.raises(MeshParseError):
        load_mesh(p)
    p.write_text("NOPE\n")
    with pytest.raises(MeshParseError):
        load_mesh(p)
    with pytest.raises(MeshError):
        TriangleMesh(np.zeros((3, 3)), np.array([[0, 1, 5]]))


def test_sphere_paper_settings_closed():
    m = generate_shape("sphere", {"radius": 0.15}, LAMBDA / 10)
    assert m.is_closed()
    assert m.euler_characteristic() == 2
    assert abs(m.mean_edge_length() / (LAMBDA / 10) - 1) <= 0.25


def test_cube_area_and_edge():
    m = generate_shape("cube", {"side": 0.3}, LAMBDA / 10)
    assert m.total_area == pytest.approx(0.54, abs=1e-9)
    assert abs(m.mean_edge_length() / (LAMBDA / 10) - 1) <= 0.25
    assert m.is_closed()


@pytest.mark.parametrize("kind,params", [
    ("sphere", {"radius": 0.1}),
    ("cube", {"side": 0.25}),
    ("cone", {"radius": 0.1, "height": 0.2}),
    ("frustum", {"bottom_radius": 0.12, "top_radius": 0.05, "height": 0.15}),
    ("cylinder", {"radius": 0.08, "height": 0.2}),
])
def test_closed_shapes_divergence_and_edge_tolerance(kind, params):
    m = generate_shape(kind, params, LAMBDA / 10)
    assert m.is_closed()
    assert np.linalg.norm((m.areas[:, None] * m.normals).sum(0)) <= 1e-9 * m.total_area
    assert abs(m.mean_edge_length() / (LAMBDA / 10) - 1) <= 0.25
    # outward orientation: normals point away from the body centre on average
    c = m.centroids - m.vertices.mean(0)
    assert np.sum(m.areas * np.einsum("ij,ij->i", c, m.normals)) > 0
    assert len(rwg_edges(m)) == 3 * m.n_faces // 2


def test_assembly_contains_all_components():
    comps = [
        {"kind": "cone", "params": {"radius": 0.05, "height": 0.1}, "offset": [0, 0, 0.1]},
        {"kind": "cube", "params": {"side": 0.1}},
        {"kind": "cylinder", "params": {"radius": 0.05, "height": 0.1}, "offset": [0, 0, -0.1]},
    ]
    parts = [generate_shape(c["kind"], c["params"], LAMBDA / 10).n_faces for c in comps]
    m = generate_shape("assembly", {"components": comps}, LAMBDA / 10)
    assert m.n_faces == sum(parts)


def test_invalid_parameters():
    with pytest.raises(ValueError):
        generate_shape("cube", {"side": -1}, 0.03)
    with pytest.raises(ValueError):
        generate_shape("cube", {"side": 0.1}, 0.0)
    with pytest.raises(ValueError):
        generate_shape("blob", {}, 0.03)
    with pytest.raises(ValueError):
        generate_shape("frustum", {"bottom_radius": 0.05, "top_radius": 0.1, "height": 0.1}, 0.03)


def test_point_cloud():
    m = unit_cube_12()
    pc = to_point_cloud(m)
    assert len(pc) == 12
    assert np.all(np.sort(np.abs(pc.normals), axis=1)[:, :2] == 0)
    assert len(to_point_cloud(single_triangle())) == 1
    np.testing.assert_array_equal(to_point_cloud(m).points, pc.points)


def test_sphere_points_within_sagitta_bound():
    r = 0.15
    m = generate_shape("sphere", {"radius": r}, LAMBDA / 10)
    d = np.linalg.norm(to_point_cloud(m).points, axis=1)
    # a centroid sits at most one circumradius-sagitta inside the sphere
    tri = m.vertices[m.faces]
    circ = np.max(np.linalg.norm(tri - m.centroids[:, None], axis=2))
    bound = r - math.sqrt(r * r - circ * circ)
    assert np.all(d <= r + 1e-12)
    assert np.all(r - d <= bound + 1e-12)


def test_rwg_counts():
    assert len(rwg_edges(unit_cube_12())) == 18
    assert rwg_edges(single_triangle()) == []
    two = TriangleMesh(np.array([[0, 0, 0], [1, 0, 0], [0, 1, 0], [1, 1, 0]], float), np.array([[0, 1, 2], [1, 3, 2]]))
    recs = rwg_edges(two)
    assert len(recs) == 1
    assert recs[0].length == pytest.approx(math.sqrt(2))


def test_non_manifold_edge():
    v = np.array([[0, 0, 0], [1, 0, 0], [0, 1, 0], [0, -1, 0], [0, 0, 1]], float)
    m = TriangleMesh(v, np.array([[0, 1, 2], [1, 0, 3], [0, 1, 4]]))
    with pytest.raises(NonManifoldEdgeError):
        rwg_edges(m)


@settings(max_examples=25, deadline=None)
@given(st.floats(0.05, 0.5), st.lists(st.floats(-1, 1), min_size=3, max_size=3))
def test_translation_preserves_geometry(side, offset):
    m = generate_shape("cube", {"side": side}, side / 3)
    t = m.translated(offset)
    np.testing.assert_allclose(t.areas, m.areas, rtol=1e-12, atol=1e-15)
    np.testing.assert_allclose(t.normals, m.normals, atol=1e-9)
