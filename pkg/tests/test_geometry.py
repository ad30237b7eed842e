import math

import numpy as np
import pytest

from demagopt import geometry as G
from demagopt.errors import GeometryError, MeshFormatError, MeshValidationError
from demagopt.fem import element_data


def test_generator_regions_and_areas(coarse_geom, coarse_mesh):
    labels = set(np.unique(coarse_mesh.region_id))
    assert {f"slot_{k}" for k in range(1, 7)} <= labels
    assert "rotor_design" in labels and "airgap" in labels and "stator_iron" in labels

    areas = element_data(coarse_mesh).areas
    assert np.all(areas > 0)

    total = float(np.sum(areas))
    exact = 0.5 * coarse_geom.sector_angle * (coarse_geom.r_stator ** 2
                                              - coarse_geom.r_shaft ** 2)
    assert abs(total - exact) / exact < 0.005

    rotor = float(np.sum(areas[coarse_mesh.region_mask("rotor_design")]))
    exact_rotor = 0.5 * coarse_geom.sector_angle * (coarse_geom.r_rotor ** 2
                                                    - coarse_geom.r_shaft ** 2)
    assert abs(rotor - exact_rotor) / exact_rotor < 0.005


def test_refinement_ratio():
    # fine enough that per-band rounding no longer skews the factor
    base = G.generate_sector_mesh(G.SectorGeometry(h=0.0016))
    fine = G.generate_sector_mesh(G.SectorGeometry(h=0.0008))
    ratio = fine.n_triangles / base.n_triangles
    assert 3.5 <= ratio <= 4.5


def test_degenerate_geometry_rejected():
    with pytest.raises(GeometryError):
        G.generate_sector_mesh(G.SectorGeometry(r_shaft=0.08, r_rotor=0.05))
    with pytest.raises(GeometryError):
        G.SectorGeometry(slots=0).validate()
    with pytest.raises(GeometryError):
        G.SectorGeometry(sector_angle=7.0).validate()


def test_periodic_pairs_bijection_and_radii(coarse_mesh):
    pairs = coarse_mesh.periodic_pairs
    assert len(pairs) > 0
    assert len(np.unique(pairs[:, 0])) == len(pairs)
    assert len(np.unique(pairs[:, 1])) == len(pairs)
    cut_a = set(coarse_mesh.nodes_with_marker(G.MARKER_CUT_A).tolist())
    cut_b = set(coarse_mesh.nodes_with_marker(G.MARKER_CUT_B).tolist())
    dirichlet = set(coarse_mesh.nodes_with_marker(G.MARKER_OUTER).tolist())
    dirichlet |= set(coarse_mesh.nodes_with_marker(G.MARKER_INNER).tolist())
    assert set(pairs[:, 0].tolist()) == cut_a - dirichlet
    assert set(pairs[:, 1].tolist()) == cut_b - dirichlet
    ra = np.hypot(*coarse_mesh.vertices[pairs[:, 0]].T)
    rb = np.hypot(*coarse_mesh.vertices[pairs[:, 1]].T)
    assert np.max(np.abs(ra - rb) / ra) < 1e-9


def test_element_geometry_unit_triangle():
    mesh = G.Mesh(vertices=np.array([[0.0, 0.0], [1.0, 0.0], [0.0, 1.0]]),
                  triangles=np.array([[0, 1, 2]]),
                  region_id=np.array(["rotor_design"]),
                  boundary_edges=np.array([[0, 1], [1, 2], [2, 0]]),
                  boundary_markers=np.array(["outer_dirichlet"] * 3))
    area, grads = G.element_geometry(mesh, 0)
    assert area == pytest.approx(0.5)
    assert grads == pytest.approx(np.array([[-1.0, -1.0], [1.0, 0.0], [0.0, 1.0]]))
    assert np.sum(grads, axis=0) == pytest.approx([0.0, 0.0], abs=1e-15)


def test_element_geometry_scaling():
    verts = np.array([[0.1, 0.2], [0.7, 0.3], [0.4, 0.9]])
    mesh1 = G.Mesh(vertices=verts, triangles=np.array([[0, 1, 2]]),
                   region_id=np.array(["rotor_design"]),
                   boundary_edges=np.array([[0, 1], [1, 2], [2, 0]]),
                   boundary_markers=np.array(["outer_dirichlet"] * 3))
    mesh2 = G.Mesh(vertices=2.0 * verts, triangles=np.array([[0, 1, 2]]),
                   region_id=np.array(["rotor_design"]),
                   boundary_edges=np.array([[0, 1], [1, 2], [2, 0]]),
                   boundary_markers=np.array(["outer_dirichlet"] * 3))
    a1, g1 = G.element_geometry(mesh1, 0)
    a2, g2 = G.element_geometry(mesh2, 0)
    assert a2 == pytest.approx(4.0 * a1, rel=1e-13)
    assert g2 == pytest.approx(0.5 * g1, rel=1e-13)


def test_gradient_sum_zero_random():
    rng = np.random.default_rng(11)
    for _ in range(20):
        verts = rng.uniform(-1, 1, (3, 2))
        if np.cross(verts[1] - verts[0], verts[2] - verts[0]) < 1e-3:
            continue
        mesh = G.Mesh(vertices=verts, triangles=np.array([[0, 1, 2]]),
                      region_id=np.array(["rotor_design"]),
                      boundary_edges=np.array([[0, 1], [1, 2], [2, 0]]),
                      boundary_markers=np.array(["outer_dirichlet"] * 3))
        _, grads = G.element_geometry(mesh, 0)
        assert np.sum(grads, axis=0) == pytest.approx([0.0, 0.0], abs=1e-12)


def test_mesh_roundtrip(tmp_path, coarse_mesh):
    path = tmp_path / "m.mesh"
    G.write_mesh(coarse_mesh, path)
    back = G.read_mesh(path)
    assert np.array_equal(back.vertices, coarse_mesh.vertices)
    assert np.array_equal(back.triangles, coarse_mesh.triangles)
    assert np.array_equal(back.region_id, coarse_mesh.region_id)
    assert np.array_equal(back.boundary_edges, coarse_mesh.boundary_edges)
    assert np.array_equal(back.boundary_markers, coarse_mesh.boundary_markers)
    assert np.array_equal(back.periodic_pairs, coarse_mesh.periodic_pairs)


TOY_MESH = """demagmesh v1
vertices 4
0.0 0.0
1.0 0.0
1.0 1.0
0.0 1.0
triangles 3
0 1 2 rotor_design
0 2 3 rotor_design
1 2 3 rotor_design
boundary 0
periodic 0
"""


def test_toy_fixture_parses_but_fails_validation(tmp_path):
    # 3 triangles sharing edges inconsistently -> non-conforming
    path = tmp_path / "toy.mesh"
    path.write_text(TOY_MESH)
    with pytest.raises(MeshValidationError):
        G.read_mesh(path)


def test_hand_written_three_triangle_mesh(tmp_path):
    text = """demagmesh v1
vertices 5
0.0 0.0
1.0 0.0
1.0 1.0
0.0 1.0
2.0 0.5
triangles 3
0 1 2 rotor_design
0 2 3 airgap
1 4 2 slot_1
boundary 7
0 1 outer_dirichlet
1 4 outer_dirichlet
4 2 outer_dirichlet
2 3 outer_dirichlet
3 0 outer_dirichlet
0 2 cut_a
1 2 cut_b
periodic 0
"""
    # 0-2 and 1-2 are interior edges; markers must match the true boundary
    path = tmp_path / "three.mesh"
    path.write_text(text)
    with pytest.raises(MeshValidationError):
        G.read_mesh(path)
    good = "\n".join(line for line in text.splitlines()
                     if not line.startswith(("0 2 cut_a", "1 2 cut_b")))
    good = good.replace("boundary 7", "boundary 5")
    path.write_text(good + "\n")
    mesh = G.read_mesh(path)
    assert mesh.n_triangles == 3
    assert list(mesh.region_id) == ["rotor_design", "airgap", "slot_1"]


def test_dangling_vertex_index(tmp_path):
    bad = TOY_MESH.replace("1 2 3 rotor_design", "1 2 9 rotor_design")
    path = tmp_path / "bad.mesh"
    path.write_text(bad)
    with pytest.raises(MeshFormatError) as err:
        G.read_mesh(path)
    assert err.value.line is not None


def test_malformed_header_and_counts(tmp_path):
    path = tmp_path / "h.mesh"
    path.write_text("wrongheader\n")
    with pytest.raises(MeshFormatError):
        G.read_mesh(path)
    path.write_text("demagmesh v1\nvertices 2\n0.0 0.0\n")
    with pytest.raises(MeshFormatError):
        G.read_mesh(path)
    path.write_text("demagmesh v1\nvertices 1\n0.0 zz\n")
    with pytest.raises(MeshFormatError):
        G.read_mesh(path)


def test_mesh_immutable(coarse_mesh):
    with pytest.raises(ValueError):
        coarse_mesh.vertices[0, 0] = 99.0
