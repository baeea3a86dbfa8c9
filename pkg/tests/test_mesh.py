import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from rtrc.mesh import (
    TET_RULES, TRI_RULES, MeshError, PointOutsideMesh, SurfaceMesh, VolumeMesh, hat_eval, load_surface_mesh,
    load_volume_mesh, tet_quadrature,
)

from conftest import closed_cube_surface, grid_mesh

REF_TET = np.array([[0.0, 0, 0], [1, 0, 0], [0, 1, 0], [0, 0, 1]])


def _write(path, text):
    path.write_text(text)
    return path


# -- loading ------------------------------------------------------------------


def test_single_tet_file(tmp_path):
    # [TRIVIAL] smallest valid mesh
    p = _write(tmp_path / "one.tet", "tetmesh 4 1\nv 0 0 0\nv 1 0 0\nv 0 1 0\nv 0 0 1\nt 0 1 2 3 7\n")
    m = load_volume_mesh(p)
    assert (m.n_vertices, m.n_tets) == (4, 1)
    assert m.regions.tolist() == [7]
    assert m.volumes[0] == pytest.approx(1 / 6)


def test_cube_split_counts(unit_cube):
    # [DERIVED] the 6-tet Kuhn split: 8 vertices, 6 tets, 2 triangles per cube face
    assert (unit_cube.n_vertices, unit_cube.n_tets) == (8, 6)
    faces, _ = unit_cube.boundary_faces()
    assert len(faces) == 12
    assert unit_cube.volumes.sum() == pytest.approx(1.0, abs=1e-14)


def test_out_of_range_vertex_names_tet(tmp_path):
    # [TRIVIAL] bounds violation
    lines = ["tetmesh 8 2"] + [f"v {x} {y} {z}" for x in (0, 1) for y in (0, 1) for z in (0, 1)]
    lines += ["t 0 1 2 4 0", "t 0 1 2 99 0"]
    p = _write(tmp_path / "bad.tet", "\n".join(lines) + "\n")
    with pytest.raises(MeshError, match="tet 1 references vertex 99"):
        load_volume_mesh(p)


def test_degenerate_tet_rejected():
    # [TRIVIAL]
    with pytest.raises(MeshError, match="zero volume"):
        VolumeMesh(np.array([[0.0, 0, 0], [1, 0, 0], [2, 0, 0], [0, 1, 0]]), np.array([[0, 1, 2, 3]]), [0])


def test_negative_orientation_is_fixed():
    # [TRIVIAL] swapped vertex order still gives a positive volume
    m = VolumeMesh(REF_TET, np.array([[1, 0, 2, 3]]), [0])
    assert m.volumes[0] == pytest.approx(1 / 6)


def test_volume_round_trip(tmp_path):
    m = grid_mesh([0, 0.5, 1], [0, 1], [0, 2])
    m.save(tmp_path / "m.tet")
    m2 = load_volume_mesh(tmp_path / "m.tet")
    assert np.array_equal(m.vertices, m2.vertices) and np.array_equal(m.tets, m2.tets)


# -- surface meshes -------------------------------------------------------------


def test_square_normals_follow_interior_point(tmp_path):
    # [TRIVIAL] forced orientation: interior point above z = 0 means normals point to -z
    p = _write(tmp_path / "sq.tri", "trimesh 4 2 0.5 0.5 0.5\nv 0 0 0\nv 1 0 0\nv 1 1 0\nv 0 1 0\n"
                                    "f 0 1 2 3\nf 0 2 3 3\n")
    s = load_surface_mesh(p)
    assert np.allclose(s.normals, [[0, 0, -1], [0, 0, -1]])
    assert s.label_set() == {3}


def test_closed_cube_outward_and_divergence_volume():
    # [DERIVED] sum (x.n) area / 3 over a closed outward surface is the enclosed volume
    s = closed_cube_surface()
    assert len(s.triangles) == 12
    outward = np.einsum("ij,ij->i", s.centroids - 0.5, s.normals)
    assert np.all(outward > 0)
    assert abs(s.enclosed_volume() - 1.0) <= 1e-12


def test_repeated_vertex_triangle_rejected():
    # [TRIVIAL]
    with pytest.raises(MeshError, match="zero area"):
        SurfaceMesh(np.eye(3), np.array([[0, 1, 1]]), [0])


def test_surface_round_trip(tmp_path):
    s = closed_cube_surface()
    s.save(tmp_path / "c.tri", (0.5, 0.5, 0.5))
    s2 = load_surface_mesh(tmp_path / "c.tri")
    assert np.allclose(s2.normals, s.normals)
    assert abs(s2.enclosed_volume() - 1.0) <= 1e-12


def test_submesh_duplicates_vertices_per_label():
    s = closed_cube_surface()
    s.labels[:] = np.arange(12) // 2  # one label per cube face
    sub, parent = s.submesh([0, 1])
    assert len(sub.triangles) == 4
    assert sub.n_vertices == 8  # two faces, 4 corners each, shared corners duplicated
    assert np.allclose(sub.vertices, s.vertices[parent])


# -- quadrature -----------------------------------------------------------------


@pytest.mark.parametrize("degree", [2, 5])
def test_constant_integrates_to_reference_volume(degree):
    # [TRIVIAL] constant integrand
    assert sum(w for _, w in tet_quadrature(REF_TET, degree)) == pytest.approx(1 / 6, abs=1e-15)


def _moment(exps):
    # int over the reference tet of x^a y^b z^c = a! b! c! / (a + b + c + 3)!
    from math import factorial
    a, b, c = exps
    return factorial(a) * factorial(b) * factorial(c) / factorial(a + b + c + 3)


def test_degree5_exact_on_x2y():
    # [DERIVED] analytic monomial moment 2! 1! 0! / 6! = 1/360
    val = sum(w * p[0] ** 2 * p[1] for p, w in tet_quadrature(REF_TET, 5))
    assert _moment((2, 1, 0)) == pytest.approx(1 / 360)
    assert val == pytest.approx(1 / 360, rel=1e-13)


@given(st.tuples(st.integers(0, 5), st.integers(0, 5), st.integers(0, 5)).filter(lambda e: sum(e) <= 5))
def test_degree5_exact_on_all_quintic_monomials(exps):
    # [DERIVED] analytic moments, every monomial of total degree <= 5
    val = sum(w * p[0] ** exps[0] * p[1] ** exps[1] * p[2] ** exps[2] for p, w in tet_quadrature(REF_TET, 5))
    assert val == pytest.approx(_moment(exps), rel=1e-12)


def test_degree2_inexact_on_x5():
    # [DERIVED] the degree tag matters: the 4-point rule misses x^5
    exact = _moment((5, 0, 0))
    low = sum(w * p[0] ** 5 for p, w in tet_quadrature(REF_TET, 2))
    high = sum(w * p[0] ** 5 for p, w in tet_quadrature(REF_TET, 5))
    assert abs(low - exact) / exact > 1e-2
    assert high == pytest.approx(exact, rel=1e-12)


def test_triangle_rules_exact_to_their_degree():
    # [DERIVED] int over the reference triangle of x^a y^b = a! b! / (a + b + 2)!
    from math import factorial
    tri = np.array([[0.0, 0], [1, 0], [0, 1]])
    for deg, rule in TRI_RULES.items():
        pts = rule.points @ tri
        for a in range(deg + 1):
            for b in range(deg + 1 - a):
                exact = factorial(a) * factorial(b) / factorial(a + b + 2)
                got = float(rule.weights @ (pts[:, 0] ** a * pts[:, 1] ** b))
                assert got == pytest.approx(exact, rel=1e-12), (deg, a, b)


def test_rule_points_strictly_interior():
    # the near-field rule must never sample a vertex (the kernels are singular there)
    for rule in list(TET_RULES.values()) + list(TRI_RULES.values()):
        assert np.all(rule.points > 0)
        assert np.allclose(rule.points.sum(axis=1), 1.0)


def test_bad_degree():
    with pytest.raises(ValueError):
        tet_quadrature(REF_TET, 3)


# -- hat functions and interpolation -----------------------------------------------------


def test_hat_is_one_at_own_vertex(unit_cube):
    # [TRIVIAL] nodal interpolation
    for j, x in enumerate(unit_cube.vertices):
        assert hat_eval(unit_cube, j, x) == pytest.approx(1.0)


def test_hat_at_centroid_is_quarter(unit_cube):
    # [TRIVIAL] barycentric symmetry
    c = unit_cube.centroids[2]
    for j in unit_cube.tets[2]:
        assert hat_eval(unit_cube, int(j), c) == pytest.approx(0.25)


@settings(max_examples=50, deadline=None)
@given(st.tuples(*[st.floats(0.01, 0.99)] * 3))
def test_hats_partition_of_unity(unit_cube, y):
    # [TRIVIAL] partition of unity
    assert sum(hat_eval(unit_cube, j, y) for j in range(unit_cube.n_vertices)) == pytest.approx(1.0, abs=1e-12)


def test_hat_outside_raises(unit_cube):
    with pytest.raises(PointOutsideMesh):
        hat_eval(unit_cube, 0, (2.0, 0.5, 0.5))


@settings(max_examples=30, deadline=None)
@given(st.tuples(*[st.floats(-3, 3)] * 4))
def test_interpolation_reproduces_affine_fields(coef):
    # [TRIVIAL] P1 reproduces affine functions exactly
    m = grid_mesh([0, 0.3, 1], [0, 0.5, 1], [0, 1])
    f = lambda p: coef[0] + p @ np.array(coef[1:])  # noqa: E731
    pts = np.random.default_rng(0).uniform(0, 1, (40, 3))
    assert np.allclose(m.interpolate(f(m.vertices), pts), f(pts), atol=1e-12)


def test_l2_inner_matches_quadrature(rng):
    # [DERIVED] the closed form P1 mass matrix against degree-5 quadrature of the product
    m = grid_mesh([0, 0.4, 1], [0, 1], [0, 0.7, 1])
    u, v = rng.normal(size=m.n_vertices), rng.normal(size=m.n_vertices)
    ref = 0.0
    for t, tet in enumerate(m.tets):
        rule = TET_RULES[5]
        lam = rule.points
        ref += m.volumes[t] * float(rule.normalized_weights() @ ((lam @ u[tet]) * (lam @ v[tet])))
    assert m.l2_inner(u, v) == pytest.approx(ref, rel=1e-12)


def test_interpolate_outside_is_nan(unit_cube):
    out = unit_cube.interpolate(np.ones(8), np.array([[0.5, 0.5, 0.5], [1.5, 0.5, 0.5]]))
    assert out[0] == pytest.approx(1.0) and np.isnan(out[1])
