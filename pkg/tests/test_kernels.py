import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from rtrc.geometry import AbsorptionModel, PlanarReflector, RayScene, exit_point
from rtrc.kernels import KernelContext, SourceField, assemble_source_vector, surface_entry, volume_entry
from rtrc.mesh import surface_from_volume
from rtrc.scenarios import LABEL_SOURCE, Scenario, kobayashi
from rtrc.workflows import symmetrize

from conftest import box_labels, grid_mesh


def _vertex(mesh, p):
    k = int(np.argmin(np.linalg.norm(mesh.vertices - np.asarray(p, float), axis=1)))
    assert np.allclose(mesh.vertices[k], p)
    return k


def _sphere(n, seed):
    d = np.random.default_rng(seed).normal(size=(n, 3))
    return d / np.linalg.norm(d, axis=1)[:, None]


def _sample_support(mesh, j, n, rng):
    """Uniform samples over the support of hat j with their hat values and the support volume."""
    tets = np.nonzero((mesh.tets == j).any(axis=1))[0]
    vols = mesh.volumes[tets]
    pick = rng.choice(len(tets), size=n, p=vols / vols.sum())
    lam = rng.dirichlet(np.ones(4), size=n)
    corners = mesh.vertices[mesh.tets[tets[pick]]]
    pts = np.einsum("na,nak->nk", lam, corners)
    hat = lam[np.arange(n), np.argmax(mesh.tets[tets[pick]] == j, axis=1)]
    return pts, hat, vols.sum()


@pytest.fixture(scope="module")
def bar():
    vol = grid_mesh(np.linspace(0, 4, 9), [0, 0.5, 1], [0, 0.5, 1])
    surf = surface_from_volume(vol, box_labels([0, 0, 0], [4, 1, 1]))
    return vol, surf


# -- volume operator --------------------------------------------------------------


def test_small_kappa_limit_matches_monte_carlo(bar):
    # [DERIVED] G^{ij} / kappa -> (1/4pi) int hat_j / |x - y|^2 dy; 1e6-sample oracle over supp(hat_j)
    vol, surf = bar
    i, j = _vertex(vol, (0, 0.5, 0.5)), _vertex(vol, (3.5, 0.5, 0.5))
    vals = []
    for kappa in (1e-7, 2e-7):
        ctx = KernelContext(vol, surf, AbsorptionModel.grey({0: kappa}))
        vals.append(volume_entry(ctx, i, j) / kappa)
    assert vals[0] == pytest.approx(vals[1], rel=1e-6)  # linear in kappa
    pts, hat, v = _sample_support(vol, j, 1_000_000, np.random.default_rng(1))
    oracle = v * np.mean(hat / ((pts - vol.vertices[i]) ** 2).sum(1)) / (4 * math.pi)
    assert vals[0] == pytest.approx(oracle, rel=0.01)


def test_row_sums_converge_to_one_minus_mean_transmittance():
    # [DERIVED] convex domain, uniform kappa: sum_j G^{ij} = 1 - (1/4pi) int exp(-kappa tau(x, w)) dw.
    # The elements touching x^i carry the 1/r^2 singularity, so the quadrature error is first order in h.
    errs = []
    for n in (6, 12):
        g = np.linspace(0, 2, n + 1)
        vol = grid_mesh(g, g, g)
        ctx = KernelContext(vol, None, AbsorptionModel.grey({0: 0.7}))
        i = _vertex(vol, (1, 1, 1))
        row = ctx.volume_operator().dense(rows=[i])[0]
        taus = np.array([exit_point(ctx.scene, vol.vertices[i], w)[1] for w in _sphere(20000, 2)])
        exact = 1 - np.exp(-0.7 * taus).mean()
        errs.append(abs(row.sum() - exact) / exact)
    assert errs[0] < 0.05 and errs[1] < 0.025
    assert 1.6 < errs[0] / errs[1] < 2.5


def test_blocked_support_gives_zero():
    # [TRIVIAL] nonconvex L: every chord from x to supp(hat_j) crosses the notch
    g = np.linspace(0, 4, 9)
    vol = grid_mesh(g, g, [0, 0.5, 1], hole=((1, 1, -1), (5, 5, 2)))
    ctx = KernelContext(vol, None, AbsorptionModel.grey({0: 0.2}))
    i, j = _vertex(vol, (3.5, 0.0, 0.5)), _vertex(vol, (0.0, 3.5, 0.5))
    assert volume_entry(ctx, i, j) == 0.0
    assert volume_entry(ctx, i, _vertex(vol, (0.0, 0.0, 0.5))) > 0.0


def _scenario(vol, surf, kappa, reflectors, sources=None):
    return Scenario("t", vol, surf, AbsorptionModel.grey({0: kappa}), sources or {}, reflectors,
                    tuple(vol.centroids[0]), {})


def test_reflected_term_equals_mirrored_direct_term(bar):
    # [DERIVED] reflection on x = 0 equals the direct contribution of the mirrored support on the glued domain
    vol, surf = bar
    r0 = 0.6
    sc = _scenario(vol, surf, 0.3, [PlanarReflector((0, 0, 0), (-1, 0, 0), 0, r0)])
    sym = symmetrize(sc)
    ctx = KernelContext(vol, surf, sc.model, sc.reflectors, r_near=0.6)
    ctx_s = KernelContext(sym.volume, sym.surface, sym.model, [], r_near=0.6)
    ctx_0 = KernelContext(vol, surf, sc.model, [], r_near=0.6)
    i = _vertex(vol, (1.5, 0.5, 0.5))
    for jp in [(0.5, 0.5, 1.0), (2.5, 0.0, 0.5), (3.0, 1.0, 0.0)]:
        j = _vertex(vol, jp)
        jm = _vertex(sym.volume, (-jp[0], jp[1], jp[2]))
        direct = volume_entry(ctx_0, i, j)
        mirrored = volume_entry(ctx_s, _vertex(sym.volume, vol.vertices[i]), jm)
        assert volume_entry(ctx, i, j) == pytest.approx(direct + r0 * mirrored, rel=1e-10)


@pytest.fixture(scope="module")
def walled():
    """Box cut by a wall x in [1.8, 2.2], y > 0.5: points on either side see each other only via y = 0."""
    xs = np.array([0, 0.6, 1.2, 1.8, 2.2, 2.8, 3.4, 4.0])
    ys = np.linspace(0, 2, 5)
    vol = grid_mesh(xs, ys, ys, hole=((1.8, 0.5, -1), (2.2, 3, 3)))

    def lab(c, n):
        out = np.full(len(c), 9, dtype=np.int64)
        out[np.abs(c[:, 1]) < 1e-9] = 2  # y = 0: reflector
        out[np.abs(c[:, 0] - 4) < 1e-9] = LABEL_SOURCE
        return out

    return vol, surface_from_volume(vol, lab)


def test_blocked_direct_path_reflected_only(walled):
    # [DERIVED] direct path blocked, reflection valid: entry = R0 x direct entry of the mirrored column
    vol, surf = walled
    r0 = 0.8
    sc = _scenario(vol, surf, 0.05, [PlanarReflector((0, 0, 0), (0, -1, 0), 2, r0)], {LABEL_SOURCE: 1.0})
    sym = symmetrize(sc)
    kw = dict(r_near=0.5, source_labels=[LABEL_SOURCE])
    ctx = KernelContext(vol, surf, sc.model, sc.reflectors, **kw)
    ctx_0 = KernelContext(vol, surf, sc.model, [], **kw)
    ctx_s = KernelContext(sym.volume, sym.surface, sym.model, [], **kw)
    x = (0.6, 1.5, 1.0)
    i, i_s = _vertex(vol, x), _vertex(sym.volume, x)
    # volume column
    j = _vertex(vol, (3.4, 1.5, 1.0))
    assert volume_entry(ctx_0, i, j) == 0.0
    rc = volume_entry(ctx, i, j)
    assert rc > 0
    assert rc == pytest.approx(r0 * volume_entry(ctx_s, i_s, _vertex(sym.volume, (3.4, -1.5, 1.0))), rel=1e-10)
    # source column on the x = 4 face
    sub, sub_s = ctx.source_mesh, ctx_s.source_mesh
    l, l_m = _vertex(sub, (4.0, 1.5, 1.0)), _vertex(sub_s, (4.0, -1.5, 1.0))
    assert surface_entry(ctx_0, i, l) == 0.0
    rc = surface_entry(ctx, i, l)
    assert rc > 0
    assert rc == pytest.approx(r0 * surface_entry(ctx_s, i_s, l_m), rel=1e-10)


@settings(max_examples=15, deadline=None)
@given(st.floats(0.01, 3.0), st.integers(0, 26), st.integers(0, 26))
def test_entries_nonnegative_and_bounded(kappa, i, j):
    g = np.linspace(0, 1, 3)
    vol = grid_mesh(g, g, g)
    ctx = KernelContext(vol, None, AbsorptionModel.grey({0: kappa}))
    assert 0.0 <= volume_entry(ctx, i, j) <= 1.0


def test_entry_matches_dense_row(bar):
    vol, surf = bar
    ctx = KernelContext(vol, surf, AbsorptionModel.grey({0: 0.4}))
    op = ctx.volume_operator()
    row = op.dense(rows=[5])[0]
    for j in (0, 5, 17, 40):
        assert op.entry(5, j) == pytest.approx(row[j], rel=1e-12, abs=1e-15)


# -- source operator ----------------------------------------------------------------


def test_small_triangle_on_axis_monte_carlo():
    # [DERIVED] entry = (1/4pi) int_supp lam_l cos^2 / d^2 e^{-kappa d} over the emitting face; area-sampling oracle
    g = np.linspace(0, 4, 9)
    vol = grid_mesh(g, g, g)
    surf = surface_from_volume(vol, box_labels([0, 0, 0], [4, 4, 4]))
    kappa = 1e-3
    ctx = KernelContext(vol, surf, AbsorptionModel.grey({0: kappa}), source_labels=[4])
    i = _vertex(vol, (2, 2, 4))
    sub = ctx.source_mesh
    l = _vertex(sub, (2, 2, 0))
    val = surface_entry(ctx, i, l)
    rng = np.random.default_rng(4)
    tris = np.nonzero((sub.triangles == l).any(axis=1))[0]
    n = 400_000
    pick = rng.choice(tris, size=n)
    lam = rng.dirichlet(np.ones(3), size=n)
    y = np.einsum("na,nak->nk", lam, sub.vertices[sub.triangles[pick]])
    hat = lam[np.arange(n), np.argmax(sub.triangles[pick] == l, axis=1)]
    d = vol.vertices[i] - y
    r = np.linalg.norm(d, axis=1)
    c = -(d @ np.array([0, 0, -1.0]))
    integrand = hat * np.maximum(-(d @ [0, 0, -1.0]), 0) ** 2 / r ** 4 * np.exp(-kappa * r)
    oracle = sub.areas[tris].sum() * integrand.mean() / (4 * math.pi)
    assert val == pytest.approx(oracle, rel=0.01)


def test_all_faces_emitting_solid_angle_identity():
    # [DERIVED] Q0 = 1 everywhere: S 1 = (1/4pi) int cos(theta) exp(-kappa tau) d omega, theta at the exit face
    g = np.linspace(0, 2, 7)
    vol = grid_mesh(g, g, g)
    surf = surface_from_volume(vol, box_labels([0, 0, 0], [2, 2, 2]))
    kappa = 0.4
    ctx = KernelContext(vol, surf, AbsorptionModel.grey({0: kappa}))
    sop = ctx.surface_operator()
    normals = {0: (-1, 0, 0), 1: (1, 0, 0), 2: (0, -1, 0), 3: (0, 1, 0), 4: (0, 0, -1), 5: (0, 0, 1)}
    for p in [(1, 1, 1), (1 / 3, 2 / 3, 1)]:
        i = _vertex(vol, p)
        s1 = sop.dense(rows=[i])[0].sum()
        acc = 0.0
        dirs = _sphere(20000, 9)
        for w in dirs:
            _, tau, lab = exit_point(ctx.scene, vol.vertices[i], w)
            acc += max(float(np.dot(w, normals[lab])) * -1.0, 0.0) * math.exp(-kappa * tau)
        assert s1 == pytest.approx(acc / len(dirs), rel=0.02)


def test_behind_emitting_face_is_zero():
    # [TRIVIAL] one-sided emission: target on the back side of the emitting face's plane
    g = np.linspace(0, 2, 5)
    vol = grid_mesh(g, g, [0, 0.5, 1], hole=((1, 1, -1), (3, 3, 2)))

    def lab(c, n):
        out = np.zeros(len(c), dtype=np.int64)
        out[(np.abs(c[:, 0] - 1) < 1e-9) & (c[:, 1] > 1)] = 1  # notch face x = 1, normal +x
        return out

    surf = surface_from_volume(vol, lab)
    ctx = KernelContext(vol, surf, AbsorptionModel.grey({0: 0.1}), source_labels=[1])
    l = _vertex(ctx.source_mesh, (1.0, 1.5, 0.5))
    assert surface_entry(ctx, _vertex(vol, (1.5, 0.5, 0.5)), l) == 0.0
    assert surface_entry(ctx, _vertex(vol, (0.5, 1.5, 0.5)), l) > 0.0


def test_source_vector_linearity(cube_scene):
    # [TRIVIAL] Q0 = 0 -> 0; Q0 = c -> c x row sums
    vol, surf, model = cube_scene
    ctx = KernelContext(vol, surf, model, source_labels=[0, 1])
    S = ctx.surface_operator().dense()
    assert np.all(assemble_source_vector(ctx, S, SourceField({0: 0.0, 1: 0.0})) == 0)
    c = 0.37
    got = assemble_source_vector(ctx, S, SourceField({0: c, 1: c}))
    assert np.allclose(got, c * S.sum(axis=1), rtol=1e-14)


def test_source_field_validation(cube_scene):
    with pytest.raises(ValueError):
        SourceField({0: -1.0})
    vol, surf, model = cube_scene
    ctx = KernelContext(vol, surf, model, [PlanarReflector((0, 0, 0), (-1, 0, 0), 0)], source_labels=[1])
    with pytest.raises(ValueError, match="reflector"):
        assemble_source_vector(ctx, ctx.surface_operator().dense(), SourceField({0: 1.0, 1: 1.0}))


def test_kobayashi_source_positive_inside():
    # [PAPER] the benchmark source (three inner faces of the source cube) reaches every interior vertex
    sc = kobayashi("kobayashi-test1", h=10.0)
    ctx = KernelContext(sc.volume, sc.surface, sc.model, sc.reflectors, source_labels=[LABEL_SOURCE])
    S = ctx.surface_operator().dense()
    se = assemble_source_vector(ctx, S, SourceField({LABEL_SOURCE: 0.1}))
    on_boundary = np.zeros(sc.volume.n_vertices, dtype=bool)
    faces, _ = sc.volume.boundary_faces()
    on_boundary[np.unique(faces)] = True
    assert np.all(se[~on_boundary] > 0)
    assert np.all(se >= 0)
