"""Built-in Kobayashi-type scenarios: a box with a cubic emitter carved out.

Geometry (cm): container D = (0,60) x (0,100) x (0,60), emitting cube
C = [0,10]^3 in the corner, duct (0,10) x (10,100) x (0,10) prolonging the cube.
Only the three faces of C inside D emit. The symmetrized variants mirror D
across the plane x = 0.

Meshes are structured: a tensor grid whose lines pass through every
breakpoint, each hexahedral cell split into six tetrahedra along its main
diagonal (conforming across cells).
"""
from __future__ import annotations

import itertools
from dataclasses import dataclass, field

import numpy as np

from .geometry import AbsorptionModel, PlanarReflector
from .mesh import SurfaceMesh, VolumeMesh, surface_from_volume

BULK, DUCT = 0, 1
LABEL_SOURCE, LABEL_X0, LABEL_Y0, LABEL_Z0, LABEL_WALL = 1, 2, 3, 4, 5

KAPPA_BULK = 0.1
KAPPA_DUCT = 1e-4
Q0 = 0.1

SCENARIOS = (
    "kobayashi-test1", "kobayashi-test2", "kobayashi-test3",
    "kobayashi-test1-sym", "kobayashi-test2-sym", "kobayashi-test3-sym",
    "kobayashi-test1-norc", "kobayashi-test2-norc", "kobayashi-test3-norc",
)


@dataclass
class Scenario:
    """Everything needed to assemble and solve one configuration."""

    name: str
    volume: VolumeMesh
    surface: SurfaceMesh
    model: AbsorptionModel
    sources: dict
    reflectors: list = field(default_factory=list)
    interior_point: tuple = (30.0, 50.0, 30.0)
    probes: dict = field(default_factory=dict)  # name -> (p0, p1, n_samples)


def _axis(breaks, h):
    pts = [breaks[0]]
    for a, b in zip(breaks[:-1], breaks[1:]):
        n = max(1, int(round((b - a) / h)))
        pts.extend(np.linspace(a, b, n + 1)[1:])
    return np.array(pts)


# Kuhn split: one tet per permutation of the axes, all sharing the main diagonal
_KUHN = []
for perm in itertools.permutations(range(3)):
    corner = [0, 0, 0]
    path = [tuple(corner)]
    for ax in perm:
        corner[ax] = 1
        path.append(tuple(corner))
    _KUHN.append(path)


def box_with_hole_mesh(xs, ys, zs, hole_lo, hole_hi, region_of) -> VolumeMesh:
    """Structured tet mesh of the tensor grid xs x ys x zs minus the box [hole_lo, hole_hi]."""
    nx, ny, nz = len(xs), len(ys), len(zs)
    ci, cj, ck = np.meshgrid(np.arange(nx - 1), np.arange(ny - 1), np.arange(nz - 1), indexing="ij")
    ci, cj, ck = ci.ravel(), cj.ravel(), ck.ravel()
    centers = np.column_stack([(xs[ci] + xs[ci + 1]) / 2, (ys[cj] + ys[cj + 1]) / 2, (zs[ck] + zs[ck + 1]) / 2])
    if hole_lo is not None:
        inside = np.all((centers > np.asarray(hole_lo)) & (centers < np.asarray(hole_hi)), axis=1)
        ci, cj, ck, centers = ci[~inside], cj[~inside], ck[~inside], centers[~inside]

    def gid(i, j, k):
        return (i * ny + j) * nz + k

    tets = []
    for path in _KUHN:
        tets.append(np.column_stack([gid(ci + a, cj + b, ck + c) for a, b, c in path]))
    tets = np.stack(tets, axis=1).reshape(-1, 4)
    used, inv = np.unique(tets, return_inverse=True)
    gi, rem = np.divmod(used, ny * nz)
    gj, gk = np.divmod(rem, nz)
    verts = np.column_stack([xs[gi], ys[gj], zs[gk]])
    tets = inv.reshape(-1, 4)
    regions = region_of(verts[tets].mean(axis=1))
    return VolumeMesh(verts, tets, regions)


def _duct_region(mirror: bool):
    def region_of(c):
        x = np.abs(c[:, 0]) if mirror else c[:, 0]
        duct = (x < 10) & (c[:, 2] < 10) & (c[:, 1] > 10)
        return np.where(duct, DUCT, BULK)
    return region_of


def _labeler(hole_lo, hole_hi, box_lo, box_hi):
    tol = 1e-9

    def label(c, n):
        lab = np.full(len(c), LABEL_WALL)
        on_hole = np.zeros(len(c), dtype=bool)
        for ax in range(3):
            for val in (hole_lo[ax], hole_hi[ax]):
                face = np.abs(c[:, ax] - val) < tol
                others = [a for a in range(3) if a != ax]
                within = np.all(
                    [(c[:, a] > hole_lo[a] - tol) & (c[:, a] < hole_hi[a] + tol) for a in others], axis=0
                )
                on_hole |= face & within
        outer = np.zeros(len(c), dtype=bool)
        for ax in range(3):
            outer |= np.abs(c[:, ax] - box_lo[ax]) < tol
            outer |= np.abs(c[:, ax] - box_hi[ax]) < tol
        lab[on_hole & ~outer] = LABEL_SOURCE
        lab[(np.abs(c[:, 0]) < tol) & outer] = LABEL_X0
        lab[(np.abs(c[:, 1]) < tol) & outer] = LABEL_Y0
        lab[(np.abs(c[:, 2]) < tol) & outer] = LABEL_Z0
        return lab

    return label


def kobayashi_meshes(h: float, symmetrized: bool = False) -> tuple[VolumeMesh, SurfaceMesh]:
    """Volume and boundary meshes of D minus C at grid spacing about ``h``."""
    if symmetrized:
        xs = _axis([-60.0, -10.0, 0.0, 10.0, 60.0], h)
        hole_lo, hole_hi = (-10.0, 0.0, 0.0), (10.0, 10.0, 10.0)
        box_lo, box_hi = (-60.0, 0.0, 0.0), (60.0, 100.0, 60.0)
    else:
        xs = _axis([0.0, 10.0, 60.0], h)
        hole_lo, hole_hi = (0.0, 0.0, 0.0), (10.0, 10.0, 10.0)
        box_lo, box_hi = (0.0, 0.0, 0.0), (60.0, 100.0, 60.0)
    ys = _axis([0.0, 10.0, 100.0], h)
    zs = _axis([0.0, 10.0, 60.0], h)
    vol = box_with_hole_mesh(xs, ys, zs, hole_lo, hole_hi, _duct_region(symmetrized))
    surf = surface_from_volume(vol, _labeler(hole_lo, hole_hi, box_lo, box_hi))
    return vol, surf


def kobayashi_vertex_count(h: float, symmetrized: bool = False) -> int:
    xs = _axis([-60.0, -10.0, 0.0, 10.0, 60.0] if symmetrized else [0.0, 10.0, 60.0], h)
    ys = _axis([0.0, 10.0, 100.0], h)
    zs = _axis([0.0, 10.0, 60.0], h)
    # grid points of the carved cube that no remaining tet touches: all but its faces inside D
    inner = lambda a, lo, hi, closed: int(np.sum(((a >= lo) if closed else (a > lo)) & (a < hi)))  # noqa: E731
    hole = inner(xs, -10 if symmetrized else 0, 10, not symmetrized) * inner(ys, 0, 10, True) * inner(zs, 0, 10, True)
    return len(xs) * len(ys) * len(zs) - hole


def spacing_for(n_target: int) -> float:
    """Grid spacing whose (unsymmetrized) Kobayashi mesh has a vertex count closest to ``n_target``."""
    best, best_h = None, None
    for h in np.geomspace(0.8, 20.0, 800):
        n = kobayashi_vertex_count(h)
        if best is None or abs(n - n_target) < abs(best - n_target):
            best, best_h = n, float(h)
    return best_h


def kobayashi(name: str, h: float = 5.0) -> Scenario:
    """Built-in scenario by name (see ``SCENARIOS``)."""
    if name not in SCENARIOS:
        raise ValueError(f"unknown scenario {name!r}; choose from {', '.join(SCENARIOS)}")
    parts = name.split("-")
    test = parts[1]
    variant = parts[2] if len(parts) > 2 else ""
    sym = variant == "sym"
    vol, surf = kobayashi_meshes(h, symmetrized=sym)
    duct_kappa = KAPPA_BULK if test == "test1" else KAPPA_DUCT
    model = AbsorptionModel.grey({BULK: KAPPA_BULK, DUCT: duct_kappa})
    reflectors = []
    if not sym and variant != "norc":
        reflectors.append(PlanarReflector((0, 0, 0), (-1, 0, 0), LABEL_X0, 1.0))
        if test == "test3":
            reflectors.append(PlanarReflector((0, 0, 0), (0, -1, 0), LABEL_Y0, 1.0))
            reflectors.append(PlanarReflector((0, 0, 0), (0, 0, -1), LABEL_Z0, 1.0))
    if sym and test == "test3":
        # the mirror image of the x = 0 plane is interior; the other two planes stay reflective
        reflectors.append(PlanarReflector((0, 0, 0), (0, -1, 0), LABEL_Y0, 1.0))
        reflectors.append(PlanarReflector((0, 0, 0), (0, 0, -1), LABEL_Z0, 1.0))
    interior = (0.0, 50.0, 30.0) if sym else (30.0, 50.0, 30.0)
    x_lo = -60.0 if sym else 0.0
    probes = {
        "y_axis": ((15.0, 0.0, 15.0), (15.0, 100.0, 15.0), 101),
        "x_axis": ((x_lo, 25.0, 25.0), (60.0, 25.0, 25.0), 121 if sym else 61),
        "duct": ((5.0, 15.0, 5.0), (5.0, 100.0, 5.0), 86),
    }
    return Scenario(name, vol, surf, model, {LABEL_SOURCE: Q0}, reflectors, interior, probes)


def ball_mesh(radius: float = 1.0, n: int = 8) -> VolumeMesh:
    """Tet mesh of a ball: a Kuhn-split cube grid pushed radially onto the sphere."""
    g = np.linspace(-1.0, 1.0, 2 * n + 1)
    vol = box_with_hole_mesh(g, g, g, None, None, lambda c: np.zeros(len(c), dtype=np.int64))
    v = vol.vertices.copy()
    inf_norm = np.abs(v).max(axis=1)
    r = np.linalg.norm(v, axis=1)
    scale = np.where(r > 0, inf_norm / np.where(r > 0, r, 1.0), 0.0)
    return VolumeMesh(v * scale[:, None] * radius, vol.tets.copy(), vol.regions.copy())


def unit_cube_mesh() -> VolumeMesh:
    """The 6-tet Kuhn decomposition of [0,1]^3."""
    g = np.array([0.0, 1.0])
    return box_with_hole_mesh(g, g, g, None, None, lambda c: np.zeros(len(c), dtype=np.int64))


def nominal_h(mesh: VolumeMesh) -> float:
    return float(np.cbrt(mesh.volumes.sum() / mesh.n_vertices))


def ladder_spacings(targets) -> list:
    return [spacing_for(int(n)) for n in targets]


__all__ = [
    "Scenario", "kobayashi", "kobayashi_meshes", "spacing_for", "ball_mesh", "unit_cube_mesh",
    "SCENARIOS", "LABEL_SOURCE", "LABEL_X0", "LABEL_Y0", "LABEL_Z0", "LABEL_WALL", "BULK", "DUCT",
    "box_with_hole_mesh", "kobayashi_vertex_count", "ladder_spacings", "nominal_h",
]
