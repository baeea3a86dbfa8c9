"""Ray geometry through a tetrahedral mesh with region-wise constant absorption.

Optical depth is computed exactly for a piecewise-constant absorption
coefficient: the segment is intersected with the faces across which the region
tag changes (plus the boundary faces that are not on a supporting plane of the
mesh, i.e. the non-convex part of the boundary). Between two consecutive
crossings the coefficient is constant, so the depth is a sum of
``kappa_region * chord_length``. Crossing a boundary face means the segment
leaves the domain; the depth is then the ``BLOCKED`` sentinel and the
attenuation is exactly zero.
"""
from __future__ import annotations

import math
import warnings
from collections import namedtuple
from dataclasses import dataclass, field

import numba as nb
import numpy as np
from scipy.spatial import ConvexHull

from .mesh import TET_FACES, SurfaceMesh, VolumeMesh

BLOCKED = -1.0
"""Sentinel optical depth of a segment that leaves the domain."""

EXTERIOR = -1

_T_EPS = 1e-9
_BARY_EPS = 1e-9
_MAX_HITS = 256
_STACK = 128


def is_blocked(depth: float) -> bool:
    return depth < 0.0


def transmittance(depth: float) -> float:
    return 0.0 if depth < 0.0 else math.exp(-depth)


# ---------------------------------------------------------------------------
# Model types
# ---------------------------------------------------------------------------


@dataclass
class AbsorptionModel:
    """Absorption and scattering coefficients per (band, region tag).

    ``bands`` are ``(nu_lo, nu_hi)`` pairs, disjoint and increasing; ``nu_hi``
    may be ``inf``. ``kappa`` and ``scatter`` have shape (n_bands, n_regions)
    with columns in the order of ``regions``.
    """

    bands: list
    regions: list
    kappa: np.ndarray
    scatter: np.ndarray

    def __post_init__(self):
        self.bands = [(float(lo), float(hi)) for lo, hi in self.bands]
        self.regions = [int(r) for r in self.regions]
        nb_, nr = len(self.bands), len(self.regions)
        self.kappa = np.asarray(self.kappa, dtype=float).reshape(nb_, nr)
        self.scatter = np.asarray(self.scatter, dtype=float).reshape(nb_, nr)
        if nb_ == 0:
            raise ValueError("at least one band is required")
        if len(set(self.regions)) != nr or min(self.regions) < 0:
            raise ValueError("region tags must be distinct non-negative integers")
        for k, (lo, hi) in enumerate(self.bands):
            if not (0 <= lo <= hi):
                raise ValueError(f"band {k} is ill-formed: ({lo}, {hi})")
            if k and lo < self.bands[k - 1][1]:
                raise ValueError(f"band {k} overlaps or is out of order")
        if np.any(~(self.kappa > 0)) or np.any(~np.isfinite(self.kappa)):
            raise ValueError("kappa must be finite and > 0 in every region")
        if np.any((self.scatter < 0) | (self.scatter > 1)):
            raise ValueError("scattering coefficient must lie in [0, 1]")

    @classmethod
    def grey(cls, kappa_by_region: dict, scatter_by_region: dict | None = None):
        regions = sorted(kappa_by_region)
        scatter_by_region = scatter_by_region or {}
        return cls(
            bands=[(0.0, math.inf)],
            regions=regions,
            kappa=[[kappa_by_region[r] for r in regions]],
            scatter=[[scatter_by_region.get(r, 0.0) for r in regions]],
        )

    @property
    def n_bands(self) -> int:
        return len(self.bands)

    def _by_tag(self, table, band):
        out = np.full(max(self.regions) + 1, np.nan)
        out[self.regions] = table[band]
        return out

    def kappa_by_tag(self, band: int) -> np.ndarray:
        """Absorption per region tag (array indexed by tag; NaN for unknown tags)."""
        return self._by_tag(self.kappa, band)

    def scatter_by_tag(self, band: int) -> np.ndarray:
        return self._by_tag(self.scatter, band)

    def distinct_kappa_bands(self) -> dict:
        """Bands grouped by identical absorption columns: {representative band: [bands]}."""
        groups: dict = {}
        for b in range(self.n_bands):
            key = tuple(self.kappa[b])
            groups.setdefault(key, []).append(b)
        return {v[0]: v for v in groups.values()}


@dataclass
class PlanarReflector:
    """Planar reflective boundary patch.

    ``normal`` is the unit normal pointing out of the domain; ``label`` is the
    surface-mesh label of the triangles forming the patch.
    """

    point: np.ndarray
    normal: np.ndarray
    label: int
    r0: float = 1.0

    def __post_init__(self):
        self.point = np.asarray(self.point, dtype=float).reshape(3)
        n = np.asarray(self.normal, dtype=float).reshape(3)
        norm = np.linalg.norm(n)
        if norm == 0:
            raise ValueError("reflector normal must be non-zero")
        self.normal = n / norm
        if not 0.0 <= self.r0 <= 1.0:
            raise ValueError("reflectance must lie in [0, 1]")

    def signed_distance(self, x) -> float:
        return float(np.dot(np.asarray(x, dtype=float) - self.point, self.normal))


@dataclass
class OpticalPath:
    segments: list
    depth_per_band: list = field(default_factory=list)

    @property
    def length(self) -> float:
        return float(sum(np.linalg.norm(np.subtract(b, a)) for a, b in self.segments))


def mirror_point(x, reflector: PlanarReflector) -> np.ndarray:
    """Image of ``x`` across the reflector plane."""
    x = np.asarray(x, dtype=float)
    return x - 2.0 * np.dot(x - reflector.point, reflector.normal) * reflector.normal


# ---------------------------------------------------------------------------
# Bounding volume hierarchy over triangles
# ---------------------------------------------------------------------------

Bvh = namedtuple("Bvh", "lo hi child first count order p0 e1 e2 normal escale reg_neg reg_pos")


def build_bvh(tri: np.ndarray, reg_neg: np.ndarray, reg_pos: np.ndarray, leaf_size: int = 4) -> Bvh:
    """Median-split AABB tree over triangles given as (F, 3, 3) coordinates."""
    tri = np.asarray(tri, dtype=float).reshape(-1, 3, 3)
    nf = len(tri)
    tmin = tri.min(axis=1)
    tmax = tri.max(axis=1)
    cen = tri.mean(axis=1)
    order = np.arange(nf)
    lo, hi, child, first, count = [], [], [], [], []

    def new_node():
        lo.append(np.zeros(3))
        hi.append(np.zeros(3))
        child.append([-1, -1])
        first.append(0)
        count.append(0)
        return len(lo) - 1

    root = new_node()
    stack = [(root, 0, nf)]
    while stack:
        node, s, e = stack.pop()
        idx = order[s:e]
        if e > s:
            lo[node] = tmin[idx].min(axis=0)
            hi[node] = tmax[idx].max(axis=0)
        if e - s <= leaf_size:
            first[node], count[node] = s, e - s
            continue
        axis = int(np.argmax(cen[idx].max(axis=0) - cen[idx].min(axis=0)))
        part = np.argsort(cen[idx, axis], kind="stable")
        order[s:e] = idx[part]
        mid = (s + e) // 2
        left, right = new_node(), new_node()
        child[node] = [left, right]
        stack.append((left, s, mid))
        stack.append((right, mid, e))

    p0 = tri[order, 0]
    e1 = tri[order, 1] - p0
    e2 = tri[order, 2] - p0
    nrm = np.cross(e1, e2)
    nrm /= np.maximum(np.linalg.norm(nrm, axis=1), 1e-300)[:, None]
    return Bvh(
        np.array(lo).reshape(-1, 3), np.array(hi).reshape(-1, 3), np.array(child, dtype=np.int64).reshape(-1, 2),
        np.array(first, dtype=np.int64), np.array(count, dtype=np.int64), order.astype(np.int64),
        np.ascontiguousarray(p0), np.ascontiguousarray(e1), np.ascontiguousarray(e2), np.ascontiguousarray(nrm),
        np.linalg.norm(e1, axis=1) * np.linalg.norm(e2, axis=1), np.asarray(reg_neg, dtype=np.int64)[order], np.asarray(reg_pos, dtype=np.int64)[order],
    )


def merge_bvhs(trees) -> tuple[Bvh, np.ndarray]:
    """Concatenate several trees into one set of arrays; returns it with the root node of each."""
    if not trees:
        trees = [build_bvh(np.zeros((0, 3, 3)), [], [])]
    roots, node_off, face_off = [], 0, 0
    parts = {name: [] for name in Bvh._fields}
    for t in trees:
        roots.append(node_off)
        child = t.child.copy()
        child[child >= 0] += node_off
        shifted = t._replace(child=child, first=t.first + face_off, order=t.order + face_off)
        for name in Bvh._fields:
            parts[name].append(getattr(shifted, name))
        node_off += len(t.lo)
        face_off += len(t.p0)
    merged = Bvh(*(np.ascontiguousarray(np.concatenate(parts[name])) for name in Bvh._fields))
    return merged, np.array(roots, dtype=np.int64)


@nb.njit(cache=True, error_model="numpy", _nrt=False)
def _box_hit(bvh, node, ax, ay, az, ix, iy, iz, t1):
    tn = 0.0
    tf = t1
    t0 = (bvh.lo[node, 0] - ax) * ix
    t2 = (bvh.hi[node, 0] - ax) * ix
    if t0 > t2:
        t0, t2 = t2, t0
    tn = max(tn, t0)
    tf = min(tf, t2)
    t0 = (bvh.lo[node, 1] - ay) * iy
    t2 = (bvh.hi[node, 1] - ay) * iy
    if t0 > t2:
        t0, t2 = t2, t0
    tn = max(tn, t0)
    tf = min(tf, t2)
    t0 = (bvh.lo[node, 2] - az) * iz
    t2 = (bvh.hi[node, 2] - az) * iz
    if t0 > t2:
        t0, t2 = t2, t0
    tn = max(tn, t0)
    tf = min(tf, t2)
    # NaN from 0 * inf (ray in a slab plane) compares False: treat as hit
    return not (tn > tf * (1.0 + 1e-12) + 1e-12)


@nb.njit(cache=True, error_model="numpy", _nrt=False)
def _tri_hit(bvh, f, ax, ay, az, dx, dy, dz, dlen):
    """Segment parameter of the hit with triangle f, or -1."""
    e1x = bvh.e1[f, 0]
    e1y = bvh.e1[f, 1]
    e1z = bvh.e1[f, 2]
    e2x = bvh.e2[f, 0]
    e2y = bvh.e2[f, 1]
    e2z = bvh.e2[f, 2]
    px = dy * e2z - dz * e2y
    py = dz * e2x - dx * e2z
    pz = dx * e2y - dy * e2x
    det = e1x * px + e1y * py + e1z * pz
    if abs(det) <= 1e-12 * dlen * bvh.escale[f]:
        return -1.0
    inv = 1.0 / det
    tx = ax - bvh.p0[f, 0]
    ty = ay - bvh.p0[f, 1]
    tz = az - bvh.p0[f, 2]
    u = (tx * px + ty * py + tz * pz) * inv
    if u < -_BARY_EPS or u > 1.0 + _BARY_EPS:
        return -1.0
    qx = ty * e1z - tz * e1y
    qy = tz * e1x - tx * e1z
    qz = tx * e1y - ty * e1x
    v = (dx * qx + dy * qy + dz * qz) * inv
    if v < -_BARY_EPS or u + v > 1.0 + _BARY_EPS:
        return -1.0
    return (e2x * qx + e2y * qy + e2z * qz) * inv


@nb.njit(cache=True, error_model="numpy", _nrt=False)
def segment_depth(bvh, root, kappa, ax, ay, az, bx, by, bz, region, work_t, work_r, stack):
    """Optical depth of [a, b] starting in ``region``, against the tree at node ``root``.

    Returns (depth, region at b); depth is BLOCKED if the segment leaves the domain.
    """
    dx = bx - ax
    dy = by - ay
    dz = bz - az
    length = math.sqrt(dx * dx + dy * dy + dz * dz)
    if length == 0.0:
        return 0.0, region
    ix = 1.0 / dx
    iy = 1.0 / dy
    iz = 1.0 / dz
    nh = 0
    stack[0] = root
    sp = 1
    while sp > 0:
        sp -= 1
        node = stack[sp]
        if not _box_hit(bvh, node, ax, ay, az, ix, iy, iz, 1.0):
            continue
        cnt = bvh.count[node]
        if cnt > 0 or bvh.child[node, 0] < 0:
            s = bvh.first[node]
            for f in range(s, s + cnt):
                t = _tri_hit(bvh, f, ax, ay, az, dx, dy, dz, length)
                if t <= _T_EPS or t >= 1.0 - _T_EPS:
                    continue
                dn = dx * bvh.normal[f, 0] + dy * bvh.normal[f, 1] + dz * bvh.normal[f, 2]
                if dn > 0.0:
                    entered = bvh.reg_pos[f]
                elif dn < 0.0:
                    entered = bvh.reg_neg[f]
                else:
                    continue
                if entered == EXTERIOR:
                    return BLOCKED, EXTERIOR
                if nh < work_t.shape[0]:
                    work_t[nh] = t
                    work_r[nh] = entered
                    nh += 1
        else:
            stack[sp] = bvh.child[node, 0]
            stack[sp + 1] = bvh.child[node, 1]
            sp += 2
    # insertion sort of the crossings along the segment
    for k in range(1, nh):
        t = work_t[k]
        r = work_r[k]
        m = k - 1
        while m >= 0 and work_t[m] > t:
            work_t[m + 1] = work_t[m]
            work_r[m + 1] = work_r[m]
            m -= 1
        work_t[m + 1] = t
        work_r[m + 1] = r
    depth = 0.0
    cur = region
    prev = 0.0
    for k in range(nh):
        depth += kappa[cur] * (work_t[k] - prev)
        prev = work_t[k]
        cur = work_r[k]
    depth += kappa[cur] * (1.0 - prev)
    return depth * length, cur


@nb.njit(cache=True, error_model="numpy", _nrt=False)
def first_hit(bvh, ax, ay, az, bx, by, bz, stack):
    """Smallest segment parameter in (eps, 1] at which [a, b] meets a triangle (or -1) and its index."""
    dx = bx - ax
    dy = by - ay
    dz = bz - az
    dlen = math.sqrt(dx * dx + dy * dy + dz * dz)
    ix = 1.0 / dx
    iy = 1.0 / dy
    iz = 1.0 / dz
    best = 2.0
    best_f = -1
    stack[0] = 0
    sp = 1
    while sp > 0:
        sp -= 1
        node = stack[sp]
        if not _box_hit(bvh, node, ax, ay, az, ix, iy, iz, min(best, 1.0)):
            continue
        cnt = bvh.count[node]
        if cnt > 0 or bvh.child[node, 0] < 0:
            s = bvh.first[node]
            for f in range(s, s + cnt):
                t = _tri_hit(bvh, f, ax, ay, az, dx, dy, dz, dlen)
                if _T_EPS < t < best:
                    best = t
                    best_f = f
        else:
            stack[sp] = bvh.child[node, 0]
            stack[sp + 1] = bvh.child[node, 1]
            sp += 2
    if best_f < 0:
        return -1.0, -1
    return best, best_f


# ---------------------------------------------------------------------------
# Reflector patches (2D bucket grids in plane coordinates)
# ---------------------------------------------------------------------------

ReflectorArrays = namedtuple(
    "ReflectorArrays", "point normal r0 u v grid_lo grid_inv grid_n cell_off cell_ptr cell_tri tri_off tri2d"
)


def _plane_basis(n):
    a = np.array([1.0, 0.0, 0.0]) if abs(n[0]) < 0.9 else np.array([0.0, 1.0, 0.0])
    u = np.cross(n, a)
    u /= np.linalg.norm(u)
    return u, np.cross(n, u)


def _build_reflector_arrays(reflectors, surface: SurfaceMesh | None, scale: float) -> ReflectorArrays:
    """Per reflector: plane frame plus a square bucket grid of its patch triangles in plane coordinates."""
    npl = len(reflectors)
    m = max(npl, 1)
    point, normal, ub, vb = (np.zeros((m, 3)) for _ in range(4))
    r0 = np.zeros(m)
    grid_lo, grid_inv = np.zeros((m, 2)), np.ones((m, 2))
    grid_n = np.ones(m, dtype=np.int64)
    cell_off = np.zeros(npl + 1, dtype=np.int64)
    tri_off = np.zeros(npl + 1, dtype=np.int64)
    cell_ptr, cell_tri, tris2d = [0], [], []
    for k, refl in enumerate(reflectors):
        sel = np.nonzero(surface.labels == refl.label)[0]
        if len(sel) == 0:
            raise ValueError(f"reflector label {refl.label} has no triangles on the surface mesh")
        p3 = surface.vertices[surface.triangles[sel]]
        if np.abs((p3 - refl.point) @ refl.normal).max() > 1e-8 * scale:
            raise ValueError(f"patch with label {refl.label} is not contained in its reflector plane")
        u, v = _plane_basis(refl.normal)
        point[k], normal[k], r0[k], ub[k], vb[k] = refl.point, refl.normal, refl.r0, u, v
        rel = p3 - refl.point
        t2 = np.stack([rel @ u, rel @ v], axis=-1)
        lo2 = t2.reshape(-1, 2).min(axis=0)
        hi2 = t2.reshape(-1, 2).max(axis=0)
        ncell = max(1, int(math.sqrt(len(sel))))
        inv = ncell / np.maximum(hi2 - lo2, 1e-12 * scale)
        grid_lo[k], grid_inv[k], grid_n[k] = lo2, inv, ncell
        buckets = [[] for _ in range(ncell * ncell)]
        cmin = ((t2.min(axis=1) - lo2) * inv).astype(int).clip(0, ncell - 1)
        cmax = ((t2.max(axis=1) - lo2) * inv).astype(int).clip(0, ncell - 1)
        for t in range(len(sel)):
            for a in range(cmin[t, 0], cmax[t, 0] + 1):
                for b in range(cmin[t, 1], cmax[t, 1] + 1):
                    buckets[a * ncell + b].append(t)
        for bucket in buckets:
            cell_tri.extend(bucket)
            cell_ptr.append(len(cell_tri))
        cell_off[k + 1] = cell_off[k] + ncell * ncell
        tri_off[k + 1] = tri_off[k] + len(sel)
        tris2d.append(t2)
    return ReflectorArrays(
        point, normal, r0, ub, vb, grid_lo, grid_inv, grid_n, cell_off,
        np.array(cell_ptr, dtype=np.int64), np.array(cell_tri, dtype=np.int64), tri_off,
        np.vstack(tris2d) if tris2d else np.zeros((0, 3, 2)),
    )


@nb.njit(cache=True, error_model="numpy", _nrt=False)
def in_patch(ra, k, px, py, pz):
    """Whether point p (on plane k) lies in reflector k's triangulated patch."""
    rx = px - ra.point[k, 0]
    ry = py - ra.point[k, 1]
    rz = pz - ra.point[k, 2]
    pu = rx * ra.u[k, 0] + ry * ra.u[k, 1] + rz * ra.u[k, 2]
    pv = rx * ra.v[k, 0] + ry * ra.v[k, 1] + rz * ra.v[k, 2]
    n = ra.grid_n[k]
    fu = (pu - ra.grid_lo[k, 0]) * ra.grid_inv[k, 0]
    fv = (pv - ra.grid_lo[k, 1]) * ra.grid_inv[k, 1]
    tol = 1e-9 * n
    if fu < -tol or fv < -tol or fu > n + tol or fv > n + tol:
        return False
    a = min(max(int(fu), 0), n - 1)
    b = min(max(int(fv), 0), n - 1)
    cell = ra.cell_off[k] + a * n + b
    base = ra.tri_off[k]
    for m in range(ra.cell_ptr[cell], ra.cell_ptr[cell + 1]):
        t = base + ra.cell_tri[m]
        x0 = ra.tri2d[t, 0, 0]
        y0 = ra.tri2d[t, 0, 1]
        x1 = ra.tri2d[t, 1, 0] - x0
        y1 = ra.tri2d[t, 1, 1] - y0
        x2 = ra.tri2d[t, 2, 0] - x0
        y2 = ra.tri2d[t, 2, 1] - y0
        det = x1 * y2 - x2 * y1
        qx = pu - x0
        qy = pv - y0
        s = (qx * y2 - x2 * qy) / det
        r = (x1 * qy - qx * y1) / det
        if s >= -_BARY_EPS and r >= -_BARY_EPS and s + r <= 1.0 + _BARY_EPS:
            return True
    return False


@nb.njit(cache=True, error_model="numpy", _nrt=False)
def reflection_param(ra, k, xx, xy, xz, yx, yy, yz):
    """Reflection point of the path x -> plane k -> y, as (ok, x'x, x'y, x'z, |mirror(x) - y|)."""
    n0 = ra.normal[k, 0]
    n1 = ra.normal[k, 1]
    n2 = ra.normal[k, 2]
    sx = (xx - ra.point[k, 0]) * n0 + (xy - ra.point[k, 1]) * n1 + (xz - ra.point[k, 2]) * n2
    sy = (yx - ra.point[k, 0]) * n0 + (yy - ra.point[k, 1]) * n1 + (yz - ra.point[k, 2]) * n2
    # points on the plane may come out a rounding error on the wrong side
    tol = 1e-12 * (1.0 + abs(xx) + abs(xy) + abs(xz) + abs(yx) + abs(yy) + abs(yz))
    if sx > tol or sy > tol:
        return False, 0.0, 0.0, 0.0, 0.0
    sx = min(sx, 0.0)
    sy = min(sy, 0.0)
    if sx + sy == 0.0:
        return False, 0.0, 0.0, 0.0, 0.0
    mx = xx - 2.0 * sx * n0
    my = xy - 2.0 * sx * n1
    mz = xz - 2.0 * sx * n2
    t = sx / (sx + sy)
    px = mx + t * (yx - mx)
    py = my + t * (yy - my)
    pz = mz + t * (yz - mz)
    dist = math.sqrt((yx - mx) ** 2 + (yy - my) ** 2 + (yz - mz) ** 2)
    return True, px, py, pz, dist


# ---------------------------------------------------------------------------
# Scene: everything the kernels need to trace rays through one mesh
# ---------------------------------------------------------------------------


class RayScene:
    """Acceleration structures for a volume mesh, its boundary and its reflectors."""

    def __init__(self, mesh: VolumeMesh, surface: SurfaceMesh | None = None, reflectors=()):
        self.mesh = mesh
        self.reflectors = list(reflectors)
        self.diameter = mesh.diameter()
        faces, owner = mesh.boundary_faces()
        bcoords = mesh.vertices[faces]
        self.boundary = build_bvh(bcoords, mesh.regions[owner], np.full(len(faces), EXTERIOR))
        self._boundary_faces = faces
        supporting = self._supporting(bcoords)
        # interior faces where the region tag changes, each once
        tet_id, local = np.nonzero(mesh.neighbors >= 0)
        other = mesh.neighbors[tet_id, local]
        keep = (tet_id < other) & (mesh.regions[tet_id] != mesh.regions[other])
        tet_id, local, other = tet_id[keep], local[keep], other[keep]
        ifaces = mesh.tets[tet_id[:, None], TET_FACES[local]]
        tri = np.concatenate([mesh.vertices[ifaces], bcoords[~supporting]])
        neg = np.concatenate([mesh.regions[tet_id], mesh.regions[owner[~supporting]]])
        pos = np.concatenate([mesh.regions[other], np.full(int((~supporting).sum()), EXTERIOR)])
        self.interfaces = build_bvh(tri, neg, pos)
        self.n_interfaces = len(tri)
        self.surface = surface
        for refl in self.reflectors:
            self._orient(refl)
        if self.reflectors and surface is None:
            raise ValueError("reflectors need a surface mesh to define their patches")
        self.refl = _build_reflector_arrays(self.reflectors, surface, self.diameter)
        self._warn_facing()
        # A specular path y -> x' -> x unfolds to the straight segment y -> mirror(x)
        # through the domain glued to its mirror image, so one traversal of the
        # interfaces plus their reflection gives the depth of both legs at once.
        mirrored = []
        for refl in self.reflectors:
            img = tri - 2.0 * ((tri - refl.point) @ refl.normal)[..., None] * refl.normal
            # reversing the vertex order keeps the normal pointing from neg to pos
            mirrored.append(build_bvh(np.concatenate([tri, img[:, ::-1]]), np.tile(neg, 2), np.tile(pos, 2)))
        self.mirrored, self.mirror_roots = merge_bvhs(mirrored)

    def _supporting(self, bcoords):
        """Boundary faces lying on a supporting plane of the mesh (never crossed by interior chords)."""
        try:
            hull = ConvexHull(self.mesh.vertices)
            hv = self.mesh.vertices[hull.vertices]
        except Exception:
            hv = self.mesh.vertices
        p0 = bcoords[:, 0]
        n = np.cross(bcoords[:, 1] - p0, bcoords[:, 2] - p0)
        n /= np.linalg.norm(n, axis=1)[:, None]
        tol = 1e-9 * self.diameter
        out = np.empty(len(bcoords), dtype=bool)
        for s in range(0, len(bcoords), 2048):
            d = np.einsum("fk,hk->fh", n[s:s + 2048], hv) - np.einsum("fk,fk->f", n[s:s + 2048], p0[s:s + 2048])[:, None]
            out[s:s + 2048] = d.max(axis=1) <= tol
        return out

    def _orient(self, refl: PlanarReflector):
        c = self.mesh.vertices.mean(axis=0)
        if refl.signed_distance(c) > 0:
            refl.normal = -refl.normal
        off = (self.mesh.vertices - refl.point) @ refl.normal
        if off.max() > 1e-9 * self.diameter:
            raise ValueError(f"mesh lies on both sides of reflector plane (label {refl.label})")

    def _warn_facing(self):
        for a in range(len(self.reflectors)):
            for b in range(a + 1, len(self.reflectors)):
                na, nb_ = self.reflectors[a].normal, self.reflectors[b].normal
                if np.dot(na, nb_) < -1 + 1e-9:
                    warnings.warn(
                        f"reflectors {self.reflectors[a].label} and {self.reflectors[b].label} face each other; "
                        "only single-bounce paths are modelled",
                        stacklevel=3,
                    )

    def work(self):
        return np.empty(_MAX_HITS), np.empty(_MAX_HITS, dtype=np.int64), np.empty(_STACK, dtype=np.int64)

    # -- point queries ---------------------------------------------------

    def region_at(self, x) -> int:
        """Region tag of the tet containing x, or EXTERIOR."""
        tet_ids, _ = self.mesh.locate(np.asarray(x, dtype=float)[None])
        return EXTERIOR if tet_ids[0] < 0 else int(self.mesh.regions[tet_ids[0]])

    def start_region(self, a, b) -> int:
        """Region just after leaving ``a`` toward ``b`` (robust when ``a`` sits on a face)."""
        a = np.asarray(a, dtype=float)
        b = np.asarray(b, dtype=float)
        d = b - a
        length = np.linalg.norm(d)
        if length == 0:
            return self.region_at(a)
        step = min(1e-7 * self.diameter, 1e-3 * length)
        probe = a + d / length * step
        return self.region_at(probe)


# ---------------------------------------------------------------------------
# Public point-wise API
# ---------------------------------------------------------------------------


def optical_depth(scene: RayScene, x, y, model: AbsorptionModel, band: int = 0) -> float:
    """Optical depth of the segment [x, y], or BLOCKED if it leaves the domain."""
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=float)
    if np.array_equal(x, y):
        raise ValueError("optical_depth needs x != y")
    region = scene.start_region(x, y)
    if region == EXTERIOR or scene.start_region(y, x) == EXTERIOR:
        return BLOCKED
    kappa = np.nan_to_num(model.kappa_by_tag(band), nan=0.0)
    wt, wr, st = scene.work()
    depth, _ = segment_depth(scene.interfaces, 0, kappa, *x, *y, region, wt, wr, st)
    return float(depth)


def exit_point(scene: RayScene, x, omega) -> tuple[np.ndarray, float, int]:
    """Boundary point reached from ``x`` travelling along ``-omega``: (x_sigma, tau, label).

    The label is the surface label of the hit face when a surface mesh with
    matching geometry is attached, else -1.
    """
    x = np.asarray(x, dtype=float)
    omega = np.asarray(omega, dtype=float)
    omega = omega / np.linalg.norm(omega)
    reach = 2.0 * scene.diameter + 1.0
    stack = np.empty(_STACK, dtype=np.int64)
    for attempt in range(2):
        b = x - reach * omega
        t, f = first_hit(scene.boundary, *x, *b, stack)
        if f >= 0:
            tau = t * reach
            if tau > 1e-10 * scene.diameter:
                break
        # x on the boundary with a tangent or outgoing ray: nudge inward and retry
        x = _nudge_inward(scene, x)
    else:
        raise ValueError("no boundary crossing found along -omega")
    xs = x - tau * omega
    return xs, float(tau), _surface_label_at(scene, xs)


def angular_integral(scene: RayScene, x, psi=None, n_directions: int = 10_000, rng=None, n_gauss: int = 16) -> float:
    """Monte-Carlo value of int_Omega psi(y) / |y - x|^2 dy in polar form about ``x``.

    The volume integral equals int_{S^2} int_0^{tau(x, omega)} psi(x - s omega) ds d omega
    for a domain star-shaped about x; directions are uniform on the sphere and
    the chord integral is Gauss-Legendre (exact chord length when psi is None).
    """
    rng = np.random.default_rng(rng)
    dirs = rng.normal(size=(int(n_directions), 3))
    dirs /= np.linalg.norm(dirs, axis=1)[:, None]
    x = np.asarray(x, dtype=float)
    if psi is not None:
        g, gw = np.polynomial.legendre.leggauss(n_gauss)
    acc = 0.0
    for omega in dirs:
        _, tau, _ = exit_point(scene, x, omega)
        if psi is None:
            acc += tau
        else:
            s = 0.5 * tau * (g + 1.0)
            acc += 0.5 * tau * float(gw @ np.asarray(psi(x - s[:, None] * omega), dtype=float))
    return 4.0 * np.pi * acc / len(dirs)


def _nudge_inward(scene, x):
    bvh = scene.boundary
    p = bvh.p0 + (bvh.e1 + bvh.e2) / 3.0
    f = int(np.argmin(np.linalg.norm(p - x, axis=1)))
    return x - 1e-12 * scene.diameter * bvh.normal[f]


def _surface_label_at(scene, p):
    surf = scene.surface
    if surf is None or len(surf.triangles) == 0:
        return -1
    tri = surf.vertices[surf.triangles]
    dist = np.abs(np.einsum("ij,ij->i", p - tri[:, 0], surf.normals))
    cand = np.nonzero(dist < 1e-8 * scene.diameter)[0]
    for t in cand:
        a, b, c = tri[t]
        v0, v1, v2 = b - a, c - a, p - a
        d00, d01, d11 = v0 @ v0, v0 @ v1, v1 @ v1
        d20, d21 = v2 @ v0, v2 @ v1
        den = d00 * d11 - d01 * d01
        s = (d11 * d20 - d01 * d21) / den
        r = (d00 * d21 - d01 * d20) / den
        if s >= -1e-9 and r >= -1e-9 and s + r <= 1 + 1e-9:
            return int(surf.labels[t])
    return -1


def reflection_point(scene: RayScene, x, y, reflector_index: int):
    """Specular point on reflector ``k`` of a path x -> x' -> y, or None."""
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=float)
    ra = scene.refl
    ok, px, py, pz, _ = reflection_param(ra, reflector_index, *x, *y)
    if not ok:
        return None
    if not in_patch(ra, reflector_index, px, py, pz):
        return None
    return np.array([px, py, pz])


def reflected_paths(scene: RayScene, x, y, model: AbsorptionModel | None = None):
    """Single-bounce specular paths x -> x'_n -> y, one per reflector at most.

    Returns a list of (reflector index, x'_n, OpticalPath); the path's depth per
    band is filled when ``model`` is given.
    """
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=float)
    out = []
    for k in range(len(scene.reflectors)):
        xp = reflection_point(scene, x, y, k)
        if xp is None:
            continue
        path = OpticalPath(segments=[(x, xp), (xp, y)])
        if model is not None:
            for band in range(model.n_bands):
                d1 = optical_depth(scene, x, xp, model, band) if not np.allclose(x, xp) else 0.0
                d2 = optical_depth(scene, xp, y, model, band) if not np.allclose(xp, y) else 0.0
                path.depth_per_band.append(BLOCKED if (d1 < 0 or d2 < 0) else d1 + d2)
        out.append((k, xp, path))
    return out
