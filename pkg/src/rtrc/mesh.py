"""Tetrahedral volume meshes, triangular surface meshes and fixed quadrature rules.

File formats (0-based indices)::

    tetmesh <N> <M>
    v x y z            (N lines)
    t i0 i1 i2 i3 reg  (M lines)

    trimesh <L> <K> ix iy iz
    v x y z            (L lines)
    f i0 i1 i2 label   (K lines)

The trailing ``ix iy iz`` of a surface file is an interior reference point used
to orient the triangle normals outward.
"""
from __future__ import annotations

import itertools
from dataclasses import dataclass, field
from pathlib import Path

import numba as nb
import numpy as np
from scipy.spatial import cKDTree


class MeshError(ValueError):
    """Malformed or degenerate mesh input."""


class PointOutsideMesh(LookupError):
    """A query point lies outside every element of the mesh."""


# ---------------------------------------------------------------------------
# Quadrature rules
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class QuadratureRule:
    """Symmetric rule on the reference simplex.

    ``points`` are barycentric coordinates (one row per point, all entries
    strictly positive); ``weights`` sum to the reference measure (1/6 for the
    tetrahedron, 1/2 for the triangle).
    """

    degree: int
    points: np.ndarray
    weights: np.ndarray

    @property
    def size(self) -> int:
        return len(self.weights)

    def normalized_weights(self) -> np.ndarray:
        return self.weights / self.weights.sum()


def _tet_orbit_4(a):
    return [[1 - 3 * a if k == m else a for m in range(4)] for k in range(4)]


def _tet_orbit_6(b):
    c = 0.5 - b
    out = []
    for i, j in itertools.combinations(range(4), 2):
        row = [c] * 4
        row[i] = row[j] = b
        out.append(row)
    return out


def _tri_orbit_3(a):
    return [[1 - 2 * a if k == m else a for m in range(3)] for k in range(3)]


def _build_tet_rules():
    g = 0.1381966011250105
    deg2 = QuadratureRule(2, np.array(_tet_orbit_4(g)), np.full(4, 1.0 / 24.0))
    pts = (
        _tet_orbit_4(0.0927352503108912)
        + _tet_orbit_4(0.3108859192633006)
        + _tet_orbit_6(0.4544962958743504)
    )
    w = [0.01224884051939366] * 4 + [0.01878132095300264] * 4 + [0.007091003462846911] * 6
    deg5 = QuadratureRule(5, np.array(pts), np.array(w))
    return {2: deg2, 5: deg5}


def _build_tri_rules():
    deg2 = QuadratureRule(2, np.array(_tri_orbit_3(1.0 / 6.0)), np.full(3, 1.0 / 6.0))
    s15 = np.sqrt(15.0)
    a1, a2 = (6 - s15) / 21, (6 + s15) / 21
    pts = [[1 / 3, 1 / 3, 1 / 3]] + _tri_orbit_3(a1) + _tri_orbit_3(a2)
    w = np.array([9 / 40] + [(155 - s15) / 1200] * 3 + [(155 + s15) / 1200] * 3) / 2
    return {2: deg2, 5: QuadratureRule(5, np.array(pts), w)}


TET_RULES = _build_tet_rules()
TRI_RULES = _build_tri_rules()


def tet_quadrature(tet: np.ndarray, degree: int) -> list[tuple[np.ndarray, float]]:
    """Quadrature points and weights on a physical tetrahedron given as a (4, 3) array."""
    if degree not in TET_RULES:
        raise ValueError(f"tet quadrature degree must be 2 or 5, got {degree}")
    tet = np.asarray(tet, dtype=float)
    rule = TET_RULES[degree]
    vol = abs(_signed_volumes(tet[None])[0])
    pts = rule.points @ tet
    w = rule.normalized_weights() * vol
    return [(p, float(wq)) for p, wq in zip(pts, w)]


# ---------------------------------------------------------------------------
# Volume mesh
# ---------------------------------------------------------------------------


def _signed_volumes(coords: np.ndarray) -> np.ndarray:
    """Signed volumes of tets given as (M, 4, 3)."""
    a = coords[:, 1] - coords[:, 0]
    b = coords[:, 2] - coords[:, 0]
    c = coords[:, 3] - coords[:, 0]
    return np.einsum("ij,ij->i", a, np.cross(b, c)) / 6.0


# local face k is opposite local vertex k
TET_FACES = np.array([[1, 2, 3], [0, 3, 2], [0, 1, 3], [0, 2, 1]])


@dataclass(eq=False)
class VolumeMesh:
    vertices: np.ndarray
    tets: np.ndarray
    regions: np.ndarray
    neighbors: np.ndarray = field(init=False, repr=False)

    def __post_init__(self):
        # private copies: tets may be reoriented in place and all arrays are frozen below
        self.vertices = np.array(self.vertices, dtype=np.float64, order="C")
        self.tets = np.array(self.tets, dtype=np.int64, order="C")
        self.regions = np.array(self.regions, dtype=np.int64, order="C")
        n = len(self.vertices)
        if self.tets.ndim != 2 or self.tets.shape[1] != 4:
            raise MeshError("tets must be an (M, 4) array")
        if len(self.regions) != len(self.tets):
            raise MeshError("one region tag per tet required")
        bad = np.nonzero((self.tets < 0) | (self.tets >= n))[0]
        if len(bad):
            raise MeshError(f"tet {bad[0]} references a vertex outside 0..{n - 1}")
        vol = _signed_volumes(self.vertices[self.tets])
        scale = np.abs(vol).max() if len(vol) else 1.0
        degenerate = np.nonzero(np.abs(vol) <= 1e-14 * scale)[0]
        if len(degenerate):
            raise MeshError(f"tet {degenerate[0]} has zero volume")
        flip = vol < 0
        if flip.any():
            self.tets[flip] = self.tets[flip][:, [1, 0, 2, 3]]
        self.volumes = np.abs(vol)
        self.neighbors = _tet_neighbors(self.tets)
        for arr in (self.vertices, self.tets, self.regions, self.neighbors, self.volumes):
            arr.flags.writeable = False
        self._tree = None

    @property
    def n_vertices(self) -> int:
        return len(self.vertices)

    @property
    def n_tets(self) -> int:
        return len(self.tets)

    @property
    def centroids(self) -> np.ndarray:
        return self.vertices[self.tets].mean(axis=1)

    def boundary_faces(self) -> tuple[np.ndarray, np.ndarray]:
        """Boundary faces as (F, 3) vertex indices, outward oriented, plus the owning tet."""
        tet_id, local = np.nonzero(self.neighbors < 0)
        faces = self.tets[tet_id[:, None], TET_FACES[local]]
        return faces, tet_id

    def vertex_tets(self) -> tuple[np.ndarray, np.ndarray]:
        """CSR incidence (ptr, tet ids) from vertices to the tets that contain them."""
        flat = self.tets.ravel()
        order = np.argsort(flat, kind="stable")
        ptr = np.zeros(self.n_vertices + 1, dtype=np.int64)
        np.add.at(ptr, flat + 1, 1)
        return np.cumsum(ptr), order // 4

    def mesh_size(self) -> np.ndarray:
        """Average incident edge length at every vertex."""
        edges = self.tets[:, list(itertools.combinations(range(4), 2))].reshape(-1, 2)
        edges = np.unique(np.sort(edges, axis=1), axis=0)
        length = np.linalg.norm(self.vertices[edges[:, 0]] - self.vertices[edges[:, 1]], axis=1)
        total = np.bincount(edges.ravel(), weights=np.repeat(length, 2), minlength=self.n_vertices)
        count = np.bincount(edges.ravel(), minlength=self.n_vertices)
        return total / np.maximum(count, 1)

    def diameter(self) -> float:
        return float(np.linalg.norm(self.vertices.max(axis=0) - self.vertices.min(axis=0)))

    def locate(self, points: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        """Containing tet (or -1) and barycentric coordinates for each point."""
        pts = np.atleast_2d(np.asarray(points, dtype=np.float64))
        if self._tree is None:
            self._tree = cKDTree(self.centroids)
        _, start = self._tree.query(pts)
        tol = 1e-12
        tet_ids, bary = _walk_locate(self.vertices, self.tets, self.neighbors, pts, start.astype(np.int64), tol)
        for k in np.nonzero(tet_ids < 0)[0]:
            tet_ids[k], bary[k] = self._brute_locate(pts[k], tol)
        return tet_ids, bary

    def _brute_locate(self, p, tol):
        lam = _barycentric_all(self.vertices[self.tets], p)
        inside = np.nonzero(lam.min(axis=1) >= -tol)[0]
        if len(inside) == 0:
            return -1, np.zeros(4)
        t = inside[0]
        return t, lam[t]

    def interpolate(self, nodal: np.ndarray, points: np.ndarray) -> np.ndarray:
        """P1 interpolation of a nodal field at points; NaN outside the mesh."""
        tet_ids, bary = self.locate(points)
        nodal = np.asarray(nodal, dtype=float)
        out = np.full(len(tet_ids), np.nan)
        ok = tet_ids >= 0
        out[ok] = np.einsum("ij,ij->i", bary[ok], nodal[self.tets[tet_ids[ok]]])
        return out

    def l2_inner(self, u: np.ndarray, v: np.ndarray) -> float:
        """Exact integral of the product of two P1 fields over the mesh."""
        uu = u[self.tets]
        vv = v[self.tets]
        local = (np.einsum("ij,ij->i", uu, vv) + uu.sum(1) * vv.sum(1)) / 20.0
        return float((local * self.volumes).sum())

    def save(self, path) -> None:
        with open(path, "w") as fh:
            fh.write(f"tetmesh {self.n_vertices} {self.n_tets}\n")
            for x, y, z in self.vertices.tolist():
                fh.write(f"v {x!r} {y!r} {z!r}\n")
            for (a, b, c, d), r in zip(self.tets, self.regions):
                fh.write(f"t {a} {b} {c} {d} {r}\n")


def _barycentric_all(coords: np.ndarray, p: np.ndarray) -> np.ndarray:
    t = np.stack([coords[:, 1] - coords[:, 0], coords[:, 2] - coords[:, 0], coords[:, 3] - coords[:, 0]], axis=2)
    rhs = p - coords[:, 0]
    sol = np.linalg.solve(t, rhs[..., None])[..., 0]
    return np.column_stack([1 - sol.sum(axis=1), sol])


@nb.njit(cache=True)
def _bary(v, tet, p, out):
    a = v[tet[0]]
    m = np.empty((3, 3))
    for k in range(3):
        for d in range(3):
            m[d, k] = v[tet[k + 1], d] - a[d]
    det = (
        m[0, 0] * (m[1, 1] * m[2, 2] - m[1, 2] * m[2, 1])
        - m[0, 1] * (m[1, 0] * m[2, 2] - m[1, 2] * m[2, 0])
        + m[0, 2] * (m[1, 0] * m[2, 1] - m[1, 1] * m[2, 0])
    )
    r = np.empty(3)
    for d in range(3):
        r[d] = p[d] - a[d]
    # Cramer's rule
    for k in range(3):
        mk = m.copy()
        for d in range(3):
            mk[d, k] = r[d]
        out[k + 1] = (
            mk[0, 0] * (mk[1, 1] * mk[2, 2] - mk[1, 2] * mk[2, 1])
            - mk[0, 1] * (mk[1, 0] * mk[2, 2] - mk[1, 2] * mk[2, 0])
            + mk[0, 2] * (mk[1, 0] * mk[2, 1] - mk[1, 1] * mk[2, 0])
        ) / det
    out[0] = 1.0 - out[1] - out[2] - out[3]


@nb.njit(cache=True)
def _walk_locate(vertices, tets, neighbors, pts, start, tol):
    n = pts.shape[0]
    ids = np.full(n, -1, dtype=np.int64)
    bary = np.zeros((n, 4))
    lam = np.empty(4)
    max_steps = 4 * int(round(tets.shape[0] ** (1.0 / 3.0))) + 50
    for k in range(n):
        t = start[k]
        prev = -1
        for _ in range(max_steps):
            _bary(vertices, tets[t], pts[k], lam)
            worst = 0
            for m in range(1, 4):
                if lam[m] < lam[worst]:
                    worst = m
            if lam[worst] >= -tol:
                ids[k] = t
                bary[k, :] = lam
                break
            nxt = neighbors[t, worst]
            if nxt < 0 or nxt == prev:
                break
            prev = t
            t = nxt
    return ids, bary


def _tet_neighbors(tets: np.ndarray) -> np.ndarray:
    m = len(tets)
    faces = np.sort(tets[:, TET_FACES].reshape(-1, 3), axis=1)
    order = np.lexsort((faces[:, 2], faces[:, 1], faces[:, 0]))
    sf = faces[order]
    same = np.all(sf[1:] == sf[:-1], axis=1)
    if np.any(same[1:] & same[:-1]):
        raise MeshError("a face is shared by more than two tets")
    nbr = np.full(4 * m, -1, dtype=np.int64)
    first = order[:-1][same]
    second = order[1:][same]
    nbr[first] = second // 4
    nbr[second] = first // 4
    return nbr.reshape(m, 4)


def _read_lines(path):
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(str(path))
    with open(path) as fh:
        for lineno, raw in enumerate(fh, 1):
            line = raw.split("#", 1)[0].strip()
            if line:
                yield lineno, line.split()


def load_volume_mesh(path) -> VolumeMesh:
    lines = _read_lines(path)
    try:
        lineno, head = next(lines)
    except StopIteration:
        raise MeshError(f"{path}: empty file") from None
    if head[0] != "tetmesh" or len(head) != 3:
        raise MeshError(f"{path}:{lineno}: expected 'tetmesh <N> <M>'")
    n, m = int(head[1]), int(head[2])
    verts, tets, regions = [], [], []
    for lineno, tok in lines:
        try:
            if tok[0] == "v" and len(tok) == 4:
                verts.append([float(t) for t in tok[1:]])
            elif tok[0] == "t" and len(tok) == 6:
                idx = [int(t) for t in tok[1:5]]
                bad = [i for i in idx if not 0 <= i < n]
                if bad:
                    raise MeshError(f"{path}:{lineno}: tet {len(tets)} references vertex {bad[0]} of {n}")
                tets.append(idx)
                regions.append(int(tok[5]))
            else:
                raise MeshError(f"{path}:{lineno}: malformed line")
        except ValueError as exc:
            if isinstance(exc, MeshError):
                raise
            raise MeshError(f"{path}:{lineno}: {exc}") from None
    if len(verts) != n or len(tets) != m:
        raise MeshError(f"{path}: header announces {n} vertices/{m} tets, found {len(verts)}/{len(tets)}")
    return VolumeMesh(np.array(verts, dtype=float).reshape(-1, 3), np.array(tets, dtype=np.int64).reshape(-1, 4),
                      np.array(regions, dtype=np.int64))


# ---------------------------------------------------------------------------
# Surface mesh
# ---------------------------------------------------------------------------


@dataclass(eq=False)
class SurfaceMesh:
    """Triangulated boundary with one integer label per triangle.

    Normals are unit and outward. ``owner_region`` optionally records the region
    tag of the volume element adjacent to each triangle (filled by
    :func:`surface_from_volume` or :meth:`attach_regions`).
    """

    vertices: np.ndarray
    triangles: np.ndarray
    labels: np.ndarray
    normals: np.ndarray = None
    owner_region: np.ndarray = None

    def __post_init__(self):
        self.vertices = np.ascontiguousarray(self.vertices, dtype=np.float64)
        self.triangles = np.ascontiguousarray(self.triangles, dtype=np.int64).reshape(-1, 3)
        self.labels = np.ascontiguousarray(self.labels, dtype=np.int64)
        cross = self._cross()
        area2 = np.linalg.norm(cross, axis=1)
        scale = area2.max() if len(area2) else 1.0
        bad = np.nonzero(area2 <= 1e-14 * scale)[0]
        if len(bad):
            raise MeshError(f"triangle {bad[0]} has zero area")
        if self.normals is None:
            self.normals = cross / area2[:, None]
        self.areas = area2 / 2.0

    def _cross(self):
        p = self.vertices[self.triangles]
        return np.cross(p[:, 1] - p[:, 0], p[:, 2] - p[:, 0])

    @property
    def n_vertices(self) -> int:
        return len(self.vertices)

    @property
    def centroids(self) -> np.ndarray:
        return self.vertices[self.triangles].mean(axis=1)

    def orient_outward(self, interior_point) -> None:
        """Flip triangles whose normal points toward the interior reference point."""
        ref = np.asarray(interior_point, dtype=float)
        flip = np.einsum("ij,ij->i", self.centroids - ref, self.normals) < 0
        if flip.any():
            self.triangles[flip] = self.triangles[flip][:, [0, 2, 1]]
        cross = self._cross()
        self.normals = cross / np.linalg.norm(cross, axis=1)[:, None]

    def enclosed_volume(self) -> float:
        return float(np.sum(np.einsum("ij,ij->i", self.centroids, self.normals) * self.areas) / 3.0)

    def label_set(self) -> set[int]:
        return set(int(x) for x in np.unique(self.labels))

    def submesh(self, labels) -> tuple["SurfaceMesh", np.ndarray]:
        """Triangles carrying any of ``labels``; vertices are duplicated per label
        so nodal data may jump across label boundaries. Returns the submesh and,
        per submesh vertex, its index in this mesh."""
        verts, tris, labs, normals, owners, parent = [], [], [], [], [], []
        offset = 0
        for lab in sorted(set(int(x) for x in labels)):
            sel = np.nonzero(self.labels == lab)[0]
            if len(sel) == 0:
                continue
            used, inv = np.unique(self.triangles[sel], return_inverse=True)
            verts.append(self.vertices[used])
            parent.append(used)
            tris.append(inv.reshape(-1, 3) + offset)
            labs.append(np.full(len(sel), lab))
            normals.append(self.normals[sel])
            if self.owner_region is not None:
                owners.append(self.owner_region[sel])
            offset += len(used)
        if not verts:
            empty = SurfaceMesh.__new__(SurfaceMesh)
            empty.vertices = np.zeros((0, 3))
            empty.triangles = np.zeros((0, 3), dtype=np.int64)
            empty.labels = np.zeros(0, dtype=np.int64)
            empty.normals = np.zeros((0, 3))
            empty.owner_region = np.zeros(0, dtype=np.int64)
            empty.areas = np.zeros(0)
            return empty, np.zeros(0, dtype=np.int64)
        sub = SurfaceMesh(
            np.vstack(verts), np.vstack(tris), np.concatenate(labs),
            normals=np.vstack(normals),
            owner_region=np.concatenate(owners) if owners else None,
        )
        return sub, np.concatenate(parent)

    def attach_regions(self, volume: VolumeMesh) -> None:
        """Region of the volume element just inside each triangle (non-conforming meshes)."""
        eps = 1e-7 * volume.diameter()
        probe = self.centroids - eps * self.normals
        tet_ids, _ = volume.locate(probe)
        if np.any(tet_ids < 0):
            raise MeshError(f"triangle {int(np.nonzero(tet_ids < 0)[0][0])} is not adjacent to the volume mesh")
        self.owner_region = volume.regions[tet_ids]

    def save(self, path, interior_point) -> None:
        ix, iy, iz = (float(c) for c in interior_point)
        with open(path, "w") as fh:
            fh.write(f"trimesh {self.n_vertices} {len(self.triangles)} {ix!r} {iy!r} {iz!r}\n")
            for x, y, z in self.vertices.tolist():
                fh.write(f"v {x!r} {y!r} {z!r}\n")
            for (a, b, c), lab in zip(self.triangles, self.labels):
                fh.write(f"f {a} {b} {c} {lab}\n")


def load_surface_mesh(path) -> SurfaceMesh:
    lines = _read_lines(path)
    try:
        lineno, head = next(lines)
    except StopIteration:
        raise MeshError(f"{path}: empty file") from None
    if head[0] != "trimesh" or len(head) != 6:
        raise MeshError(f"{path}:{lineno}: expected 'trimesh <L> <K> ix iy iz'")
    n, k = int(head[1]), int(head[2])
    ref = [float(x) for x in head[3:6]]
    verts, tris, labels = [], [], []
    for lineno, tok in lines:
        if tok[0] == "v" and len(tok) == 4:
            verts.append([float(t) for t in tok[1:]])
        elif tok[0] == "f" and len(tok) == 4:
            raise MeshError(f"{path}:{lineno}: triangle {len(tris)} has no label")
        elif tok[0] == "f" and len(tok) == 5:
            idx = [int(t) for t in tok[1:4]]
            bad = [i for i in idx if not 0 <= i < n]
            if bad:
                raise MeshError(f"{path}:{lineno}: triangle {len(tris)} references vertex {bad[0]} of {n}")
            tris.append(idx)
            labels.append(int(tok[4]))
        else:
            raise MeshError(f"{path}:{lineno}: malformed line")
    if len(verts) != n or len(tris) != k:
        raise MeshError(f"{path}: header announces {n} vertices/{k} triangles, found {len(verts)}/{len(tris)}")
    surf = SurfaceMesh(np.array(verts).reshape(-1, 3), np.array(tris, dtype=np.int64), np.array(labels))
    surf.orient_outward(ref)
    return surf


def surface_from_volume(mesh: VolumeMesh, labeler) -> SurfaceMesh:
    """Boundary triangulation of a volume mesh (conforming, exactly outward).

    ``labeler`` maps (centroids (F, 3), normals (F, 3)) to integer labels.
    """
    faces, owner = mesh.boundary_faces()
    used, inv = np.unique(faces, return_inverse=True)
    tris = inv.reshape(-1, 3)
    verts = mesh.vertices[used]
    p = verts[tris]
    cross = np.cross(p[:, 1] - p[:, 0], p[:, 2] - p[:, 0])
    normals = cross / np.linalg.norm(cross, axis=1)[:, None]
    labels = np.asarray(labeler(p.mean(axis=1), normals), dtype=np.int64)
    return SurfaceMesh(verts, tris, labels, normals=normals, owner_region=mesh.regions[owner].copy())


def hat_eval(mesh: VolumeMesh, j: int, y) -> float:
    """Value at ``y`` of the P1 hat function attached to vertex ``j``."""
    tet_ids, bary = mesh.locate(np.asarray(y, dtype=float)[None])
    t = tet_ids[0]
    if t < 0:
        raise PointOutsideMesh(f"point {tuple(np.asarray(y).tolist())} is outside the mesh")
    local = np.nonzero(mesh.tets[t] == j)[0]
    return float(bary[0][local[0]]) if len(local) else 0.0
