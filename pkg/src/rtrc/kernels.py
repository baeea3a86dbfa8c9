"""Quadrature kernels of the two dense operators.

Volume operator (targets: volume vertices x^i, columns: volume hat functions)::

    G^{ij} = 1/(4 pi) sum_T sum_q w_q kappa(y_q) lam_j(y_q)
             [ e^{-d(y_q, x^i)} / |x^i - y_q|^2 + sum_n R0_n e^{-d_n} / L_n^2 ]

Source operator (columns: hat functions of the source part of the surface)::

    S^{il} = 1/(4 pi) sum_F sum_q w_q lam_l(y_q)
             [ ([(x^i - y_q).n]_-)^2 / |x^i - y_q|^4 e^{-d}
               + sum_n R0_n ([(x'_n - y_q).n]_-)^2 / (|x'_n - y_q|^2 L_n^2) e^{-d_n} ]

``L_n = |mirror_n(x^i) - y_q|`` is the length of the specular path through
``x'_n`` and ``d_n`` its optical depth. Both operators factor as a point kernel
``K(x^i, y_q)`` times a sparse matrix ``W`` of weights and hat values. Far
elements use the degree-2 rule, elements whose centroid is within ``r_near``
of the target use the degree-5 rule; the difference between the two on near
pairs is kept as a sparse correction so the far part stays a clean product.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numba as nb
import numpy as np
import scipy.sparse as sp
from scipy.spatial import cKDTree

from .geometry import AbsorptionModel, RayScene, in_patch, reflection_param, segment_depth
from .mesh import TET_RULES, TRI_RULES, SurfaceMesh, VolumeMesh

_MAX_HITS = 256
_STACK = 128
_INV_4PI = 1.0 / (4.0 * math.pi)


# ---------------------------------------------------------------------------
# Point kernel
# ---------------------------------------------------------------------------


# no allocations here: compiling without the runtime drops the per-call reference
# counting on every array argument, which otherwise dominates the cost of a trace
@nb.njit(cache=True, error_model="numpy", _nrt=False)
def _point_kernel(bvh, mbvh, roots, ra, nrefl, kappa, xx, xy, xz, yx, yy, yz, reg, nx, ny, nz, surface,
                  wt, wr, st):
    dx = xx - yx
    dy = xy - yy
    dz = xz - yz
    d2 = dx * dx + dy * dy + dz * dz
    if d2 == 0.0:
        return 0.0
    if surface:
        c = dx * nx + dy * ny + dz * nz
        factor = c * c / (d2 * d2) if c < 0.0 else 0.0
    else:
        factor = 1.0 / d2
    val = 0.0
    if factor > 0.0:
        depth, _ = segment_depth(bvh, 0, kappa, yx, yy, yz, xx, xy, xz, reg, wt, wr, st)
        if depth >= 0.0:
            val = factor * math.exp(-depth)
    for k in range(nrefl):
        ok, px, py, pz, length = reflection_param(ra, k, xx, xy, xz, yx, yy, yz)
        if not ok or length == 0.0:
            continue
        if surface:
            ex = px - yx
            ey = py - yy
            ez = pz - yz
            c = ex * nx + ey * ny + ez * nz
            e2 = ex * ex + ey * ey + ez * ez
            if c >= 0.0 or e2 == 0.0:
                continue
            f = c * c / (e2 * length * length)
        else:
            f = 1.0 / (length * length)
        if not in_patch(ra, k, px, py, pz):
            continue
        n0 = ra.normal[k, 0]
        n1 = ra.normal[k, 1]
        n2 = ra.normal[k, 2]
        s = (xx - ra.point[k, 0]) * n0 + (xy - ra.point[k, 1]) * n1 + (xz - ra.point[k, 2]) * n2
        mx = xx - 2.0 * s * n0
        my = xy - 2.0 * s * n1
        mz = xz - 2.0 * s * n2
        depth, _ = segment_depth(mbvh, roots[k], kappa, yx, yy, yz, mx, my, mz, reg, wt, wr, st)
        if depth >= 0.0:
            val += ra.r0[k] * f * math.exp(-depth)
    return val


@nb.njit(parallel=True, cache=True, error_model="numpy")
def kernel_block(bvh, mbvh, roots, ra, nrefl, kappa, xs, ys, yreg, ynrm, surface, out):
    """out[a, b] = K(xs[a], ys[b])."""
    m = xs.shape[0]
    q = ys.shape[0]
    for a in nb.prange(m):
        wt = np.empty(_MAX_HITS)
        wr = np.empty(_MAX_HITS, dtype=np.int64)
        st = np.empty(_STACK, dtype=np.int64)
        for b in range(q):
            out[a, b] = _point_kernel(bvh, mbvh, roots, ra, nrefl, kappa, xs[a, 0], xs[a, 1], xs[a, 2],
                                      ys[b, 0], ys[b, 1], ys[b, 2], yreg[b], ynrm[b, 0], ynrm[b, 1], ynrm[b, 2],
                                      surface, wt, wr, st)


@nb.njit(parallel=True, cache=True, error_model="numpy")
def kernel_pairs(bvh, mbvh, roots, ra, nrefl, kappa, xs, xi, ys, yi, yreg, ynrm, surface, out):
    """out[p] = K(xs[xi[p]], ys[yi[p]])."""
    n = xi.shape[0]
    chunk = 256
    for c in nb.prange((n + chunk - 1) // chunk):
        wt = np.empty(_MAX_HITS)
        wr = np.empty(_MAX_HITS, dtype=np.int64)
        st = np.empty(_STACK, dtype=np.int64)
        for p in range(c * chunk, min(n, (c + 1) * chunk)):
            a = xi[p]
            b = yi[p]
            out[p] = _point_kernel(bvh, mbvh, roots, ra, nrefl, kappa, xs[a, 0], xs[a, 1], xs[a, 2],
                                   ys[b, 0], ys[b, 1], ys[b, 2], yreg[b], ynrm[b, 0], ynrm[b, 1], ynrm[b, 2],
                                   surface, wt, wr, st)


# ---------------------------------------------------------------------------
# Element quadrature
# ---------------------------------------------------------------------------


@dataclass
class ElementQuadrature:
    """Quadrature points of every element for one rule.

    Point ``e * nq + k`` is the k-th point of element e. ``weights[p, a]`` is
    the integration weight times the coefficient of the element times the
    hat value of the element's local vertex a at point p.
    """

    points: np.ndarray
    region: np.ndarray
    normal: np.ndarray
    weights: np.ndarray
    nq: int


def _element_quadrature(coords, rule, measure, coef, region, normal) -> ElementQuadrature:
    ne, nv = coords.shape[:2]
    nq = rule.size
    pts = np.einsum("qa,eak->eqk", rule.points, coords).reshape(-1, 3)
    w = (rule.normalized_weights()[None, :] * (measure * coef)[:, None]).reshape(-1)
    lam = np.tile(rule.points, (ne, 1))
    return ElementQuadrature(
        np.ascontiguousarray(pts), np.repeat(region, nq).astype(np.int64),
        np.ascontiguousarray(np.repeat(normal, nq, axis=0)), w[:, None] * lam, nq,
    )


class QuadratureOperator:
    """One discretized operator: targets x^i, elements carrying the column hat functions.

    Implements the factored generator protocol of :mod:`rtrc.hmatrix`
    (``shape``, ``expand``, ``kernel``).
    """

    def __init__(self, ctx, elems, coords, measure, coef, region, normal, rules, surface: bool, n_cols: int):
        self.ctx = ctx
        self.targets = np.ascontiguousarray(ctx.volume.vertices)
        self.elems = np.asarray(elems, dtype=np.int64)
        self.surface = bool(surface)
        self.shape = (len(self.targets), int(n_cols))
        self.far = _element_quadrature(coords, rules[2], measure, coef, region, normal)
        self.near = _element_quadrature(coords, rules[5], measure, coef, region, normal)
        self.centroids = coords.mean(axis=1)
        flat = self.elems.ravel()
        order = np.argsort(flat, kind="stable")
        self._ptr = np.concatenate([[0], np.cumsum(np.bincount(flat, minlength=n_cols))])
        self._elem_of = order // self.elems.shape[1]
        self._correction = None
        self.local = None  # optional sparse term added to the correction (trace limits on the boundary)

    # -- generator protocol ----------------------------------------------

    def elements_of(self, cols) -> np.ndarray:
        cols = np.asarray(cols, dtype=np.int64)
        parts = [self._elem_of[self._ptr[c]:self._ptr[c + 1]] for c in cols]
        return np.unique(np.concatenate(parts)) if parts else np.zeros(0, dtype=np.int64)

    def expand(self, cols):
        """Far-rule quadrature points supporting ``cols`` and the sparse map to those columns."""
        cols = np.asarray(cols, dtype=np.int64)
        elems = self.elements_of(cols)
        nq, nv = self.far.nq, self.elems.shape[1]
        q = (elems[:, None] * nq + np.arange(nq)).ravel()
        local = np.full(self.shape[1], -1, dtype=np.int64)
        local[cols] = np.arange(len(cols))
        col = local[self.elems[elems]]                       # (E, nv)
        col = np.repeat(col, nq, axis=0)                     # (E*nq, nv)
        row = np.repeat(np.arange(len(q)), nv).reshape(-1, nv)
        val = self.far.weights[q]
        keep = col >= 0
        w = sp.csr_matrix((val[keep], (row[keep], col[keep])), shape=(len(q), len(cols)))
        return q, w

    def kernel(self, rows, q):
        return self._kernel(self.far, rows, q)

    def _kernel(self, quad, rows, q):
        rows = np.asarray(rows, dtype=np.int64)
        q = np.asarray(q, dtype=np.int64)
        out = np.empty((len(rows), len(q)))
        if len(rows) and len(q):
            ctx = self.ctx
            kernel_block(*ctx.trace_args(), self.targets[rows], quad.points[q], quad.region[q], quad.normal[q],
                         self.surface, out)
        return out

    # -- near-field correction ---------------------------------------------

    def near_pairs(self, rows=None):
        """(target, element) pairs treated with the near rule."""
        rows = np.arange(self.shape[0]) if rows is None else np.asarray(rows, dtype=np.int64)
        tree = cKDTree(self.centroids)
        hits = tree.query_ball_point(self.targets[rows], self.ctx.r_near[rows])
        counts = np.array([len(h) for h in hits], dtype=np.int64)
        pi = np.repeat(rows, counts)
        pe = np.concatenate([np.asarray(h, dtype=np.int64) for h in hits]) if len(hits) else np.zeros(0, np.int64)
        return pi, pe

    def _pair_sums(self, quad, pi, pe):
        """Per pair and local vertex: sum_q K(x^i, y_q) * weights[q, a] over the element's points."""
        nq = quad.nq
        yi = (pe[:, None] * nq + np.arange(nq)).ravel()
        xi = np.repeat(pi, nq)
        vals = np.empty(len(yi))
        if len(yi):
            kernel_pairs(*self.ctx.trace_args(), self.targets, xi, quad.points, yi, quad.region, quad.normal,
                         self.surface, vals)
        return np.einsum("pq,pqa->pa", vals.reshape(-1, nq), quad.weights[yi].reshape(len(pe), nq, -1))

    def correction(self, chunk: int = 100_000) -> sp.csr_matrix:
        """Sparse (near rule - far rule) contribution over all near pairs."""
        if self._correction is not None:
            return self._correction
        pi, pe = self.near_pairs()
        rows, cols, vals = [], [], []
        for s in range(0, len(pi), chunk):
            a, e = pi[s:s + chunk], pe[s:s + chunk]
            diff = self._pair_sums(self.near, a, e) - self._pair_sums(self.far, a, e)
            rows.append(np.repeat(a, self.elems.shape[1]))
            cols.append(self.elems[e].ravel())
            vals.append(diff.ravel())
        if rows:
            c = sp.coo_matrix((np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))), shape=self.shape)
        else:
            c = sp.coo_matrix(self.shape)
        c = c.tocsr()
        if self.local is not None:
            c = (c + self.local).tocsr()
        c.sum_duplicates()
        self._correction = c
        return self._correction

    # -- reference evaluation ------------------------------------------------

    def entry(self, i: int, j: int) -> float:
        """Single entry with the per-pair near/far rule, summed element by element."""
        if not (0 <= i < self.shape[0] and 0 <= j < self.shape[1]):
            raise IndexError(f"entry ({i}, {j}) outside operator of shape {self.shape}")
        elems = self.elements_of([j])
        if len(elems) == 0:
            return 0.0
        near = np.linalg.norm(self.centroids[elems] - self.targets[i], axis=1) < self.ctx.r_near[i]
        total = 0.0
        for quad, sel in ((self.near, elems[near]), (self.far, elems[~near])):
            if len(sel) == 0:
                continue
            sums = self._pair_sums(quad, np.full(len(sel), i, dtype=np.int64), sel)
            local = self.elems[sel] == j
            total += float(sums[local].sum())
        if self.local is not None:
            total += float(self.local[i, j])
        return total

    def dense(self, rows=None, chunk: int = 64) -> np.ndarray:
        """Fully materialized rows (all columns), far part plus near correction."""
        rows = np.arange(self.shape[0]) if rows is None else np.asarray(rows, dtype=np.int64)
        q, w = self.expand(np.arange(self.shape[1]))
        out = np.empty((len(rows), self.shape[1]))
        for s in range(0, len(rows), chunk):
            r = rows[s:s + chunk]
            out[s:s + chunk] = np.asarray((w.T @ self.kernel(r, q).T).T)
        out += self.correction()[rows].toarray()
        return out


# ---------------------------------------------------------------------------
# Context and source field
# ---------------------------------------------------------------------------


@dataclass
class SourceField:
    """Emitted intensity Q0 per boundary label (zero on labels not listed)."""

    q0: dict

    def __post_init__(self):
        self.q0 = {int(k): float(v) for k, v in self.q0.items()}
        bad = [k for k, v in self.q0.items() if not (v >= 0.0 and np.isfinite(v))]
        if bad:
            raise ValueError(f"Q0 must be finite and >= 0 (label {bad[0]})")

    @property
    def labels(self) -> list[int]:
        return sorted(k for k, v in self.q0.items() if v > 0.0)

    def check_reflectors(self, reflectors) -> None:
        for r in reflectors:
            if self.q0.get(int(r.label), 0.0) != 0.0:
                raise ValueError(f"label {r.label} is a reflector and cannot emit (Q0 must be 0 there)")

    def nodal(self, sub: SurfaceMesh) -> np.ndarray:
        """Nodal Q0 on a label-split submesh (each vertex belongs to one label)."""
        out = np.zeros(sub.n_vertices)
        for lab, val in self.q0.items():
            out[np.unique(sub.triangles[sub.labels == lab])] = val
        return out

    def scaled(self, factor: float) -> "SourceField":
        return SourceField({k: v * factor for k, v in self.q0.items()})


class KernelContext:
    """Everything needed to evaluate the operators of one absorption band.

    ``r_near`` is a length, or None for twice the local mesh size at each
    target vertex. ``source_labels`` selects the surface triangles that carry
    the columns of the source operator (default: every label that is not a
    reflector).
    """

    def __init__(self, volume: VolumeMesh, surface: SurfaceMesh | None, model: AbsorptionModel, reflectors=(),
                 band: int = 0, r_near=None, source_labels=None, scene: RayScene | None = None):
        self.volume = volume
        self.surface = surface
        self.model = model
        self.band = int(band)
        if not 0 <= self.band < model.n_bands:
            raise ValueError(f"band {band} out of range (model has {model.n_bands})")
        self.scene = scene if scene is not None else RayScene(volume, surface, reflectors)
        self.reflectors = self.scene.reflectors
        if r_near is None:
            self.r_near = 2.0 * volume.mesh_size()
        else:
            r = np.broadcast_to(np.asarray(r_near, dtype=float), (volume.n_vertices,))
            if np.any(r <= 0):
                raise ValueError("r_near must be positive")
            self.r_near = np.array(r)
        kap = model.kappa_by_tag(self.band)
        tags = np.unique(volume.regions)
        missing = [int(t) for t in tags if t >= len(kap) or not np.isfinite(kap[t])]
        if missing:
            raise ValueError(f"absorption model has no coefficient for region {missing[0]}")
        self.kappa = np.nan_to_num(kap, nan=0.0)
        refl_labels = {int(r.label) for r in self.reflectors}
        if source_labels is None:
            source_labels = [] if surface is None else sorted(surface.label_set() - refl_labels)
        self.source_labels = sorted(int(x) for x in source_labels)
        self._volume_op = None
        self._surface_op = None
        self._source_mesh = None

    def trace_args(self):
        s = self.scene
        return s.interfaces, s.mirrored, s.mirror_roots, s.refl, len(self.reflectors), self.kappa

    @property
    def source_mesh(self) -> SurfaceMesh:
        if self._source_mesh is None:
            if self.surface is None:
                raise ValueError("no surface mesh attached")
            sub, _ = self.surface.submesh(self.source_labels)
            if len(sub.triangles) and sub.owner_region is None:
                sub.attach_regions(self.volume)
            self._source_mesh = sub
        return self._source_mesh

    def volume_operator(self) -> QuadratureOperator:
        if self._volume_op is None:
            v = self.volume
            coef = self.kappa[v.regions] * _INV_4PI
            self._volume_op = QuadratureOperator(
                self, v.tets, v.vertices[v.tets], v.volumes, coef, v.regions, np.zeros((v.n_tets, 3)),
                TET_RULES, False, v.n_vertices,
            )
        return self._volume_op

    def surface_operator(self) -> QuadratureOperator:
        if self._surface_op is None:
            s = self.source_mesh
            coef = np.full(len(s.triangles), _INV_4PI)
            region = s.owner_region if len(s.triangles) else np.zeros(0, dtype=np.int64)
            self._surface_op = QuadratureOperator(
                self, s.triangles, s.vertices[s.triangles], s.areas, coef, region, s.normals,
                TRI_RULES, True, s.n_vertices,
            )
            self._surface_op.local = self.surface_trace()
        return self._surface_op

    def surface_trace(self) -> sp.csr_matrix:
        """Limit of the source integral at targets lying on an emitting triangle.

        On the plane of a triangle every direction towards it is grazing and the
        integrand vanishes, while the limit from inside the domain is 1/4 of the
        emitted value for a full plane. A target at a triangle corner therefore
        receives angle / (8 pi) from that triangle, and R0 times the same from
        its mirror image when the target also lies on a reflector patch.
        """
        s = self.source_mesh
        shape = (self.volume.n_vertices, s.n_vertices)
        if not len(s.triangles):
            return sp.csr_matrix(shape)
        tree = cKDTree(self.volume.vertices)
        tol = 1e-9 * self.scene.diameter
        dist, owner = tree.query(s.vertices)
        p = s.vertices[s.triangles]
        rows, cols, vals = [], [], []
        for a in range(3):
            e1 = p[:, (a + 1) % 3] - p[:, a]
            e2 = p[:, (a + 2) % 3] - p[:, a]
            cosang = np.einsum("ij,ij->i", e1, e2) / (np.linalg.norm(e1, axis=1) * np.linalg.norm(e2, axis=1))
            ang = np.arccos(np.clip(cosang, -1.0, 1.0))
            corner = s.triangles[:, a]
            hit = dist[corner] <= tol
            i = owner[corner[hit]]
            w = ang[hit] / (8.0 * math.pi)
            rows.append(i)
            cols.append(corner[hit])
            vals.append(w)
            for k, refl in enumerate(self.reflectors):
                x = self.volume.vertices[i]
                on = np.abs((x - refl.point) @ refl.normal) <= tol
                on &= np.array([bool(in_patch(self.scene.refl, k, *xx)) for xx in x]) if len(x) else on
                rows.append(i[on])
                cols.append(corner[hit][on])
                vals.append(refl.r0 * w[on])
        c = sp.coo_matrix((np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))), shape=shape)
        return c.tocsr()


# ---------------------------------------------------------------------------
# Public entry points
# ---------------------------------------------------------------------------


def volume_entry(ctx: KernelContext, i: int, j: int) -> float:
    """G^{ij}: contribution of the hat function of vertex j to the mean intensity at vertex i."""
    return ctx.volume_operator().entry(int(i), int(j))


def surface_entry(ctx: KernelContext, i: int, l: int) -> float:  # noqa: E741
    """S^{il}, with ``l`` a vertex of ``ctx.source_mesh``."""
    return ctx.surface_operator().entry(int(i), int(l))


def assemble_source_vector(ctx: KernelContext, operator, q0) -> np.ndarray:
    """S^E_i = sum_l S^{il} Q0_l.

    ``operator`` is anything supporting ``@`` with a vector of length L (an
    H-matrix, a dense array) and ``q0`` a :class:`SourceField` or nodal values.
    """
    if isinstance(q0, SourceField):
        q0.check_reflectors(ctx.reflectors)
        q0 = q0.nodal(ctx.source_mesh)
    q0 = np.asarray(q0, dtype=float)
    n_cols = operator.shape[1]
    if q0.shape != (n_cols,):
        raise ValueError(f"source vector has shape {q0.shape}, operator expects ({n_cols},)")
    return np.asarray(operator @ q0, dtype=float)


__all__ = [
    "KernelContext", "SourceField", "QuadratureOperator", "ElementQuadrature", "volume_entry", "surface_entry",
    "assemble_source_vector", "kernel_block", "kernel_pairs",
]
