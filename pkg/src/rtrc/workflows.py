"""End-to-end pipelines shared by the command line and the acceptance suite."""
from __future__ import annotations

import csv
import math
import os
import time
from dataclasses import dataclass, field

import numpy as np
from scipy.spatial import cKDTree

from .mesh import VolumeMesh, surface_from_volume
from .scenarios import Scenario, kobayashi, spacing_for
from .solver import Problem, assemble_problem, probe_line, run, write_probe


@dataclass
class Solution:
    scenario: Scenario
    problem: Problem
    state: object
    trace: object
    solve_seconds: float

    @property
    def J(self) -> np.ndarray:
        """Mean intensity summed over bands."""
        return self.state.J.sum(axis=0)

    @property
    def T(self) -> np.ndarray:
        return self.state.T


def solve(scenario: Scenario, eta=2.0, eps=1e-4, leaf_size=64, r_near=None, T0=0.0, tol=1e-8, max_iters=50,
          problem: Problem | None = None, log=None) -> Solution:
    if problem is None:
        problem = assemble_problem(scenario, eta, eps, leaf_size, r_near)
        if log:
            log(f"assembled {scenario.name}: N={scenario.volume.n_vertices} in {problem.stats['assembly_seconds']:.1f}s")
    t0 = time.perf_counter()
    state, trace = run(problem.config(T0, max_iters, tol))
    secs = time.perf_counter() - t0
    if log:
        log(f"solved in {len(trace)} iterations ({secs:.1f}s), converged={trace.converged}")
    return Solution(scenario, problem, state, trace, secs)


# ---------------------------------------------------------------------------
# Output
# ---------------------------------------------------------------------------


def write_vtk(path, mesh: VolumeMesh, fields: dict) -> None:
    """Legacy ASCII unstructured grid with point data."""
    with open(path, "w") as fh:
        fh.write("# vtk DataFile Version 3.0\nrtrc field\nASCII\nDATASET UNSTRUCTURED_GRID\n")
        fh.write(f"POINTS {mesh.n_vertices} double\n")
        np.savetxt(fh, mesh.vertices, fmt="%.17g")
        fh.write(f"CELLS {mesh.n_tets} {5 * mesh.n_tets}\n")
        np.savetxt(fh, np.column_stack([np.full(mesh.n_tets, 4), mesh.tets]), fmt="%d")
        fh.write(f"CELL_TYPES {mesh.n_tets}\n")
        np.savetxt(fh, np.full(mesh.n_tets, 10), fmt="%d")
        fh.write(f"POINT_DATA {mesh.n_vertices}\n")
        for name, vals in fields.items():
            fh.write(f"SCALARS {name} double 1\nLOOKUP_TABLE default\n")
            np.savetxt(fh, np.asarray(vals, dtype=float), fmt="%.17g")


def write_nodal_csv(path, mesh: VolumeMesh, fields: dict) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["x", "y", "z", *fields])
        cols = [np.asarray(v, dtype=float) for v in fields.values()]
        for i, p in enumerate(mesh.vertices):
            w.writerow([repr(float(c)) for c in p] + [repr(float(c[i])) for c in cols])


def write_outputs(sol: Solution, out_dir: str, field_dump: bool = True) -> list:
    os.makedirs(out_dir, exist_ok=True)
    written = []
    mesh = sol.scenario.volume
    fields = {"T": sol.T, "J": sol.J}
    if sol.state.J.shape[0] > 1:
        fields.update({f"J_{b}": sol.state.J[b] for b in range(sol.state.J.shape[0])})
    if field_dump:
        for name, fn in (("field.vtk", write_vtk), ("field.csv", write_nodal_csv)):
            fn(os.path.join(out_dir, name), mesh, fields)
            written.append(name)
    sol.trace.write_csv(os.path.join(out_dir, "trace.csv"))
    written.append("trace.csv")
    for name, (p0, p1, n) in sol.scenario.probes.items():
        s, J = probe_line(sol.J, mesh, p0, p1, n)
        _, T = probe_line(sol.T, mesh, p0, p1, n)
        write_probe(os.path.join(out_dir, f"probe_{name}.csv"), s, {"J": J, "T": T})
        written.append(f"probe_{name}.csv")
    return written


# ---------------------------------------------------------------------------
# Benchmark ladder
# ---------------------------------------------------------------------------

TABLE_LADDER = (2758, 8003, 26189, 84042)


def normalized_cpu(seconds: float, n: int) -> float:
    """1e5 CPU / (N cbrt(N) log N) (the timing normalization of the benchmark table)."""
    return 1e5 * seconds / (n * n ** (1.0 / 3.0) * math.log(n))


@dataclass
class BenchRow:
    target: int
    h: float
    N: int = 0
    surface_cl: float = float("nan")
    volume_cl: float = float("nan")
    assembly_seconds: float = float("nan")
    solve_seconds: float = float("nan")
    iterations: int = 0
    status: str = "done"

    @property
    def cpu(self) -> float:
        return self.assembly_seconds + self.solve_seconds

    @property
    def cpu_norm(self) -> float:
        return normalized_cpu(self.cpu, self.N) if self.status == "done" else float("nan")


@dataclass
class BenchReport:
    rows: list = field(default_factory=list)
    wall_seconds: float = 0.0

    def write_tsv(self, path) -> None:
        with open(path, "w") as fh:
            fh.write(self.table())

    def table(self) -> str:
        head = "target\tN\th\tsurface_CL\tvolume_CL\tassembly_s\tsolve_s\titers\tCPU_norm\tstatus\n"
        lines = [
            f"{r.target}\t{r.N}\t{r.h:.4f}\t{r.surface_cl:.4f}\t{r.volume_cl:.4f}\t{r.assembly_seconds:.2f}\t"
            f"{r.solve_seconds:.2f}\t{r.iterations}\t{r.cpu_norm:.4f}\t{r.status}\n"
            for r in self.rows
        ]
        return head + "".join(lines)


def bench_ladder(targets=TABLE_LADDER, scenario: str = "kobayashi-test3", eta=2.0, eps=1e-4, leaf_size=64,
                 tol=1e-6, max_iters=200, budget: float | None = None, log=None) -> BenchReport:
    """Assemble and solve the built-in scenario on meshes of about ``targets`` vertices.

    With a ``budget`` (seconds for the whole ladder), a rung whose predicted
    cost (previous rung scaled by N^{4/3} log N, the expected complexity)
    would overrun the remaining budget is skipped and marked as such.
    """
    if len(targets) < 2:
        raise ValueError("a ladder needs at least 2 meshes")
    report = BenchReport()
    start = time.perf_counter()
    prev = None
    for target in targets:
        h = spacing_for(int(target))
        row = BenchRow(int(target), h)
        sc = kobayashi(scenario, h=h)
        row.N = sc.volume.n_vertices
        if budget is not None and prev is not None:
            predicted = prev.cpu * (row.N ** (4 / 3) * math.log(row.N)) / (prev.N ** (4 / 3) * math.log(prev.N))
            remaining = budget - (time.perf_counter() - start)
            if predicted > remaining:
                row.status = f"skipped: predicted {predicted:.0f}s > remaining budget {max(remaining, 0):.0f}s"
                report.rows.append(row)
                if log:
                    log(f"N={row.N}: {row.status}")
                continue
        prob = assemble_problem(sc, eta, eps, leaf_size, surface_labels="all")
        band = next(iter(prob.stats["bands"].values()))
        row.volume_cl = band["volume_ratio"]
        row.surface_cl = band["surface_ratio"]
        row.assembly_seconds = prob.stats["assembly_seconds"]
        t0 = time.perf_counter()
        _, trace = run(prob.config(0.0, max_iters, tol))
        row.solve_seconds = time.perf_counter() - t0
        row.iterations = len(trace)
        report.rows.append(row)
        prev = row
        if log:
            log(f"N={row.N}: volume C.L. {row.volume_cl:.3f}, surface C.L. {row.surface_cl:.3f}, "
                f"CPU {row.cpu:.1f}s")
        del prob
    report.wall_seconds = time.perf_counter() - start
    return report


# ---------------------------------------------------------------------------
# Reflection versus symmetrization
# ---------------------------------------------------------------------------


def symmetrize(scenario: Scenario) -> Scenario:
    """The domain glued to its mirror image across its single reflector (which disappears)."""
    if len(scenario.reflectors) != 1:
        raise ValueError(f"symmetrization needs exactly one reflector, scenario has {len(scenario.reflectors)}")
    refl = scenario.reflectors[0]
    vol = scenario.volume
    n, p = refl.normal, refl.point
    mirrored = vol.vertices - 2.0 * ((vol.vertices - p) @ n)[:, None] * n
    tol = 1e-9 * vol.diameter()
    on_plane = np.abs((vol.vertices - p) @ n) <= tol
    # mirrored copies of on-plane vertices are the originals themselves
    index = np.arange(vol.n_vertices) + vol.n_vertices
    index[on_plane] = np.nonzero(on_plane)[0]
    keep = ~on_plane
    remap = np.empty(vol.n_vertices, dtype=np.int64)
    remap[keep] = vol.n_vertices + np.arange(int(keep.sum()))
    remap[on_plane] = np.nonzero(on_plane)[0]
    verts = np.vstack([vol.vertices, mirrored[keep]])
    tets = np.vstack([vol.tets, remap[vol.tets][:, [1, 0, 2, 3]]])
    regions = np.concatenate([vol.regions, vol.regions])
    big = VolumeMesh(verts, tets, regions)
    surf = scenario.surface
    tree = cKDTree(surf.centroids)

    def labeler(c, _normals):
        side = (c - p) @ n
        back = np.where((side > 0)[:, None], c - 2.0 * side[:, None] * n, c)
        _, k = tree.query(back)
        return surf.labels[k]

    big_surf = surface_from_volume(big, labeler)
    probes = dict(scenario.probes)
    return Scenario(scenario.name + "-symmetrized", big, big_surf, scenario.model, dict(scenario.sources), [],
                    scenario.interior_point, probes)


def relative_l2(mesh: VolumeMesh, a, b) -> float:
    """|a - b| / |b| in L2 over ``mesh`` for P1 fields."""
    d = np.asarray(a, dtype=float) - np.asarray(b, dtype=float)
    den = mesh.l2_inner(b, b)
    return math.sqrt(mesh.l2_inner(d, d) / den) if den > 0 else math.sqrt(mesh.l2_inner(d, d))


def restrict(field_values, big: VolumeMesh, small: VolumeMesh) -> np.ndarray:
    """Nodal values of a field on ``big`` at the vertices of ``small`` (exact when vertices coincide)."""
    tree = cKDTree(big.vertices)
    dist, idx = tree.query(small.vertices)
    out = np.asarray(field_values, dtype=float)[idx]
    far = dist > 1e-9 * small.diameter()
    if far.any():
        interp = big.interpolate(field_values, small.vertices[far])
        # points outside ``big`` keep the nearest vertex value
        out[far] = np.where(np.isnan(interp), out[far], interp)
    return out


@dataclass
class SymmetryReport:
    rc_vs_sym: float
    norc_vs_sym: float
    probes: dict


def compare_symmetrized(scenario: Scenario, solve_kwargs: dict | None = None, log=None) -> SymmetryReport:
    """Solve with the reflector, on the symmetrized domain, and without reflector; compare J on the original domain."""
    kw = dict(solve_kwargs or {})
    sym = symmetrize(scenario)
    norc = Scenario(scenario.name + "-norc", scenario.volume, scenario.surface, scenario.model,
                    dict(scenario.sources), [], scenario.interior_point, dict(scenario.probes))
    rc_sol = solve(scenario, log=log, **kw)
    sym_sol = solve(sym, log=log, **kw)
    norc_sol = solve(norc, log=log, **kw)
    mesh = scenario.volume
    J_sym = restrict(sym_sol.J, sym.volume, mesh)
    probes = {}
    for name, (p0, p1, n) in scenario.probes.items():
        s, a = probe_line(rc_sol.J, mesh, p0, p1, n)
        _, b = probe_line(sym_sol.J, sym.volume, p0, p1, n)
        _, c = probe_line(norc_sol.J, mesh, p0, p1, n)
        probes[name] = (s, {"J_rc": a, "J_sym": b, "J_norc": c})
    return SymmetryReport(relative_l2(mesh, rc_sol.J, J_sym), relative_l2(mesh, norc_sol.J, J_sym), probes)


# ---------------------------------------------------------------------------
# Error ladder
# ---------------------------------------------------------------------------


@dataclass
class ErrorLadder:
    h: list
    N: list
    errors: list
    slope: float
    reference_N: int


def ladder_slope(h, errors) -> float:
    h = np.asarray(h, dtype=float)
    e = np.asarray(errors, dtype=float)
    if np.any(e <= 0):
        raise ValueError("zero error row: a ladder mesh coincides with the reference")
    return float(np.polyfit(np.log(h), np.log(e), 1)[0])


def error_ladder(fields, reference) -> ErrorLadder:
    """Relative L2 error of each coarse field against the reference, on the reference mesh.

    ``fields`` and ``reference`` are (VolumeMesh, nodal values) pairs; the slope
    is taken against h = N^{-1/3}.
    """
    fields = list(fields)
    if len(fields) < 3:
        raise ValueError("an error ladder needs at least 3 meshes besides the reference")
    ref_mesh, ref = reference
    seen = set()
    hs, ns, errs = [], [], []
    for mesh, values in fields:
        same_as_ref = mesh.n_vertices == ref_mesh.n_vertices and np.allclose(mesh.vertices, ref_mesh.vertices)
        if same_as_ref or mesh.n_vertices in seen:
            raise ValueError(f"mesh with N={mesh.n_vertices} appears twice in the ladder (or is the reference); "
                             "zero error row rejected")
        seen.add(mesh.n_vertices)
        vals = mesh.interpolate(values, ref_mesh.vertices)
        # reference vertices a hair outside a coarse boundary: take the nearest coarse value
        vals = np.where(np.isnan(vals), restrict(values, mesh, ref_mesh), vals)
        errs.append(relative_l2(ref_mesh, vals, ref))
        ns.append(mesh.n_vertices)
        hs.append(mesh.n_vertices ** (-1.0 / 3.0))
    return ErrorLadder(hs, ns, errs, ladder_slope(hs, errs), ref_mesh.n_vertices)


__all__ = [
    "Solution", "solve", "write_vtk", "write_nodal_csv", "write_outputs", "bench_ladder", "BenchReport", "BenchRow",
    "normalized_cpu", "symmetrize", "relative_l2", "restrict", "compare_symmetrized", "SymmetryReport",
    "error_ladder", "ErrorLadder", "ladder_slope", "TABLE_LADDER",
]
