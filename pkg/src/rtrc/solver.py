"""Fixed-point driver: alternate operator application and per-node temperature solves.

    S_b    = a_b J_b + (1 - a_b) int_band B(T)        (nodal; kappa lives in G)
    J_b'   = SE_b + G_b S_b
    T'     = solve_temperature(J')

starting from J = 0 and a prescribed T0. The source term SE_b is computed once.
"""
from __future__ import annotations

import csv
import math
import time
from dataclasses import dataclass, field

import numpy as np

from .hmatrix import assemble, build_cluster_tree
from .kernels import KernelContext
from .spectral import SpectralGrid, SpectralState, solve_temperature

INCREASING, DECREASING, MIXED, STATIONARY = "increasing", "decreasing", "mixed", "stationary"


@dataclass
class SolveConfig:
    """Operators and knobs for one run.

    ``operators[b]`` maps nodal S_b to the volume part of J_b (anything with
    ``@``), ``sources[b]`` is the nodal SE_b. ``noise`` is the relative size
    (of max T) below which a step against the overall direction counts as
    rounding rather than a monotonicity violation.
    """

    grid: SpectralGrid
    operators: list
    sources: list
    T0: object = 0.0
    max_iters: int = 50
    tol: float = 1e-8
    noise: float = 1e-12

    def __post_init__(self):
        if not self.tol > 0:
            raise ValueError("tolerance must be > 0")
        if int(self.max_iters) < 1:
            raise ValueError("max_iters must be >= 1")
        self.max_iters = int(self.max_iters)
        nb = self.grid.n_bands
        if len(self.operators) != nb or len(self.sources) != nb:
            raise ValueError(f"need one operator and one source per band ({nb}), got "
                             f"{len(self.operators)} and {len(self.sources)}")
        n = self.grid.n_nodes
        for b, (g, s) in enumerate(zip(self.operators, self.sources)):
            if tuple(g.shape) != (n, n) or np.shape(s) != (n,):
                raise ValueError(f"band {b}: operator {tuple(g.shape)} / source {np.shape(s)} do not match {n} nodes")

    def initial_state(self) -> SpectralState:
        n = self.grid.n_nodes
        T = np.broadcast_to(np.asarray(self.T0, dtype=float), (n,)).copy()
        if np.any(T < 0):
            raise ValueError("T0 must be >= 0")
        return SpectralState(np.zeros((self.grid.n_bands, n)), T)


@dataclass
class IterationTrace:
    """Per-iteration record: relative sup change of T, error estimate, T range, monotonicity verdict, wall time."""

    rows: list = field(default_factory=list)
    converged: bool = False

    def append(self, **row) -> None:
        self.rows.append(row)

    def __len__(self) -> int:
        return len(self.rows)

    @property
    def verdicts(self) -> list:
        return [r["verdict"] for r in self.rows]

    def write_csv(self, path) -> None:
        keys = ["iter", "dT_sup", "err_est", "Tmin", "Tmax", "verdict", "seconds", "n_up", "n_down"]
        with open(path, "w", newline="") as fh:
            w = csv.DictWriter(fh, fieldnames=keys, extrasaction="ignore")
            w.writeheader()
            for r in self.rows:
                w.writerow(r)


def fixed_point_step(state: SpectralState, cfg: SolveConfig) -> SpectralState:
    """One application of the fixed-point map."""
    grid = cfg.grid
    if state.J.shape != (grid.n_bands, grid.n_nodes):
        raise ValueError(f"state has J of shape {state.J.shape}, expected {(grid.n_bands, grid.n_nodes)}")
    B = grid.band_planck(state.T)
    J = np.empty_like(state.J)
    for b in range(grid.n_bands):
        a = grid.albedo[b]
        S = a * state.J[b] + (1.0 - a) * B[b]
        J[b] = cfg.sources[b] + np.asarray(cfg.operators[b] @ S, dtype=float)
    # the compressed operator is exact only to eps; clip the rounding-level negatives it can produce
    np.maximum(J, 0.0, out=J)
    return SpectralState(J, solve_temperature(J, grid))


def verdict(T_old, T_new, floor: float) -> tuple[str, int, int]:
    d = T_new - T_old
    up = int(np.sum(d > floor))
    down = int(np.sum(d < -floor))
    if up and down:
        return MIXED, up, down
    if up:
        return INCREASING, up, down
    if down:
        return DECREASING, up, down
    return STATIONARY, up, down


def run(cfg: SolveConfig, state: SpectralState | None = None, callback=None):
    """Iterate until the estimated distance to the fixed point is below ``tol``, or ``max_iters``.

    With the relative sup step ``d_k = |T_k - T_{k-1}|_inf / max(|T_{k-1}|_inf, |T_k|_inf)``
    and the observed contraction ``q = d_k / d_{k-1}``, the remaining error of
    a linearly converging iteration is about ``d_k q / (1 - q)``; that estimate
    (not the bare step, which undershoots it by 1/(1 - q)) is compared with
    ``tol``. Returns (state, trace).
    """
    state = cfg.initial_state() if state is None else state
    trace = IterationTrace()
    prev = None
    for k in range(1, cfg.max_iters + 1):
        t0 = time.perf_counter()
        new = fixed_point_step(state, cfg)
        if not (np.all(np.isfinite(new.J)) and np.all(np.isfinite(new.T))):
            raise FloatingPointError(f"non-finite value in iterate {k}")
        tmax = float(np.abs(new.T).max(initial=0.0))
        # relative to the larger iterate, so a cold start (T0 = 0) gives 1 rather than inf
        scale = max(float(np.abs(state.T).max(initial=0.0)), tmax, 1e-300)
        dT = float(np.abs(new.T - state.T).max(initial=0.0)) / scale
        if dT == 0.0:
            err = 0.0
        elif prev is not None and 0.0 < dT < prev:
            q = dT / prev
            err = dT * q / (1.0 - q)
        else:
            err = math.inf
        v, up, down = verdict(state.T, new.T, cfg.noise * max(tmax, 1e-300))
        trace.append(iter=k, dT_sup=dT, err_est=err, Tmin=float(new.T.min(initial=0.0)), Tmax=tmax, verdict=v,
                     seconds=time.perf_counter() - t0, n_up=up, n_down=down)
        state = new
        prev = dT
        if callback is not None:
            callback(k, state, trace)
        if err <= cfg.tol:
            trace.converged = True
            break
    return state, trace


# ---------------------------------------------------------------------------
# Problem assembly
# ---------------------------------------------------------------------------


@dataclass
class Problem:
    """Assembled operators of a scenario, ready for :func:`run`."""

    scenario: object
    grid: SpectralGrid
    operators: list
    sources: list
    surface_operators: list
    stats: dict

    def config(self, T0=0.0, max_iters: int = 50, tol: float = 1e-8) -> SolveConfig:
        return SolveConfig(self.grid, self.operators, self.sources, T0, max_iters, tol)


def nodal_sources(scenario, ctx: KernelContext, band: int) -> np.ndarray:
    """Q0 of ``band`` on the vertices of the label-split source submesh."""
    sub = ctx.source_mesh
    out = np.zeros(sub.n_vertices)
    for lab, val in scenario.sources.items():
        q = val[band] if np.ndim(val) else val
        out[np.unique(sub.triangles[sub.labels == int(lab)])] = float(q)
    return out


def assemble_problem(scenario, eta: float = 2.0, eps: float = 1e-4, leaf_size: int = 64, r_near=None,
                     progress=None, surface_labels: str = "emitting") -> Problem:
    """H-matrices of the volume and source operators for every distinct absorption column.

    Bands sharing a kappa column share operators; the source vector SE_b is
    formed once per band by one surface matvec. ``surface_labels`` is
    "emitting" (columns only where Q0 > 0, enough for SE) or "all" (every
    non-reflector label, the full surface operator whose compression level
    the benchmark reports).
    """
    model = scenario.model
    vol = scenario.volume
    for r in scenario.reflectors:
        q = scenario.sources.get(int(r.label), 0.0)
        if np.any(np.asarray(q) != 0):
            raise ValueError(f"label {r.label} is a reflector and cannot emit (Q0 must be 0 there)")
    if surface_labels == "emitting":
        labels = sorted(int(k) for k, v in scenario.sources.items() if np.any(np.asarray(v) > 0))
    elif surface_labels == "all":
        refl = {int(r.label) for r in scenario.reflectors}
        labels = sorted(scenario.surface.label_set() - refl)
    else:
        raise ValueError(f"surface_labels must be 'emitting' or 'all', got {surface_labels!r}")
    grid = SpectralGrid.from_model(model, vol)
    row_tree = build_cluster_tree(vol.vertices, leaf_size)
    operators = [None] * model.n_bands
    sources = [None] * model.n_bands
    surface_ops = [None] * model.n_bands
    stats = {"bands": {}}
    scene = None
    for rep, members in model.distinct_kappa_bands().items():
        ctx = KernelContext(vol, scenario.surface, model, scenario.reflectors, band=rep, r_near=r_near,
                            source_labels=labels, scene=scene)
        scene = ctx.scene
        t0 = time.perf_counter()
        op = ctx.volume_operator()
        G = assemble(op, row_tree, row_tree, eta, eps, progress=progress)
        G.extra = op.correction()
        t_vol = time.perf_counter() - t0
        sub = ctx.source_mesh
        t0 = time.perf_counter()
        if sub.n_vertices:
            sop = ctx.surface_operator()
            col_tree = build_cluster_tree(sub.vertices, leaf_size)
            H = assemble(sop, row_tree, col_tree, eta, eps, progress=progress)
            H.extra = sop.correction()
        else:
            H = None
        t_surf = time.perf_counter() - t0
        for b in members:
            operators[b] = G
            surface_ops[b] = H
            sources[b] = H @ nodal_sources(scenario, ctx, b) if H is not None else np.zeros(vol.n_vertices)
        stats["bands"][rep] = {
            "members": list(members), "volume_seconds": t_vol, "surface_seconds": t_surf,
            "volume_ratio": G.compression_ratio(), "surface_ratio": H.compression_ratio() if H is not None else 0.0,
        }
    stats["assembly_seconds"] = sum(v["volume_seconds"] + v["surface_seconds"] for v in stats["bands"].values())
    return Problem(scenario, grid, operators, sources, surface_ops, stats)


# ---------------------------------------------------------------------------
# Probes
# ---------------------------------------------------------------------------


def probe_line(values, mesh, p0, p1, n_samples: int):
    """P1 samples of a nodal field on [p0, p1]: (arc length, value) arrays, NaN outside the mesh."""
    if n_samples < 1:
        raise ValueError("n_samples must be >= 1")
    p0 = np.asarray(p0, dtype=float)
    p1 = np.asarray(p1, dtype=float)
    t = np.linspace(0.0, 1.0, n_samples) if n_samples > 1 else np.zeros(1)
    pts = p0 + t[:, None] * (p1 - p0)
    return t * np.linalg.norm(p1 - p0), mesh.interpolate(values, pts)


def write_probe(path, s, columns: dict) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["s", *columns])
        for k in range(len(s)):
            w.writerow([repr(float(s[k])), *("" if np.isnan(c[k]) else repr(float(c[k])) for c in columns.values())])


__all__ = [
    "SolveConfig", "IterationTrace", "fixed_point_step", "run", "verdict", "Problem", "assemble_problem",
    "probe_line", "write_probe", "nodal_sources", "INCREASING", "DECREASING", "MIXED", "STATIONARY",
]
