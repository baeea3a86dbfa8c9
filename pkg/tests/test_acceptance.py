"""Acceptance criteria 1-9 at their stated tolerances.

Each test records one PASS/FAIL line (repeated in the pytest terminal
summary) before asserting. Heavy runs are shared through module fixtures:
the criterion-1 problem and solution also serve as the criterion-8
reference and the criterion-9 field. Expect the module to take about an
hour on one core.
"""
import math
import time

import numpy as np
import pytest
from scipy import integrate

from rtrc.geometry import RayScene, angular_integral
from rtrc.hmatrix import (
    ACA_MARGIN, ADMISSIBLE, _project, aca_compress, assemble, build_block_tree, build_cluster_tree, recompress,
)
from rtrc.kernels import KernelContext
from rtrc.scenarios import ball_mesh, kobayashi, spacing_for
from rtrc.solver import DECREASING, INCREASING, STATIONARY, assemble_problem, probe_line, run
from rtrc.spectral import SIGMA, grey_temperature, planck
from rtrc import workflows

from conftest import ACCEPTANCE_LINES

ETA = 1.0        # admissibility used throughout the suite (faster and more compressive than 2 on these meshes)
EPS = 1e-4
TOL = 1e-8
MAX_ITERS = 500
N_TARGET = 3000


def record(name, ok, detail):
    line = f"{'PASS' if ok else 'FAIL'}  {name}: {detail}"
    ACCEPTANCE_LINES.append(line)
    print(line)
    assert ok, line


# ---------------------------------------------------------------------------
# shared runs
# ---------------------------------------------------------------------------


@pytest.fixture(scope="module")
def c1():
    sc = kobayashi("kobayashi-test3", h=spacing_for(N_TARGET))
    t0 = time.perf_counter()
    prob = assemble_problem(sc, eta=ETA, eps=EPS)
    t_asm = time.perf_counter() - t0
    out = {"scenario": sc, "problem": prob, "assembly": t_asm}
    for key, T0 in (("lo", 0.001), ("hi", 0.44)):
        t0 = time.perf_counter()
        out[key] = run(prob.config(T0, MAX_ITERS, TOL))
        out[key + "_seconds"] = time.perf_counter() - t0
    return out


# ---------------------------------------------------------------------------
# 1. monotone convergence
# ---------------------------------------------------------------------------


def test_c1_monotone_convergence(c1):
    (lo, tr_lo), (hi, tr_hi) = c1["lo"], c1["hi"]
    n = c1["scenario"].volume.n_vertices
    up_ok = tr_lo.converged and set(tr_lo.verdicts) <= {INCREASING, STATIONARY} \
        and sum(r["n_down"] for r in tr_lo.rows) == 0
    down_ok = tr_hi.converged and set(tr_hi.verdicts) <= {DECREASING, STATIONARY} \
        and sum(r["n_up"] for r in tr_hi.rows) == 0
    diff = float(np.abs(lo.T - hi.T).max() / hi.T.max())
    ok = up_ok and down_ok and diff <= 10 * TOL
    record("C1 monotone convergence",
           ok, f"N={n}; T0=0.001: {len(tr_lo)} iters, verdicts {sorted(set(tr_lo.verdicts))}, "
               f"nodes stepping down {sum(r['n_down'] for r in tr_lo.rows)}; T0=0.44: {len(tr_hi)} iters, "
               f"verdicts {sorted(set(tr_hi.verdicts))}, nodes stepping up {sum(r['n_up'] for r in tr_hi.rows)}; "
               f"relative sup gap {diff:.2e} (limit {10 * TOL:.0e})")


def test_c1_runtime(c1):
    total = c1["assembly"] + c1["lo_seconds"] + c1["hi_seconds"]
    record("C1 runtime", total <= 120.0,
           f"assembly {c1['assembly']:.1f}s + solves {c1['lo_seconds']:.1f}s / {c1['hi_seconds']:.1f}s "
           f"= {total:.1f}s (target 120s)")


# ---------------------------------------------------------------------------
# 2. reflection versus symmetrization
# ---------------------------------------------------------------------------


def test_c2_reflection_equals_symmetrization():
    sc = kobayashi("kobayashi-test1", h=spacing_for(N_TARGET))
    rep = workflows.compare_symmetrized(sc, dict(eta=ETA, eps=EPS, tol=TOL, max_iters=MAX_ITERS))
    ok = rep.rc_vs_sym <= 0.05 and rep.norc_vs_sym > rep.rc_vs_sym
    record("C2 reflection vs symmetrization", ok,
           f"N={sc.volume.n_vertices}; relative L2 of J: reflector {rep.rc_vs_sym:.4f} (limit 0.05), "
           f"no reflector {rep.norc_vs_sym:.4f}")


# ---------------------------------------------------------------------------
# 3. Stefan-Boltzmann
# ---------------------------------------------------------------------------


def test_c3_stefan_boltzmann():
    nu_max = 60.0  # the tail beyond is below 1e-20
    val, _ = integrate.quad(lambda nu: float(planck(nu, 1.0)), 0.0, nu_max, epsabs=0, epsrel=1e-12, limit=200)
    exact = math.pi ** 4 / 15
    rel = abs(val - exact) / exact
    t_err = abs(float(grey_temperature(SIGMA)) - 1.0)
    record("C3 Stefan-Boltzmann", rel <= 1e-6 and t_err <= 1e-12,
           f"int_0^{nu_max:g} B(nu,1) = {val:.10f}, relative error {rel:.1e}; |grey_temperature(sigma) - 1| = {t_err:.1e}")


# ---------------------------------------------------------------------------
# 4. volume integral versus angular form on a ball
# ---------------------------------------------------------------------------


def _ball_exact(R, a):
    # int_{|y| < R} |y - x|^-2 dy for |x| = a
    if a == 0:
        return 4 * math.pi * R
    return 2 * math.pi * (R + (R * R - a * a) / (2 * a) * math.log((R + a) / (R - a)))


def test_c4_ball_identity():
    R = 1.0
    scene = RayScene(ball_mesh(R, 10))
    centre = angular_integral(scene, (0.0, 0.0, 0.0), n_directions=10_000, rng=1)
    rel = abs(centre - 4 * math.pi * R) / (4 * math.pi * R)
    x = np.array([0.3, 0.2, -0.1])
    off = angular_integral(scene, x, n_directions=10_000, rng=2)
    exact_off = _ball_exact(R, float(np.linalg.norm(x)))
    rel_off = abs(off - exact_off) / exact_off
    record("C4 angular form on a ball", rel <= 5e-3,
           f"centre {centre:.5f} vs 4 pi R = {4 * math.pi * R:.5f}, relative error {rel:.2e} (limit 5e-3); "
           f"off-centre {rel_off:.2e} against the closed form")


# ---------------------------------------------------------------------------
# 5. ACA against the materialized operator
# ---------------------------------------------------------------------------


def test_c5_aca_oracle():
    # ACA (crosses to eps * margin, then recompression to eps) on every admissible block of the block tree,
    # without the storage cap: the assembled matrix stores high-rank blocks dense, which would hide the ACA
    eps = 1e-6
    sc = kobayashi("kobayashi-test3", h=6.5)
    ctx = KernelContext(sc.volume, sc.surface, sc.model, sc.reflectors)
    op = ctx.volume_operator()
    tree = build_cluster_tree(sc.volume.vertices, 64)
    H = assemble(op, tree, tree, ETA, eps)
    H.extra = op.correction()
    D = op.dense()
    C = H.extra.toarray()
    worst, n_blocks, ranks = 0.0, 0, []
    for bi, (rn, cn, kind) in enumerate(build_block_tree(tree, tree, ETA)):
        if kind != ADMISSIBLE:
            continue
        r, c = tree.indices(rn), tree.indices(cn)
        q, w = op.expand(c)
        res = aca_compress(op.kernel, r, q, eps * ACA_MARGIN, seed=bi)
        U, V = recompress(res.U, _project(res.V, w), eps)
        block = D[np.ix_(r, c)] - C[np.ix_(r, c)]
        norm = np.linalg.norm(block)
        err = np.linalg.norm(U @ V - block)
        worst = max(worst, err / norm if norm > 0 else err)
        ranks.append(U.shape[1])
        n_blocks += 1
    v = np.random.default_rng(5).uniform(size=D.shape[1])
    mv = float(np.linalg.norm(H @ v - D @ v) / np.linalg.norm(D @ v))
    ok = n_blocks > 0 and worst <= 1e-5 and mv <= 1e-4
    record("C5 ACA oracle", ok,
           f"N={sc.volume.n_vertices}, eps={eps:g}: {n_blocks} admissible blocks, ranks {min(ranks)}-{max(ranks)}, "
           f"worst relative Frobenius error {worst:.2e} (limit 1e-5); H-matrix matvec relative error {mv:.2e} "
           f"(limit 1e-4, {H.stats['downgraded']} blocks stored dense)")


# ---------------------------------------------------------------------------
# 6, 7. benchmark ladder
# ---------------------------------------------------------------------------


@pytest.fixture(scope="module")
def ladder():
    return workflows.bench_ladder(workflows.TABLE_LADDER, "kobayashi-test3", eta=ETA, eps=EPS, tol=1e-6,
                                  max_iters=200, budget=30 * 60)


def _rows(report):
    return "; ".join(f"N={r.N}: " + (f"C.L. {r.volume_cl:.3f}, CPU {r.cpu:.0f}s, normalized {r.cpu_norm:.3f}"
                                     if r.status == "done" else r.status) for r in report.rows)


def test_c6_compression_trend(ladder):
    done = [r for r in ladder.rows if r.status == "done"]
    cl = [r.volume_cl for r in done]
    complete = len(done) == len(ladder.rows)
    increasing = all(b > a for a, b in zip(cl, cl[1:]))
    ok = complete and increasing and cl[-1] >= 0.85
    record("C6 compression trend", ok, f"{_rows(ladder)}; all rungs completed: {complete}")


def test_c7_complexity(ladder):
    done = [r for r in ladder.rows if r.status == "done"]
    norm = [r.cpu_norm for r in done]
    spread = max(norm) / min(norm)
    complete = len(done) == len(ladder.rows)
    ok = complete and spread <= 2.5 and ladder.wall_seconds <= 30 * 60
    record("C7 complexity", ok, f"normalized CPU spread {spread:.2f} over {len(done)} completed rungs "
                                f"(limit 2.5); largest mesh completed: {complete}; wall {ladder.wall_seconds:.0f}s (limit 1800s)")


# ---------------------------------------------------------------------------
# 8. O(h) error
# ---------------------------------------------------------------------------


def test_c8_error_slope(c1):
    ref_state, _ = c1["lo"]
    ref = (c1["scenario"].volume, ref_state.J.sum(axis=0))
    fields = []
    for h in (15.0, 12.0, 10.0, 8.0):
        sol = workflows.solve(kobayashi("kobayashi-test3", h=h), eta=ETA, eps=EPS, T0=0.001, tol=TOL,
                              max_iters=MAX_ITERS)
        fields.append((sol.scenario.volume, sol.J))
    lad = workflows.error_ladder(fields, ref)
    rows = ", ".join(f"N={n}: {e:.4f}" for n, e in zip(lad.N, lad.errors))
    record("C8 error slope", 0.7 <= lad.slope <= 1.5,
           f"relative L2 error of J vs N={lad.reference_N}: {rows}; slope {lad.slope:.2f} (band [0.7, 1.5])")


# ---------------------------------------------------------------------------
# 9. shape check standing in for the non-reproducible comparisons
# ---------------------------------------------------------------------------


def test_c9_duct_probe_decreasing(c1):
    # Kobayashi's semi-analytic values and the full-scale valley runs are out of reach;
    # the shape of the duct profile beyond the source region is what remains checkable
    state, _ = c1["lo"]
    s, J = probe_line(state.J.sum(axis=0), c1["scenario"].volume, (5.0, 10.0, 5.0), (5.0, 100.0, 5.0), 91)
    d = np.diff(J)
    ok = bool(np.all(np.isfinite(J)) and np.all(d < 0))
    record("C9 duct probe shape", ok,
           f"J(5,y,5) for y in [10,100]: {J[0]:.3e} -> {J[-1]:.3e}, {int(np.sum(d >= 0))} non-decreasing steps of "
           f"{len(d)}; semi-analytic reference values and the full-scale valley runs are not reproduced")
