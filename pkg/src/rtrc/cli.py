"""Command line: ``rtrc solve | bench | compare-sym | error-ladder``."""
from __future__ import annotations

import argparse
import json
import os
import sys
import time


from .config import ConfigError, MissingMeshError, ScenarioConfig, build_scenario
from .scenarios import SCENARIOS, kobayashi
from .solver import write_probe
from . import workflows

EXIT_USAGE, EXIT_MESH = 2, 2


def _log(msg: str) -> None:
    print(f"[{time.strftime('%H:%M:%S')}] {msg}", file=sys.stderr, flush=True)


def _common(p: argparse.ArgumentParser) -> None:
    src = p.add_mutually_exclusive_group()
    src.add_argument("--config", help="scenario INI file")
    src.add_argument("--scenario", choices=sorted(SCENARIOS), help="built-in scenario")
    p.add_argument("--h", type=float, default=None, help="grid spacing for a built-in scenario (default 5)")
    p.add_argument("--workers", type=int, default=None, help="numba worker threads")
    p.add_argument("--eta", type=float, default=None, help="admissibility parameter (default 2)")
    p.add_argument("--eps", type=float, default=None, help="ACA tolerance (default 1e-4)")
    p.add_argument("--leaf-size", type=int, default=None, help="cluster tree leaf size (default 64)")
    p.add_argument("--out-dir", default="rtrc-out", help="output directory")


def _solver_args(p: argparse.ArgumentParser) -> None:
    p.add_argument("--t0", type=float, default=None, help="initial temperature (default 0)")
    p.add_argument("--tol", type=float, default=None, help="stop when the estimated relative distance to the fixed point is below this (1e-8)")
    p.add_argument("--max-iters", type=int, default=None, help="iteration cap (50)")


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="rtrc", description="Radiative transfer with reflective boundaries "
                                 "by integral equations and H-matrices.")
    sub = ap.add_subparsers(dest="command", required=True)
    p = sub.add_parser("solve", help="solve one scenario and write fields, probes and the iteration trace")
    _common(p)
    _solver_args(p)
    p.add_argument("--no-field", action="store_true", help="skip the VTK/CSV field dumps")
    p = sub.add_parser("bench", help="mesh ladder: compression levels and normalized CPU time")
    _common(p)
    p.add_argument("--targets", type=int, nargs="+", default=list(workflows.TABLE_LADDER),
                   help="vertex counts of the ladder rungs")
    p.add_argument("--budget", type=float, default=None, help="skip rungs predicted to overrun this many seconds")
    p.add_argument("--tol", type=float, default=1e-6)
    p.add_argument("--max-iters", type=int, default=200)
    p = sub.add_parser("compare-sym", help="reflector vs symmetrized domain vs no reflector")
    _common(p)
    _solver_args(p)
    p = sub.add_parser("error-ladder", help="L2 error vs a reference solution over a mesh ladder")
    _common(p)
    _solver_args(p)
    p.add_argument("--spacings", type=float, nargs="+", required=True, help="grid spacings of the ladder")
    p.add_argument("--reference", type=float, required=True, help="grid spacing of the reference solution")
    return ap


class _Setup:
    """Scenario factory plus the numerical knobs, merged from config file and flags (flags win)."""

    def __init__(self, args):
        if args.config and not os.path.isfile(args.config):
            raise ConfigError([f"config file not found: {args.config}"])
        self.cfg = ScenarioConfig.load(args.config) if args.config else None
        self.builtin = args.scenario
        if self.cfg is None and self.builtin is None:
            raise ConfigError(["either --config or --scenario is required"])
        if self.cfg is not None:
            errors = self.cfg.validate()
            if errors:
                raise ConfigError(errors)
            if self.cfg.builtin:
                self.builtin = self.cfg.builtin
        c = self.cfg
        pick = lambda flag, key, default: flag if flag is not None else (getattr(c, key) if c else default)  # noqa: E731
        self.h = pick(args.h, "h", 5.0)
        self.eta = pick(args.eta, "eta", 2.0)
        self.eps = pick(args.eps, "eps", 1e-4)
        self.leaf_size = pick(args.leaf_size, "leaf_size", 64)
        self.r_near = c.r_near if c else None
        self.T0 = pick(getattr(args, "t0", None), "t0", 0.0)
        self.tol = pick(getattr(args, "tol", None), "tol", 1e-8)
        self.max_iters = pick(getattr(args, "max_iters", None), "max_iters", 50)

    def scenario(self, h=None):
        h = self.h if h is None else h
        if self.cfg is not None:
            if self.cfg.builtin is None and h != self.h:
                raise ConfigError(["a mesh ladder needs a built-in scenario; meshes from files have a fixed size"])
            return build_scenario(self.cfg, h=h)
        return kobayashi(self.builtin, h=h)

    def solve_kwargs(self) -> dict:
        return dict(eta=self.eta, eps=self.eps, leaf_size=self.leaf_size, r_near=self.r_near, T0=self.T0,
                    tol=self.tol, max_iters=self.max_iters)


def cmd_solve(args, setup: _Setup) -> int:
    sc = setup.scenario()
    _log(f"{sc.name}: {sc.volume.n_vertices} vertices, {sc.volume.n_tets} tets, "
         f"{len(sc.surface.triangles)} boundary triangles")
    sol = workflows.solve(sc, log=_log, **setup.solve_kwargs())
    files = workflows.write_outputs(sol, args.out_dir, field_dump=not args.no_field)
    summary = {
        "scenario": sc.name, "N": sc.volume.n_vertices, "iterations": len(sol.trace),
        "converged": sol.trace.converged, "verdicts": sorted(set(sol.trace.verdicts)),
        "assembly_seconds": sol.problem.stats["assembly_seconds"], "solve_seconds": sol.solve_seconds,
        "bands": {str(k): v for k, v in sol.problem.stats["bands"].items()},
        "T_range": [float(sol.T.min()), float(sol.T.max())],
    }
    with open(os.path.join(args.out_dir, "summary.json"), "w") as fh:
        json.dump(summary, fh, indent=2)
    _log(f"wrote {', '.join(files + ['summary.json'])} to {args.out_dir}")
    return 0


def cmd_bench(args, setup: _Setup) -> int:
    if setup.builtin is None:
        raise ConfigError(["bench needs a built-in scenario"])
    report = workflows.bench_ladder(args.targets, setup.builtin, setup.eta, setup.eps, setup.leaf_size,
                                    args.tol, args.max_iters, args.budget, log=_log)
    os.makedirs(args.out_dir, exist_ok=True)
    path = os.path.join(args.out_dir, "bench.tsv")
    report.write_tsv(path)
    print(report.table(), end="")
    _log(f"wrote {path}")
    return 0


def cmd_compare_sym(args, setup: _Setup) -> int:
    sc = setup.scenario()
    rep = workflows.compare_symmetrized(sc, setup.solve_kwargs(), log=_log)
    os.makedirs(args.out_dir, exist_ok=True)
    for name, (s, cols) in rep.probes.items():
        write_probe(os.path.join(args.out_dir, f"compare_{name}.csv"), s, cols)
    with open(os.path.join(args.out_dir, "compare.json"), "w") as fh:
        json.dump({"rc_vs_sym": rep.rc_vs_sym, "norc_vs_sym": rep.norc_vs_sym}, fh, indent=2)
    print(f"relative L2 difference of J on the original domain\n"
          f"  reflector vs symmetrized:    {rep.rc_vs_sym:.3e}\n"
          f"  no reflector vs symmetrized: {rep.norc_vs_sym:.3e}")
    return 0


def cmd_error_ladder(args, setup: _Setup) -> int:
    if any(abs(h - args.reference) < 1e-12 for h in args.spacings):
        raise ConfigError([f"spacing {args.reference} is the reference itself; zero error row rejected"])
    if len(set(args.spacings)) != len(args.spacings):
        raise ConfigError(["duplicate spacings in the ladder"])
    kw = setup.solve_kwargs()
    ref = workflows.solve(setup.scenario(args.reference), log=_log, **kw)
    sols = [workflows.solve(setup.scenario(h), log=_log, **kw) for h in args.spacings]
    lad = workflows.error_ladder([(s.scenario.volume, s.J) for s in sols], (ref.scenario.volume, ref.J))
    os.makedirs(args.out_dir, exist_ok=True)
    path = os.path.join(args.out_dir, "error_ladder.tsv")
    with open(path, "w") as fh:
        fh.write("N\th\tL2_error\n")
        for n, h, e in zip(lad.N, lad.h, lad.errors):
            fh.write(f"{n}\t{h:.6g}\t{e:.6e}\n")
    print(open(path).read(), end="")
    print(f"slope of log(error) vs log(N^-1/3): {lad.slope:.3f} (reference N={lad.reference_N})")
    return 0


COMMANDS = {"solve": cmd_solve, "bench": cmd_bench, "compare-sym": cmd_compare_sym, "error-ladder": cmd_error_ladder}


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    if args.workers is not None:
        if args.workers < 1:
            print("error: --workers must be >= 1", file=sys.stderr)
            return EXIT_USAGE
        import numba
        numba.set_num_threads(min(args.workers, numba.config.NUMBA_NUM_THREADS))
    try:
        setup = _Setup(args)
        return COMMANDS[args.command](args, setup)
    except MissingMeshError as exc:
        print(f"error: mesh file not found: {exc.path}", file=sys.stderr)
        return EXIT_MESH
    except ConfigError as exc:
        print("error: invalid configuration", file=sys.stderr)
        for e in exc.errors:
            print(f"  - {e}", file=sys.stderr)
        return EXIT_USAGE
    except (ValueError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
