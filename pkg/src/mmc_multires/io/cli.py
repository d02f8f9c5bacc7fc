"""Command line: ``mmc-multires {run,study,check}``.

Exit codes: 0 converged (or all checks passed), 2 iteration cap reached,
1 error (bad config, solver failure, failed check).
"""

from __future__ import annotations

import argparse
import logging
import os
import sys
from pathlib import Path

EXIT_OK, EXIT_ERROR, EXIT_CAPPED = 0, 1, 2

_THREAD_VARS = ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS", "NUMBA_NUM_THREADS")


def _set_threads(n: int | None) -> None:
    # only effective before numpy / numba are first imported
    if n is not None:
        for var in _THREAD_VARS:
            os.environ[var] = str(n)


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", type=Path, help="YAML run configuration")
    common.add_argument("--out", type=Path, help="output directory (overrides output.dir)")
    common.add_argument("--deterministic", action="store_true",
                        help="single thread, timing columns moved out of the history file")
    common.add_argument("--threads", type=int, help="BLAS / numba thread count")
    common.add_argument("--max-iters", type=int, help="iteration cap (overrides max_iters)")
    common.add_argument("-v", "--verbose", action="count", default=0)

    parser = argparse.ArgumentParser(
        prog="mmc-multires",
        description="Multi-resolution topology optimisation with moving morphable components.")
    sub = parser.add_subparsers(dest="command", required=True)
    sub.add_parser("run", parents=[common], help="optimise one configuration")
    sub.add_parser("study", parents=[common], help="optimise at each ratio in study.ratios")
    sub.add_parser("check", parents=[common], help="run the numerical self-checks")
    return parser


def _load(args):
    from .config import load_config, parse_config, with_overrides

    cfg = load_config(args.config) if args.config else parse_config("")
    updates = {}
    if args.max_iters is not None:
        updates["max_iters"] = args.max_iters
    if args.deterministic:
        updates["deterministic"] = True
    if updates:
        cfg = with_overrides(cfg, **updates)
    out = args.out if args.out is not None else Path(cfg.output.dir)
    return cfg, out


def _write_run_outputs(cfg, problem, params, result, out: Path) -> None:
    from . import export
    from .config import emit_config

    out.mkdir(parents=True, exist_ok=True)
    (out / "config.yaml").write_text(emit_config(cfg), encoding="utf-8")
    export.write_history(result, out / "history.csv", timings=not cfg.deterministic)
    if cfg.deterministic:
        export.write_timings(result, out / "timings.csv")
    snaps = result.snapshots or [(0, result.initial_design), (result.n_iter, result.design)]
    export.export_components(snaps, out / "components.txt")
    grid = problem.grid()
    reg = params.regularization(grid)
    if problem.dim == 2 and cfg.output.raster != "none":
        export.export_density_raster(result.design, grid, reg, out / f"density.{cfg.output.raster}",
                                     problem.load_case)
    if cfg.output.vtk:
        export.export_vtk(result.design, grid, reg, out / "density.vtk", problem.load_case)


def cmd_run(args) -> int:
    from ..driver import run
    from .config import build_problem, initial_design, run_params

    cfg, out = _load(args)
    problem = build_problem(cfg)
    params = run_params(cfg)
    design = initial_design(cfg, problem, params)
    result = run(problem, params, design)
    _write_run_outputs(cfg, problem, params, result, out)
    c_post = "n/a" if result.c_post is None else f"{result.c_post:.6g}"
    print(f"{problem.name}: {result.status} after {result.n_iter} iterations, "
          f"c_obj={result.c_obj:.6g}, c_post={c_post} -> {out}")
    return EXIT_OK if result.converged else EXIT_CAPPED


def cmd_study(args) -> int:
    from ..driver import resolution_study
    from . import export
    from .config import build_problem, initial_design, run_params

    cfg, out = _load(args)
    problem = build_problem(cfg)
    params = run_params(cfg)
    design = initial_design(cfg, problem, params)
    rows = resolution_study(problem, cfg.study.ratios, params, design)
    out.mkdir(parents=True, exist_ok=True)
    export.write_study(rows, out / "study.csv")
    for r in rows:
        err = "n/a" if r.rel_error is None else f"{100 * r.rel_error:.2f}%"
        print(f"n_be={r.ratio:3d}  iters={r.n_iter:5d}  c_obj={r.c_obj:.5g}  "
              f"c_post={r.c_post if r.c_post is None else round(r.c_post, 5)}  error={err}")
    return EXIT_OK if all(r.converged for r in rows) else EXIT_CAPPED


def cmd_check(args) -> int:
    from ..checks import run_checks

    cfg, _ = _load(args)
    results = run_checks(cfg.seed)
    for name, ok, detail in results:
        print(f"{'PASS' if ok else 'FAIL'}  {name}: {detail}")
    return EXIT_OK if all(ok for _, ok, _ in results) else EXIT_ERROR


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    _set_threads(1 if args.deterministic else args.threads)
    logging.basicConfig(level=logging.WARNING - 10 * min(args.verbose, 2),
                        format="%(levelname)s %(name)s: %(message)s")
    handlers = {"run": cmd_run, "study": cmd_study, "check": cmd_check}
    from ..driver import RunError
    from ..fea import SolverError
    from .config import ConfigError

    try:
        return handlers[args.command](args)
    except (ConfigError, RunError, SolverError, ValueError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_ERROR


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
