#!/usr/bin/env python3
"""Time the hot kernels with numba and with the numpy fallback.

The two kernel tables live side by side in ``mmc_multires.kernels``; this
script swaps the active table in-process, checks that both backends give
the same numbers, and prints one timing row per operation and size.

    python3 benchmarks/bench_kernels.py [--repeat 5] [--sizes 320 640 1280]

Setting ``MMC_NO_NUMBA=1`` before starting the package selects the numpy
table for a whole run; use ``--env`` to time a short optimisation run both
ways through subprocesses.
"""

from __future__ import annotations

import argparse
import os
import subprocess
import sys
import time

import numpy as np

from mmc_multires import driver, fea, kernels, sensitivity
from mmc_multires.geometry import build_structure_tdf
from mmc_multires.mesh import HyperMesh


def best_of(func, repeat):
    times = []
    out = None
    for _ in range(repeat):
        t = time.perf_counter()
        out = func()
        times.append(time.perf_counter() - t)
    return min(times), out


def cantilever_case(nx):
    problem = driver.cantilever(background=(nx, nx // 2), n_be=4)
    params = driver.RunParams()
    grid = problem.grid()
    design = driver.initial_layout(problem.lengths, problem.layout, problem.v_bar)
    return problem, params, grid, design


def box_case(nx):
    n = (nx, nx * 5 // 6, nx)
    problem = driver.box3d(background=n, n_be=2)
    params = driver.RunParams()
    return problem, params, problem.grid(), driver.initial_layout(problem.lengths, problem.layout,
                                                                   problem.v_bar)


def bench_case(label, case, repeat):
    problem, params, grid, design = case
    reg = params.regularization(grid)
    hm = HyperMesh(grid, problem.n_be)
    tdf = fea.apply_fixed_regions(build_structure_tdf(design, grid, reg), problem.load_case)
    sol = fea.analyze(hm, tdf, params.material(), problem.load_case)

    results = {}
    for name, table in (("numpy", kernels.NUMPY_KERNELS), ("numba", kernels.NUMBA_KERNELS)):
        kernels.KERNELS = table
        # warm-up compiles (or loads from cache) the numba versions
        build_structure_tdf(design, grid, reg)
        sensitivity.sensitivities(tdf, hm, sol, params.material())
        t_tdf, field = best_of(lambda: build_structure_tdf(design, grid, reg), repeat)
        t_sen, sens = best_of(lambda: sensitivity.sensitivities(tdf, hm, sol, params.material()),
                              repeat)
        results[name] = (t_tdf, t_sen, field.phi, sens.dC)

    np.testing.assert_allclose(results["numba"][2], results["numpy"][2], rtol=1e-12, atol=1e-12)
    scale = np.abs(results["numpy"][3]).max() or 1.0
    np.testing.assert_allclose(results["numba"][3], results["numpy"][3], rtol=0, atol=1e-10 * scale)
    for op, k in (("tdf", 0), ("sensitivity", 1)):
        a, b = results["numpy"][k], results["numba"][k]
        print(f"{label:<24}{op:<13}{a * 1e3:>11.2f}{b * 1e3:>11.2f}{a / b:>9.1f}x", flush=True)


def bench_env(max_iters):
    code = ("import time; from mmc_multires import driver;"
            "p = driver.cantilever(background=(320, 160), n_be=4);"
            f"t = time.perf_counter(); driver.run(p, driver.RunParams(max_iters={max_iters}, reanalyze=False));"
            "print(time.perf_counter() - t)")
    for flag in ("1", "0"):
        env = dict(os.environ, MMC_NO_NUMBA=flag)
        out = subprocess.run([sys.executable, "-c", code], env=env, check=True,
                             capture_output=True, text=True).stdout
        name = "numpy" if flag == "1" else "numba"
        print(f"{max_iters}-iteration run, {name}: {float(out):.2f} s")


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeat", type=int, default=5)
    ap.add_argument("--sizes", type=int, nargs="+", default=[320, 640, 1280])
    ap.add_argument("--box", type=int, nargs="*", default=[24, 48],
                    help="3D box background x-resolutions")
    ap.add_argument("--env", action="store_true", help="also time whole runs via MMC_NO_NUMBA")
    args = ap.parse_args(argv)

    if not kernels.HAVE_NUMBA:
        sys.exit("numba is not available (or MMC_NO_NUMBA is set); nothing to compare")
    print(f"{'case':<24}{'op':<13}{'numpy ms':>11}{'numba ms':>11}{'speedup':>10}")
    for nx in args.sizes:
        bench_case(f"cantilever {nx}x{nx // 2}", cantilever_case(nx), args.repeat)
    for nx in args.box:
        bench_case(f"box {nx}x{nx * 5 // 6}x{nx}", box_case(nx), args.repeat)
    kernels.KERNELS = kernels.NUMBA_KERNELS
    if args.env:
        bench_env(10)


if __name__ == "__main__":
    main()
