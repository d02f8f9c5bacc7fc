"""Fast self-checks of the numerical building blocks (``check`` subcommand).

Each check returns ``(name, passed, detail)``. They run in seconds and use
only closed-form references, so a failure points at the installation or a
regression, not at optimizer-path variance.
"""

from __future__ import annotations

import numpy as np

from . import fea, geometry as geo
from .mesh import BackgroundGrid, HyperMesh


def check_ks_sandwich(rng, n_trials=2000, l=100.0):
    worst_lo, worst_hi = 0.0, 0.0
    for _ in range(n_trials):
        n = int(rng.integers(1, 12))
        v = rng.uniform(-2, 2, n)
        ks, _ = geo.ks_aggregate(v, l)
        gap = ks - v.max()
        worst_lo = min(worst_lo, gap)
        worst_hi = max(worst_hi, gap - np.log(n) / l)
    ok = worst_lo >= 0 and worst_hi <= 1e-12
    return "K-S sandwich", ok, f"min gap {worst_lo:.2e}, max excess {worst_hi:.2e}"


def check_heaviside(eps=0.05, alpha=1e-3):
    ends = (geo.heaviside_reg(-eps, eps, alpha), geo.heaviside_reg(eps, eps, alpha),
            geo.heaviside_reg(0.0, eps, alpha))
    x = np.linspace(-0.9 * eps, 0.9 * eps, 41)
    h = 1e-7
    fd = (geo.heaviside_reg(x + h, eps, alpha) - geo.heaviside_reg(x - h, eps, alpha)) / (2 * h)
    err = float(np.max(np.abs(fd - geo.heaviside_reg_deriv(x, eps, alpha))))
    ok = (abs(ends[0] - alpha) <= 1e-12 and abs(ends[1] - 1) <= 1e-12
          and abs(ends[2] - (1 + alpha) / 2) <= 1e-12 and err <= 1e-6)
    return "regularized Heaviside", ok, f"endpoints {ends}, derivative FD error {err:.1e}"


def check_rotation(rng, n=200):
    worst = 0.0
    for _ in range(n):
        ang = rng.uniform(-np.pi / 2 + 1e-3, np.pi / 2, 3)
        R = geo.rotation_matrix(*ang)
        worst = max(worst, float(np.abs(R @ R.T - np.eye(3)).max()), abs(np.linalg.det(R) - 1))
    return "3D rotation orthonormality", worst <= 1e-12, f"max deviation {worst:.1e}"


def check_hyper_element(ratio=4):
    grid = BackgroundGrid((ratio, ratio), (1.0, 1.0))
    hm = HyperMesh(grid, 1 if ratio == 1 else ratio)
    P = fea.point_stiffness_matrices(hm, 0.3)
    K = P.sum(axis=0)
    sym = float(np.abs(K - K.T).max())
    ev = np.linalg.eigvalsh(K)
    rigid = int(np.sum(np.abs(ev) < 1e-10 * ev.max()))
    ok = sym <= 1e-12 and rigid == 3
    return "hyper-element stiffness", ok, f"asymmetry {sym:.1e}, zero modes {rigid}"


def check_volume_gradient(rng):
    grid = BackgroundGrid((24, 12), (2.0, 1.0))
    params = geo.RegularizationParams.for_grid(grid)
    design = np.array([[0.6, 0.5, 0.4, 0.08, 0.1, 0.3], [1.3, 0.45, 0.5, 0.1, 0.07, -0.4]])
    design[:, :2] += rng.uniform(-0.03, 0.03, (2, 2))
    from .sensitivity import volume_gradient

    g = volume_gradient(geo.build_structure_tdf(design, grid, params))
    x = design.ravel()
    fd = np.empty_like(x)
    h = 1e-7
    for i in range(x.size):
        xp, xm = x.copy(), x.copy()
        xp[i] += h
        xm[i] -= h
        vp = fea.volume(geo.build_structure_tdf(xp.reshape(design.shape), grid, params))
        vm = fea.volume(geo.build_structure_tdf(xm.reshape(design.shape), grid, params))
        fd[i] = (vp - vm) / (2 * h)
    scale = np.abs(fd).max()
    err = float(np.abs(g - fd).max() / scale)
    return "volume gradient vs finite differences", err <= 1e-4, f"max error / max |grad| {err:.1e}"


def run_checks(seed: int = 0) -> list:
    rng = np.random.default_rng(seed)
    return [
        check_ks_sandwich(rng),
        check_heaviside(),
        check_rotation(rng),
        check_hyper_element(),
        check_volume_gradient(rng),
    ]
