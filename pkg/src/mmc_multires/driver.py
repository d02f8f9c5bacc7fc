"""Benchmark problems, initial component layouts and the optimisation loop.

One optimisation step is

    components -> structure TDF (+ fixed regions) -> hyper-element FEA
    -> compliance / volume gradients -> MMA update -> convergence test

Compliance is minimised under ``V <= volume_fraction * V_D``. Every
component center is boxed into the sub-region it starts in, which is how the
partitioning keeps the topological complexity of the initial layout.
"""

from __future__ import annotations

import dataclasses
import logging
import time
from dataclasses import dataclass, field
from math import gamma

import numpy as np
from scipy.optimize import least_squares

from . import fea
from .fea import LoadCase, MaterialSpec, PointLoad, Support, EdgeLoad, SolverError
from .geometry import RegularizationParams, build_structure_tdf, n_params, rotation_matrix
from .mesh import BackgroundGrid, HyperMesh, SubregionGrid, partition_bounds
from .optimizer import ConvergenceWindow, MmaState, check_convergence, mma_update
from .sensitivity import sensitivities

log = logging.getLogger(__name__)

MAX_ITERS = 1000


class RunError(RuntimeError):
    """An optimisation step failed; ``iteration`` names the step."""

    def __init__(self, iteration: int, message: str):
        super().__init__(f"iteration {iteration}: {message}")
        self.iteration = iteration


# ----------------------------------------------------------------------------
# problem definition
# ----------------------------------------------------------------------------


@dataclass
class LayoutRecipe:
    """Crossed components on a uniform grid of layout cells.

    ``per_cell`` components share each cell center. In 2D they are the two
    cell diagonals (``2``), plus a horizontal/vertical pair (``4``); in 3D
    they follow the four body diagonals. Half-lengths are
    ``length_factor`` times the half cell diagonal. ``thickness=None`` sizes
    the uniform thickness so the summed component volume equals V_bar.
    """

    cells: tuple
    per_cell: int = 2
    length_factor: float = 1.0
    thickness: float | None = None

    def __post_init__(self):
        self.cells = tuple(int(c) for c in self.cells)
        if any(c < 1 for c in self.cells):
            raise ValueError(f"layout needs at least one cell per axis, got {self.cells}")
        if self.per_cell < 1:
            raise ValueError("per_cell must be >= 1")
        if self.per_cell > 4:
            raise ValueError("per_cell must be <= 4")
        if not self.length_factor > 0:
            raise ValueError("length_factor must be positive")
        if self.thickness is not None and not self.thickness > 0:
            raise ValueError("thickness must be positive")

    @property
    def n_components(self) -> int:
        return int(np.prod(self.cells)) * self.per_cell


@dataclass
class ProblemDef:
    name: str
    lengths: tuple
    background: tuple
    n_be: int
    partition: tuple
    volume_fraction: float
    load_case: LoadCase
    layout: LayoutRecipe
    symmetry: str = "none"

    def __post_init__(self):
        self.lengths = tuple(float(v) for v in self.lengths)
        self.background = tuple(int(v) for v in self.background)
        self.partition = tuple(int(v) for v in self.partition)
        if not 0.0 < self.volume_fraction < 1.0:
            raise ValueError(f"volume_fraction must lie in (0, 1), got {self.volume_fraction}")
        dim = len(self.lengths)
        if dim not in (2, 3) or len(self.background) != dim or len(self.partition) != dim:
            raise ValueError("lengths, background and partition must share one dimension (2 or 3)")
        if len(self.layout.cells) != dim:
            raise ValueError("layout cells do not match the problem dimension")
        if dim == 3 and self.layout.per_cell > 4:
            raise ValueError("3D layouts place at most 4 components per cell")
        for n, r in zip(self.background, (self.n_be,) * dim):
            if n % r:
                raise ValueError(f"background count {n} is not divisible by n_be={r}")

    @property
    def dim(self) -> int:
        return len(self.lengths)

    @property
    def domain_volume(self) -> float:
        return float(np.prod(self.lengths))

    @property
    def v_bar(self) -> float:
        return self.volume_fraction * self.domain_volume

    def grid(self) -> BackgroundGrid:
        return BackgroundGrid(self.background, self.lengths)

    def subregions(self) -> SubregionGrid:
        return SubregionGrid(self.partition, self.lengths)

    def replace(self, **changes) -> "ProblemDef":
        return dataclasses.replace(self, **changes)


def _octant_disk(lengths, radius, thickness) -> dict:
    top = lengths[1]
    return {"shape": "cylinder", "axis": 1, "center": [0.0, 0.0], "radius": radius,
            "range": [top - thickness, top]}


def cantilever(background=(1280, 640), n_be=8, partition=(12, 6), volume_fraction=0.4,
               layout=None) -> ProblemDef:
    """12x6 short cantilever, unit downward load at the middle of the free end."""
    L = (12.0, 6.0)
    lc = LoadCase(point_loads=[PointLoad((L[0], L[1] / 2), 1, -1.0)],
                  supports=[Support("xmin", (0, 1))])
    return ProblemDef("cantilever", L, background, n_be, partition, volume_fraction, lc,
                      layout or LayoutRecipe((24, 12), 2))


def mbb(background=(1280, 640), n_be=5, partition=(12, 6), volume_fraction=0.4,
        layout=None) -> ProblemDef:
    """Right half of the MBB beam (full span 24, depth 6, central load 2).

    The symmetry line x=0 carries x-rollers and half the load; the support
    at the bottom-right corner is a vertical roller.
    """
    L = (12.0, 6.0)
    lc = LoadCase(point_loads=[PointLoad((0.0, L[1]), 1, -1.0)],
                  supports=[Support("xmin", (0,)), Support((L[0], 0.0), (1,))])
    return ProblemDef("mbb", L, background, n_be, partition, volume_fraction, lc,
                      layout or LayoutRecipe((24, 12), 2), symmetry="half (x=0)")


def distributed(background=(1200, 600), n_be=1, partition=(6, 3), volume_fraction=0.4,
                solid_layers=1, layout=None) -> ProblemDef:
    """12x6 cantilever under a uniform top load of total magnitude 1.

    ``solid_layers`` rows of background cells along the loaded edge are
    frozen solid.
    """
    L = (12.0, 6.0)
    solid = []
    if solid_layers:
        dy = L[1] / background[1]
        solid.append({"shape": "box", "lo": [0.0, L[1] - solid_layers * dy], "hi": [L[0], L[1]]})
    lc = LoadCase(edge_loads=[EdgeLoad.on_side("ymax", 1, -1.0 / L[0], L)],
                  supports=[Support("xmin", (0, 1))], fixed_solid=solid)
    return ProblemDef("distributed", L, background, n_be, partition, volume_fraction, lc,
                      layout or LayoutRecipe((24, 12), 2))


def box3d(background=(48, 40, 48), n_be=2, partition=(1, 1, 1), volume_fraction=0.02,
          layout=None) -> ProblemDef:
    """One octant [0,6]x[0,5]x[0,6] of the 12x10x12 box under a torque pair.

    Each end disk (radius 1.5, thickness 0.15, frozen solid) carries a
    couple of two forces of magnitude 2 at (+-1.5, +-5, 0) along z. The
    octant sees half of the rim force lying on its z=0 face. Displacements
    are antisymmetric about all three coordinate planes.
    """
    L = (6.0, 5.0, 6.0)
    lc = LoadCase(
        point_loads=[PointLoad((1.5, L[1], 0.0), 2, -1.0)],
        supports=[Support("xmin", (1, 2)), Support("ymin", (0, 2)), Support("zmin", (0, 1))],
        fixed_solid=[_octant_disk(L, 1.5, 0.15)],
    )
    return ProblemDef("box3d", L, background, n_be, partition, volume_fraction, lc,
                      layout or LayoutRecipe((6, 5, 6), 4), symmetry="octant")


PROBLEMS = {"cantilever": cantilever, "mbb": mbb, "distributed": distributed, "box3d": box3d}


def get_problem(name: str, **overrides) -> ProblemDef:
    try:
        factory = PROBLEMS[name]
    except KeyError:
        raise ValueError(f"unknown problem {name!r}; choose from {sorted(PROBLEMS)}") from None
    return factory(**overrides)


# ----------------------------------------------------------------------------
# initial layout
# ----------------------------------------------------------------------------


def superellipse_area_factor(p: int, dim: int) -> float:
    """Volume of ``sum |x_i|^p <= 1`` divided by that of its bounding box."""
    return gamma(1.0 + 1.0 / p) ** dim / gamma(1.0 + dim / p)


def _angles_for_axis(direction) -> np.ndarray:
    """(alpha, beta, theta) whose rotation maps the local x axis onto ``direction``."""
    d = np.asarray(direction, dtype=float)
    d = d / np.linalg.norm(d)

    def resid(ang):
        return rotation_matrix(0.0, *ang)[0] - d

    sol = least_squares(resid, x0=[0.1, 0.1], bounds=([-1.5, -1.5], [1.5, 1.5]),
                        xtol=1e-15, ftol=1e-15, gtol=1e-15)
    return np.array([0.0, *sol.x])


def _cell_angles(dim: int, per_cell: int, cell_size) -> list:
    if dim == 2:
        diag = float(np.arctan2(cell_size[1], cell_size[0]))
        return [(diag,), (-diag,), (0.0,), (np.pi / 2,)][:per_cell]
    hx, hy, hz = cell_size
    dirs = [(hx, hy, hz), (hx, hy, -hz), (hx, -hy, hz), (hx, -hy, -hz)][:per_cell]
    return [tuple(_angles_for_axis(d)) for d in dirs]


def initial_layout(lengths, recipe: LayoutRecipe, v_bar: float | None = None,
                   p_exp: int = 6) -> np.ndarray:
    """Design array of crossed components, one group per layout cell.

    Thickness (2D: ``t1 = t2``; 3D: ``L2 = L3``) solves
    ``n * k_p * 2^dim * half_length * t^(dim-1) = v_bar`` with ``k_p`` the
    superellipse fill factor, overlaps ignored.
    """
    lengths = np.asarray(lengths, dtype=float)
    dim = lengths.size
    cells = np.asarray(recipe.cells)
    if cells.size != dim:
        raise ValueError("layout cells do not match the domain dimension")
    h = lengths / cells
    half = recipe.length_factor * 0.5 * float(np.linalg.norm(h))
    n = recipe.n_components
    if recipe.thickness is not None:
        t = recipe.thickness
    else:
        if v_bar is None:
            raise ValueError("v_bar is required when the thickness is not given")
        k = superellipse_area_factor(p_exp, dim)
        t = (v_bar / (n * k * 2**dim * half)) ** (1.0 / (dim - 1))
    angles = _cell_angles(dim, recipe.per_cell, h)

    idx = np.indices(recipe.cells[::-1]).reshape(dim, -1)[::-1].T  # x-fastest
    centers = (idx + 0.5) * h
    rows = []
    for c in centers:
        for ang in angles:
            if dim == 2:
                rows.append([c[0], c[1], half, t, t, ang[0]])
            else:
                rows.append([*c, half, t, t, *ang])
    design = np.array(rows, dtype=float).reshape(-1, n_params(dim))
    return design


# ----------------------------------------------------------------------------
# run
# ----------------------------------------------------------------------------


@dataclass
class RunParams:
    max_iters: int = MAX_ITERS
    tol: float = 5e-4
    eps_factor: float = 2.0
    alpha_min: float = 1e-3
    ks_l: float = 100.0
    p_exp: int = 6
    q_penal: float = 2.0
    E: float = 1.0
    nu: float = 0.3
    move: float = 0.1
    angle_move: float = 0.1
    size_floor: float | None = None
    size_cap: tuple | None = None
    reanalyze: bool = True
    solver: str = "auto"
    snapshot_every: int = 0

    def __post_init__(self):
        if self.max_iters < 1:
            raise ValueError("max_iters must be >= 1")
        if not (0 < self.move <= 1 and self.angle_move > 0):
            raise ValueError("move limits must be positive (fractional move <= 1)")

    def regularization(self, grid: BackgroundGrid) -> RegularizationParams:
        return RegularizationParams.for_grid(grid, self.eps_factor, alpha_min=self.alpha_min,
                                             ks_l=self.ks_l, p_exp=self.p_exp)

    def material(self) -> MaterialSpec:
        return MaterialSpec(E=self.E, nu=self.nu, q_penal=self.q_penal)


@dataclass
class IterationRecord:
    iteration: int
    compliance: float
    volume: float
    volume_fraction: float
    t_tdf: float
    t_fea: float
    t_sen: float
    t_mma: float
    t_total: float
    band_nodes: int = 0
    change: float = 0.0


@dataclass
class RunResult:
    problem: str
    records: list
    design: np.ndarray
    initial_design: np.ndarray
    converged: bool
    c_obj: float
    c_post: float | None
    rel_error: float | None
    snapshots: list = field(default_factory=list)

    @property
    def n_iter(self) -> int:
        return len(self.records)

    @property
    def status(self) -> str:
        return "converged" if self.converged else "iteration-cap"

    def mean_timings(self) -> dict:
        keys = ("t_tdf", "t_fea", "t_sen", "t_mma", "t_total")
        if not self.records:
            return {k: 0.0 for k in keys}
        return {k: float(np.mean([getattr(r, k) for r in self.records])) for k in keys}


def move_limits(dim: int, lower: np.ndarray, upper: np.ndarray, move: float,
                angle_move: float) -> np.ndarray:
    """Per-variable step bound: a fraction of the range, fixed radians for angles."""
    npar = n_params(dim)
    lim = move * (upper - lower)
    angle_cols = np.arange(lower.size) % npar >= npar - (1 if dim == 2 else 3)
    lim[angle_cols] = angle_move
    return lim


def prepare_design(problem: ProblemDef, params: RunParams, design=None):
    """Initial design and its partition bounds (flat vectors)."""
    if design is None:
        design = initial_layout(problem.lengths, problem.layout, problem.v_bar, params.p_exp)
    design = np.atleast_2d(np.asarray(design, dtype=float))
    if design.shape[1] != n_params(problem.dim):
        raise ValueError("initial design does not match the problem dimension")
    lo, hi = partition_bounds(problem.subregions(), design, size_floor=params.size_floor,
                              size_cap=params.size_cap)
    x0 = np.clip(design.ravel(), lo, hi)
    return x0, lo, hi


def evaluate(design, problem: ProblemDef, params: RunParams, hmesh: HyperMesh | None = None):
    """Compliance, volume and gradients of one design (no optimisation)."""
    grid = problem.grid()
    hmesh = hmesh or HyperMesh(grid, problem.n_be)
    reg = params.regularization(grid)
    material = params.material()
    tdf = fea.apply_fixed_regions(build_structure_tdf(np.asarray(design), grid, reg), problem.load_case)
    sol = fea.analyze(hmesh, tdf, material, problem.load_case, method=params.solver)
    sens = sensitivities(tdf, hmesh, sol, material)
    return sol.compliance, fea.volume(tdf), sens


def run(problem: ProblemDef, params: RunParams | None = None, design=None,
        callback=None) -> RunResult:
    """Optimise ``problem`` from its layout (or ``design``) until convergence
    or the iteration cap. ``callback(record, design)`` sees every step."""
    params = params or RunParams()
    grid = problem.grid()
    hmesh = HyperMesh(grid, problem.n_be)
    reg = params.regularization(grid)
    material = params.material()
    lc = problem.load_case
    v_bar = problem.v_bar

    x, lo, hi = prepare_design(problem, params, design)
    initial = x.reshape(-1, n_params(problem.dim)).copy()
    state = MmaState(move=move_limits(problem.dim, lo, hi, params.move, params.angle_move))
    window = ConvergenceWindow()
    records, snapshots = [], []
    c_scale = None
    converged = False
    log.info("%s: %d components, %d hyper-element dofs, V_bar=%.4g",
             problem.name, len(initial), hmesh.n_dofs, v_bar)

    for it in range(1, params.max_iters + 1):
        t0 = time.perf_counter()
        design_2d = x.reshape(-1, n_params(problem.dim))
        tdf = fea.apply_fixed_regions(build_structure_tdf(design_2d, grid, reg), lc)
        t1 = time.perf_counter()
        try:
            sol = fea.analyze(hmesh, tdf, material, lc, method=params.solver)
        except SolverError as exc:
            raise RunError(it, str(exc)) from exc
        t2 = time.perf_counter()
        c = sol.compliance
        v = fea.volume(tdf)
        sens = sensitivities(tdf, hmesh, sol, material)
        t3 = time.perf_counter()

        window.push(c, v)
        done = check_convergence(window, v_bar, params.tol)
        change = 0.0
        if not done and it < params.max_iters:
            if c_scale is None:
                c_scale = c if c > 0 else 1.0
            x_new = mma_update(state, x, c / c_scale, sens.dC / c_scale,
                               v / v_bar - 1.0, sens.dV / v_bar, (lo, hi))
            change = float(np.max(np.abs(x_new - x))) if x.size else 0.0
            x = x_new
        t4 = time.perf_counter()

        rec = IterationRecord(it, c, v, v / problem.domain_volume, t1 - t0, t2 - t1, t3 - t2,
                              t4 - t3, t4 - t0, sens.band_nodes, change)
        records.append(rec)
        if params.snapshot_every and (it == 1 or it % params.snapshot_every == 0 or done):
            snapshots.append((it, design_2d.copy()))
        if callback is not None:
            callback(rec, design_2d)
        log.debug("it %4d  C=%.6g  V/V_D=%.4f  dx=%.3g", it, c, rec.volume_fraction, change)
        if done:
            converged = True
            break

    final = x.reshape(-1, n_params(problem.dim)).copy()
    c_obj = records[-1].compliance
    c_post, err = None, None
    if problem.n_be == 1:
        c_post, err = c_obj, 0.0
    elif params.reanalyze:
        c_post, err = fea.reanalyze_on_background(final, grid, material, lc, reg, c_obj,
                                                  method=params.solver)
    return RunResult(problem.name, records, final, initial, converged, c_obj, c_post, err,
                     snapshots)


# ----------------------------------------------------------------------------
# resolution studies
# ----------------------------------------------------------------------------


@dataclass
class StudyRow:
    ratio: int
    n_iter: int
    converged: bool
    c_obj: float
    c_post: float | None
    rel_error: float | None


def resolution_study(problem: ProblemDef, ratios, params: RunParams | None = None,
                     design=None) -> list:
    """One full optimisation per hyper-element ratio from the same layout."""
    rows = []
    for r in ratios:
        res = run(problem.replace(n_be=int(r)), params, design)
        rows.append(StudyRow(int(r), res.n_iter, res.converged, res.c_obj, res.c_post,
                             res.rel_error))
    return rows


def reanalysis_ladder(design, problem: ProblemDef, ratios, params: RunParams | None = None) -> list:
    """Compliance of one fixed design at each ratio, with the relative error
    against the single-resolution (ratio 1) analysis."""
    params = params or RunParams()
    grid = problem.grid()
    reg = params.regularization(grid)
    material = params.material()
    lc = problem.load_case
    tdf = fea.apply_fixed_regions(build_structure_tdf(np.asarray(design), grid, reg), lc)
    ref = None
    out = []
    for r in sorted(set(int(r) for r in ratios) | {1}):
        sol = fea.analyze(HyperMesh(grid, r), tdf, material, lc, method=params.solver)
        if r == 1:
            ref = sol.compliance
        out.append((r, sol.compliance))
    wanted = set(int(r) for r in ratios)
    return [StudyRow(r, 0, True, c, ref, abs(ref - c) / ref) for r, c in out if r in wanted]
