"""Multi-resolution finite element analysis with the ersatz material model.

Displacements live on the hyper-element mesh. Each hyper-element stiffness
is integrated with one point per owned background cell (the cell center),
weighted by that cell's smeared modulus::

    K_e = sum_j E_ej * B(x_j)^T D0 B(x_j) * A_g

where ``E_ej`` is ``E_s`` times the corner average of ``H(phi)**q``.

At ratio 1 a single center point would leave every element with hourglass
modes, so there the element is integrated exactly (2-point Gauss rule per
axis); the modulus is constant over the cell, so this is the standard
bilinear element of the background mesh.
"""

from __future__ import annotations

import hashlib
import logging
from dataclasses import dataclass, field
from functools import lru_cache

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from .geometry import RegularizationParams, TdfField, build_structure_tdf, heaviside_reg
from .mesh import BackgroundGrid, HyperMesh

log = logging.getLogger(__name__)

SIDES = {"xmin": (0, 0), "xmax": (0, 1), "ymin": (1, 0), "ymax": (1, 1), "zmin": (2, 0), "zmax": (2, 1)}

# systems above this many free dofs go to the iterative solver under "auto";
# CHOLMOD still handles the 1.6M-dof background reanalysis within 5 GB
DIRECT_LIMIT = 2_500_000


class SolverError(RuntimeError):
    """The linear system could not be solved (singular, indefinite, or no
    convergence)."""


@dataclass(frozen=True)
class MaterialSpec:
    E: float = 1.0
    nu: float = 0.3
    q_penal: float = 2.0

    def __post_init__(self):
        if not self.E > 0:
            raise ValueError("E must be positive")
        if not -1.0 < self.nu < 0.5:
            raise ValueError("nu must lie in (-1, 0.5)")
        if not self.q_penal >= 1:
            raise ValueError("q_penal must be >= 1")


def constitutive_matrix(nu: float, dim: int) -> np.ndarray:
    """Unit-modulus elasticity matrix: plane stress (2D) or isotropic 3D.

    Voigt order xx, yy, [zz,] then engineering shears (xy | yz, xz, xy).
    """
    if dim == 2:
        return np.array([[1.0, nu, 0.0], [nu, 1.0, 0.0], [0.0, 0.0, 0.5 * (1.0 - nu)]]) / (1.0 - nu**2)
    lam = nu / ((1.0 + nu) * (1.0 - 2.0 * nu))
    mu = 0.5 / (1.0 + nu)
    D = np.zeros((6, 6))
    D[:3, :3] = lam
    D[np.arange(3), np.arange(3)] += 2.0 * mu
    D[3:, 3:] = np.eye(3) * mu
    return D


def _corner_signs(dim: int) -> np.ndarray:
    square = np.array([[-1, -1], [1, -1], [1, 1], [-1, 1]], dtype=float)
    if dim == 2:
        return square
    return np.array([[x, y, z] for z in (-1.0, 1.0) for x, y in square])


def strain_matrix(natural, element_size) -> np.ndarray:
    """B matrix of the bilinear quad / trilinear brick at a natural point."""
    xi = np.asarray(natural, dtype=float)
    h = np.asarray(element_size, dtype=float)
    dim = xi.size
    signs = _corner_signs(dim)
    n_nodes = len(signs)
    # dN_a/dxi_k = s_ak * prod_{m != k} (1 + s_am xi_m) / 2^dim
    factors = 1.0 + signs * xi
    dN = np.empty((n_nodes, dim))
    for k in range(dim):
        others = np.prod(np.delete(factors, k, axis=1), axis=1)
        dN[:, k] = signs[:, k] * others / 2**dim * (2.0 / h[k])
    if dim == 2:
        B = np.zeros((3, 2 * n_nodes))
        B[0, 0::2] = dN[:, 0]
        B[1, 1::2] = dN[:, 1]
        B[2, 0::2] = dN[:, 1]
        B[2, 1::2] = dN[:, 0]
        return B
    B = np.zeros((6, 3 * n_nodes))
    B[0, 0::3] = dN[:, 0]
    B[1, 1::3] = dN[:, 1]
    B[2, 2::3] = dN[:, 2]
    B[3, 1::3] = dN[:, 2]
    B[3, 2::3] = dN[:, 1]
    B[4, 0::3] = dN[:, 2]
    B[4, 2::3] = dN[:, 0]
    B[5, 0::3] = dN[:, 1]
    B[5, 1::3] = dN[:, 0]
    return B


@lru_cache(maxsize=16)
def _point_matrices(ratio: int, dim: int, spacing: tuple, nu: float) -> np.ndarray:
    r = ratio
    idx = np.indices((r,) * dim).reshape(dim, -1)[::-1].T
    pts = -1.0 + (2.0 * idx + 1.0) / r
    size = tuple(h * r for h in spacing)
    D0 = constitutive_matrix(nu, dim)
    area = float(np.prod(spacing))
    mats = np.empty((len(pts), dim * 2**dim, dim * 2**dim))
    if r == 1:
        g = 1.0 / np.sqrt(3.0)
        gauss = _corner_signs(dim) * g
        mats[0] = sum(strain_matrix(xi, size).T @ D0 @ strain_matrix(xi, size) for xi in gauss)
        mats[0] *= area / len(gauss)
        pts = ()
    for j, xi in enumerate(pts):
        B = strain_matrix(xi, size)
        mats[j] = B.T @ D0 @ B * area
    mats = 0.5 * (mats + mats.transpose(0, 2, 1))
    mats.setflags(write=False)
    return mats


def point_stiffness_matrices(hmesh: HyperMesh, nu: float) -> np.ndarray:
    """``(ng, nd, nd)`` unit-modulus contributions ``B^T D0 B A_g``."""
    return _point_matrices(hmesh.ratio, hmesh.dim, tuple(hmesh.grid.spacing), float(nu))


# ----------------------------------------------------------------------------
# moduli and element matrices
# ----------------------------------------------------------------------------


def smeared_modulus(corner_phi, material: MaterialSpec, params: RegularizationParams) -> float:
    """``E_s`` times the corner mean of ``H(phi)**q`` for one cell."""
    h = heaviside_reg(np.asarray(corner_phi, dtype=float), params.epsilon, params.alpha_min)
    return float(material.E * np.mean(h**material.q_penal))


def cell_moduli(tdf: TdfField, material: MaterialSpec) -> np.ndarray:
    h = tdf.heaviside()
    return material.E * tdf.grid.cell_average(h**material.q_penal)


def element_matrices(hmesh: HyperMesh, cell_E: np.ndarray, material: MaterialSpec,
                     elements=None) -> np.ndarray:
    P = point_stiffness_matrices(hmesh, material.nu)
    cells = hmesh.cells if elements is None else hmesh.cells[np.atleast_1d(elements)]
    ng, nd, _ = P.shape
    Ke = cell_E[cells] @ P.reshape(ng, nd * nd)
    return Ke.reshape(len(cells), nd, nd)


def hyper_element_stiffness(hmesh: HyperMesh, element: int, tdf: TdfField,
                            material: MaterialSpec) -> np.ndarray:
    return element_matrices(hmesh, cell_moduli(tdf, material), material, element)[0]


def assemble(hmesh: HyperMesh, moduli, material: MaterialSpec, chunk: int = 50_000,
             dtype=np.float64) -> sp.csr_matrix:
    """Global stiffness. ``moduli`` is a TdfField or per-cell moduli array.

    Elements are summed in ascending order in fixed-size chunks, so the
    result is reproducible bit for bit. ``dtype=np.longdouble`` sums the
    cell contributions in extended precision (see ``solve``).
    """
    cell_E = cell_moduli(moduli, material) if isinstance(moduli, TdfField) else np.asarray(moduli)
    cell_E = cell_E.astype(dtype, copy=False)
    P = point_stiffness_matrices(hmesh, material.nu)
    ng, nd, _ = P.shape
    Pflat = P.reshape(ng, nd * nd).astype(dtype)
    dofs = hmesh.element_dofs
    n = hmesh.n_dofs
    itype = np.int32 if n < 2**31 - 1 else np.int64
    K = None
    for start in range(0, hmesh.n_elements, chunk):
        stop = min(start + chunk, hmesh.n_elements)
        Ke = cell_E[hmesh.cells[start:stop]] @ Pflat
        d = dofs[start:stop].astype(itype)
        rows = np.repeat(d, nd, axis=1).ravel()
        cols = np.tile(d, (1, nd)).ravel()
        part = sp.coo_matrix((Ke.ravel(), (rows, cols)), shape=(n, n)).tocsr()
        K = part if K is None else K + part
    return K


# ----------------------------------------------------------------------------
# loads and supports
# ----------------------------------------------------------------------------


@dataclass
class PointLoad:
    point: tuple
    direction: int
    magnitude: float


@dataclass
class EdgeLoad:
    """Uniform traction ``density`` on the boundary line/face ``axis = coord``.

    ``span`` optionally limits the loaded part along the first remaining
    axis (2D) as ``(lo, hi)``; facets must lie fully inside it.
    """

    axis: int
    coord: float
    direction: int
    density: float
    span: tuple | None = None

    @classmethod
    def on_side(cls, side: str, direction: int, density: float, lengths, span=None):
        axis, end = SIDES[side]
        return cls(axis, float(lengths[axis]) * end, direction, density, span)


@dataclass
class Support:
    """Fix ``components`` of every node on a side (``where`` = side name)
    or of a single node (``where`` = coordinates)."""

    where: object
    components: tuple = (0, 1)


@dataclass
class LoadCase:
    point_loads: list = field(default_factory=list)
    edge_loads: list = field(default_factory=list)
    supports: list = field(default_factory=list)
    fixed_solid: list = field(default_factory=list)
    fixed_void: list = field(default_factory=list)

    def fixed_dofs(self, hmesh: HyperMesh) -> np.ndarray:
        X = hmesh.node_coordinates()
        dim = hmesh.dim
        lengths = hmesh.grid.lengths
        fixed = []
        for s in self.supports:
            if isinstance(s.where, str):
                axis, end = SIDES[s.where]
                target = lengths[axis] * end
                nodes = np.flatnonzero(np.isclose(X[:, axis], target, atol=1e-9 * max(lengths)))
            else:
                nodes = np.array([hmesh.node_at(s.where)])
            for comp in s.components:
                fixed.append(dim * nodes + comp)
        if not fixed:
            return np.zeros(0, dtype=np.int64)
        return np.unique(np.concatenate(fixed))

    def region_nodes(self, grid: BackgroundGrid):
        """Nodal masks (solid, void) of the fixed regions on ``grid``."""
        solid = np.zeros(grid.n_cells, bool)
        for reg in self.fixed_solid:
            solid |= grid.cells_in_region(reg)
        void = np.zeros(grid.n_cells, bool)
        for reg in self.fixed_void:
            void |= grid.cells_in_region(reg)
        return grid.nodes_of_cells(solid), grid.nodes_of_cells(void)

    def solid_cells(self, grid: BackgroundGrid) -> np.ndarray:
        solid = np.zeros(grid.n_cells, bool)
        for reg in self.fixed_solid:
            solid |= grid.cells_in_region(reg)
        return solid


def distribute_load(load_case: LoadCase, hmesh: HyperMesh) -> np.ndarray:
    """Consistent nodal force vector on the hyper mesh.

    Uniform tractions are integrated exactly against the linear (2D edge)
    or bilinear (3D face) shape functions of the boundary facets.
    """
    dim = hmesh.dim
    F = np.zeros(hmesh.n_dofs)
    for pl in load_case.point_loads:
        F[dim * hmesh.node_at(pl.point) + pl.direction] += pl.magnitude
    lengths = hmesh.grid.lengths
    h = hmesh.element_size
    for el in load_case.edge_loads:
        ax = el.axis
        L = lengths[ax]
        if not (np.isclose(el.coord, 0.0, atol=1e-12 * L) or np.isclose(el.coord, L)):
            raise ValueError(f"loaded facet {('xyz'[ax])}={el.coord} is not on the boundary")
        k = 0 if np.isclose(el.coord, 0.0, atol=1e-12 * L) else hmesh.shape[ax]
        others = [a for a in range(dim) if a != ax]
        # facet corner offsets along the in-plane axes
        counts = [hmesh.shape[a] for a in others]
        facets = np.indices(counts).reshape(len(others), -1).T
        if el.span is not None:
            a0 = others[0]
            lo_c = facets[:, 0] * h[a0]
            hi_c = lo_c + h[a0]
            keep = (lo_c >= el.span[0] - 1e-12) & (hi_c <= el.span[1] + 1e-12)
            facets = facets[keep]
        area = float(np.prod([h[a] for a in others]))
        share = el.density * area / 2 ** len(others)
        for corner in np.ndindex(*(2,) * len(others)):
            idx = np.zeros((len(facets), dim), dtype=np.int64)
            idx[:, ax] = k
            for m, a in enumerate(others):
                idx[:, a] = facets[:, m] + corner[m]
            node = np.zeros(len(facets), dtype=np.int64)
            stride = 1
            for a in range(dim):
                node += idx[:, a] * stride
                stride *= hmesh.node_shape[a]
            np.add.at(F, dim * node + el.direction, share)
    return F


# ----------------------------------------------------------------------------
# solve
# ----------------------------------------------------------------------------


@dataclass
class FeaSolution:
    u: np.ndarray
    compliance: float
    iterations: int
    residual: float
    method: str
    design_key: str | None = None
    cell_E: np.ndarray | None = None


def design_key(design: np.ndarray) -> str:
    return hashlib.sha1(np.ascontiguousarray(design, dtype=float).tobytes()).hexdigest()


EXTENDED_RESIDUAL_LIMIT = 200_000
# systems up to this size are also assembled in extended precision; the
# cost (about 4x the assembly time) only pays off for gradient checks
EXTENDED_ASSEMBLY_LIMIT = 20_000


def _solve_direct(A: sp.csr_matrix, b: np.ndarray, tol: float = 1e-8, max_refine: int = 8,
                  A_ext: sp.csr_matrix | None = None) -> np.ndarray:
    """Sparse Cholesky (CHOLMOD, supernodal) of the SPD reduced system,
    followed by iterative refinement until the relative residual is below
    ``tol / 10`` (at least two passes).

    Refinement residuals are formed in extended precision for systems up to
    ``EXTENDED_RESIDUAL_LIMIT`` unknowns: large void-region displacements
    make ``b - A x`` cancel heavily in double precision, which shows up as
    round-off noise in the compliance. ``A_ext``, when given, is the same
    matrix assembled in extended precision and is used for the residuals."""
    from cvxopt import cholmod, matrix, spmatrix

    low = sp.tril(A).tocoo()
    M = spmatrix(low.data, low.row.astype(np.int64), low.col.astype(np.int64), size=A.shape)
    del low
    cholmod.options["supernodal"] = 2
    cholmod.options["print"] = 0
    try:
        factor = cholmod.symbolic(M)
        cholmod.numeric(M, factor)
    except ArithmeticError as exc:
        raise SolverError("stiffness is singular or indefinite after constraint elimination") from exc
    del M
    x = matrix(b)
    cholmod.solve(factor, x)
    x = np.array(x).ravel()
    if A_ext is not None or A.shape[0] <= EXTENDED_RESIDUAL_LIMIT:
        if A_ext is None:
            A_ext = A.astype(np.longdouble)
        b_ext = b.astype(np.longdouble)

        def residual(x):
            return np.asarray(b_ext - A_ext @ x.astype(np.longdouble), dtype=float)
    else:
        def residual(x):
            return b - A @ x
    bnorm = np.linalg.norm(b)
    prev = np.inf
    for k in range(max_refine):
        r = residual(x)
        rn = np.linalg.norm(r)
        # the compliance error is first order in the residual, so keep
        # refining while it still drops markedly
        if k >= 2 and rn <= 0.1 * tol * bnorm and (rn <= 1e-15 * bnorm or rn > 0.5 * prev):
            break
        # stagnation: the residual sits at the floor set by storing x in
        # double precision (see ``backward_error``)
        if k >= 3 and rn > 0.9 * prev:
            break
        prev = rn
        r = matrix(r)
        cholmod.solve(factor, r)
        x += np.array(r).ravel()
    if not np.all(np.isfinite(x)):
        raise SolverError("direct solve produced non-finite displacements")
    return x


def _relative_residual(A: sp.csr_matrix, x: np.ndarray, b: np.ndarray) -> float:
    if A.dtype == np.longdouble or A.shape[0] <= EXTENDED_RESIDUAL_LIMIT:
        r = b.astype(np.longdouble) - A.astype(np.longdouble) @ x.astype(np.longdouble)
        return float(np.linalg.norm(r.astype(float)) / np.linalg.norm(b))
    return float(np.linalg.norm(A @ x - b) / np.linalg.norm(b))


def backward_error(A: sp.csr_matrix, x: np.ndarray, b: np.ndarray) -> float:
    """Normwise backward error ``|b - A x| / (|A| |x| + |b|)`` (infinity norms).

    Void regions carry displacements ~1/alpha^q larger than the solid, so
    the relative residual of the best double-precision ``x`` can exceed
    1e-8 while ``x`` is the exact solution of a system perturbed by ~1e-16;
    this measure is what a solve can be held to.
    """
    ext = A.dtype == np.longdouble or A.shape[0] <= EXTENDED_RESIDUAL_LIMIT
    if ext:
        Ae = A.astype(np.longdouble)
        r = np.asarray(b.astype(np.longdouble) - Ae @ x.astype(np.longdouble), dtype=float)
    else:
        r = b - A @ x
    a_norm = float(abs(A).sum(axis=1).max())
    denom = a_norm * np.abs(x).max() + np.abs(b).max()
    return float(np.abs(r).max() / denom) if denom > 0 else 0.0


def _solve_iterative(A: sp.csr_matrix, b: np.ndarray, tol: float, maxiter: int):
    import pyamg

    ml = pyamg.smoothed_aggregation_solver(A.tocsr(), symmetry="symmetric", max_coarse=2000)
    M = ml.aspreconditioner(cycle="V")
    count = [0]

    def cb(_):
        count[0] += 1

    x, info = spla.cg(A, b, rtol=tol, maxiter=maxiter, M=M, callback=cb)
    if info > 0:
        raise SolverError(f"PCG did not converge in {maxiter} iterations")
    if info < 0:
        raise SolverError("PCG breakdown: matrix not positive definite")
    return x, count[0]


def solve(K: sp.spmatrix, F: np.ndarray, fixed_dofs, tol: float = 1e-8,
          method: str = "auto", maxiter: int = 20_000) -> FeaSolution:
    """Solve ``K u = F`` with homogeneous Dirichlet conditions on ``fixed_dofs``.

    A long-double ``K`` is factorised in double precision but keeps its
    exact entries for the refinement residuals; this removes the
    compliance noise caused by rounding the assembled entries.
    """
    n = K.shape[0]
    free = np.setdiff1d(np.arange(n), np.asarray(fixed_dofs, dtype=np.int64))
    u = np.zeros(n)
    Ff = F[free]
    if not np.any(Ff):
        return FeaSolution(u, 0.0, 0, 0.0, "trivial")
    A = K[free][:, free].tocsr()
    A_ext = None
    if A.dtype == np.longdouble:
        A_ext, A = A, A.astype(np.float64)
    if method == "auto":
        method = "direct" if free.size <= DIRECT_LIMIT else "pcg"
    iters = 0
    if method == "direct":
        x = _solve_direct(A, Ff, tol, A_ext=A_ext)
    elif method == "pcg":
        x, iters = _solve_iterative(A, Ff, tol, maxiter)
    else:
        raise ValueError(f"unknown solver method {method!r}")
    A_chk = A if A_ext is None else A_ext
    res = _relative_residual(A_chk, x, Ff)
    if not res <= tol:
        eta = backward_error(A_chk, x, Ff)
        # growth |A||x|/|b| near 1/eps means the factor met a (numerically)
        # singular system; a small backward error proves nothing there
        growth = float(abs(A).sum(axis=1).max()) * np.abs(x).max() / np.abs(Ff).max()
        if not (eta <= tol and growth * np.finfo(float).eps <= 1e-3):
            raise SolverError(f"relative residual {res:.3e} (backward error {eta:.3e}, "
                              f"growth {growth:.1e}) above tolerance {tol:.1e}")
        log.debug("relative residual %.3e at the double-precision floor; backward error %.1e",
                  res, eta)
    u[free] = x
    c = float(F @ u)
    if c < 0:
        raise SolverError("negative compliance: stiffness is indefinite")
    return FeaSolution(u, c, iters, res, method)


def analyze(hmesh: HyperMesh, tdf: TdfField, material: MaterialSpec, load_case: LoadCase,
            tol: float = 1e-8, method: str = "auto") -> FeaSolution:
    """Moduli -> assembly -> loads -> solve for one (override-applied) field."""
    cell_E = cell_moduli(tdf, material)
    extended = hmesh.n_dofs <= EXTENDED_ASSEMBLY_LIMIT and method != "pcg"
    K = assemble(hmesh, cell_E, material, dtype=np.longdouble if extended else np.float64)
    F = distribute_load(load_case, hmesh)
    sol = solve(K, F, load_case.fixed_dofs(hmesh), tol=tol, method=method)
    sol.design_key = design_key(tdf.design)
    sol.cell_E = cell_E
    return sol


def apply_fixed_regions(tdf: TdfField, load_case: LoadCase) -> TdfField:
    if not (load_case.fixed_solid or load_case.fixed_void):
        return tdf
    solid, void = load_case.region_nodes(tdf.grid)
    return tdf.with_overrides(solid, void)


def volume(tdf: TdfField, corrected: bool = False) -> float:
    """Material volume ``A_g * sum_cells mean_corners H``.

    With ``corrected=True`` the void floor is removed:
    ``(V - alpha*V_D) / (1 - alpha)``.
    """
    grid = tdf.grid
    v = grid.cell_volume * float(grid.cell_average(tdf.heaviside()).sum())
    if corrected:
        a = tdf.params.alpha_min
        v = (v - a * grid.domain_volume) / (1.0 - a)
    return v


def reanalyze_on_background(design, grid: BackgroundGrid, material: MaterialSpec,
                            load_case: LoadCase, params: RegularizationParams,
                            c_obj: float | None = None, method: str = "auto"):
    """Full-resolution analysis (one hyper-element per cell).

    Returns ``(c_post, relative_error)``; the error is
    ``|c_post - c_obj| / c_post`` or ``None`` without ``c_obj``.
    """
    tdf = apply_fixed_regions(build_structure_tdf(design, grid, params), load_case)
    sol = analyze(HyperMesh(grid, 1), tdf, material, load_case, method=method)
    c_post = sol.compliance
    err = None if c_obj is None else abs(c_post - c_obj) / c_post
    return c_post, err
