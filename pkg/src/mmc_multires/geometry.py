"""Component and structure topology description functions (TDFs).

A component's TDF is positive inside it, zero on its boundary and negative
outside. The structure TDF is the K-S (log-sum-exp) aggregate of the
component TDFs, evaluated only on each component's support box.

Designs are carried as ``(n_components, n_params)`` float arrays whose
rows are ``[x0, y0, a, t1, t2, theta]`` in 2D and
``[x0, y0, z0, L1, L2, L3, alpha, beta, theta]`` in 3D.
"""

from __future__ import annotations

import math
from dataclasses import astuple, dataclass

import numpy as np

from . import kernels
from .mesh import BackgroundGrid

PARAMS_2D = ("x0", "y0", "a", "t1", "t2", "theta")
PARAMS_3D = ("x0", "y0", "z0", "L1", "L2", "L3", "alpha", "beta", "theta")


def n_params(dim: int) -> int:
    return 6 if dim == 2 else 9


def design_dim(design: np.ndarray) -> int:
    ncol = np.shape(design)[-1]
    if ncol == 6:
        return 2
    if ncol == 9:
        return 3
    raise ValueError(f"design rows must have 6 or 9 entries, got {ncol}")


@dataclass(frozen=True)
class Component2D:
    x0: float
    y0: float
    a: float
    t1: float
    t2: float
    theta: float

    def __post_init__(self):
        if not (self.a > 0 and self.t1 > 0 and self.t2 > 0):
            raise ValueError(f"component sizes must be positive: {self}")

    def as_array(self) -> np.ndarray:
        return np.array(astuple(self), dtype=float)


@dataclass(frozen=True)
class Component3D:
    x0: float
    y0: float
    z0: float
    L1: float
    L2: float
    L3: float
    alpha: float
    beta: float
    theta: float

    def __post_init__(self):
        if not (self.L1 > 0 and self.L2 > 0 and self.L3 > 0):
            raise ValueError(f"component sizes must be positive: {self}")

    def as_array(self) -> np.ndarray:
        return np.array(astuple(self), dtype=float)


def as_design(components) -> np.ndarray:
    """Stack components (or pass through an array) into a design array."""
    if isinstance(components, np.ndarray):
        return np.atleast_2d(components).astype(float, copy=False)
    rows = [c.as_array() if hasattr(c, "as_array") else np.asarray(c, float) for c in components]
    if not rows:
        return np.zeros((0, 6))
    return np.vstack(rows)


def components_from_design(design: np.ndarray) -> list:
    cls = Component2D if design_dim(design) == 2 else Component3D
    return [cls(*map(float, row)) for row in np.atleast_2d(design)]


@dataclass(frozen=True)
class RegularizationParams:
    """Heaviside width ``epsilon``, void floor ``alpha_min``, K-S sharpness
    ``ks_l`` and hyperellipse exponent ``p_exp``."""

    epsilon: float
    alpha_min: float = 1e-3
    ks_l: float = 100.0
    p_exp: int = 6

    def __post_init__(self):
        if not self.epsilon > 0:
            raise ValueError("epsilon must be positive")
        if not 0 < self.alpha_min < 1:
            raise ValueError("alpha_min must lie in (0, 1)")
        if not self.ks_l > 0:
            raise ValueError("ks_l must be positive")
        if int(self.p_exp) != self.p_exp or self.p_exp < 2 or self.p_exp % 2:
            raise ValueError("p_exp must be an even integer >= 2")

    @classmethod
    def for_grid(cls, grid: BackgroundGrid, eps_factor: float = 2.0, **kw):
        """Defaults with ``epsilon = eps_factor * min(cell edge)``."""
        return cls(epsilon=eps_factor * min(grid.spacing), **kw)


# ----------------------------------------------------------------------------
# scalar evaluations
# ----------------------------------------------------------------------------


def eval_tdf_2d(comp: Component2D, point, p_exp: int = 6) -> float:
    x, y = point
    return float(kernels.np_tdf_2d(comp.as_array(), float(x), float(y), int(p_exp)))


def rotation_matrix(alpha: float, beta: float, theta: float) -> np.ndarray:
    """3D component rotation (global -> local), cosines taken non-negative.

    Angles must lie in (-pi/2, pi/2] so that sqrt(1 - sin^2) is the cosine.
    """
    for name, ang in (("alpha", alpha), ("beta", beta), ("theta", theta)):
        if not np.isfinite(ang) or not (-np.pi / 2 < ang <= np.pi / 2):
            raise ValueError(f"{name}={ang} outside (-pi/2, pi/2]; wrap the bounds")
    R, _ = kernels.np_rotations([alpha, beta, theta])
    return R[0]


def eval_tdf_3d(comp: Component3D, point, p_exp: int = 6) -> float:
    R = rotation_matrix(comp.alpha, comp.beta, comp.theta)
    row = comp.as_array()
    pts = np.asarray(point, dtype=float).reshape(1, 3)
    return float(kernels.np_tdf_3d(row[None], R[None], pts, int(p_exp))[0])


def tdf_partials(comp, point, p_exp: int = 6) -> np.ndarray:
    """Gradient of a component TDF w.r.t. its own parameters at ``point``."""
    row = comp.as_array() if hasattr(comp, "as_array") else np.asarray(comp, float)
    if row.size == 6:
        x, y = point
        return kernels.np_tdf_partials_2d(row, float(x), float(y), int(p_exp))
    rotation_matrix(*row[6:9])
    R, dR = kernels.np_rotations(row[6:9])
    pts = np.asarray(point, dtype=float).reshape(1, 3)
    return kernels.np_tdf_partials_3d(row[None], R, dR, pts, int(p_exp))[0]


def ks_aggregate(values, l: float = 100.0):
    """K-S soft maximum ``ln(sum(exp(l*v)))/l`` and its weights d/dv_i."""
    v = np.asarray(values, dtype=float).ravel()
    if v.size == 0:
        raise ValueError("ks_aggregate needs at least one value")
    m = v.max()
    e = np.exp(l * (v - m))
    s = e.sum()
    return float(m + math.log(s) / l), e / s


def heaviside_reg(x, epsilon: float, alpha_min: float = 1e-3):
    """Regularised Heaviside: alpha_min below -eps, 1 above +eps, cubic between."""
    x = np.asarray(x, dtype=float)
    r = np.clip(x / epsilon, -1.0, 1.0)
    h = 0.75 * (1.0 - alpha_min) * (r - r**3 / 3.0) + 0.5 * (1.0 + alpha_min)
    return h if h.ndim else float(h)


def heaviside_reg_deriv(x, epsilon: float, alpha_min: float = 1e-3):
    x = np.asarray(x, dtype=float)
    r = x / epsilon
    d = np.where(np.abs(r) <= 1.0, 0.75 * (1.0 - alpha_min) / epsilon * (1.0 - r * r), 0.0)
    return d if d.ndim else float(d)


# ----------------------------------------------------------------------------
# support boxes
# ----------------------------------------------------------------------------


@dataclass(frozen=True)
class SupportBox:
    """Inclusive node-index ranges; empty when any ``lo > hi``."""

    lo: tuple
    hi: tuple

    @property
    def empty(self) -> bool:
        return any(l > h for l, h in zip(self.lo, self.hi))

    @property
    def extent(self) -> tuple:
        return tuple(max(h - l + 1, 0) for l, h in zip(self.lo, self.hi))

    def contains(self, index) -> bool:
        return all(l <= i <= h for i, l, h in zip(index, self.lo, self.hi))


def _local_half_extents(design: np.ndarray, epsilon: float, p_exp: int) -> np.ndarray:
    """Half extents of the local rectangle that contains phi_i >= -eps."""
    s = (1.0 + epsilon) ** (1.0 / p_exp)
    if design.shape[1] == 6:
        a, t1, t2 = design[:, 2], design[:, 3], design[:, 4]
        slope = 0.5 * (t2 - t1) / a
        mid = 0.5 * (t1 + t2)
        # |b| is convex in x', so its maximum over |x'| <= a*s sits at an end
        half_w = np.maximum(np.abs(mid + slope * a * s), np.abs(mid - slope * a * s))
        return np.stack([a * s, half_w * s], axis=1)
    return design[:, 3:6] * s


def support_boxes(design, grid: BackgroundGrid, epsilon: float, p_exp: int = 6):
    """Vectorised support boxes: ``(lo, hi)`` int arrays of shape (n, dim).

    Rows with ``lo > hi`` on some axis are empty (component outside grid).
    """
    design = np.atleast_2d(np.asarray(design, dtype=float))
    dim = design_dim(design)
    if dim != grid.dim:
        raise ValueError("design and grid dimensions differ")
    n = len(design)
    half = _local_half_extents(design, epsilon, p_exp)
    if dim == 2:
        th = design[:, 5]
        c, s = np.abs(np.cos(th)), np.abs(np.sin(th))
        ext = np.stack([c * half[:, 0] + s * half[:, 1], s * half[:, 0] + c * half[:, 1]], axis=1)
    else:
        R, _ = kernels.np_rotations(design[:, 6:9])
        # local = R @ (x - x0), so global extents come from |R^T| @ half
        ext = np.einsum("nij,ni->nj", np.abs(R), half)
    centers = design[:, :dim]
    h = np.asarray(grid.spacing)
    lo = np.ceil((centers - ext) / h - 1e-12).astype(np.int64)
    hi = np.floor((centers + ext) / h + 1e-12).astype(np.int64)
    top = np.asarray(grid.shape)
    lo = np.maximum(lo, 0)
    hi = np.minimum(hi, top)
    return lo.reshape(n, dim), hi.reshape(n, dim)


def support_box(comp, grid: BackgroundGrid, epsilon: float, p_exp: int = 6) -> SupportBox:
    row = comp.as_array() if hasattr(comp, "as_array") else np.asarray(comp, float)
    lo, hi = support_boxes(row[None], grid, epsilon, p_exp)
    return SupportBox(tuple(int(v) for v in lo[0]), tuple(int(v) for v in hi[0]))


# ----------------------------------------------------------------------------
# structure TDF
# ----------------------------------------------------------------------------


@dataclass
class TdfField:
    """Structure TDF on the background nodes.

    ``phi`` holds the K-S aggregate at every node covered by a support box
    and ``-inf`` elsewhere (void). The pair arrays list, for each covered
    (node, component) combination, the component's TDF and its K-S weight.
    ``frozen`` marks nodes whose value was overridden by a fixed region;
    such nodes carry no sensitivity.
    """

    grid: BackgroundGrid
    params: RegularizationParams
    design: np.ndarray
    phi: np.ndarray
    pair_node: np.ndarray
    pair_comp: np.ndarray
    pair_phi: np.ndarray
    pair_weight: np.ndarray
    frozen: np.ndarray | None = None

    @property
    def n_components(self) -> int:
        return len(self.design)

    @property
    def covered(self) -> np.ndarray:
        return np.isfinite(self.phi)

    @property
    def stored_nodes(self) -> np.ndarray:
        return np.flatnonzero(self.covered)

    @property
    def interior(self) -> np.ndarray:
        """Deep-interior flag: aggregate above +epsilon."""
        return self.phi > self.params.epsilon

    @property
    def band(self) -> np.ndarray:
        eps = self.params.epsilon
        return (self.phi >= -eps) & (self.phi <= eps)

    def heaviside(self) -> np.ndarray:
        return heaviside_reg(self.phi, self.params.epsilon, self.params.alpha_min)

    def heaviside_deriv(self) -> np.ndarray:
        d = heaviside_reg_deriv(self.phi, self.params.epsilon, self.params.alpha_min)
        if self.frozen is not None:
            d = np.where(self.frozen, 0.0, d)
        return d

    def with_overrides(self, solid_nodes=None, void_nodes=None) -> "TdfField":
        """Copy with fixed-solid nodes raised to >= +eps and fixed-void
        nodes lowered to <= -eps."""
        phi = self.phi.copy()
        frozen = np.zeros(phi.size, bool) if self.frozen is None else self.frozen.copy()
        eps = self.params.epsilon
        if void_nodes is not None and np.any(void_nodes):
            phi[void_nodes] = np.minimum(phi[void_nodes], -eps)
            frozen |= void_nodes
        if solid_nodes is not None and np.any(solid_nodes):
            phi[solid_nodes] = np.maximum(phi[solid_nodes], eps)
            frozen |= solid_nodes
        return TdfField(self.grid, self.params, self.design, phi, self.pair_node,
                        self.pair_comp, self.pair_phi, self.pair_weight, frozen)


def build_structure_tdf(components, grid: BackgroundGrid, params: RegularizationParams) -> TdfField:
    """Evaluate every component on its support box and K-S aggregate."""
    design = as_design(components)
    if design.size == 0:
        design = np.zeros((0, n_params(grid.dim)))
    dim = grid.dim
    p = int(params.p_exp)
    lo, hi = support_boxes(design, grid, params.epsilon, p) if len(design) else (
        np.zeros((0, dim), np.int64), np.zeros((0, dim), np.int64))
    sizes = np.prod(np.maximum(hi - lo + 1, 0), axis=1)
    total = int(sizes.sum())
    K = kernels.KERNELS
    spacing = np.asarray(grid.spacing, dtype=float)
    node_shape = np.asarray(grid.node_shape, dtype=np.int64)
    evaluate = K["eval_boxes_2d"] if dim == 2 else K["eval_boxes_3d"]
    nodes, comps, vals = evaluate(np.ascontiguousarray(design), lo, hi, spacing, node_shape, p, total)
    phi, weights = K["ks_pairs"](nodes, vals, grid.n_nodes, float(params.ks_l))
    return TdfField(grid, params, design.copy(), phi, nodes, comps, vals, weights)


def dense_structure_tdf(components, grid: BackgroundGrid, params: RegularizationParams) -> np.ndarray:
    """Reference evaluation of every component at every node (K-S over all)."""
    design = as_design(components)
    X = grid.node_coordinates()
    p = int(params.p_exp)
    if grid.dim == 2:
        vals = np.stack([kernels.np_tdf_2d(row, X[:, 0], X[:, 1], p) for row in design])
    else:
        vals = []
        for row in design:
            R = rotation_matrix(*row[6:9])
            vals.append(1.0 - (((X - row[:3]) @ R.T / row[3:6]) ** p).sum(axis=1))
        vals = np.stack(vals)
    m = vals.max(axis=0)
    return m + np.log(np.exp(params.ks_l * (vals - m)).sum(axis=0)) / params.ks_l
