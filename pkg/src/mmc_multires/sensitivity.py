"""Analytic compliance and volume gradients w.r.t. component parameters.

The chain is  d/dD = sum_nodes dX/dphi_s(node) * w(node, comp) * dphi_comp/dD
with ``w`` the K-S weights stored in the field. Only boundary-band nodes
(|phi_s| <= eps) have a nonzero Heaviside derivative, so by default only
pairs on band nodes are visited. Compliance is self-adjoint: the forward
displacement is reused and no second solve happens.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import kernels
from .fea import FeaSolution, MaterialSpec, design_key, point_stiffness_matrices
from .geometry import TdfField
from .mesh import HyperMesh


class StaleSolutionError(ValueError):
    """The displacement solution was computed for a different design."""


@dataclass
class SensitivityResult:
    dC: np.ndarray
    dV: np.ndarray
    band_nodes: int
    inactive_components: int


def cell_energy_derivative(hmesh: HyperMesh, solution: FeaSolution, material: MaterialSpec) -> np.ndarray:
    """dC/dE for every background cell: ``-U_e^T (B^T D0 B A_g)_j U_e``."""
    P = point_stiffness_matrices(hmesh, material.nu)
    Ue = solution.u[hmesh.element_dofs]
    energy = np.einsum("ea,jab,eb->ej", Ue, P, Ue, optimize=True)
    out = np.empty(hmesh.grid.n_cells)
    out[hmesh.cells.ravel()] = -energy.ravel()
    return out


def nodal_sensitivities(tdf: TdfField, hmesh: HyperMesh | None, solution: FeaSolution | None,
                        material: MaterialSpec) -> np.ndarray:
    """``(2, n_nodes)`` derivatives of (C, V) w.r.t. the nodal structure TDF."""
    grid = tdf.grid
    n_corner = 2**grid.dim
    h = tdf.heaviside()
    dh = tdf.heaviside_deriv()
    out = np.zeros((2, grid.n_nodes))
    if solution is not None:
        dC_dE = cell_energy_derivative(hmesh, solution, material)
        q = material.q_penal
        out[0] = grid.scatter_to_nodes(dC_dE) * material.E * q * h ** (q - 1) * dh / n_corner
    out[1] = grid.scatter_to_nodes(np.ones(grid.n_cells)) * grid.cell_volume * dh / n_corner
    return out


def _chain(tdf: TdfField, node_sens: np.ndarray, mode: str) -> np.ndarray:
    nodes, comps, weights = tdf.pair_node, tdf.pair_comp, tdf.pair_weight
    if mode == "band":
        keep = np.any(node_sens[:, nodes] != 0.0, axis=0)
        nodes, comps, weights = nodes[keep], comps[keep], weights[keep]
    elif mode != "all":
        raise ValueError(f"unknown traversal mode {mode!r}")
    grid = tdf.grid
    K = kernels.KERNELS
    acc = K["accumulate_2d"] if grid.dim == 2 else K["accumulate_3d"]
    return acc(np.ascontiguousarray(tdf.design), nodes, comps, weights,
               np.ascontiguousarray(node_sens), np.asarray(grid.spacing, dtype=float),
               np.asarray(grid.node_shape, dtype=np.int64), int(tdf.params.p_exp))


def _inactive(tdf: TdfField) -> int:
    return int(tdf.n_components - np.unique(tdf.pair_comp).size)


def sensitivities(tdf: TdfField, hmesh: HyperMesh, solution: FeaSolution,
                  material: MaterialSpec, mode: str = "band") -> SensitivityResult:
    """Both gradients in one traversal of the pair list."""
    if solution.design_key is not None and solution.design_key != design_key(tdf.design):
        raise StaleSolutionError("solution does not belong to the field's design")
    ns = nodal_sensitivities(tdf, hmesh, solution, material)
    grad = _chain(tdf, ns, mode)
    band = int(np.count_nonzero(tdf.heaviside_deriv()))
    return SensitivityResult(grad[0].ravel(), grad[1].ravel(), band, _inactive(tdf))


def compliance_gradient(tdf: TdfField, solution: FeaSolution, hmesh: HyperMesh,
                        material: MaterialSpec, mode: str = "band") -> np.ndarray:
    return sensitivities(tdf, hmesh, solution, material, mode).dC


def volume_gradient(tdf: TdfField, mode: str = "band") -> np.ndarray:
    ns = nodal_sensitivities(tdf, None, None, MaterialSpec())
    ns[0] = 0.0
    return _chain(tdf, ns[1:], mode)[0].ravel()
