"""Ersatz moduli, hyper-element stiffness, assembly, loads, solve, volume."""

from __future__ import annotations

import numpy as np
import pytest
import scipy.sparse as sp

from mmc_multires import fea, geometry as geo
from mmc_multires.mesh import BackgroundGrid, HyperMesh

NU = 0.3


# ----------------------------------------------------------------------------
# independent oracles
# ----------------------------------------------------------------------------


def q4_closed_form(nu):
    """Unit-modulus square bilinear element, nodes counter-clockwise from
    the lower-left corner, dofs interleaved (the classic 88-line matrix)."""
    k = np.array([1 / 2 - nu / 6, 1 / 8 + nu / 8, -1 / 4 - nu / 12, -1 / 8 + 3 * nu / 8,
                  -1 / 4 + nu / 12, -1 / 8 - nu / 8, nu / 6, 1 / 8 - 3 * nu / 8])
    idx = [[0, 1, 2, 3, 4, 5, 6, 7], [1, 0, 7, 6, 5, 4, 3, 2], [2, 7, 0, 5, 6, 3, 4, 1],
           [3, 6, 5, 0, 7, 2, 1, 4], [4, 5, 6, 7, 0, 1, 2, 3], [5, 4, 3, 2, 1, 0, 7, 6],
           [6, 3, 4, 1, 2, 7, 0, 5], [7, 2, 1, 4, 3, 6, 5, 0]]
    return k[np.array(idx)] / (1 - nu**2)


def q4_gauss(nu, hx, hy, order=6, points=None):
    """Bilinear quad stiffness by tensor Gauss-Legendre (or given points)."""
    xi_a = np.array([-1, 1, 1, -1.0])
    eta_a = np.array([-1, -1, 1, 1.0])
    D = np.array([[1, nu, 0], [nu, 1, 0], [0, 0, (1 - nu) / 2]]) / (1 - nu**2)
    if points is None:
        g, w = np.polynomial.legendre.leggauss(order)
        points = [(x, y, wx * wy) for x, wx in zip(g, w) for y, wy in zip(g, w)]
    K = np.zeros((8, 8))
    for xi, eta, wt in points:
        dNx = xi_a * (1 + eta_a * eta) / 4 * 2 / hx
        dNy = eta_a * (1 + xi_a * xi) / 4 * 2 / hy
        B = np.zeros((3, 8))
        B[0, 0::2] = dNx
        B[1, 1::2] = dNy
        B[2, 0::2] = dNy
        B[2, 1::2] = dNx
        K += B.T @ D @ B * wt * hx * hy / 4
    return K


def cantilever_case(lengths=(2.0, 1.0)):
    return fea.LoadCase(point_loads=[fea.PointLoad((lengths[0], lengths[1] / 2), 1, -1.0)],
                        supports=[fea.Support("xmin", (0, 1))])


# ----------------------------------------------------------------------------
# smeared modulus
# ----------------------------------------------------------------------------


PARAMS = geo.RegularizationParams(epsilon=0.05, alpha_min=1e-3)
MAT = fea.MaterialSpec(E=1.0, nu=NU, q_penal=2.0)


def test_smeared_modulus_solid_and_void():
    assert fea.smeared_modulus([1, 1, 1, 1], MAT, PARAMS) == 1.0
    assert fea.smeared_modulus([-1] * 4, MAT, PARAMS) == pytest.approx(1e-6, rel=1e-12)


def test_smeared_modulus_half_band():
    expect = (2 * ((1 + 1e-3) / 2) ** 2 + 2 * 1e-6) / 4
    assert fea.smeared_modulus([0, 0, -1, -1], MAT, PARAMS) == pytest.approx(expect, rel=1e-13)


def test_material_validation():
    for kw in ({"E": 0}, {"nu": 0.5}, {"q_penal": 0.5}):
        with pytest.raises(ValueError):
            fea.MaterialSpec(**kw)


# ----------------------------------------------------------------------------
# hyper-element stiffness
# ----------------------------------------------------------------------------


def test_ratio_one_is_exact_bilinear_element():
    hm = HyperMesh(BackgroundGrid((1, 1), (0.7, 0.4)), 1)
    K = fea.point_stiffness_matrices(hm, NU).sum(axis=0)
    np.testing.assert_allclose(K, q4_gauss(NU, 0.7, 0.4), atol=1e-13)
    # no hourglass modes: only the three rigid-body modes are free
    assert np.linalg.matrix_rank(K, tol=1e-10) == 5


def test_ratio_one_matches_closed_form_on_unit_square():
    hm = HyperMesh(BackgroundGrid((1, 1), (1.0, 1.0)), 1)
    K = fea.point_stiffness_matrices(hm, NU)[0]
    np.testing.assert_allclose(K, q4_closed_form(NU), atol=1e-13)


def test_ratio_one_3d_has_six_zero_modes():
    hm = HyperMesh(BackgroundGrid((1, 1, 1), (1.0, 0.5, 2.0)), 1)
    K = fea.point_stiffness_matrices(hm, NU)[0]
    assert np.linalg.matrix_rank(K, tol=1e-10) == 18


@pytest.mark.parametrize("ratio", [2, 4, 8, 16])
def test_hyper_element_is_midpoint_rule(ratio):
    hm = HyperMesh(BackgroundGrid((ratio, ratio), (1.0, 1.0)), ratio)
    K = fea.point_stiffness_matrices(hm, NU).sum(axis=0)
    c = -1 + (2 * np.arange(ratio) + 1) / ratio
    pts = [(x, y, (2 / ratio) ** 2) for x in c for y in c]
    np.testing.assert_allclose(K, q4_gauss(NU, 1.0, 1.0, points=pts), atol=1e-13)


def test_quadrature_converges_to_exact_stiffness():
    exact = q4_gauss(NU, 1.0, 1.0)
    np.testing.assert_allclose(exact, q4_closed_form(NU), atol=1e-14)
    errs = []
    for ratio in (2, 4, 8, 16):
        hm = HyperMesh(BackgroundGrid((ratio, ratio), (1.0, 1.0)), ratio)
        K = fea.point_stiffness_matrices(hm, NU).sum(axis=0)
        errs.append(np.linalg.norm(K - exact) / np.linalg.norm(exact))
    assert errs[2] <= 0.01
    assert all(a > b for a, b in zip(errs, errs[1:]))


def test_element_matrices_symmetric_for_random_field(rng):
    grid = BackgroundGrid((16, 8), (2.0, 1.0))
    hm = HyperMesh(grid, 4)
    E = rng.uniform(1e-6, 1, grid.n_cells)
    Ke = fea.element_matrices(hm, E, MAT)
    assert np.abs(Ke - Ke.transpose(0, 2, 1)).max() <= 1e-12


def test_3d_hyper_element_symmetric_with_rigid_modes():
    hm = HyperMesh(BackgroundGrid((4, 4, 4), (1.0, 1.0, 1.0)), 4)
    K = fea.point_stiffness_matrices(hm, NU).sum(axis=0)
    assert np.abs(K - K.T).max() <= 1e-12
    ev = np.linalg.eigvalsh(K)
    assert np.sum(np.abs(ev) < 1e-10 * ev.max()) == 6


# ----------------------------------------------------------------------------
# assembly
# ----------------------------------------------------------------------------


def test_two_element_hand_assembly():
    grid = BackgroundGrid((2, 1), (2.0, 1.0))
    hm = HyperMesh(grid, 1)
    K = fea.assemble(hm, np.ones(2), MAT).toarray()
    ke = q4_closed_form(NU)
    # hyper nodes: 0 1 2 (bottom), 3 4 5 (top)
    conn = [[0, 1, 4, 3], [1, 2, 5, 4]]
    expect = np.zeros((12, 12))
    for nodes in conn:
        dofs = np.ravel([[2 * n, 2 * n + 1] for n in nodes])
        expect[np.ix_(dofs, dofs)] += ke
    np.testing.assert_allclose(K, expect, atol=1e-14)


def test_all_void_scales_all_solid():
    grid = BackgroundGrid((8, 4), (2.0, 1.0))
    hm = HyperMesh(grid, 2)
    params = geo.RegularizationParams.for_grid(grid)
    void = geo.build_structure_tdf([], grid, params)
    Kv = fea.assemble(hm, void, MAT)
    Ks = fea.assemble(hm, np.ones(grid.n_cells), MAT)
    np.testing.assert_allclose(Kv.toarray(), 1e-6 * Ks.toarray(), rtol=1e-12, atol=1e-20)


def test_assembly_order_independent(rng):
    grid = BackgroundGrid((24, 12), (2.0, 1.0))
    hm = HyperMesh(grid, 2)
    E = rng.uniform(1e-3, 1, grid.n_cells)
    K1 = fea.assemble(hm, E, MAT)
    K2 = fea.assemble(hm, E, MAT, chunk=7)
    assert abs(K1 - K2).max() <= 1e-12
    assert abs(K1 - K1.T).max() <= 1e-12


# ----------------------------------------------------------------------------
# loads
# ----------------------------------------------------------------------------


def test_point_load_single_entry():
    hm = HyperMesh(BackgroundGrid((12, 6), (12.0, 6.0)), 1)
    F = fea.distribute_load(fea.LoadCase(point_loads=[fea.PointLoad((12.0, 3.0), 1, -1.0)]), hm)
    assert np.count_nonzero(F) == 1
    assert F[2 * hm.node_at((12.0, 3.0)) + 1] == -1.0


def test_uniform_edge_load_balance():
    hm = HyperMesh(BackgroundGrid((12, 6), (12.0, 6.0)), 1)
    lc = fea.LoadCase(edge_loads=[fea.EdgeLoad.on_side("ymax", 1, -1 / 12, (12.0, 6.0))])
    F = fea.distribute_load(lc, hm)
    fy = F[1::2]
    assert fy.sum() == pytest.approx(-1.0, rel=1e-14)
    top = [hm.node_at((x, 6.0)) for x in range(13)]
    assert fy[top[0]] == pytest.approx(-1 / 24) and fy[top[6]] == pytest.approx(-1 / 12)


def test_edge_load_virtual_work_is_exact_for_linear_fields():
    hm = HyperMesh(BackgroundGrid((10, 4), (5.0, 2.0)), 1)
    lc = fea.LoadCase(edge_loads=[fea.EdgeLoad.on_side("ymax", 1, 0.7, (5.0, 2.0))])
    F = fea.distribute_load(lc, hm)
    X = hm.node_coordinates()
    u = np.zeros(hm.n_dofs)
    u[1::2] = 0.3 + 1.5 * X[:, 0] - 0.2 * X[:, 1]   # linear v(x, y)
    # integral over the top edge y = 2 of 0.7 * v(x, 2)
    analytic = 0.7 * (0.3 * 5 + 1.5 * 5**2 / 2 - 0.2 * 2 * 5)
    assert F @ u == pytest.approx(analytic, rel=1e-12)


def test_edge_load_off_boundary_rejected():
    hm = HyperMesh(BackgroundGrid((4, 4), (1.0, 1.0)), 1)
    with pytest.raises(ValueError):
        fea.distribute_load(fea.LoadCase(edge_loads=[fea.EdgeLoad(1, 0.5, 1, 1.0)]), hm)


def test_3d_face_load_balance():
    hm = HyperMesh(BackgroundGrid((4, 3, 2), (4.0, 3.0, 2.0)), 1)
    lc = fea.LoadCase(edge_loads=[fea.EdgeLoad.on_side("zmax", 2, 2.0, (4.0, 3.0, 2.0))])
    assert fea.distribute_load(lc, hm)[2::3].sum() == pytest.approx(24.0)


# ----------------------------------------------------------------------------
# solve
# ----------------------------------------------------------------------------


def test_single_element_dense_solve():
    """One hyper-element over 2x2 cells, left edge clamped, corner load."""
    grid = BackgroundGrid((2, 2), (1.0, 1.0))
    hm = HyperMesh(grid, 2)
    lc = fea.LoadCase(point_loads=[fea.PointLoad((1.0, 1.0), 1, -1.0)],
                      supports=[fea.Support("xmin", (0, 1))])
    K = fea.assemble(hm, np.ones(4), MAT)
    sol = fea.solve(K, fea.distribute_load(lc, hm), lc.fixed_dofs(hm))
    # hand solve: 2x2 midpoint rule, free corners (1,0) and (1,1)
    c = [-0.5, 0.5]
    ke = q4_gauss(NU, 1.0, 1.0, points=[(x, y, 1.0) for x in c for y in c])
    free = [2, 3, 4, 5]
    u_hand = np.linalg.solve(ke[np.ix_(free, free)], [0.0, 0.0, 0.0, -1.0])
    np.testing.assert_allclose(sol.u[[2, 3, 6, 7]], u_hand, rtol=1e-10)
    assert sol.compliance == pytest.approx(-u_hand[3], rel=1e-10)
    assert sol.residual <= 1e-8


def test_backward_error_hand_values():
    A = sp.csr_matrix(np.array([[2.0, -1.0], [-1.0, 2.0]]))
    b = np.array([1.0, 0.0])
    x = np.array([0.7, 0.3])            # exact: (2/3, 1/3)
    r = b - A.toarray() @ x             # (-0.1, 0.1)
    expect = 0.1 / (3.0 * 0.7 + 1.0)
    assert fea.backward_error(A, x, b) == pytest.approx(expect, rel=1e-12)
    assert np.abs(r).max() == pytest.approx(0.1)
    assert fea.backward_error(A, np.linalg.solve(A.toarray(), b), b) < 1e-16


def test_high_contrast_system_is_accepted_on_backward_error():
    # solid islands in a 1e-12 matrix: the best double-precision solution
    # cannot reach a 1e-8 relative residual, but it solves a nearby system
    grid = BackgroundGrid((40, 20), (2.0, 1.0))
    hm = HyperMesh(grid, 1)
    E = np.where(np.random.default_rng(0).uniform(size=grid.n_cells) < 0.5, 1.0, 1e-12)
    lc = fea.LoadCase(point_loads=[fea.PointLoad((2.0, 0.5), 1, -1.0)],
                      supports=[fea.Support("xmin", (0, 1))])
    K = fea.assemble(hm, E, MAT)
    F = fea.distribute_load(lc, hm)
    fixed = lc.fixed_dofs(hm)
    sol = fea.solve(K, F, fixed)
    free = np.setdiff1d(np.arange(hm.n_dofs), fixed)
    A = K[free][:, free].toarray()
    x, b = sol.u[free], F[free]
    eta = np.abs(b - A @ x).max() / (np.abs(A).sum(axis=1).max() * np.abs(x).max() + np.abs(b).max())
    assert sol.residual > 1e-8          # the floor is really above the tolerance
    assert eta <= 1e-8
    assert sol.compliance > 0 and np.isfinite(sol.compliance)


def test_zero_load_zero_response():
    hm = HyperMesh(BackgroundGrid((4, 2), (2.0, 1.0)), 1)
    K = fea.assemble(hm, np.ones(8), MAT)
    lc = fea.LoadCase(supports=[fea.Support("xmin")])
    sol = fea.solve(K, np.zeros(hm.n_dofs), lc.fixed_dofs(hm))
    assert sol.compliance == 0.0 and not sol.u.any()


def _cantilever_solution(E=1.0, ratio=2, design=None, method="auto"):
    grid = BackgroundGrid((32, 16), (2.0, 1.0))
    hm = HyperMesh(grid, ratio)
    params = geo.RegularizationParams.for_grid(grid)
    if design is None:
        design = np.array([[1.0, 0.5, 1.1, 0.2, 0.2, 0.0]])
    tdf = geo.build_structure_tdf(design, grid, params)
    return fea.analyze(hm, tdf, fea.MaterialSpec(E=E, nu=NU), cantilever_case(), method=method)


def test_doubling_modulus_halves_compliance():
    c1 = _cantilever_solution(1.0).compliance
    c2 = _cantilever_solution(2.0).compliance
    assert c2 == pytest.approx(c1 / 2, rel=1e-10)


def test_direct_and_iterative_agree():
    a = _cantilever_solution(method="direct")
    b = _cantilever_solution(method="pcg")
    assert b.compliance == pytest.approx(a.compliance, rel=1e-6)
    assert a.residual <= 1e-8 and b.residual <= 1e-8


def test_unsupported_structure_is_rejected():
    hm = HyperMesh(BackgroundGrid((4, 2), (2.0, 1.0)), 1)
    K = fea.assemble(hm, np.ones(8), MAT)
    F = fea.distribute_load(fea.LoadCase(point_loads=[fea.PointLoad((2.0, 1.0), 1, -1.0)]), hm)
    with pytest.raises(fea.SolverError):
        fea.solve(K, F, [], method="direct")


def test_stiffness_monotonicity_on_nested_designs():
    thin = np.array([[1.0, 0.5, 1.1, 0.1, 0.1, 0.0]])
    thick = np.array([[1.0, 0.5, 1.1, 0.1, 0.1, 0.0], [1.0, 0.5, 1.1, 0.2, 0.2, 0.0]])
    assert _cantilever_solution(design=thick).compliance <= _cantilever_solution(design=thin).compliance


# ----------------------------------------------------------------------------
# volume
# ----------------------------------------------------------------------------


def test_volume_all_solid_and_void():
    grid = BackgroundGrid((24, 12), (12.0, 6.0))
    params = geo.RegularizationParams.for_grid(grid)
    big = np.array([[6.0, 3.0, 20.0, 20.0, 20.0, 0.0]])
    assert fea.volume(geo.build_structure_tdf(big, grid, params)) == pytest.approx(72.0)
    void = geo.build_structure_tdf([], grid, params)
    assert fea.volume(void) == pytest.approx(1e-3 * 72)
    assert fea.volume(void, corrected=True) == pytest.approx(0.0, abs=1e-12)


def test_volume_of_one_component_matches_pixel_count():
    grid = BackgroundGrid((400, 200), (2.0, 1.0))
    params = geo.RegularizationParams.for_grid(grid)
    comp = geo.Component2D(1.0, 0.5, 0.6, 0.15, 0.15, 0.0)
    v = fea.volume(geo.build_structure_tdf([comp], grid, params), corrected=True)
    # pixel count of phi >= 0 on a much finer raster
    n = 2000
    xs = (np.arange(n) + 0.5) / n * 2.0
    ys = (np.arange(n // 2) + 0.5) / (n // 2)
    X, Y = np.meshgrid(xs, ys)
    inside = (1 - ((X - 1.0) / 0.6) ** 6 - ((Y - 0.5) / 0.15) ** 6) >= 0
    area = inside.mean() * 2.0
    assert v == pytest.approx(area, rel=0.01)


# ----------------------------------------------------------------------------
# fixed regions and reanalysis
# ----------------------------------------------------------------------------


def test_fixed_solid_region_overrides_field():
    grid = BackgroundGrid((12, 6), (12.0, 6.0))
    params = geo.RegularizationParams.for_grid(grid)
    lc = fea.LoadCase(fixed_solid=[{"shape": "box", "lo": [0, 5], "hi": [12, 6]}])
    tdf = fea.apply_fixed_regions(geo.build_structure_tdf([], grid, params), lc)
    # 12 frozen cells plus the row below, whose upper corners are now solid
    assert fea.volume(tdf, corrected=True) == pytest.approx(12.0 + 12 * 0.5)
    solid, _ = lc.region_nodes(grid)
    assert np.all(tdf.heaviside()[solid] == 1.0)
    assert np.all(tdf.heaviside_deriv()[solid] == 0.0)


def test_reanalysis_at_ratio_one_is_exact():
    grid = BackgroundGrid((32, 16), (2.0, 1.0))
    params = geo.RegularizationParams.for_grid(grid)
    design = np.array([[1.0, 0.5, 1.1, 0.2, 0.2, 0.0]])
    sol = fea.analyze(HyperMesh(grid, 1), geo.build_structure_tdf(design, grid, params), MAT,
                      cantilever_case())
    c_post, err = fea.reanalyze_on_background(design, grid, MAT, cantilever_case(), params,
                                              sol.compliance)
    assert c_post == sol.compliance and err == 0.0


def test_reanalysis_matches_scripted_second_path():
    grid = BackgroundGrid((32, 16), (2.0, 1.0))
    params = geo.RegularizationParams.for_grid(grid)
    design = np.array([[1.0, 0.5, 1.1, 0.12, 0.2, 0.1], [0.6, 0.6, 0.5, 0.1, 0.1, -0.7]])
    c_obj = _cantilever_solution(design=design, ratio=4).compliance
    c_post, err = fea.reanalyze_on_background(design, grid, MAT, cantilever_case(), params, c_obj)
    # second path: dense field, per-cell moduli, element-by-element assembly
    phi = geo.dense_structure_tdf(design, grid, params)
    H = geo.heaviside_reg(phi, params.epsilon, params.alpha_min)
    Ecell = grid.cell_average(H**2)
    ke = q4_gauss(NU, *grid.spacing)
    hm = HyperMesh(grid, 1)
    n = hm.n_dofs
    K = sp.lil_matrix((n, n))
    for e in range(hm.n_elements):
        d = hm.element_dofs[e]
        K[np.ix_(d, d)] += Ecell[e] * ke
    lc = cantilever_case()
    F = fea.distribute_load(lc, hm)
    free = np.setdiff1d(np.arange(n), lc.fixed_dofs(hm))
    u = np.zeros(n)
    u[free] = sp.linalg.spsolve(K.tocsc()[free][:, free], F[free])
    assert c_post == pytest.approx(F @ u, rel=1e-8)
    assert err == pytest.approx(abs(F @ u - c_obj) / (F @ u), rel=1e-6)
    assert c_post >= 0
