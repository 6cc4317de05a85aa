import numpy as np
import pytest

from anisovem.cases import get_case, patch_case
from anisovem.errors import MissingGTensor
from anisovem.estimator import (
    Kind,
    anisotropic_weight,
    edge_jump_norms,
    estimate,
    jump_norm,
    residual_norm,
    stabilization_term,
    stabilization_terms,
)
from anisovem.geometry import Polygon
from anisovem.mesh import Mesh, initial_mesh
from anisovem.recovery import recover
from anisovem.vem import build_dofmap, interpolate, solve_problem

from conftest import refined_mesh, solution_from_dofs


def random_solution(mesh, k, seed=0):
    rng = np.random.default_rng(seed)
    n = build_dofmap(mesh, k).ndof
    return solution_from_dofs(mesh, k, rng.normal(size=n), f_avg=rng.normal(size=mesh.n_cells))


def all_kinds(sol):
    rec = recover(sol.mesh, sol.projection)
    return {kind: estimate(sol, kind, rec) for kind in Kind}


# -- residual -------------------------------------------------------------------


@pytest.mark.parametrize("value,expected", [(3.0, 1.5), (0.0, 0.0)])
def test_residual_constant_forcing(value, expected):
    mesh = initial_mesh(2)
    sol = solution_from_dofs(mesh, 1, np.zeros(mesh.n_vertices), f_avg=np.full(4, value))
    assert residual_norm(sol, 0) == pytest.approx(expected, abs=1e-15)
    ind = estimate(sol, "iso")
    np.testing.assert_allclose(ind.R_norm, expected, atol=1e-15)


def test_residual_k2_divergence_of_x_squared():
    mesh = initial_mesh(2)
    u = interpolate(mesh, build_dofmap(mesh, 2), lambda x, y: x * x)
    sol = solution_from_dofs(mesh, 2, u)
    # div grad x^2 = 2 on cells of area 1/4
    for c in range(mesh.n_cells):
        assert residual_norm(sol, c) == pytest.approx(2 * 0.5, rel=1e-12)
    np.testing.assert_allclose(estimate(sol, "iso").R_norm, 1.0, rtol=1e-12)


# -- jump -----------------------------------------------------------------------


def two_half_squares():
    xy = np.array([[0, 0], [0.5, 0], [0.5, 0.5], [0, 0.5], [1, 0], [1, 0.5]], dtype=float)
    return Mesh(xy, [[0, 1, 2, 3], [1, 4, 5, 2]])


def test_jump_across_vertical_edge():
    mesh = two_half_squares()
    # u = x - 0.5 on the left cell, 0 on the right one
    u = np.array([-0.5, 0.0, 0.0, -0.5, 0.0, 0.0])
    sol = solution_from_dofs(mesh, 1, u)
    et = mesh.edges
    interior = np.flatnonzero(~et.boundary)
    assert len(interior) == 1
    e = int(interior[0])
    assert jump_norm(sol, e) == pytest.approx(np.sqrt(0.5), rel=1e-13)
    np.testing.assert_allclose(edge_jump_norms(sol, interior), np.sqrt(0.5), rtol=1e-13)
    for b in np.flatnonzero(et.boundary):
        assert jump_norm(sol, int(b)) == 0.0


@pytest.mark.parametrize("k", [1, 2])
def test_jump_vanishes_for_linear_field(k):
    mesh = refined_mesh(30, seed=3)
    u = interpolate(mesh, build_dofmap(mesh, k), lambda x, y: 1 - x + 2 * y)
    sol = solution_from_dofs(mesh, k, u)
    interior = np.flatnonzero(~mesh.edges.boundary)
    assert np.abs(edge_jump_norms(sol, interior)).max() < 1e-12


@pytest.mark.parametrize("k", [1, 2])
def test_vectorized_jumps_match_single_edge(k):
    mesh = refined_mesh(20, seed=4)
    sol = random_solution(mesh, k, seed=k)
    interior = np.flatnonzero(~mesh.edges.boundary)
    ref = [jump_norm(sol, int(e)) for e in interior]
    np.testing.assert_allclose(edge_jump_norms(sol, interior), ref, rtol=1e-12, atol=1e-14)


# -- stabilization ----------------------------------------------------------------


@pytest.mark.parametrize("k", [1, 2])
def test_stabilization_vanishes_for_polynomials(k):
    mesh = refined_mesh(30, seed=6)
    u = interpolate(mesh, build_dofmap(mesh, k), lambda x, y: 0.5 + x - y + (k - 1) * x * y)
    sol = solution_from_dofs(mesh, k, u)
    assert stabilization_terms(sol).max() < 1e-24


def test_scaling_factor_square_and_rectangle():
    sq = solution_from_dofs(initial_mesh(1), 1, np.array([0.0, 1.0, 0.5, 2.0]))
    assert stabilization_term(sq, 0)[2] == pytest.approx(1.0, rel=1e-14)
    rect = Mesh(np.array([[0, 0], [2, 0], [2, 1], [0, 1]], dtype=float), [[0, 1, 2, 3]])
    sol = solution_from_dofs(rect, 1, np.array([0.0, 1.0, 0.5, 2.0]))
    st, s, M = stabilization_term(sol, 0)
    assert M == pytest.approx(2**2.5, rel=1e-12)
    assert s == pytest.approx(M * M * st, rel=1e-14)
    assert st > 0


@pytest.mark.parametrize("k", [1, 2])
def test_vectorized_stabilization_matches_single_cell(k):
    mesh = refined_mesh(20, seed=8)
    sol = random_solution(mesh, k, seed=3)
    ref = [stabilization_term(sol, c)[0] for c in range(mesh.n_cells)]
    np.testing.assert_allclose(stabilization_terms(sol), ref, rtol=1e-11, atol=1e-20)


# -- anisotropic weight -------------------------------------------------------------


def test_weight_isotropic_tensor_on_unit_square():
    info = Polygon([(0, 0), (1, 0), (1, 1), (0, 1)]).anisotropy
    # lambda = 1/12 twice, alpha = (1/12)^(1/2): w = sqrt(2 c)
    assert anisotropic_weight(info, 3.0 * np.eye(2)) == pytest.approx(np.sqrt(6.0), rel=1e-13)


# -- global estimators ------------------------------------------------------------


def test_missing_g_tensor():
    sol = random_solution(initial_mesh(2), 1)
    for kind in ("theory", "heur"):
        with pytest.raises(MissingGTensor):
            estimate(sol, kind)
    estimate(sol, "iso")


@pytest.mark.parametrize("k", [1, 2])
def test_exact_polynomial_solution_gives_zero(k):
    case = patch_case(k)
    mesh = refined_mesh(30, seed=9)
    u = interpolate(mesh, build_dofmap(mesh, k), case.u)
    sol = solution_from_dofs(mesh, k, u, f_avg=np.full(mesh.n_cells, case.f(0.0, 0.0)))
    for kind, ind in all_kinds(sol).items():
        assert ind.value < 1e-10, kind
        assert np.abs(ind.score).max() < 1e-20


@pytest.mark.parametrize("k", [1, 2])
def test_solved_polynomial_solution_estimators_small(k):
    case = patch_case(k)
    mesh = refined_mesh(30, seed=9)
    sol = solve_problem(mesh, k, case.f, g=case.boundary)
    for kind, ind in all_kinds(sol).items():
        # the solver residual is amplified by M_K on stretched cells
        assert ind.value < 1e-10 * ind.M.max(), kind


def test_single_cell_mesh():
    mesh = initial_mesh(1)
    sol = solution_from_dofs(mesh, 1, np.array([0.0, 1.0, 0.5, 2.0]), f_avg=[2.0])
    ind = all_kinds(sol)[Kind.THEORY]
    assert len(ind.edges) == 0 and ind.xi2.sum() == 0.0
    assert ind.eta_theory**2 == pytest.approx(ind.eta2[0] + ind.sigma2[0], rel=1e-14)


@pytest.mark.parametrize("k", [1, 2])
def test_theory_minus_heuristic_identity(k):
    mesh = refined_mesh(40, seed=10)
    sol = random_solution(mesh, k, seed=11)
    ind = all_kinds(sol)[Kind.HEURISTIC]
    diff = ind.eta_theory**2 - ind.eta_heur**2
    expected = ((ind.M**2 - 1) * ind.sigma_tilde2).sum()
    assert diff == pytest.approx(expected, rel=1e-10)


def test_congruent_squares_theory_equals_heuristic():
    sol = random_solution(initial_mesh(4), 2, seed=12)
    ind = all_kinds(sol)[Kind.THEORY]
    np.testing.assert_array_equal(ind.M, 1.0)
    assert ind.eta_theory == ind.eta_heur


@pytest.mark.parametrize("k", [1, 2])
def test_globals_recomputed_from_components(k):
    mesh = refined_mesh(25, seed=13)
    sol = random_solution(mesh, k, seed=14)
    for kind, ind in all_kinds(sol).items():
        for arr in (ind.R_norm, ind.sigma_tilde2, ind.sigma2, ind.eta2, ind.J_norm, ind.xi2, ind.score):
            assert np.all(arr >= 0)
        assert ind.eta_heur**2 == pytest.approx(ind.eta2.sum() + ind.xi2.sum() + ind.sigma_tilde2.sum(), rel=1e-13)
        assert ind.eta_iso**2 == pytest.approx(
            (ind.iso_cell.sum() + ind.iso_edge.sum() + ind.sigma_tilde2.sum()), rel=1e-13
        )
        # edge halving keeps the marking scores summing to the squared global
        assert ind.score.sum() == pytest.approx(ind.value**2, rel=1e-12)


def test_isotropic_terms_by_hand():
    mesh = two_half_squares()
    u = np.array([-0.5, 0.0, 0.0, -0.5, 0.0, 0.0])
    sol = solution_from_dofs(mesh, 1, u, f_avg=[1.0, 0.0])
    ind = estimate(sol, "iso")
    h = np.sqrt(0.5)  # diameter of a half-square
    np.testing.assert_allclose(ind.iso_cell, [h**2 * 0.25, 0.0], rtol=1e-13)
    np.testing.assert_allclose(ind.iso_edge, [0.5 * 0.5], rtol=1e-13)


@pytest.mark.parametrize("k", [1, 2])
def test_weights_vanish_for_linear_solution(k):
    mesh = refined_mesh(30, seed=15)
    u = interpolate(mesh, build_dofmap(mesh, k), lambda x, y: 2 * x + y)
    sol = solution_from_dofs(mesh, k, u)
    ind = all_kinds(sol)[Kind.HEURISTIC]
    assert ind.weight.max() < 1e-5
    assert np.abs(recover(mesh, sol.projection).G).max() < 1e-12


def test_indicators_on_solved_case():
    case = get_case("1", 1)
    sol = solve_problem(refined_mesh(30, seed=16, n=4), 1, case.f)
    ind = all_kinds(sol)
    for v in ind.values():
        assert np.isfinite(v.value) and v.value > 0
    assert ind[Kind.THEORY].eta_theory >= ind[Kind.HEURISTIC].eta_heur
