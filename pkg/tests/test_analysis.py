from fractions import Fraction

import numpy as np
import pytest

from shellmg import _kernels as kern
from shellmg.analysis import (FLOP_TABLE, analytic_rhs, cost_factor, discretization_error,
                              fd_laplacian, fit_metrics, flops_per_update,
                              manufactured_solution, observed_orders, relative_deviation,
                              rowsum_max, symmetry_measure, true_interior_stencils)
from shellmg.mesh import single_element_mesh
from shellmg.space import LevelSpace
from shellmg.surrogate import PolyBasis, fit_surrogates


def random_shell_points(n, seed=0, r1=0.5, r2=1.0):
    rng = np.random.default_rng(seed)
    d = rng.normal(size=(n, 3))
    d /= np.linalg.norm(d, axis=1)[:, None]
    r = rng.uniform(r1 + 0.01, r2 - 0.01, n)
    return d * r[:, None]


def test_rhs_matches_finite_differences():
    p = random_shell_points(100)
    a = analytic_rhs(p)
    b = -fd_laplacian(manufactured_solution, p)
    assert np.abs(a - b).max() <= 1e-6 * np.abs(a).max()


def test_rhs_other_radii():
    p = random_shell_points(20, seed=1, r1=0.3, r2=2.0)
    a = analytic_rhs(p, 0.3, 2.0)
    b = -fd_laplacian(lambda x: manufactured_solution(x, 0.3, 2.0), p)
    assert np.abs(a - b).max() <= 1e-6 * np.abs(a).max()


def test_fd_laplacian_of_quadratic():
    p = random_shell_points(5)
    assert np.allclose(fd_laplacian(lambda x: (x ** 2).sum(axis=1), p), 6.0, atol=1e-6)


def test_solution_vanishes_on_spheres():
    d = random_shell_points(50, seed=2)
    d /= np.linalg.norm(d, axis=1)[:, None]
    assert np.abs(manufactured_solution(0.5 * d)).max() < 1e-15
    assert np.abs(manufactured_solution(d)).max() < 1e-15


def test_error_of_interpolant_is_zero(shell60):
    space = LevelSpace(shell60, 1)
    v = space.node_values(manufactured_solution)
    assert discretization_error(v, space) == 0.0


def test_error_scaling(shell60):
    space = LevelSpace(shell60, 1)
    v = space.node_values(manufactured_solution) + 1.0
    h = shell60.max_edge_length() / 8
    assert discretization_error(v, space) == pytest.approx(h ** 1.5 * np.sqrt(space.n_nodes))


def test_error_of_zero_vector_pinned(shell60):
    # regression value for the scaled norm of the interpolant, level 1
    space = LevelSpace(shell60, 1)
    assert discretization_error(space.zeros(), space) == pytest.approx(0.05445133187916014,
                                                                       rel=1e-12)


def test_flop_table():
    assert FLOP_TABLE == {"constant": 29, "fem_direct": 1353, "fem_rowsum": 1343,
                          "surrogate_naive_q2": 378}
    assert flops_per_update("surrogate_incremental", q=2) == 59
    assert flops_per_update("surrogate_incremental", q=3) == 74
    assert flops_per_update("cons_dd", nu=3) == Fraction(1343 + 87, 4)
    with pytest.raises(ValueError):
        flops_per_update("nonsense")


def test_cost_factor():
    assert cost_factor(2) == pytest.approx(1 + 30 / 29, abs=1e-12)
    assert cost_factor(3) / cost_factor(2) == pytest.approx((29 + 45) / (29 + 30), abs=1e-12)
    assert cost_factor(0) == 1.0


def test_fem_is_symmetric(shell60):
    for level in (2, 3):
        T = true_interior_stencils(shell60, 4, level)
        assert symmetry_measure(T, T, level) <= 1e-12


def test_affine_surrogate_symmetric_and_exact():
    mesh = single_element_mesh([(0, 0, 0), (1, 0, 0.1), (0.1, 1, 0), (0.2, 0.1, 0.9)])
    sc = fit_surrogates(mesh, [3], "ipoly", 2)
    T = true_interior_stencils(mesh, 0, 3)
    S = kern.eval_interior(sc.coeffs[3][0], PolyBasis(2).exps, 32, True)
    assert symmetry_measure(S, T, 3) <= 1e-12
    fm = fit_metrics(T, sc.coeffs[3][0], 3)
    assert fm.linf.max() <= 1e-13 and fm.l2.max() <= 1e-13


def test_surrogate_asymmetry_shrinks(shell60):
    sc = fit_surrogates(shell60, [3, 4], "lsqp", 2, 2)
    vals = []
    for level in (3, 4):
        T = true_interior_stencils(shell60, 0, level)
        S = kern.eval_interior(sc.coeffs[level][0], PolyBasis(2).exps, 2 ** (level + 2), True)
        vals.append(symmetry_measure(S, T, level))
    assert 0 < vals[1] < vals[0]


def test_lsqp_full_sampling_beats_ipoly_l2(shell60):
    level = 4
    T = true_interior_stencils(shell60, 3, level)
    ip = fit_metrics(T, fit_surrogates(shell60, [level], "ipoly", 2).coeffs[level][3], level)
    ls = fit_metrics(T, fit_surrogates(shell60, [level], "lsqp", 2, level).coeffs[level][3], level)
    assert np.all(ls.l2 <= ip.l2 * (1 + 1e-12))


def test_rowsum_max(shell60):
    T = true_interior_stencils(shell60, 0, 2)
    assert rowsum_max(T) <= 1e-12
    S = T.copy()
    S[0, kern.MC] += 1.0
    assert rowsum_max(S, relative=False) == pytest.approx(1.0)


def test_orders_and_deviation():
    assert np.allclose(observed_orders([4.0, 1.0, 0.25]), [2.0, 2.0])
    assert np.allclose(relative_deviation([1.1, 0.9], [1.0, 1.0]), [0.1, 0.1])


def test_solution_pinned_value():
    # hand check: (r - 0.5)(r - 1) sin(3) sin(-1.6) sin(3.5) with r = sqrt(0.5)
    v = manufactured_solution(np.array([0.3, -0.4, 0.5]))
    assert float(v) == pytest.approx(-0.0030015516912621017, rel=1e-14)
