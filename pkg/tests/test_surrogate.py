import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from oracles import poly_value

from shellmg import _kernels as kern
from shellmg.fem import ElementCache, sample_stencils
from shellmg.mesh import index_set, lattice_tables, single_element_mesh
from shellmg.space import LevelSpace
from shellmg.surrogate import (FitError, PolyBasis, SurrogateOperator, difference_table,
                               eval_direct, fit_ipoly, fit_lsqp, fit_surrogates,
                               ipoly_sampling_indices, line_advance, line_init, line_step,
                               lsqp_sampling_indices, mq, read_coefficients, sampling_level,
                               write_coefficients)


@pytest.mark.parametrize("q, m", [(0, 1), (1, 4), (2, 10), (3, 20), (4, 35)])
def test_mq(q, m):
    assert mq(q) == m
    assert len(PolyBasis(q)) == m
    assert tuple(PolyBasis(q).exps[0]) == (0, 0, 0)


def test_ipoly_points_level3():
    pts = [tuple(p[:3]) for p in ipoly_sampling_indices(3, 2)]
    a, b = 29, 15
    assert pts == [(1, 1, 1), (1, 1, a), (1, a, 1), (a, 1, 1), (1, 1, b), (1, b, 1), (b, 1, 1),
                   (1, b, b), (b, 1, b), (b, b, 1)]


@pytest.mark.parametrize("level", [1, 2, 3, 4, 5])
@pytest.mark.parametrize("q", [1, 2, 3])
def test_ipoly_points_interior_and_unisolvent(level, q):
    pts = ipoly_sampling_indices(level, q)
    assert len(pts) == mq(q) and len(set(pts)) == mq(q)
    assert all(p.is_interior() for p in pts)
    A = PolyBasis(q).matrix([p[:3] for p in pts], 2 ** (level + 2))
    assert np.linalg.matrix_rank(A) == mq(q)


def test_ipoly_level1_values():
    pts = [tuple(p[:3]) for p in ipoly_sampling_indices(1, 2)]
    assert (5, 1, 1) in pts and (3, 3, 1) in pts
    assert all(sum(p) < 8 for p in pts)


def test_ipoly_contract():
    with pytest.raises(ValueError):
        ipoly_sampling_indices(0, 2)
    with pytest.raises(ValueError):
        ipoly_sampling_indices(2, 4)


@pytest.mark.parametrize("level, j, m", [(5, 2, 2), (1, 3, 1), (4, 0, 1), (3, 7, 3)])
def test_sampling_level(level, j, m):
    assert sampling_level(level, j) == m


def test_lsqp_sampling_embedding():
    pts = lsqp_sampling_indices(4, 2)
    assert len(pts) == 455
    assert (pts % 4 == 0).all()
    assert all(min(p) > 0 and sum(p) < 64 for p in pts)


def _planted(q, seed):
    rng = np.random.default_rng(seed)
    coeffs = rng.normal(size=(15, mq(q)))
    coeffs[7] = -coeffs[np.arange(15) != 7].sum(axis=0)
    exps = PolyBasis(q).exps

    def sampler(nodes, level):
        return PolyBasis(q).matrix(nodes, 2 ** (level + 2)) @ coeffs.T

    return coeffs, exps, sampler


@pytest.mark.parametrize("q", [1, 2, 3])
def test_degree_q_exactness(q):
    coeffs, exps, sampler = _planted(q, q)
    level = 3
    nodes = np.array([nd[:3] for nd in index_set(level)])
    truth = sampler(nodes, level)
    for c in (fit_ipoly(lambda x: sampler(x, level), level, q),
              fit_lsqp(lambda x: sampler(x, level), level, q, j=2),
              fit_lsqp(lambda x: sampler(x, level), level, q, j=level)):
        S = kern.eval_interior(c, exps, 2 ** (level + 2), True)
        assert np.abs(S - truth).max() <= 1e-10 * np.abs(truth).max()


def test_constant_function_gives_constant_polynomial():
    const = np.arange(15, dtype=float) - 7.0
    sampler = lambda nodes: np.tile(const, (len(nodes), 1))  # noqa: E731
    for c in (fit_ipoly(sampler, 2, 2), fit_lsqp(sampler, 2, 2, 2)):
        assert np.allclose(c[:, 0], const)
        assert np.abs(c[:, 1:]).max() < 1e-10


def test_lsqp_rank_deficiency_reported():
    # level-1 interior has 35 nodes, too few distinct planes for degree 5
    with pytest.raises(FitError):
        fit_lsqp(lambda x: np.zeros((len(x), 15)), 1, 5, 1)


def test_affine_geometry_reduces_to_constant_stencil():
    mesh = single_element_mesh([(0, 0, 0), (1, 0.1, 0), (0.2, 1, 0), (0.1, 0.3, 1.2)])
    level = 3
    sc = fit_surrogates(mesh, [level], "lsqp", 2, 2)
    nodes = np.array([nd[:3] for nd in index_set(level)])
    S = kern.eval_interior(sc.coeffs[level][0], PolyBasis(2).exps, 32, True)
    truth = sample_stencils(mesh, 0, level, nodes)
    assert np.abs(S - truth).max() <= 1e-12 * np.abs(truth).max()


def test_interpolation_property_on_shell(shell60):
    level = 3
    pts = np.array([p[:3] for p in ipoly_sampling_indices(level, 2)])
    sampler = lambda x: sample_stencils(shell60, 5, level, x)  # noqa: E731
    c = fit_ipoly(sampler, level, 2)
    b = sampler(pts)
    for w in range(15):
        for p, val in zip(pts, b[:, w]):
            assert eval_direct(c, w, tuple(p), level) == pytest.approx(val, rel=1e-10, abs=1e-13)


def test_lsqp_beats_ipoly_in_least_squares(shell60):
    level = 3
    sampler = lambda x: sample_stencils(shell60, 2, level, x)  # noqa: E731
    nodes = lattice_tables(level).ijk[lattice_tables(level).interior]
    A = PolyBasis(2).matrix(nodes, 32)
    b = sampler(nodes)
    ip = fit_ipoly(sampler, level, 2)
    ls = fit_lsqp(sampler, level, 2, j=level)
    for w in range(15):
        assert np.linalg.norm(A @ ls[w] - b[:, w]) <= np.linalg.norm(A @ ip[w] - b[:, w]) + 1e-15


@pytest.mark.parametrize("method", ["ipoly", "lsqp"])
def test_coefficient_row_sum(shell60, method):
    sc = fit_surrogates(shell60, [1, 2, 3], method, 2, 2)
    for level, arr in sc.coeffs.items():
        scale = np.abs(arr[:, 7, 0]).max()
        assert np.abs(arr.sum(axis=1)).max() <= 1e-12 * scale
    assert sc.n_stored(0) == 15 * 10 * 3


def test_eval_direct_matches_reference(shell60):
    sc = fit_surrogates(shell60, [3], "lsqp", 3, 2)
    c = sc.coeffs[3][17]
    exps = PolyBasis(3).exps
    for idx in [(1, 1, 1), (7, 3, 11), (2, 20, 5)]:
        for w in range(15):
            ref = poly_value(c[w], exps, *idx, 32)
            assert eval_direct(c, w, idx, 3) == pytest.approx(ref, rel=1e-14, abs=1e-16)


def test_line_step_planted_quadratic():
    n = 2 ** (2 + 2)
    c = np.zeros((15, 10))
    c[0, 0], c[0, 1], c[0, 4] = 3.0, 2.0 * n, n * n     # 3 + 2i + i^2 in lattice units
    exps = PolyBasis(2).exps
    assert tuple(exps[1]) == (1, 0, 0) and tuple(exps[4]) == (2, 0, 0)
    st_ = line_init(c, 0, 0, 2)
    assert st_.second_difference[0] == pytest.approx(2.0)
    assert st_.first_difference[0] == pytest.approx(3.0)
    seq = [line_step(st_)[0] for _ in range(4)]
    assert np.allclose(seq, [3, 6, 11, 18])


def test_line_advance_pure_j():
    n = 16
    c = np.zeros((15, 10))
    c[0, 7] = n * n                                      # j^2
    assert tuple(PolyBasis(2).exps[7]) == (0, 2, 0)
    st_ = line_init(c, 0, 0, 2)
    vals = []
    for _ in range(4):
        vals.append(st_.value[0])
        assert st_.first_difference[0] == 0 and st_.second_difference[0] == 0
        st_ = line_advance(c, st_, "j")
    assert np.allclose(vals, [0, 1, 4, 9])


def test_constant_line_state_unchanged():
    c = np.zeros((15, 4))
    c[:, 0] = np.arange(15)
    st_ = line_init(c, 2, 3, 2)
    assert not st_.first_difference.any()
    out = [line_step(st_) for _ in range(5)]
    assert all(np.array_equal(o, out[0]) for o in out)
    nxt = line_advance(c, st_, "k")
    assert np.array_equal(nxt.table, st_.table)


@given(st.integers(0, 3), st.integers(0, 10), st.integers(0, 10), st.integers(0, 10))
@settings(max_examples=50, deadline=None)
def test_difference_table_definition(q, i0, j0, k0):
    # D_i^r D_j^s D_k^t p at a point equals the alternating binomial sum of values
    from math import comb
    rng = np.random.default_rng(q * 1000 + i0)
    c = rng.normal(size=(15, mq(q)))
    exps = PolyBasis(q).exps
    T = difference_table(c, exps, 8, i0, j0, k0)
    for r in range(q + 1):
        for s in range(q + 1 - r):
            t = q - r - s
            ref = sum((-1) ** (r - a + s - b + t - cc) * comb(r, a) * comb(s, b) * comb(t, cc)
                      * poly_value(c[3], exps, i0 + a, j0 + b, k0 + cc, 8)
                      for a in range(r + 1) for b in range(s + 1) for cc in range(t + 1))
            assert T[3, r, s, t] == pytest.approx(ref, rel=1e-9, abs=1e-9)


def test_surrogate_operator_rowsum_center(shell60):
    space = LevelSpace(shell60, 2)
    sc = fit_surrogates(shell60, [2], "ipoly", 2)
    cache = ElementCache(space, keep=False)
    poly = SurrogateOperator(space, sc.coeffs[2], 2, cache, "poly").interior_stencils(3)
    rows = SurrogateOperator(space, sc.coeffs[2], 2, cache, "rowsum").interior_stencils(3)
    assert np.allclose(poly, rows, rtol=0, atol=1e-12 * np.abs(poly).max())


def test_coefficient_dump_roundtrip(tmp_path, shell60):
    sc = fit_surrogates(shell60, [1, 2], "lsqp", 2, 2)
    path = tmp_path / "coeffs.txt"
    write_coefficients(sc, path)
    back = read_coefficients(path)
    assert (back.method, back.q, back.j) == ("lsqp", 2, 2)
    for level in (1, 2):
        assert np.array_equal(back.coeffs[level], sc.coeffs[level])
