import numpy as np
import pytest
from oracles import batch_stiffness, global_matrix

from shellmg import _kernels as kern
from shellmg.fem import (AssemblyError, ConstantOperator, ElementCache, FEMOperator,
                         assemble_global_matrix, assemble_node_stencil, assemble_rhs,
                         local_stiffness, residual, sample_stencils)
from shellmg.mesh import (OPPOSITE, Direction, NodeIndex, build_block, index_set,
                          lattice_tables, single_element_mesh)
from shellmg.space import LevelSpace

REF = [np.zeros(3), np.eye(3)[0], np.eye(3)[1], np.eye(3)[2]]


def test_reference_stiffness():
    # gradients of the reference barycentrics are (-1,-1,-1), e1, e2, e3 and |T| = 1/6
    K = local_stiffness(*REF)
    expected = np.array([[3, -1, -1, -1], [-1, 1, 0, 0], [-1, 0, 1, 0], [-1, 0, 0, 1]]) / 6
    assert np.allclose(K, expected, atol=1e-15)


def test_stiffness_properties():
    rng = np.random.default_rng(3)
    for _ in range(20):
        P = rng.normal(size=(4, 3))
        K = local_stiffness(*P)
        assert np.allclose(K, K.T)
        assert np.abs(K.sum(axis=1)).max() <= 1e-13 * np.abs(K).max()
        ev = np.linalg.eigvalsh(K)
        assert ev[0] > -1e-12 * ev[-1] and ev[1] > 1e-10 * ev[-1]
        # rigid motion plus vertex permutation
        Q, _ = np.linalg.qr(rng.normal(size=(3, 3)))
        perm = rng.permutation(4)
        K2 = local_stiffness(*(P[perm] @ Q.T + 1.5))
        assert np.allclose(K2, K[np.ix_(perm, perm)])
        Kk, vol = kern.local_stiffness_kernel(np.ascontiguousarray(P))
        assert np.allclose(Kk, K, rtol=1e-12, atol=1e-14)


def test_degenerate_tet_raises():
    with pytest.raises(AssemblyError):
        local_stiffness(REF[0], REF[1], REF[2], REF[1] + REF[2])


def test_batch_oracle_agrees():
    rng = np.random.default_rng(4)
    P = rng.normal(size=(5, 4, 3))
    for K, p in zip(batch_stiffness(P), P):
        assert np.allclose(K, local_stiffness(*p))


def test_affine_stencils_constant_and_scaled(shell60):
    for level in (1, 2, 3):
        nodes = np.array([nd[:3] for nd in index_set(level)])[::5]
        S = sample_stencils(shell60, 4, level, nodes, "affine")
        assert np.abs(S - S[0]).max() <= 1e-12 * np.abs(S[0]).max()
    s0 = sample_stencils(shell60, 4, 0, [(1, 1, 1)], "affine")[0]
    for level in (1, 2, 3):
        s = sample_stencils(shell60, 4, level, [(1, 1, 1)], "affine")[0]
        assert np.allclose(s, s0 / 2 ** level, rtol=1e-12, atol=1e-15)


def test_projected_stencil_row_sum_and_center(shell60):
    blk = build_block(shell60, 11, 2)
    for idx in [NodeIndex(1, 1, 1, 2), NodeIndex(5, 3, 2, 2), NodeIndex(1, 1, 13, 2)]:
        s = assemble_node_stencil(blk, idx)
        assert abs(s.sum()) <= 1e-12 * s[Direction.mc]
        assert s[Direction.mc] > 0
        r = assemble_node_stencil(blk, idx, center="rowsum")
        assert np.allclose(r, s, rtol=0, atol=1e-13 * s[Direction.mc])


def test_non_interior_stencil_rejected(shell60):
    with pytest.raises(AssemblyError):
        assemble_node_stencil(build_block(shell60, 0, 1), NodeIndex(0, 1, 1, 1))


def test_projected_stencil_symmetry(shell60):
    level = 2
    tab = lattice_tables(level)
    nodes = tab.ijk[tab.interior]
    S = sample_stencils(shell60, 9, level, nodes)
    pos = {tuple(x): q for q, x in enumerate(nodes)}
    worst = 0.0
    for q, x in enumerate(nodes):
        for w in range(15):
            nb = tuple(x + np.array([kern.DI[w], kern.DJ[w], kern.DK[w]]))
            if nb in pos:
                worst = max(worst, abs(S[q, w] - S[pos[nb], OPPOSITE[w]]))
    assert worst <= 1e-12 * np.abs(S).max()


@pytest.mark.parametrize("level", [1, 2])
def test_operator_matches_oracle_matrix(two_tets, level):
    space = LevelSpace(two_tets, level)
    op = FEMOperator(space)
    A = global_matrix(two_tets, level, space)
    x = np.random.default_rng(level).uniform(-1, 1, space.n_nodes)
    ref = A @ x
    assert np.linalg.norm(op.apply(x) - ref) <= 1e-12 * np.linalg.norm(ref)
    assert abs(assemble_global_matrix(op) - A).max() <= 1e-13


def test_operator_kills_constants_and_linears(shell60):
    space = LevelSpace(shell60, 2)
    free = ~space.dirichlet
    op = FEMOperator(space)
    assert np.abs(op.apply(np.ones(space.n_nodes))[free]).max() < 1e-13
    cons = ConstantOperator(space)
    xyz = space.node_coordinates("affine")
    lin = 0.3 + xyz @ np.array([1.0, -2.0, 0.5])
    v = cons.apply(lin)
    assert np.abs(v[space.interior_start:]).max() < 1e-12


def test_constant_operator_requires_flat(shell60):
    with pytest.raises(AssemblyError):
        ConstantOperator(LevelSpace(shell60, 1), require_flat=True)


def test_constant_operator_equals_affine_fem(two_tets):
    space = LevelSpace(two_tets, 2)
    x = np.random.default_rng(0).normal(size=space.n_nodes)
    a = ConstantOperator(space, require_flat=True).apply(x)
    b = FEMOperator(space, "affine").apply(x)
    assert np.allclose(a, b, rtol=0, atol=1e-12 * np.abs(b).max())


def test_rhs(shell60):
    space = LevelSpace(shell60, 2)
    assert not assemble_rhs(lambda p: np.zeros(len(p)), space).any()
    ones = assemble_rhs(lambda p: np.ones(len(p)), space, "affine")
    mass = ElementCache(space, "affine", keep=False).lumped_mass()
    free = ~space.dirichlet
    assert np.allclose(ones[free], mass[free])
    assert not ones[space.dirichlet].any()


def test_total_volume_converges(shell60):
    exact = 4 * np.pi * (1.0 - 0.125) / 3
    errs = [abs(ElementCache(LevelSpace(shell60, lv)).lumped_mass().sum() - exact)
            for lv in (0, 1, 2)]
    # the polyhedral volume converges at second order in h
    assert 3.0 < errs[1] / errs[2] < 5.0 and 3.0 < errs[0] / errs[1] < 5.0


def test_residual_of_exact_solution(two_tets):
    space = LevelSpace(two_tets, 1)
    op = FEMOperator(space)
    A = assemble_global_matrix(op).toarray()
    f = assemble_rhs(lambda p: np.sin(p[:, 0]) + 1, space)
    u = np.linalg.solve(A, f)
    assert np.linalg.norm(residual(op, u, f)) <= 1e-10 * np.linalg.norm(f)
    assert np.array_equal(residual(op, space.zeros(), f), f)


def test_single_element_interface_rows():
    mesh = single_element_mesh()
    space = LevelSpace(mesh, 1)
    # every non-interior node of a single element is a Dirichlet node
    assert space.interface.size == 0
    u = np.random.default_rng(1).normal(size=space.n_nodes)
    v = FEMOperator(space).apply(u)
    assert np.array_equal(v[space.dirichlet], u[space.dirichlet])
