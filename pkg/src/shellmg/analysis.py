"""Manufactured solution, error norms, stencil diagnostics and the FLOP model."""
from __future__ import annotations

from dataclasses import dataclass
from fractions import Fraction

import numpy as np

from . import _kernels as kern
from .fem import sample_stencils
from .mesh import OPPOSITE, MacroMesh, lattice_tables
from .space import LevelSpace

__all__ = [
    "manufactured_solution", "analytic_rhs", "fd_laplacian", "discretization_error",
    "mesh_size", "FitMetrics", "fit_metrics", "true_interior_stencils", "symmetry_measure",
    "rowsum_max", "flops_per_update", "cost_factor", "FLOP_TABLE", "observed_orders",
    "relative_deviation",
]

R1, R2 = 0.5, 1.0
FREQ = np.array([10.0, 4.0, 7.0])


def _split(p):
    p = np.asarray(p, dtype=float)
    return p[..., 0], p[..., 1], p[..., 2]


def manufactured_solution(p, r1: float = R1, r2: float = R2):
    """``(r - r1)(r - r2) sin(10x) sin(4y) sin(7z)``; vectorized over the last axis."""
    x, y, z = _split(p)
    r = np.sqrt(x * x + y * y + z * z)
    return (r - r1) * (r - r2) * np.sin(10 * x) * np.sin(4 * y) * np.sin(7 * z)


def analytic_rhs(p, r1: float = R1, r2: float = R2):
    """Closed-form ``-Laplace`` of :func:`manufactured_solution`.

    With ``g(r) = (r - r1)(r - r2)`` and ``S = sin(10x) sin(4y) sin(7z)``:
    ``Lap(g S) = (g'' + 2 g'/r) S + 2 (g'/r) (x . grad S) + g Lap(S)`` and
    ``Lap(S) = -(100 + 16 + 49) S``.
    """
    x, y, z = _split(p)
    r = np.sqrt(x * x + y * y + z * z)
    g = (r - r1) * (r - r2)
    dg = 2 * r - r1 - r2
    sx, sy, sz = np.sin(10 * x), np.sin(4 * y), np.sin(7 * z)
    cx, cy, cz = np.cos(10 * x), np.cos(4 * y), np.cos(7 * z)
    S = sx * sy * sz
    x_grad_S = 10 * x * cx * sy * sz + 4 * y * sx * cy * sz + 7 * z * sx * sy * cz
    lap = (2.0 + 2.0 * dg / r) * S + 2.0 * dg / r * x_grad_S - float(FREQ @ FREQ) * g * S
    return -lap


def fd_laplacian(func, p, step: float = 1e-3):
    """Sixth-order central finite-difference Laplacian of ``func`` at points ``p``."""
    p = np.atleast_2d(np.asarray(p, dtype=float))
    c = np.array([1 / 90, -3 / 20, 3 / 2, -49 / 18, 3 / 2, -3 / 20, 1 / 90])
    out = np.zeros(len(p))
    for axis in range(3):
        for o, w in zip(range(-3, 4), c):
            q = p.copy()
            q[:, axis] += o * step
            out += w * func(q)
    return out / step ** 2


def mesh_size(mesh: MacroMesh) -> float:
    """Macro mesh size ``H``: the longest macro edge."""
    return mesh.max_edge_length()


def discretization_error(v: np.ndarray, space: LevelSpace, geometry: str = "projected",
                         H: float | None = None, exact=manufactured_solution) -> float:
    """``h**1.5 * ||I(u_exact) - v||_2`` over all (unique) nodes, ``h = 2**-(l+2) H``."""
    H = mesh_size(space.mesh) if H is None else H
    h = H / space.n
    diff = space.node_values(exact, geometry) - v
    return float(h ** 1.5 * np.linalg.norm(diff))


@dataclass
class FitMetrics:
    """Per-direction root-mean-square (``l2``) and maximum (``linf``) fit errors."""

    l2: np.ndarray
    linf: np.ndarray


def true_interior_stencils(mesh: MacroMesh, macro_id: int, level: int,
                           geometry: str = "projected") -> np.ndarray:
    """Assembled stencils at all interior nodes in smoother order."""
    tab = lattice_tables(level)
    return sample_stencils(mesh, macro_id, level, tab.ijk[tab.interior], geometry)


def fit_metrics(true_stencils: np.ndarray, coeffs: np.ndarray, level: int,
                exps: np.ndarray | None = None) -> FitMetrics:
    """Exhaustive fit errors of surrogate ``coeffs`` (15, m_q) over the interior."""
    from .surrogate import _basis_for
    if exps is None:
        exps = _basis_for(np.asarray(coeffs).shape[-1]).exps
    S = kern.eval_interior(np.ascontiguousarray(coeffs), exps, 2 ** (level + 2), True)
    d = S - true_stencils
    return FitMetrics(np.sqrt(np.mean(d * d, axis=0)), np.abs(d).max(axis=0))


def _interior_pairs(level: int):
    """Row index, neighbor row index and direction for interior-to-interior couplings."""
    tab = lattice_tables(level)
    pos = np.full(len(tab.ijk), -1, dtype=np.int64)
    pos[tab.interior] = np.arange(len(tab.interior))
    nodes = tab.ijk[tab.interior]
    rows, nbrs, dirs = [], [], []
    for w in range(15):
        nb = nodes + np.array([kern.DI[w], kern.DJ[w], kern.DK[w]])
        packed = tab.rowstart[nb[:, 2], nb[:, 1]] + nb[:, 0]
        q = pos[packed]
        ok = q >= 0
        rows.append(np.flatnonzero(ok))
        nbrs.append(q[ok])
        dirs.append(np.full(ok.sum(), w))
    return np.concatenate(rows), np.concatenate(nbrs), np.concatenate(dirs)


def symmetry_measure(stencils: np.ndarray, reference: np.ndarray, level: int) -> float:
    """``||A^T - A||_F / ||A_ref||_F`` of the interior-to-interior block of one element.

    Couplings to nodes outside the interior are dropped from both norms.
    """
    rows, nbrs, dirs = _interior_pairs(level)
    opp = OPPOSITE[dirs]
    off = dirs != kern.MC
    a = stencils[rows[off], dirs[off]]
    b = stencils[nbrs[off], opp[off]]
    num = np.sqrt(np.sum((a - b) ** 2))
    den = np.sqrt(np.sum(reference[rows, dirs] ** 2))
    return float(num / den)


def rowsum_max(stencils: np.ndarray, relative: bool = True) -> float:
    """Largest ``|sum_w s_w|`` over rows, optionally divided by the largest center."""
    s = float(np.abs(np.asarray(stencils).sum(axis=1)).max())
    if relative:
        s /= float(np.abs(np.asarray(stencils)[:, kern.MC]).max())
    return s


FLOP_TABLE = {
    "constant": 29,
    "fem_direct": 1353,
    "fem_rowsum": 1343,
    "surrogate_naive_q2": 378,
}


def flops_per_update(variant: str, q: int = 2, nu: int = 3):
    """Modeled FLOPs of one stencil-based update.

    ``surrogate_incremental`` costs ``29 + 15 q``; ``cons_dd`` averages one
    FEM row-sum update with ``nu`` constant-stencil smoothing updates and
    is returned as an exact :class:`fractions.Fraction`.
    """
    if variant in FLOP_TABLE:
        return FLOP_TABLE[variant]
    if variant == "surrogate_incremental":
        if q < 0:
            raise ValueError("degree must be non-negative")
        return 29 + 15 * q
    if variant == "cons_dd":
        if nu < 0:
            raise ValueError("smoothing step count must be non-negative")
        return Fraction(FLOP_TABLE["fem_rowsum"] + 29 * nu, nu + 1)
    raise ValueError(f"unknown variant {variant!r}")


def cost_factor(q: int) -> float:
    """Incremental surrogate update cost relative to the constant stencil."""
    return 1.0 + 15.0 * q / 29.0


def observed_orders(errors) -> np.ndarray:
    """``log2`` of successive error ratios (one level apart)."""
    e = np.asarray(errors, dtype=float)
    return np.log2(e[:-1] / e[1:])


def relative_deviation(errors, reference) -> np.ndarray:
    e, r = np.asarray(errors, dtype=float), np.asarray(reference, dtype=float)
    return np.abs(e - r) / r
