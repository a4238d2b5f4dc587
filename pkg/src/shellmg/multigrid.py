"""Hybrid Gauss-Seidel smoothers, grid transfers and V-cycles.

Inside each macro element the smoother is lexicographic Gauss-Seidel in
:func:`shellmg.mesh.index_set` order.  Interface nodes (macro vertices,
edges and faces) are relaxed once per sweep after all interiors, using
their FEM rows.  Interiors of distinct macro elements only couple through
interface values, which stay fixed during the interior phase, so the
interior phase may run on several threads without changing the result.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from . import _kernels as kern
from .fem import ConstantOperator, ElementCache, FEMOperator, LevelOperator, _run, assemble_rhs
from .mesh import MacroMesh
from .space import LevelSpace
from .surrogate import SurrogateCoeffs, SurrogateOperator, fit_surrogates

__all__ = [
    "SmootherError", "SolverDivergence", "OperatorMode", "CycleSpec", "Level", "Hierarchy",
    "gs_sweep_naive", "gs_sweep_split", "prolongate", "restrict", "build_hierarchy",
    "vcycle", "solve", "SolveHistory", "initial_guess", "assemble_problem_rhs",
]


class SmootherError(ArithmeticError):
    """Zero or non-finite diagonal encountered while smoothing."""


class SolverDivergence(RuntimeError):
    """Residual grew over three consecutive cycles beyond its initial value."""

    def __init__(self, message: str, history: "SolveHistory"):
        super().__init__(message)
        self.history = history


KINDS = ("const", "fem", "cons", "surrogate")


@dataclass(frozen=True)
class OperatorMode:
    """Which operator provides the interior stencils.

    ``const`` is the constant stencil on affine meshes, ``fem`` the
    projected Galerkin operator, ``cons`` the unprojected operator and
    ``surrogate`` the polynomial operator fitted by ``method``.
    """

    kind: str = "fem"
    method: str = "lsqp"
    q: int = 2
    j: int | None = 2

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown operator kind {self.kind!r}")
        if self.kind == "surrogate" and self.method not in ("ipoly", "lsqp"):
            raise ValueError(f"unknown surrogate method {self.method!r}")

    @property
    def geometry(self) -> str:
        return "affine" if self.kind in ("const", "cons") else "projected"

    @property
    def label(self) -> str:
        if self.kind != "surrogate":
            return self.kind
        return f"{self.method}-q{self.q}" + (f"-j{self.j}" if self.method == "lsqp" else "")


@dataclass(frozen=True)
class CycleSpec:
    pre: int = 3
    post: int = 3
    coarse_sweeps: int = 50
    cycles: int = 10
    smoother: str = "naive"
    dd: bool = False

    def __post_init__(self):
        if self.pre < 0 or self.post < 0 or self.coarse_sweeps < 0 or self.cycles < 0:
            raise ValueError("sweep and cycle counts must be non-negative")
        if self.smoother not in ("naive", "split"):
            raise ValueError(f"unknown smoother {self.smoother!r}")


# ---------------------------------------------------------------------------
# Smoothers
# ---------------------------------------------------------------------------

def _check_diag(S: np.ndarray) -> None:
    c = S[:, kern.MC]
    if not np.all(np.isfinite(c)) or np.any(c == 0.0):
        raise SmootherError("zero or non-finite center weight")


def _interface_sweep(op: LevelOperator, u: np.ndarray, f: np.ndarray) -> None:
    A = op.interface_matrix
    kern.gs_rows(A.indptr, A.indices, A.data, op.space.interface, u, f)


def gs_sweep_naive(op: LevelOperator, u: np.ndarray, f: np.ndarray) -> np.ndarray:
    """One hybrid Gauss-Seidel sweep in place; returns ``u``."""
    space = op.space
    tab = space.tables

    def interior(m):
        S = np.ascontiguousarray(op.interior_stencils(m))
        _check_diag(S)
        kern.gs_interior(S, u, f, space.gid[m], tab.rowstart, tab.n)

    _run(interior, space.mesh.n_elements, op.workers)
    _interface_sweep(op, u, f)
    return u


def gs_sweep_split(op: SurrogateOperator, u: np.ndarray, f: np.ndarray) -> np.ndarray:
    """Split sweep with incremental stencil evaluation; row-sum center."""
    if not isinstance(op, SurrogateOperator):
        raise TypeError("the split smoother needs a surrogate operator")
    space = op.space
    tab = space.tables
    tables = _origin_tables(op)

    def interior(m):
        kern.gs_split(tables[m], op.q, u, f, space.gid[m], tab.rowstart, tab.n)

    _run(interior, space.mesh.n_elements, op.workers)
    if not np.all(np.isfinite(u)):
        raise SmootherError("non-finite values after split sweep")
    _interface_sweep(op, u, f)
    return u


def _origin_tables(op: SurrogateOperator) -> list[np.ndarray]:
    tabs = getattr(op, "_origin_tables", None)
    if tabs is None:
        tabs = [op.origin_table(m) for m in range(op.space.mesh.n_elements)]
        op._origin_tables = tabs
    return tabs


# ---------------------------------------------------------------------------
# Transfers
# ---------------------------------------------------------------------------

def prolongate(uc: np.ndarray, coarse: LevelSpace, fine: LevelSpace) -> np.ndarray:
    """Linear interpolation in index space from ``coarse`` to ``fine``."""
    if fine.level != coarse.level + 1 or fine.mesh is not coarse.mesh:
        raise ValueError("prolongation needs consecutive levels of one mesh")
    uf = np.empty(fine.n_nodes)
    rc, rf = coarse.tables.rowstart, fine.tables.rowstart
    for m in range(fine.mesh.n_elements):
        kern.prolongate_block(uc, uf, coarse.gid[m], fine.gid[m], rc, rf, fine.n)
    return uf


def restrict(rf: np.ndarray, fine: LevelSpace, coarse: LevelSpace) -> np.ndarray:
    """Transpose of :func:`prolongate`, Dirichlet rows zeroed."""
    if fine.level != coarse.level + 1 or fine.mesh is not coarse.mesh:
        raise ValueError("restriction needs consecutive levels of one mesh")
    out = np.zeros(coarse.n_nodes)
    owner = fine.owner
    rsc, rsf = coarse.tables.rowstart, fine.tables.rowstart
    for m in range(fine.mesh.n_elements):
        kern.restrict_block(rf, out, coarse.gid[m], fine.gid[m], rsc, rsf, fine.n, owner, m)
    out[coarse.dirichlet] = 0.0
    return out


# ---------------------------------------------------------------------------
# Hierarchy
# ---------------------------------------------------------------------------

@dataclass
class Level:
    space: LevelSpace
    smooth_op: LevelOperator
    residual_op: LevelOperator


@dataclass
class Hierarchy:
    mesh: MacroMesh
    mode: OperatorMode
    dd: bool
    levels: list[Level]
    coeffs: SurrogateCoeffs | None = None

    @property
    def finest(self) -> Level:
        return self.levels[-1]

    @property
    def geometry(self) -> str:
        """Geometry of the discrete problem (for right-hand side and error)."""
        return "affine" if isinstance(self.finest.residual_op, ConstantOperator) else "projected"


def _make_operator(mode: OperatorMode, space: LevelSpace, caches: dict, coeffs,
                   center: str, workers: int, keep: bool) -> LevelOperator:
    if mode.kind == "const":
        return ConstantOperator(space, require_flat=True, workers=workers)
    if mode.kind == "cons":
        return ConstantOperator(space, workers=workers)
    cache = caches.get(space.level)
    if cache is None:
        cache = caches[space.level] = ElementCache(space, "projected", keep=keep)
    if mode.kind == "fem" or space.level == 0:
        return FEMOperator(space, "projected", cache=cache, workers=workers)
    return SurrogateOperator(space, coeffs.coeffs[space.level], mode.q, cache, center, workers)


def build_hierarchy(mesh: MacroMesh, L: int, mode: OperatorMode, dd: bool = False,
                    center: str = "rowsum", workers: int = 1,
                    coeffs: SurrogateCoeffs | None = None) -> Hierarchy:
    """Operators on levels ``0..L``; level 0 always uses FEM or the mode's constant stencil.

    With ``dd=True`` smoothing uses ``mode`` and residuals use FEM on all levels.
    """
    if L < 0:
        raise ValueError("L must be non-negative")
    if mode.kind == "surrogate" and coeffs is None and L >= 1:
        coeffs = fit_surrogates(mesh, range(1, L + 1), mode.method, mode.q, mode.j)
    caches: dict[int, ElementCache] = {}
    fem_mode = OperatorMode("fem")
    # the FEM interior is applied every sweep, so its edge weights are kept
    keep = mode.kind == "fem" or dd
    levels = []
    for level in range(L + 1):
        space = LevelSpace(mesh, level)
        smooth = _make_operator(mode, space, caches, coeffs, center, workers, keep)
        if dd and mode.kind != "fem":
            res = _make_operator(fem_mode, space, caches, None, center, workers, keep)
        else:
            res = smooth
        levels.append(Level(space, smooth, res))
    return Hierarchy(mesh, mode, dd, levels, coeffs)


def _smooth(h: Hierarchy, level: int, u, f, sweeps: int, smoother: str) -> None:
    op = h.levels[level].smooth_op
    split = smoother == "split" and isinstance(op, SurrogateOperator)
    for _ in range(sweeps):
        if split:
            gs_sweep_split(op, u, f)
        else:
            gs_sweep_naive(op, u, f)


def vcycle(spec: CycleSpec, h: Hierarchy, u: np.ndarray, f: np.ndarray,
           level: int | None = None) -> np.ndarray:
    """One V(pre, post)-cycle in place on ``level`` (finest by default)."""
    if level is None:
        level = len(h.levels) - 1
    if level == 0:
        _smooth(h, 0, u, f, spec.coarse_sweeps, spec.smoother)
        return u
    _smooth(h, level, u, f, spec.pre, spec.smoother)
    r = h.levels[level].residual_op.residual(u, f)
    fine, coarse = h.levels[level].space, h.levels[level - 1].space
    rc = restrict(r, fine, coarse)
    del r
    ec = np.zeros(coarse.n_nodes)
    vcycle(spec, h, ec, rc, level - 1)
    u += prolongate(ec, coarse, fine)
    _smooth(h, level, u, f, spec.post, spec.smoother)
    return u


# ---------------------------------------------------------------------------
# Solve
# ---------------------------------------------------------------------------

@dataclass
class SolveHistory:
    """Per-cycle norms; entry 0 belongs to the initial guess."""

    residual: list[float] = field(default_factory=list)
    error: list[float] = field(default_factory=list)
    u: np.ndarray | None = None

    @property
    def final_error(self) -> float:
        return self.error[-1]

    @property
    def final_residual(self) -> float:
        return self.residual[-1]

    def reduction_factors(self) -> np.ndarray:
        r = np.asarray(self.residual)
        return r[1:] / r[:-1]


def initial_guess(space: LevelSpace, seed: int) -> np.ndarray:
    """Uniform in [-1, 1] at free nodes from ``numpy.random.default_rng(seed)``."""
    rng = np.random.default_rng(seed)
    u = rng.uniform(-1.0, 1.0, space.n_nodes)
    u[space.dirichlet] = 0.0
    return u


def solve(spec: CycleSpec, h: Hierarchy, f: np.ndarray, seed: int = 0,
          error_fn: Callable[[np.ndarray], float] | None = None,
          u0: np.ndarray | None = None) -> SolveHistory:
    """Run ``spec.cycles`` V-cycles from a seeded random start."""
    space = h.finest.space
    u = initial_guess(space, seed) if u0 is None else u0.copy()
    res_op = h.finest.residual_op
    hist = SolveHistory()

    def record():
        hist.residual.append(float(np.linalg.norm(res_op.residual(u, f))))
        if error_fn is not None:
            hist.error.append(float(error_fn(u)))

    record()
    growth = 0
    for _ in range(spec.cycles):
        vcycle(spec, h, u, f)
        record()
        r = hist.residual
        growth = growth + 1 if r[-1] > r[-2] else 0
        if not np.isfinite(r[-1]) or (growth >= 3 and r[-1] > r[0]):
            hist.u = u
            raise SolverDivergence(f"residual grew to {r[-1]:.3e} "
                                   f"(initial {r[0]:.3e})", hist)
    hist.u = u
    return hist


def assemble_problem_rhs(h: Hierarchy, rhs: Callable[[np.ndarray], np.ndarray]) -> np.ndarray:
    """Load vector on the finest level in the geometry of the residual operator."""
    op = h.finest.residual_op
    cache = op.iface_cache if op.iface_cache.geometry == h.geometry else None
    return assemble_rhs(rhs, h.finest.space, h.geometry, cache)
