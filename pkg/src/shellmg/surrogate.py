"""Surrogate polynomials for the stencil function of volume-interior nodes.

For every macro element, level and direction the stencil weight
``s_w(i, j, k)`` is replaced by a trivariate polynomial of degree ``q``
in the normalized lattice coordinates ``(i, j, k) / N``.  Coefficients are
fitted by interpolation at a shrunk principal lattice (IPOLY) or by least
squares over a coarser interior lattice (LSQP).  Along a lattice line the
polynomial is evaluated by forward differencing.
"""
from __future__ import annotations

import time
from dataclasses import dataclass, field
from math import comb, factorial
from typing import Callable

import numpy as np

from . import _kernels as kern
from .fem import ElementCache, LevelOperator, sample_stencils
from .mesh import MacroMesh, NodeIndex, interior_node_count, lattice_tables
from .space import LevelSpace

__all__ = [
    "FitError", "PolyBasis", "mq", "ipoly_sampling_indices", "sampling_level",
    "lsqp_sampling_indices", "fit_ipoly", "fit_lsqp", "eval_direct", "LineEvalState",
    "line_init", "line_step", "line_advance", "difference_table", "SurrogateCoeffs",
    "fit_surrogates", "SurrogateOperator", "write_coefficients", "read_coefficients",
]

METHODS = ("ipoly", "lsqp")


class FitError(ValueError):
    """Raised when a surrogate system is singular or rank deficient."""


def mq(q: int) -> int:
    """Number of trivariate monomials of total degree at most ``q``."""
    if q < 0:
        raise ValueError("degree must be non-negative")
    return (q + 3) * (q + 2) * (q + 1) // 6


@dataclass(frozen=True)
class PolyBasis:
    """Monomials ``x**l y**m z**n`` of ``(x, y, z) = (i, j, k) / N``, ``l+m+n <= q``.

    Ordered by total degree, constant term first.
    """

    q: int
    exps: np.ndarray = field(init=False)

    def __post_init__(self):
        e = [(l, m, n) for d in range(self.q + 1)
             for l in range(d, -1, -1) for m in range(d - l, -1, -1) for n in [d - l - m]]
        object.__setattr__(self, "exps", np.array(e, dtype=np.int64).reshape(-1, 3))

    def __len__(self) -> int:
        return len(self.exps)

    def matrix(self, ijk, n: int) -> np.ndarray:
        """Vandermonde-type matrix, one row per lattice point."""
        x = np.asarray(ijk, dtype=float).reshape(-1, 3) / n
        return np.prod(x[:, None, :] ** self.exps[None, :, :], axis=2)


def _principal_coords(level: int, q: int) -> np.ndarray:
    n = 2 ** (level + 2)
    a = n - 3
    return np.array([1 + (alpha * (a - 1)) // q for alpha in range(q + 1)], dtype=np.int64)


def ipoly_sampling_indices(level: int, q: int = 2) -> list[NodeIndex]:
    """Interpolation nodes: principal lattice of the tet with corners 1 and ``2**(l+2)-3``.

    For ``q = 2`` these are the corners and edge midpoints with
    ``a = 2**(l+2) - 3`` and ``b = 2**(l+1) - 1``.
    """
    if level < 1:
        raise ValueError("surrogates are defined on levels >= 1")
    if q not in (1, 2, 3):
        raise ValueError("IPOLY sampling is defined for q in {1, 2, 3}")
    c = _principal_coords(level, q)
    if q == 2:
        one, b, a = c
        pts = [(one, one, one), (one, one, a), (one, a, one), (a, one, one),
               (one, one, b), (one, b, one), (b, one, one),
               (one, b, b), (b, one, b), (b, b, one)]
    else:
        alphas = [(x, y, z) for x in range(q + 1) for y in range(q + 1 - x)
                  for z in range(q + 1 - x - y)]
        alphas.sort(key=lambda t: (-max(t), t[::-1]))
        pts = [(c[x], c[y], c[z]) for x, y, z in alphas]
        if q == 1:
            pts = [(c[0], c[0], c[0]), (c[0], c[0], c[1]), (c[0], c[1], c[0]), (c[1], c[0], c[0])]
    out = [NodeIndex(int(i), int(j), int(k), level) for i, j, k in pts]
    assert all(p.is_interior() for p in out)
    return out


def sampling_level(level: int, j: int) -> int:
    """Level of the sampling lattice, clamped to ``[1, level]``."""
    return min(level, max(1, j))


def lsqp_sampling_indices(level: int, j: int) -> np.ndarray:
    """Interior nodes of level ``m(level, j)`` mapped onto the level-``level`` lattice."""
    m = sampling_level(level, j)
    tab = lattice_tables(m)
    return tab.ijk[tab.interior] * 2 ** (level - m)


def fit_ipoly(sampler: Callable[[np.ndarray], np.ndarray], level: int, q: int = 2) -> np.ndarray:
    """Interpolating coefficients, shape (15, m_q).

    ``sampler`` maps an (m, 3) array of lattice nodes to (m, 15) stencils.
    """
    pts = np.array([p[:3] for p in ipoly_sampling_indices(level, q)], dtype=np.int64)
    basis = PolyBasis(q)
    A = basis.matrix(pts, 2 ** (level + 2))
    b = np.asarray(sampler(pts))
    try:
        coeffs = np.linalg.solve(A, b)
    except np.linalg.LinAlgError as exc:
        raise FitError(f"singular interpolation system at level {level}, q={q}") from exc
    return coeffs.T.copy()


def _qr_lstsq(A: np.ndarray, b: np.ndarray) -> np.ndarray:
    Q, R = np.linalg.qr(A)
    diag = np.abs(np.diag(R))
    if diag.min() <= 1e-12 * diag.max():
        raise FitError(f"rank-deficient least-squares matrix (|R_ii| range "
                       f"{diag.min():.3e} .. {diag.max():.3e})")
    from scipy.linalg import solve_triangular
    return solve_triangular(R, Q.T @ b)


def fit_lsqp(sampler: Callable[[np.ndarray], np.ndarray], level: int, q: int = 2,
             j: int = 2) -> np.ndarray:
    """Least-squares coefficients over the sampling lattice, shape (15, m_q)."""
    if q > 4:
        raise FitError("full rank is only guaranteed for q <= 4")
    pts = lsqp_sampling_indices(level, j)
    A = PolyBasis(q).matrix(pts, 2 ** (level + 2))
    b = np.asarray(sampler(pts))
    return _qr_lstsq(A, b).T.copy()


def eval_direct(coeffs: np.ndarray, w: int, idx, level: int | None = None,
                basis: PolyBasis | None = None):
    """Value of the surrogate of direction ``w`` at lattice node ``idx``.

    ``idx`` may also be an (n, 3) index array, giving an array of values.
    """
    if level is None:
        level = idx.level
    coeffs = np.asarray(coeffs)
    if basis is None:
        basis = _basis_for(coeffs.shape[-1])
    pts = np.asarray(idx)
    if pts.ndim == 2:
        return basis.matrix(pts[:, :3], 2 ** (level + 2)) @ coeffs[w]
    row = basis.matrix(np.array(idx[:3]), 2 ** (level + 2))[0]
    return float(row @ coeffs[w])


def _basis_for(nterms: int) -> PolyBasis:
    for q in range(8):
        if mq(q) == nterms:
            return PolyBasis(q)
    raise ValueError(f"{nterms} is not a valid number of coefficients")


# ---------------------------------------------------------------------------
# Forward differencing
# ---------------------------------------------------------------------------

def _delta_powers(q: int) -> np.ndarray:
    """``F[p, r]`` = r-th forward difference of ``x**p`` at 0 (= r! S(p, r))."""
    S = np.zeros((q + 1, q + 1))
    S[0, 0] = 1.0
    for p in range(1, q + 1):
        for r in range(1, p + 1):
            S[p, r] = r * S[p - 1, r] + S[p - 1, r - 1]
    return S * np.array([factorial(r) for r in range(q + 1)])[None, :]


def difference_table(coeffs: np.ndarray, exps: np.ndarray, n: int, i0: int, j0: int,
                     k0: int) -> np.ndarray:
    """Forward differences ``D_i^r D_j^s D_k^t p`` at ``(i0, j0, k0)``.

    Returns an array (15, q+1, q+1, q+1); entries with ``r+s+t > q`` are 0.
    The polynomial is first re-expanded in powers of the shifted integer
    offsets, so no differences of nearly equal values are formed.
    """
    coeffs = np.asarray(coeffs, dtype=float)
    q = int(exps.sum(axis=1).max()) if len(exps) else 0
    F = _delta_powers(q)
    # power coefficients in offsets (a, b, c) from (i0, j0, k0)
    B = np.zeros((coeffs.shape[0], q + 1, q + 1, q + 1))
    for c, (l, m, nn) in enumerate(exps):
        scale = coeffs[:, c] / float(n) ** (l + m + nn)
        for a in range(l + 1):
            fa = comb(l, a) * float(i0) ** (l - a)
            for b in range(m + 1):
                fb = comb(m, b) * float(j0) ** (m - b)
                for cc in range(nn + 1):
                    fc = comb(nn, cc) * float(k0) ** (nn - cc)
                    B[:, a, b, cc] += scale * (fa * fb * fc)
    return np.einsum("wabc,ar,bs,ct->wrst", B, F, F, F)


@dataclass
class LineEvalState:
    """Incremental evaluation of all 15 surrogates along a lattice line.

    ``table`` holds the 3D forward differences at the line origin
    ``(0, j0, k0)``; ``line[w, r]`` the i-differences at position ``d``.
    """

    table: np.ndarray
    line: np.ndarray
    j0: int
    k0: int
    d: int = 0

    @property
    def degree(self) -> int:
        return self.line.shape[1] - 1

    @property
    def value(self) -> np.ndarray:
        return self.line[:, 0]

    @property
    def first_difference(self) -> np.ndarray:
        return self.line[:, 1] if self.degree >= 1 else np.zeros(len(self.line))

    @property
    def second_difference(self) -> np.ndarray:
        return self.line[:, 2] if self.degree >= 2 else np.zeros(len(self.line))


def line_init(coeffs: np.ndarray, j0: int, k0: int, level: int) -> LineEvalState:
    coeffs = np.asarray(coeffs)
    basis = _basis_for(coeffs.shape[-1])
    table = difference_table(coeffs, basis.exps, 2 ** (level + 2), 0, j0, k0)
    return LineEvalState(table, table[:, :, 0, 0].copy(), j0, k0)


def line_step(state: LineEvalState) -> np.ndarray:
    """Emit the 15 weights at position ``d`` and advance by one (q additions each)."""
    out = state.line[:, 0].copy()
    for r in range(state.degree):
        state.line[:, r] += state.line[:, r + 1]
    state.d += 1
    return out


def line_advance(coeffs, state: LineEvalState, direction: str) -> LineEvalState:
    """State of the neighbouring line ``(j0+1, k0)`` or ``(j0, k0+1)``.

    ``coeffs`` is accepted for interface symmetry; the update uses only
    the stored differences.
    """
    T = state.table.copy()
    q = state.degree
    axis = {"j": 2, "k": 3}[direction]
    for s in range(q):
        if axis == 2:
            T[:, :, s, :] += T[:, :, s + 1, :]
        else:
            T[:, :, :, s] += T[:, :, :, s + 1]
    j0 = state.j0 + (direction == "j")
    k0 = state.k0 + (direction == "k")
    return LineEvalState(T, T[:, :, 0, 0].copy(), j0, k0)


# ---------------------------------------------------------------------------
# Coefficient store and surrogate operator
# ---------------------------------------------------------------------------

@dataclass
class SurrogateCoeffs:
    """Coefficients per level: ``coeffs[level]`` has shape (n_macro, 15, m_q)."""

    method: str
    q: int
    j: int | None
    coeffs: dict[int, np.ndarray]
    timings: dict[str, float] = field(default_factory=dict)

    @property
    def basis(self) -> PolyBasis:
        return PolyBasis(self.q)

    def n_stored(self, macro_id: int = 0) -> int:
        return sum(c[macro_id].size for c in self.coeffs.values())


def fit_surrogates(mesh: MacroMesh, levels, method: str = "lsqp", q: int = 2,
                   j: int | None = 2) -> SurrogateCoeffs:
    """Fit all macro elements on all given levels (>= 1)."""
    if method not in METHODS:
        raise ValueError(f"unknown method {method!r}")
    t_sample = t_linalg = 0.0
    out = {}
    basis = PolyBasis(q)
    for level in levels:
        if level < 1:
            raise ValueError("surrogates are defined on levels >= 1")
        n = 2 ** (level + 2)
        if method == "ipoly":
            pts = np.array([p[:3] for p in ipoly_sampling_indices(level, q)], dtype=np.int64)
        else:
            pts = lsqp_sampling_indices(level, j)
        A = basis.matrix(pts, n)
        arr = np.empty((mesh.n_elements, 15, len(basis)))
        for m in range(mesh.n_elements):
            t0 = time.perf_counter()
            b = sample_stencils(mesh, m, level, pts)
            t1 = time.perf_counter()
            if method == "ipoly":
                try:
                    arr[m] = np.linalg.solve(A, b).T
                except np.linalg.LinAlgError as exc:
                    raise FitError(f"singular interpolation system, element {m}") from exc
            else:
                arr[m] = _qr_lstsq(A, b).T
            t_sample += t1 - t0
            t_linalg += time.perf_counter() - t1
        out[level] = arr
    timings = {"t_sample": t_sample, "t_linalg": t_linalg, "t_setup": t_sample + t_linalg}
    return SurrogateCoeffs(method, q, j if method == "lsqp" else None, out, timings)


class SurrogateOperator(LevelOperator):
    """Interior rows from surrogate polynomials, interface rows from FEM.

    ``center="poly"`` evaluates the center polynomial, ``center="rowsum"``
    uses the negated sum of the other 14 weights.
    """

    kind = "surrogate"

    def __init__(self, space: LevelSpace, coeffs: np.ndarray, q: int,
                 iface_cache: ElementCache, center: str = "poly", workers: int = 1):
        super().__init__(space, iface_cache, workers)
        self.coeffs = np.ascontiguousarray(coeffs)
        self.q = q
        self.basis = PolyBasis(q)
        self.center = center

    def interior_stencils(self, m: int) -> np.ndarray:
        return kern.eval_interior(self.coeffs[m], self.basis.exps, self.space.n,
                                  self.center == "poly")

    def origin_table(self, m: int) -> np.ndarray:
        """Forward-difference table at lattice point (0, 1, 1)."""
        return np.ascontiguousarray(
            difference_table(self.coeffs[m], self.basis.exps, self.space.n, 0, 1, 1))


def write_coefficients(sc: SurrogateCoeffs, path) -> None:
    """One record per (macro, level, direction) with coefficients in full precision."""
    with open(path, "w") as fh:
        fh.write("# surrogate-coeffs v1: macro level w method q j coeffs...\n")
        for level in sorted(sc.coeffs):
            arr = sc.coeffs[level]
            for m in range(arr.shape[0]):
                for w in range(15):
                    vals = " ".join(repr(float(x)) for x in arr[m, w])
                    fh.write(f"{m} {level} {w} {sc.method} {sc.q} {sc.j if sc.j is not None else '-'} {vals}\n")


def read_coefficients(path) -> SurrogateCoeffs:
    records: dict[int, dict[tuple[int, int], np.ndarray]] = {}
    method = q = j = None
    with open(path) as fh:
        for line in fh:
            if line.startswith("#") or not line.strip():
                continue
            parts = line.split()
            m, level, w = int(parts[0]), int(parts[1]), int(parts[2])
            method, q = parts[3], int(parts[4])
            j = None if parts[5] == "-" else int(parts[5])
            records.setdefault(level, {})[(m, w)] = np.array([float(x) for x in parts[6:]])
    coeffs = {}
    for level, recs in records.items():
        n_macro = max(m for m, _ in recs) + 1
        arr = np.empty((n_macro, 15, mq(q)))
        for (m, w), v in recs.items():
            arr[m, w] = v
        coeffs[level] = arr
    return SurrogateCoeffs(method, q, j, coeffs)
