"""On-the-fly P1 finite element stencils, operators and right-hand sides.

Interior rows of a level operator come from a stencil source (assembled
FEM stencils, a constant stencil, or surrogate polynomials, see
:mod:`shellmg.surrogate`).  Rows of nodes on macro vertices, edges and
faces are always the true FEM rows, assembled from all adjacent fine
tetrahedra and kept as a sparse matrix.  Dirichlet rows are identity rows.
"""
from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor

import numba as nb
import numpy as np
import scipy.sparse as sp

from . import _kernels as kern
from .mesh import Direction, MacroMesh, NodeIndex, StructuredBlock, build_block, lattice_tables
from .space import LevelSpace

__all__ = [
    "AssemblyError", "local_stiffness", "assemble_node_stencil", "ElementCache",
    "LevelOperator", "FEMOperator", "ConstantOperator", "assemble_rhs",
    "apply_operator", "residual", "assemble_global_matrix", "GEOMETRIES",
]

GEOMETRIES = ("projected", "affine")


class AssemblyError(ValueError):
    """Raised for degenerate elements or invalid assembly requests."""


def local_stiffness(p0, p1, p2, p3) -> np.ndarray:
    """P1 stiffness matrix ``|T| grad(l_a) . grad(l_b)`` of one tetrahedron."""
    x = np.array([p0, p1, p2, p3], dtype=float)
    d = x[1:] - x[0]
    vol = abs(np.linalg.det(d)) / 6.0
    if vol <= 1e-14 * max(1.0, np.abs(d).max()) ** 3:
        raise AssemblyError("degenerate tetrahedron")
    grads = np.linalg.inv(d)             # columns are grad(l_1..l_3)
    g = np.vstack([-grads.sum(axis=1), grads.T])
    return vol * g @ g.T


def _block_points(block: StructuredBlock, geometry: str) -> np.ndarray:
    if geometry not in GEOMETRIES:
        raise AssemblyError(f"unknown geometry {geometry!r}")
    return block.coords_blended if geometry == "projected" else block.coords_affine


def assemble_node_stencil(block: StructuredBlock, idx: NodeIndex, geometry: str = "projected",
                          center: str = "direct") -> np.ndarray:
    """15-point stencil of a volume-interior node from its 24 adjacent tets.

    ``center="direct"`` sums the diagonal entries of the element matrices,
    ``center="rowsum"`` takes the negated sum of the 14 off-center weights.
    """
    idx = NodeIndex(*idx) if not isinstance(idx, NodeIndex) else idx
    if idx.level != block.level or not idx.is_interior():
        raise AssemblyError(f"{tuple(idx)} is not a volume-interior node of the block")
    tab = lattice_tables(block.level)
    nodes = np.array([[idx.i, idx.j, idx.k]], dtype=np.int64)
    return kern.node_stencils(_block_points(block, geometry), tab.rowstart, tab.n, nodes,
                              center == "direct")[0]


def sample_stencils(mesh: MacroMesh, macro_id: int, level: int, nodes, geometry="projected",
                    center: str = "direct") -> np.ndarray:
    """Assembled stencils at an array of interior lattice nodes, shape (m, 15)."""
    block = build_block(mesh, macro_id, level)
    tab = lattice_tables(level)
    nodes = np.ascontiguousarray(nodes, dtype=np.int64).reshape(-1, 3)
    return kern.node_stencils(_block_points(block, geometry), tab.rowstart, tab.n, nodes,
                              center == "direct")


@nb.njit(nogil=True, cache=True)
def _scatter_add(out, idx, vals):
    for q in range(idx.shape[0]):
        out[idx[q]] += vals[q]


class ElementCache:
    """Per-element edge weights of one level and geometry.

    With ``keep=True`` the arrays of every macro element are kept after
    first use (about ``64 * lattice_size`` bytes per element).
    """

    def __init__(self, space: LevelSpace, geometry: str = "projected", keep: bool = True):
        if geometry not in GEOMETRIES:
            raise AssemblyError(f"unknown geometry {geometry!r}")
        self.space = space
        self.geometry = geometry
        self.keep = keep
        self._edges: dict[int, tuple[np.ndarray, np.ndarray]] = {}
        self._mass: np.ndarray | None = None
        self._iface: sp.csr_matrix | None = None

    def points(self, m: int) -> np.ndarray:
        return _block_points(build_block(self.space.mesh, m, self.space.level), self.geometry)

    def element_data(self, m: int):
        tab = self.space.tables
        return kern.element_data(self.points(m), tab.rowstart, tab.n)

    def edges(self, m: int):
        if m in self._edges:
            return self._edges[m]
        E, D, _ = self.element_data(m)
        if self.keep:
            self._edges[m] = (E, D)
        return E, D

    def lumped_mass(self) -> np.ndarray:
        """Quarter of the adjacent fine-tet volume per node."""
        if self._mass is None:
            mass = np.zeros(self.space.n_nodes)
            for m in range(self.space.mesh.n_elements):
                E, D, M = self.element_data(m)
                if self.keep and m not in self._edges:
                    self._edges[m] = (E, D)
                _scatter_add(mass, self.space.gid[m], M)
            self._mass = mass
        return self._mass

    def interface_matrix(self, chunk: int = 8) -> sp.csr_matrix:
        """FEM rows of all interface nodes, shape (n_interface, n_nodes)."""
        if self._iface is not None:
            return self._iface
        space = self.space
        tab = space.tables
        rowmap = np.full(space.n_nodes, -1, dtype=np.int32)
        rowmap[space.interface] = np.arange(len(space.interface), dtype=np.int32)
        shape = (len(space.interface), space.n_nodes)
        total = sp.csr_matrix(shape)
        batch = []
        for m in range(space.mesh.n_elements):
            E, D = self.edges(m)
            batch.append(kern.boundary_triplets(E, D, tab.rowstart, tab.n, space.gid[m], rowmap))
            if len(batch) == chunk or m == space.mesh.n_elements - 1:
                r = np.concatenate([b[0] for b in batch])
                c = np.concatenate([b[1] for b in batch])
                v = np.concatenate([b[2] for b in batch])
                total = total + sp.csr_matrix((v, (r, c)), shape=shape)
                batch = []
        total.sum_duplicates()
        total.sort_indices()
        self._iface = total
        return total


def _run(fn, n: int, workers: int) -> None:
    if workers <= 1:
        for m in range(n):
            fn(m)
    else:
        with ThreadPoolExecutor(workers) as ex:
            list(ex.map(fn, range(n)))


class LevelOperator:
    """Operator of one level: interior stencil source plus FEM interface rows.

    Subclasses provide :meth:`interior_stencils`.
    """

    kind = "abstract"

    def __init__(self, space: LevelSpace, iface_cache: ElementCache, workers: int = 1):
        self.space = space
        self.iface_cache = iface_cache
        self.workers = workers

    @property
    def level(self) -> int:
        return self.space.level

    def interior_stencils(self, m: int) -> np.ndarray:
        raise NotImplementedError

    @property
    def interface_matrix(self) -> sp.csr_matrix:
        return self.iface_cache.interface_matrix()

    def apply(self, u: np.ndarray) -> np.ndarray:
        space = self.space
        tab = space.tables
        v = np.empty_like(u)

        def interior(m):
            kern.apply_interior(self.interior_stencils(m), u, v, space.gid[m], tab.rowstart, tab.n)

        _run(interior, space.mesh.n_elements, self.workers)
        v[space.interface] = self.interface_matrix @ u
        d = space.dirichlet
        v[d] = u[d]
        return v

    def residual(self, u: np.ndarray, f: np.ndarray) -> np.ndarray:
        r = f - self.apply(u)
        r[self.space.dirichlet] = 0.0
        return r


class FEMOperator(LevelOperator):
    """Assembled FEM operator on projected (FEM) or affine (CONS) geometry."""

    def __init__(self, space: LevelSpace, geometry: str = "projected", center: str = "direct",
                 cache: ElementCache | None = None, workers: int = 1):
        cache = cache if cache is not None else ElementCache(space, geometry)
        if cache.geometry != geometry:
            raise AssemblyError("element cache geometry mismatch")
        super().__init__(space, cache, workers)
        self.geometry = geometry
        self.center = center
        self.kind = "fem" if geometry == "projected" else "cons"
        self._nodes = space.tables.ijk[space.tables.interior]

    def interior_stencils(self, m: int) -> np.ndarray:
        E, D = self.iface_cache.edges(m)
        tab = self.space.tables
        return kern.stencils_from_edges(E, D, tab.rowstart, tab.n, self._nodes,
                                        self.center == "direct")


class ConstantOperator(LevelOperator):
    """One stencil per macro element, taken from the affine geometry.

    Exact for the affine mesh family, where all interior stencils of an
    element coincide.  ``require_flat=True`` rejects blended (shell) meshes.
    """

    kind = "const"

    def __init__(self, space: LevelSpace, cache: ElementCache | None = None,
                 require_flat: bool = False, workers: int = 1):
        if require_flat and space.mesh.is_shell:
            raise AssemblyError("constant stencils need an identity blending map")
        cache = cache if cache is not None else ElementCache(space, "affine", keep=False)
        super().__init__(space, cache, workers)
        n_int = space.n_interior
        center = np.array([[1, 1, 1]], dtype=np.int64)
        self.stencils = np.stack([
            sample_stencils(space.mesh, m, space.level, center, "affine")[0]
            for m in range(space.mesh.n_elements)
        ])
        self._n_int = n_int

    def interior_stencils(self, m: int) -> np.ndarray:
        return np.broadcast_to(self.stencils[m], (self._n_int, 15))


def assemble_rhs(f, space: LevelSpace, geometry: str = "projected",
                 cache: ElementCache | None = None) -> np.ndarray:
    """Vertex-quadrature load vector ``f(x_I) * sum_T |T| / 4``; Dirichlet rows 0.

    ``f`` maps an (n, 3) array of points to n values.
    """
    cache = cache if cache is not None else ElementCache(space, geometry, keep=False)
    mass = cache.lumped_mass()
    vals = space.node_values(f, geometry)
    out = vals * mass
    out[space.dirichlet] = 0.0
    return out


def apply_operator(op: LevelOperator, u: np.ndarray) -> np.ndarray:
    return op.apply(u)


def residual(op: LevelOperator, u: np.ndarray, f: np.ndarray) -> np.ndarray:
    return op.residual(u, f)


def assemble_global_matrix(op: LevelOperator) -> sp.csr_matrix:
    """Explicit sparse matrix of ``op`` (small levels only)."""
    space = op.space
    tab = space.tables
    rows, cols, vals = [], [], []
    nodes = tab.ijk[tab.interior]
    for m in range(space.mesh.n_elements):
        S = np.asarray(op.interior_stencils(m))
        g = space.gid[m]
        center = tab.interior
        for w in range(15):
            nb_packed = tab.rowstart[nodes[:, 2] + kern.DK[w], nodes[:, 1] + kern.DJ[w]] + nodes[:, 0] + kern.DI[w]
            rows.append(g[center])
            cols.append(g[nb_packed])
            vals.append(S[:, w])
    A = sp.csr_matrix((np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))),
                      shape=(space.n_nodes, space.n_nodes))
    B = op.interface_matrix.tocoo()
    A = A + sp.csr_matrix((B.data, (space.interface[B.row], B.col)), shape=A.shape)
    d = np.flatnonzero(space.dirichlet)
    A = A + sp.csr_matrix((np.ones(len(d)), (d, d)), shape=A.shape)
    return A.tocsr()
