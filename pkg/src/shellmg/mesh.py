"""Macro meshes of the spherical shell and the structured per-element lattice.

Every macro tetrahedron carries a structured lattice of nodes ``(i, j, k)``
with ``i + j + k <= N`` and ``N = 2**(level + 2)``.  Lattice node ``(i, j, k)``
has barycentric coordinates ``(N - i - j - k, i, j, k) / N`` with respect to
the macro vertices ``(v0, v1, v2, v3)``.  The fine tetrahedra are never
stored; they are enumerated from the regular (Bey) refinement pattern, see
:data:`SUBTET_TEMPLATES`.
"""
from __future__ import annotations

import itertools
from dataclasses import dataclass, field
from enum import IntEnum
from typing import Iterator, NamedTuple

import numpy as np

__all__ = [
    "MacroMesh", "NodeIndex", "StructuredBlock", "Direction", "DIRECTIONS",
    "OFFSETS", "OPPOSITE", "POSITIVE", "generate_shell_mesh", "interior_node_count",
    "lattice_size", "build_block", "blend_point", "neighbor", "index_set",
    "lattice_tables", "MeshError", "read_mesh", "write_mesh", "two_element_mesh",
    "single_element_mesh",
]


class MeshError(ValueError):
    """Raised when a macro mesh cannot be constructed or parsed."""


# ---------------------------------------------------------------------------
# Cardinal directions of the 15-point stencil
# ---------------------------------------------------------------------------

class Direction(IntEnum):
    """Cardinal directions; first letter is the plane (bottom, middle, top)."""

    be = 0
    bc = 1
    bnw = 2
    bn = 3
    ms = 4
    mse = 5
    mw = 6
    mc = 7
    me = 8
    mnw = 9
    mn = 10
    ts = 11
    tse = 12
    tw = 13
    tc = 14


DIRECTIONS = tuple(Direction)

#: lattice offsets (di, dj, dk) per direction, indexed by ``Direction``
OFFSETS = np.array([
    (1, 0, -1),    # be
    (0, 0, -1),    # bc
    (-1, 1, -1),   # bnw
    (0, 1, -1),    # bn
    (0, -1, 0),    # ms
    (1, -1, 0),    # mse
    (-1, 0, 0),    # mw
    (0, 0, 0),     # mc
    (1, 0, 0),     # me
    (-1, 1, 0),    # mnw
    (0, 1, 0),     # mn
    (0, -1, 1),    # ts
    (1, -1, 1),    # tse
    (-1, 0, 1),    # tw
    (0, 0, 1),     # tc
], dtype=np.int64)

OPPOSITE = np.array([int(np.flatnonzero((OFFSETS == -OFFSETS[w]).all(axis=1))[0])
                     for w in range(15)], dtype=np.int64)

#: the seven edge directions used to store one weight per fine edge
POSITIVE = np.array([Direction.me, Direction.mn, Direction.mnw, Direction.tc,
                     Direction.tw, Direction.ts, Direction.tse], dtype=np.int64)

# position of each direction among POSITIVE (or of its opposite), and sign
EDGE_SLOT = np.full(15, -1, dtype=np.int64)
EDGE_IS_POSITIVE = np.zeros(15, dtype=np.bool_)
for _slot, _w in enumerate(POSITIVE):
    EDGE_SLOT[_w] = _slot
    EDGE_SLOT[OPPOSITE[_w]] = _slot
    EDGE_IS_POSITIVE[_w] = True


def _subtet_templates() -> np.ndarray:
    """Vertex offsets of the six fine tetrahedron shapes anchored at ``p``.

    Upward tets exist for ``i+j+k <= N-1``, the four octahedron tets for
    ``i+j+k <= N-2`` and the downward tet for ``i+j+k <= N-3``.  The
    octahedron is cut along its (1, -1, 1) diagonal, which is the diagonal
    of Bey's refinement for vertex order (v0, v1, v2, v3).
    """
    e0 = (0, 0, 0)
    e1, e2, e3 = (1, 0, 0), (0, 1, 0), (0, 0, 1)
    e12, e13, e23, e123 = (1, 1, 0), (1, 0, 1), (0, 1, 1), (1, 1, 1)
    # diagonal P=e2 -> Q=e13, equator cycle e1, e12, e23, e3
    ring = [e1, e12, e23, e3]
    octa = [(e2, e13, ring[n], ring[(n + 1) % 4]) for n in range(4)]
    return np.array([(e0, e1, e2, e3), *octa, (e12, e13, e23, e123)], dtype=np.int64)


SUBTET_TEMPLATES = _subtet_templates()
#: largest admissible ``i+j+k`` of the anchor, as ``N - SUBTET_SLACK``
SUBTET_SLACK = np.array([1, 2, 2, 2, 2, 3], dtype=np.int64)


# ---------------------------------------------------------------------------
# Counting and indexing
# ---------------------------------------------------------------------------

def interior_node_count(level: int) -> int:
    """Number of volume-interior lattice nodes of one macro element."""
    if level < 0:
        raise ValueError("level must be non-negative")
    n = 2 ** (level + 2)
    return (n - 3) * (n - 2) * (n - 1) // 6


def lattice_size(level: int) -> int:
    """Number of nodes of the full lattice ``i + j + k <= N``."""
    n = 2 ** (level + 2)
    return (n + 1) * (n + 2) * (n + 3) // 6


class NodeIndex(NamedTuple):
    i: int
    j: int
    k: int
    level: int

    @property
    def n(self) -> int:
        return 2 ** (self.level + 2)

    def in_lattice(self) -> bool:
        return min(self.i, self.j, self.k) >= 0 and self.i + self.j + self.k <= self.n

    def is_interior(self) -> bool:
        return min(self.i, self.j, self.k) > 0 and self.i + self.j + self.k < self.n


def neighbor(idx: NodeIndex, w: Direction | int) -> NodeIndex:
    """Lattice node reached from ``idx`` in direction ``w``.

    Raises
    ------
    IndexError
        If the neighbor lies outside the lattice of the macro element.
    """
    di, dj, dk = OFFSETS[int(w)]
    nb = NodeIndex(idx.i + int(di), idx.j + int(dj), idx.k + int(dk), idx.level)
    if not nb.in_lattice():
        raise IndexError(f"neighbor {tuple(nb[:3])} of {tuple(idx[:3])} is outside the lattice")
    return nb


def index_set(level: int) -> Iterator[NodeIndex]:
    """Interior nodes in smoother order: i fastest, then j, then k."""
    n = 2 ** (level + 2)
    for k in range(1, n - 2):
        for j in range(1, n - k - 1):
            for i in range(1, n - k - j):
                yield NodeIndex(i, j, k, level)


@dataclass(frozen=True)
class LatticeTables:
    """Packed storage of the lattice ``i + j + k <= N``, i fastest."""

    n: int
    rowstart: np.ndarray   # (N+1, N+1) packed index of (0, j, k), -1 if absent
    ijk: np.ndarray        # (size, 3)
    interior: np.ndarray   # packed indices of interior nodes, smoother order

    @property
    def size(self) -> int:
        return len(self.ijk)

    def packed(self, i, j, k):
        return self.rowstart[k, j] + i


_TABLE_CACHE: dict[int, LatticeTables] = {}


def lattice_tables(level: int) -> LatticeTables:
    n = 2 ** (level + 2)
    if n in _TABLE_CACHE:
        return _TABLE_CACHE[n]
    rowstart = np.full((n + 1, n + 1), -1, dtype=np.int64)
    ks, js, lens = [], [], []
    count = 0
    for k in range(n + 1):
        for j in range(n + 1 - k):
            rowstart[k, j] = count
            count += n + 1 - k - j
            ks.append(k)
            js.append(j)
            lens.append(n + 1 - k - j)
    lens = np.array(lens)
    kk = np.repeat(ks, lens)
    jj = np.repeat(js, lens)
    starts = np.repeat(np.cumsum(lens) - lens, lens)
    ii = np.arange(count) - starts
    ijk = np.stack([ii, jj, kk], axis=1).astype(np.int64)
    s = ijk.sum(axis=1)
    interior = np.flatnonzero((ijk > 0).all(axis=1) & (s < n))
    # packed order is already k-outer, j-middle, i-inner
    tables = LatticeTables(n, rowstart, ijk, interior)
    _TABLE_CACHE[n] = tables
    return tables


# ---------------------------------------------------------------------------
# Macro mesh
# ---------------------------------------------------------------------------

FACE_INTERIOR, FACE_INNER, FACE_OUTER, FACE_BOUNDARY = 0, 1, 2, 3


@dataclass(frozen=True)
class MacroMesh:
    """Coarse tetrahedral mesh whose elements are the macro elements.

    For shell meshes (``r1``/``r2`` set) the blending map rescales every
    point radially to the barycentric interpolation of the vertex radii.
    Other meshes are polyhedral and use the identity as blending map.
    """

    vertices: np.ndarray
    tets: np.ndarray
    radius: np.ndarray
    r1: float | None = None
    r2: float | None = None
    _topology: dict = field(default_factory=dict, repr=False, compare=False)

    @property
    def is_shell(self) -> bool:
        return self.r1 is not None

    @property
    def n_elements(self) -> int:
        return len(self.tets)

    @property
    def n_vertices(self) -> int:
        return len(self.vertices)

    def _build_topology(self):
        if self._topology:
            return self._topology
        tets = self.tets
        local_edges = list(itertools.combinations(range(4), 2))
        local_faces = [(1, 2, 3), (0, 2, 3), (0, 1, 3), (0, 1, 2)]
        e_all = np.sort(tets[:, local_edges].reshape(-1, 2), axis=1)
        edges, e_inv = np.unique(e_all, axis=0, return_inverse=True)
        f_all = np.sort(tets[:, local_faces].reshape(-1, 3), axis=1)
        faces, f_inv, f_cnt = np.unique(f_all, axis=0, return_inverse=True, return_counts=True)
        boundary = f_cnt == 1
        tag = np.where(boundary, FACE_BOUNDARY, FACE_INTERIOR)
        if self.is_shell:
            rad = self.radius[faces]
            on_inner = boundary & np.isclose(rad, self.r1).all(axis=1)
            on_outer = boundary & np.isclose(rad, self.r2).all(axis=1)
            if np.any(boundary & ~(on_inner | on_outer)):
                raise MeshError("boundary face not on a shell surface")
            tag = np.where(on_inner, FACE_INNER, np.where(on_outer, FACE_OUTER, tag))
        self._topology.update(
            edges=edges, tet_edges=e_inv.reshape(-1, 6),
            faces=faces, tet_faces=f_inv.reshape(-1, 4), face_tag=tag,
        )
        return self._topology

    @property
    def edges(self) -> np.ndarray:
        return self._build_topology()["edges"]

    @property
    def faces(self) -> np.ndarray:
        return self._build_topology()["faces"]

    @property
    def tet_edges(self) -> np.ndarray:
        """Global edge id of local edges (01, 02, 03, 12, 13, 23)."""
        return self._build_topology()["tet_edges"]

    @property
    def tet_faces(self) -> np.ndarray:
        """Global face id of the face opposite local vertex 0..3."""
        return self._build_topology()["tet_faces"]

    @property
    def boundary_face_tag(self) -> np.ndarray:
        return self._build_topology()["face_tag"]

    def volumes(self) -> np.ndarray:
        v = self.vertices[self.tets]
        d = v[:, 1:] - v[:, :1]
        return np.linalg.det(d) / 6.0

    def max_edge_length(self) -> float:
        e = self.edges
        return float(np.linalg.norm(self.vertices[e[:, 0]] - self.vertices[e[:, 1]], axis=1).max())

    def check(self) -> None:
        if np.any(self.volumes() <= 0):
            raise MeshError("macro element with non-positive volume")
        self._build_topology()


def _icosahedron():
    phi = (1 + 5 ** 0.5) / 2
    v = np.array([
        (-1, phi, 0), (1, phi, 0), (-1, -phi, 0), (1, -phi, 0),
        (0, -1, phi), (0, 1, phi), (0, -1, -phi), (0, 1, -phi),
        (phi, 0, -1), (phi, 0, 1), (-phi, 0, -1), (-phi, 0, 1),
    ], dtype=float)
    f = np.array([
        (0, 11, 5), (0, 5, 1), (0, 1, 7), (0, 7, 10), (0, 10, 11),
        (1, 5, 9), (5, 11, 4), (11, 10, 2), (10, 7, 6), (7, 1, 8),
        (3, 9, 4), (3, 4, 2), (3, 2, 6), (3, 6, 8), (3, 8, 9),
        (4, 9, 5), (2, 4, 11), (6, 2, 10), (8, 6, 7), (9, 8, 1),
    ], dtype=np.int64)
    return v / np.linalg.norm(v, axis=1, keepdims=True), f


def _refine_sphere(v: np.ndarray, f: np.ndarray):
    verts = list(v)
    cache: dict[tuple[int, int], int] = {}

    def mid(a, b):
        key = (min(a, b), max(a, b))
        if key not in cache:
            p = verts[a] + verts[b]
            verts.append(p / np.linalg.norm(p))
            cache[key] = len(verts) - 1
        return cache[key]

    out = []
    for a, b, c in f:
        ab, bc, ca = mid(a, b), mid(b, c), mid(c, a)
        out += [(a, ab, ca), (b, bc, ab), (c, ca, bc), (ab, bc, ca)]
    return np.array(verts), np.array(out, dtype=np.int64)


def generate_shell_mesh(r1: float = 0.5, r2: float = 1.0, t: int = 0, n_r: int = 1) -> MacroMesh:
    """Icosahedral shell mesh with ``60 * 4**t * n_r`` macro tetrahedra.

    The sphere triangulation is extruded into ``n_r`` radial slabs and every
    prism is cut into three tetrahedra.  The quad-face diagonals run from the
    lower-id bottom vertex to the higher-id top vertex, which makes the split
    conforming between neighbouring prisms.
    """
    if not 0 < r1 < r2:
        raise MeshError("need 0 < r1 < r2")
    if t < 0 or n_r < 1:
        raise MeshError("need t >= 0 and n_r >= 1")
    sv, sf = _icosahedron()
    for _ in range(t):
        sv, sf = _refine_sphere(sv, sf)
    ns = len(sv)
    radii = r1 + (r2 - r1) * np.arange(n_r + 1) / n_r
    radii[-1] = r2
    vertices = np.concatenate([r * sv for r in radii])
    radius = np.repeat(radii, ns)

    tets = []
    for layer in range(n_r):
        lo, hi = layer * ns, (layer + 1) * ns
        for tri in sf:
            a, b, c = sorted(int(x) for x in tri)
            A, B, C = a + lo, b + lo, c + lo
            A2, B2, C2 = a + hi, b + hi, c + hi
            tets += [(A, B, C, C2), (A, B, B2, C2), (A, A2, B2, C2)]
    tets = np.array(tets, dtype=np.int64)
    _check_prism_split(tets, radius)
    tets = _orient(vertices, tets)
    mesh = MacroMesh(vertices, tets, radius, float(r1), float(r2))
    mesh.check()
    if mesh.n_elements != 60 * 4 ** t * n_r:
        raise MeshError("unexpected element count")
    return mesh


def _check_prism_split(tets: np.ndarray, radius: np.ndarray) -> None:
    # every interior face must be shared by exactly two tets
    faces = np.sort(tets[:, [(1, 2, 3), (0, 2, 3), (0, 1, 3), (0, 1, 2)]].reshape(-1, 3), axis=1)
    _, counts = np.unique(faces, axis=0, return_counts=True)
    if counts.max() > 2:
        raise MeshError("non-conforming prism split")
    bfaces = np.unique(faces, axis=0, return_counts=True)
    on_shell = np.ptp(radius[bfaces[0][bfaces[1] == 1]], axis=1) == 0
    if not on_shell.all():
        raise MeshError("non-conforming prism split")


def _orient(vertices: np.ndarray, tets: np.ndarray) -> np.ndarray:
    v = vertices[tets]
    det = np.linalg.det(v[:, 1:] - v[:, :1])
    out = tets.copy()
    neg = det < 0
    out[neg, 2], out[neg, 3] = tets[neg, 3], tets[neg, 2]
    return out


def two_element_mesh() -> MacroMesh:
    """Two affine tetrahedra sharing one face (identity blending)."""
    v = np.array([(0, 0, 0), (1, 0, 0), (0, 1, 0), (0, 0, 1), (0.8, 0.9, 0.7)], dtype=float)
    tets = _orient(v, np.array([(0, 1, 2, 3), (1, 2, 3, 4)], dtype=np.int64))
    mesh = MacroMesh(v, tets, np.linalg.norm(v, axis=1))
    mesh.check()
    return mesh


def single_element_mesh(vertices=None) -> MacroMesh:
    """One affine macro tetrahedron, by default the reference element."""
    v = np.array(vertices if vertices is not None else
                 [(0, 0, 0), (1, 0, 0), (0, 1, 0), (0, 0, 1)], dtype=float)
    mesh = MacroMesh(v, _orient(v, np.array([(0, 1, 2, 3)], dtype=np.int64)),
                     np.linalg.norm(v, axis=1))
    mesh.check()
    return mesh


# ---------------------------------------------------------------------------
# Blending and blocks
# ---------------------------------------------------------------------------

def blend_point(mesh: MacroMesh, macro_id: int, p_affine, ref_coords) -> np.ndarray:
    """Map an affine point of a macro element onto its spherical layer.

    ``ref_coords`` are the barycentric coordinates of ``p_affine``.  The
    point is scaled radially to the barycentric interpolation of the four
    vertex radii.  Non-shell meshes use the identity.
    """
    p = np.asarray(p_affine, dtype=float)
    if not mesh.is_shell:
        return p.copy()
    lam = np.asarray(ref_coords, dtype=float)
    rho = lam @ mesh.radius[mesh.tets[macro_id]]
    norm = np.linalg.norm(p, axis=-1)
    if np.any(norm == 0):
        raise ValueError("cannot blend the origin")
    return p * (rho / norm)[..., None] if p.ndim > 1 else p * (rho / norm)


NODE_VERTEX, NODE_EDGE, NODE_FACE, NODE_INTERIOR = 0, 1, 2, 3


@dataclass(frozen=True)
class StructuredBlock:
    macro_id: int
    level: int
    ijk: np.ndarray
    coords_affine: np.ndarray
    coords_blended: np.ndarray
    node_class: np.ndarray

    @property
    def n(self) -> int:
        return 2 ** (self.level + 2)


def barycentric(ijk: np.ndarray, n: int) -> np.ndarray:
    ijk = np.asarray(ijk)
    return np.column_stack([n - ijk.sum(axis=1), ijk]) / n


def build_block(mesh: MacroMesh, macro_id: int, level: int) -> StructuredBlock:
    tab = lattice_tables(level)
    lam = barycentric(tab.ijk, tab.n)
    affine = lam @ mesh.vertices[mesh.tets[macro_id]]
    blended = blend_point(mesh, macro_id, affine, lam)
    support = (np.column_stack([tab.n - tab.ijk.sum(axis=1), tab.ijk]) > 0).sum(axis=1)
    node_class = (support - 1).astype(np.int8)
    return StructuredBlock(macro_id, level, tab.ijk, affine, blended, node_class)


# ---------------------------------------------------------------------------
# Plain-text serialization
# ---------------------------------------------------------------------------

def write_mesh(mesh: MacroMesh, path) -> None:
    r1 = float(mesh.r1) if mesh.is_shell else 0.0
    r2 = float(mesh.r2) if mesh.is_shell else 0.0
    with open(path, "w") as fh:
        fh.write(f"shellmesh v1 {r1!r} {r2!r}\n")
        for (x, y, z), r in zip(mesh.vertices.tolist(), mesh.radius.tolist()):
            fh.write(f"v {x!r} {y!r} {z!r} {r!r}\n")
        for a, b, c, d in mesh.tets:
            fh.write(f"t {a} {b} {c} {d}\n")


def read_mesh(path) -> MacroMesh:
    verts, rad, tets = [], [], []
    with open(path) as fh:
        header = fh.readline().split()
        if header[:2] != ["shellmesh", "v1"] or len(header) != 4:
            raise MeshError(f"{path}: not a shellmesh v1 file")
        r1, r2 = float(header[2]), float(header[3])
        for line in fh:
            parts = line.split()
            if not parts:
                continue
            if parts[0] == "v":
                verts.append([float(x) for x in parts[1:4]])
                rad.append(float(parts[4]))
            elif parts[0] == "t":
                tets.append([int(x) for x in parts[1:5]])
            else:
                raise MeshError(f"{path}: bad record {parts[0]!r}")
    shell = r2 > 0
    mesh = MacroMesh(np.array(verts), np.array(tets, dtype=np.int64), np.array(rad),
                     r1 if shell else None, r2 if shell else None)
    mesh.check()
    return mesh
