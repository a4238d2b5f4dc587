"""Global node numbering of one refinement level.

Nodes shared by several macro elements (macro vertices, edges, faces) get
a single global id, so grid functions are plain vectors without mirrored
copies.  Ids are laid out as::

    [macro vertices | edge nodes | face nodes | interior of macro 0 | ...]

and the interior block of every macro element is stored in smoother order.
"""
from __future__ import annotations

from functools import cached_property

import numpy as np

from .mesh import (FACE_INTERIOR, MacroMesh, build_block, interior_node_count,
                   lattice_tables)

__all__ = ["LevelSpace"]


class LevelSpace:
    """Node numbering, boundary flags and ownership on one level."""

    def __init__(self, mesh: MacroMesh, level: int):
        self.mesh = mesh
        self.level = level
        self.tables = lattice_tables(level)
        self.n = self.tables.n
        n = self.n
        ne, nf, nt = len(mesh.edges), len(mesh.faces), mesh.n_elements
        self.n_edge_nodes = n - 1
        self.n_face_nodes = (n - 1) * (n - 2) // 2
        self.n_interior = interior_node_count(level)
        self.edge_start = mesh.n_vertices
        self.face_start = self.edge_start + ne * self.n_edge_nodes
        self.interior_start = self.face_start + nf * self.n_face_nodes
        self.n_nodes = self.interior_start + nt * self.n_interior
        if self.n_nodes >= 2 ** 31:
            raise MemoryError("too many nodes for 32-bit ids")
        self.gid = self._number()

    # -- numbering -----------------------------------------------------------

    def _face_table(self) -> np.ndarray:
        n = self.n
        tri = np.full((n + 1, n + 1), -1, dtype=np.int64)
        c = 0
        for b in range(1, n):
            for a in range(1, n - b):
                tri[b, a] = c
                c += 1
        assert c == self.n_face_nodes
        return tri

    def _number(self) -> np.ndarray:
        mesh, n = self.mesh, self.n
        tri = self._face_table()
        ijk = self.tables.ijk
        w = np.column_stack([n - ijk.sum(axis=1), ijk])     # weights on v0..v3
        nz = w > 0
        support = nz.sum(axis=1)
        interior_mask = support == 4
        gid = np.empty((mesh.n_elements, len(ijk)), dtype=np.int32)
        local_edges = [(0, 1), (0, 2), (0, 3), (1, 2), (1, 3), (2, 3)]
        local_faces = [(1, 2, 3), (0, 2, 3), (0, 1, 3), (0, 1, 2)]
        # node masks per local primitive do not depend on the element
        vmask = [np.flatnonzero(w[:, a] == n) for a in range(4)]
        emask = [np.flatnonzero((support == 2) & nz[:, a] & nz[:, b]) for a, b in local_edges]
        fmask = [np.flatnonzero((support == 3) & nz[:, list(f)].all(axis=1)) for f in local_faces]
        interior_pos = np.flatnonzero(interior_mask)
        for m, tet in enumerate(mesh.tets):
            row = gid[m]
            for a in range(4):
                row[vmask[a]] = tet[a]
            for le, (a, b) in enumerate(local_edges):
                eid = mesh.tet_edges[m, le]
                hi = a if tet[a] > tet[b] else b
                t = w[emask[le], hi]
                row[emask[le]] = self.edge_start + eid * self.n_edge_nodes + t - 1
            for lf, f in enumerate(local_faces):
                fid = mesh.tet_faces[m, lf]
                order = sorted(f, key=lambda x: tet[x])
                wa, wb = w[fmask[lf], order[0]], w[fmask[lf], order[1]]
                row[fmask[lf]] = self.face_start + fid * self.n_face_nodes + tri[wb, wa]
            row[interior_pos] = self.interior_start + m * self.n_interior + np.arange(self.n_interior)
        return gid

    # -- node sets -------------------------------------------------------------

    @cached_property
    def dirichlet(self) -> np.ndarray:
        """Boolean mask of nodes on the domain boundary."""
        mesh = self.mesh
        mask = np.zeros(self.n_nodes, dtype=bool)
        bfaces = np.flatnonzero(mesh.boundary_face_tag != FACE_INTERIOR)
        bverts = np.unique(mesh.faces[bfaces])
        mask[bverts] = True
        fe = np.sort(mesh.faces[bfaces][:, [(0, 1), (0, 2), (1, 2)]].reshape(-1, 2), axis=1)
        edge_index = {tuple(e): i for i, e in enumerate(mesh.edges)}
        for e in {tuple(x) for x in fe}:
            s = self.edge_start + edge_index[e] * self.n_edge_nodes
            mask[s:s + self.n_edge_nodes] = True
        for f in bfaces:
            s = self.face_start + f * self.n_face_nodes
            mask[s:s + self.n_face_nodes] = True
        return mask

    @cached_property
    def interface(self) -> np.ndarray:
        """Ids of free nodes on macro vertices, edges and faces, ascending."""
        ids = np.arange(self.interior_start)
        return ids[~self.dirichlet[:self.interior_start]]

    @cached_property
    def owner(self) -> np.ndarray:
        """Smallest macro element id containing each node."""
        owner = np.full(self.n_nodes, np.iinfo(np.int32).max, dtype=np.int32)
        for m in range(self.mesh.n_elements - 1, -1, -1):
            owner[self.gid[m]] = m
        return owner

    def interior_slice(self, m: int) -> slice:
        s = self.interior_start + m * self.n_interior
        return slice(s, s + self.n_interior)

    def free_mask(self) -> np.ndarray:
        return ~self.dirichlet

    # -- node values ------------------------------------------------------------

    def node_values(self, func, geometry: str = "projected") -> np.ndarray:
        """Evaluate ``func(points)`` at all nodes in the chosen geometry."""
        out = np.empty(self.n_nodes)
        for m in range(self.mesh.n_elements):
            blk = build_block(self.mesh, m, self.level)
            pts = blk.coords_blended if geometry == "projected" else blk.coords_affine
            out[self.gid[m]] = func(pts)
        return out

    def node_coordinates(self, geometry: str = "projected") -> np.ndarray:
        out = np.empty((self.n_nodes, 3))
        for m in range(self.mesh.n_elements):
            blk = build_block(self.mesh, m, self.level)
            out[self.gid[m]] = blk.coords_blended if geometry == "projected" else blk.coords_affine
        return out

    def zeros(self) -> np.ndarray:
        return np.zeros(self.n_nodes)
