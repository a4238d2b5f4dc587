"""Reference implementations used only by the tests.

They deliberately avoid the package's lattice tables and kernels: fine
tetrahedra come from recursive red refinement in physical coordinates, and
nodes are matched by their coordinates.
"""
import numpy as np
import scipy.sparse as sp


def red_refine(tet):
    """Eight children of one tetrahedron, corner children first."""
    x0, x1, x2, x3 = tet
    x01, x02, x03 = (x0 + x1) / 2, (x0 + x2) / 2, (x0 + x3) / 2
    x12, x13, x23 = (x1 + x2) / 2, (x1 + x3) / 2, (x2 + x3) / 2
    return [(x0, x01, x02, x03), (x01, x1, x12, x13), (x02, x12, x2, x23), (x03, x13, x23, x3),
            (x01, x02, x03, x13), (x01, x02, x12, x13), (x02, x03, x13, x23), (x02, x12, x13, x23)]


def fine_tets(corners, times):
    tets = [tuple(np.asarray(c, dtype=float) for c in corners)]
    for _ in range(times):
        tets = [c for t in tets for c in red_refine(t)]
    return np.array([np.stack(t) for t in tets])


def shell_map(points, corners, radii):
    """Radial rescaling to the barycentric interpolation of the corner radii."""
    T = np.column_stack([corners[1] - corners[0], corners[2] - corners[0], corners[3] - corners[0]])
    lam123 = np.linalg.solve(T, (points - corners[0]).T).T
    lam = np.column_stack([1 - lam123.sum(axis=1), lam123])
    rho = lam @ radii
    return points * (rho / np.linalg.norm(points, axis=1))[:, None]


def batch_stiffness(P):
    """Stiffness matrices of a stack of tetrahedra (m, 4, 3) -> (m, 4, 4)."""
    D = P[:, 1:] - P[:, :1]
    vol = np.abs(np.linalg.det(D)) / 6.0
    Ginv = np.linalg.inv(D)                     # columns: gradients of l1..l3
    G = np.concatenate([-Ginv.sum(axis=2, keepdims=True), Ginv], axis=2)   # (m, 3, 4)
    return vol[:, None, None] * np.einsum("mda,mdb->mab", G, G)


def _key(x, scale=1e9):
    return np.round(np.asarray(x) * scale).astype(np.int64)


def global_matrix(mesh, level, space, blended=True):
    """Explicit stiffness matrix in the package's node numbering, Dirichlet rows identity."""
    affine_xyz = space.node_coordinates("affine")
    lookup = {tuple(k): g for g, k in enumerate(_key(affine_xyz))}
    rows, cols, vals = [], [], []
    for m, tet in enumerate(mesh.tets):
        corners = mesh.vertices[tet]
        F = fine_tets(corners, level + 2)
        flat = F.reshape(-1, 3)
        ids = np.array([lookup[tuple(k)] for k in _key(flat)]).reshape(-1, 4)
        X = shell_map(flat, corners, mesh.radius[tet]) if blended and mesh.is_shell else flat
        K = batch_stiffness(X.reshape(-1, 4, 3))
        rows.append(np.repeat(ids, 4, axis=1).ravel())
        cols.append(np.tile(ids, (1, 4)).ravel())
        vals.append(K.ravel())
    A = sp.csr_matrix((np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))),
                      shape=(space.n_nodes, space.n_nodes)).tolil()
    for g in np.flatnonzero(space.dirichlet):
        A.rows[g] = [g]
        A.data[g] = [1.0]
    return A.tocsr()


def gauss_seidel(A, u, f, order):
    """Plain Gauss-Seidel on an explicit CSR matrix in the given row order."""
    A = A.tocsr()
    u = u.copy()
    for g in order:
        lo, hi = A.indptr[g], A.indptr[g + 1]
        cols, vals = A.indices[lo:hi], A.data[lo:hi]
        diag = vals[cols == g].sum()
        u[g] = (f[g] - vals[cols != g] @ u[cols[cols != g]]) / diag
    return u


def poly_value(coeffs, exps, i, j, k, n):
    """Nested Horner-free evaluation: sum of c * x**l * y**m * z**n with Python floats."""
    x, y, z = i / n, j / n, k / n
    return sum(float(c) * x ** int(l) * y ** int(mm) * z ** int(nn)
               for c, (l, mm, nn) in zip(coeffs, exps))
