"""Numba kernels for the lattice loops.

All kernels work on one macro element at a time.  ``gidm`` maps packed
lattice positions of the element to global node ids and ``rowstart[k, j]``
is the packed position of lattice node ``(0, j, k)``.
"""
import numba as nb
import numpy as np

from .mesh import (EDGE_IS_POSITIVE, EDGE_SLOT, OFFSETS, POSITIVE,
                   SUBTET_SLACK, SUBTET_TEMPLATES, Direction)

_opts = {"nogil": True, "cache": True}

MC = int(Direction.mc)
MW = int(Direction.mw)
DI = np.ascontiguousarray(OFFSETS[:, 0])
DJ = np.ascontiguousarray(OFFSETS[:, 1])
DK = np.ascontiguousarray(OFFSETS[:, 2])
W1 = np.array([Direction.me, Direction.mnw, Direction.mn, Direction.ts,
               Direction.tse, Direction.tw], dtype=np.int64)
W2 = np.array([Direction.tc, Direction.bc, Direction.be, Direction.bnw,
               Direction.bn, Direction.ms, Direction.mse], dtype=np.int64)

# offset -> direction lookup, key (di+1)*9 + (dj+1)*3 + (dk+1)
DIRMAP = np.full(27, -1, dtype=np.int64)
for _w, (_a, _b, _c) in enumerate(OFFSETS):
    DIRMAP[(_a + 1) * 9 + (_b + 1) * 3 + (_c + 1)] = _w

PAIR_A = np.array([0, 0, 0, 1, 1, 2], dtype=np.int64)
PAIR_B = np.array([1, 2, 3, 2, 3, 3], dtype=np.int64)
PAIR_SLOT = np.empty((6, 6), dtype=np.int64)
PAIR_BASE = np.empty((6, 6), dtype=np.int64)   # local vertex the positive edge starts at
for _t, _tpl in enumerate(SUBTET_TEMPLATES):
    for _p in range(6):
        _d = _tpl[PAIR_B[_p]] - _tpl[PAIR_A[_p]]
        _w = DIRMAP[(_d[0] + 1) * 9 + (_d[1] + 1) * 3 + (_d[2] + 1)]
        PAIR_SLOT[_t, _p] = EDGE_SLOT[_w]
        PAIR_BASE[_t, _p] = PAIR_A[_p] if EDGE_IS_POSITIVE[_w] else PAIR_B[_p]
TEMPLATES = np.ascontiguousarray(SUBTET_TEMPLATES)
SLACK = np.ascontiguousarray(SUBTET_SLACK)
POS = np.ascontiguousarray(POSITIVE)
SLOT = np.ascontiguousarray(EDGE_SLOT)
ISPOS = np.ascontiguousarray(EDGE_IS_POSITIVE)


@nb.njit(inline="always")
def _stiffness(x, K, g):
    """Fill ``K`` with |T| grad(l_a).grad(l_b); returns |T|.  ``g`` is (4, 3) scratch."""
    d1x = x[1, 0] - x[0, 0]; d1y = x[1, 1] - x[0, 1]; d1z = x[1, 2] - x[0, 2]
    d2x = x[2, 0] - x[0, 0]; d2y = x[2, 1] - x[0, 1]; d2z = x[2, 2] - x[0, 2]
    d3x = x[3, 0] - x[0, 0]; d3y = x[3, 1] - x[0, 1]; d3z = x[3, 2] - x[0, 2]
    g[1, 0] = d2y * d3z - d2z * d3y; g[1, 1] = d2z * d3x - d2x * d3z; g[1, 2] = d2x * d3y - d2y * d3x
    g[2, 0] = d3y * d1z - d3z * d1y; g[2, 1] = d3z * d1x - d3x * d1z; g[2, 2] = d3x * d1y - d3y * d1x
    g[3, 0] = d1y * d2z - d1z * d2y; g[3, 1] = d1z * d2x - d1x * d2z; g[3, 2] = d1x * d2y - d1y * d2x
    g[0, 0] = -(g[1, 0] + g[2, 0] + g[3, 0])
    g[0, 1] = -(g[1, 1] + g[2, 1] + g[3, 1])
    g[0, 2] = -(g[1, 2] + g[2, 2] + g[3, 2])
    det = d1x * g[1, 0] + d1y * g[1, 1] + d1z * g[1, 2]
    # rows of g are det * grad(l_a), so |T| g_a.g_b / det**2 = (.) / (36 |T|)
    vol = abs(det) / 6.0
    s = 1.0 / (36.0 * vol)
    for a in range(4):
        for b in range(a, 4):
            v = s * (g[a, 0] * g[b, 0] + g[a, 1] * g[b, 1] + g[a, 2] * g[b, 2])
            K[a, b] = v
            K[b, a] = v
    return vol


@nb.njit(**_opts)
def local_stiffness_kernel(x):
    K = np.empty((4, 4))
    vol = _stiffness(x, K, np.empty((4, 3)))
    return K, vol


@nb.njit(**_opts)
def element_data(coords, rowstart, n):
    """Edge weights, diagonal and lumped mass accumulated over all fine tets.

    Returns ``E`` (7, size) with the weight of edge ``p -> p + POSITIVE[s]``
    stored at ``E[s, p]``, ``D`` the diagonal contributions and ``M`` one
    quarter of the adjacent volume per node.
    """
    size = coords.shape[0]
    E = np.zeros((7, size))
    D = np.zeros(size)
    M = np.zeros(size)
    K = np.empty((4, 4))
    x = np.empty((4, 3))
    gs = np.empty((4, 3))
    pv = np.empty(4, dtype=np.int64)
    for k in range(n + 1):
        for j in range(n + 1 - k):
            for i in range(n + 1 - k - j):
                s = i + j + k
                for t in range(6):
                    if s > n - SLACK[t]:
                        continue
                    for v in range(4):
                        p = rowstart[k + TEMPLATES[t, v, 2], j + TEMPLATES[t, v, 1]] + i + TEMPLATES[t, v, 0]
                        pv[v] = p
                        x[v, 0] = coords[p, 0]
                        x[v, 1] = coords[p, 1]
                        x[v, 2] = coords[p, 2]
                    vol = _stiffness(x, K, gs)
                    for v in range(4):
                        D[pv[v]] += K[v, v]
                        M[pv[v]] += 0.25 * vol
                    for q in range(6):
                        E[PAIR_SLOT[t, q], pv[PAIR_BASE[t, q]]] += K[PAIR_A[q], PAIR_B[q]]
    return E, D, M


@nb.njit(**_opts)
def node_stencils(coords, rowstart, n, nodes, direct_center):
    """Assemble the 15-point stencil at each lattice node of ``nodes``.

    Only fine tets of this macro element contribute, so the result is the
    complete stencil for interior nodes and a partial one elsewhere.
    """
    m = nodes.shape[0]
    S = np.zeros((m, 15))
    K = np.empty((4, 4))
    x = np.empty((4, 3))
    gs = np.empty((4, 3))
    for q in range(m):
        ni = nodes[q, 0]; nj = nodes[q, 1]; nk = nodes[q, 2]
        center = 0.0
        for t in range(6):
            for v in range(4):
                ai = ni - TEMPLATES[t, v, 0]
                aj = nj - TEMPLATES[t, v, 1]
                ak = nk - TEMPLATES[t, v, 2]
                if ai < 0 or aj < 0 or ak < 0 or ai + aj + ak > n - SLACK[t]:
                    continue
                for b in range(4):
                    p = rowstart[ak + TEMPLATES[t, b, 2], aj + TEMPLATES[t, b, 1]] + ai + TEMPLATES[t, b, 0]
                    x[b, 0] = coords[p, 0]
                    x[b, 1] = coords[p, 1]
                    x[b, 2] = coords[p, 2]
                _stiffness(x, K, gs)
                center += K[v, v]
                for b in range(4):
                    if b == v:
                        continue
                    di = TEMPLATES[t, b, 0] - TEMPLATES[t, v, 0]
                    dj = TEMPLATES[t, b, 1] - TEMPLATES[t, v, 1]
                    dk = TEMPLATES[t, b, 2] - TEMPLATES[t, v, 2]
                    w = DIRMAP[(di + 1) * 9 + (dj + 1) * 3 + (dk + 1)]
                    S[q, w] += K[v, b]
        if direct_center:
            S[q, MC] = center
        else:
            acc = 0.0
            for w in range(15):
                if w != MC:
                    acc += S[q, w]
            S[q, MC] = -acc
    return S


@nb.njit(**_opts)
def stencils_from_edges(E, D, rowstart, n, nodes, direct_center):
    """Expand stored edge weights into 15-point stencils at ``nodes``."""
    m = nodes.shape[0]
    S = np.zeros((m, 15))
    for q in range(m):
        i = nodes[q, 0]; j = nodes[q, 1]; k = nodes[q, 2]
        p = rowstart[k, j] + i
        acc = 0.0
        for w in range(15):
            if w == MC:
                continue
            ni = i + DI[w]; nj = j + DJ[w]; nk = k + DK[w]
            if ni < 0 or nj < 0 or nk < 0 or ni + nj + nk > n:
                continue
            if ISPOS[w]:
                val = E[SLOT[w], p]
            else:
                val = E[SLOT[w], rowstart[nk, nj] + ni]
            S[q, w] = val
            acc += val
        S[q, MC] = D[p] if direct_center else -acc
    return S


@nb.njit(**_opts)
def boundary_triplets(E, D, rowstart, n, gidm, rowmap):
    """Sparse triplets of all rows owned by non-interior lattice nodes.

    ``rowmap[g]`` is the interface row of global node ``g`` (-1 if the node
    is not an interface node).
    """
    size = rowstart.shape[0]
    cap = 15 * (n + 1) * (n + 1) * 4
    rows = np.empty(cap, dtype=np.int64)
    cols = np.empty(cap, dtype=np.int64)
    vals = np.empty(cap)
    c = 0
    for k in range(n + 1):
        for j in range(n + 1 - k):
            for i in range(n + 1 - k - j):
                if i > 0 and j > 0 and k > 0 and i + j + k < n:
                    continue
                p = rowstart[k, j] + i
                r = rowmap[gidm[p]]
                if r < 0:
                    continue
                rows[c] = r; cols[c] = gidm[p]; vals[c] = D[p]; c += 1
                for w in range(15):
                    if w == MC:
                        continue
                    ni = i + DI[w]; nj = j + DJ[w]; nk = k + DK[w]
                    if ni < 0 or nj < 0 or nk < 0 or ni + nj + nk > n:
                        continue
                    q = rowstart[nk, nj] + ni
                    val = E[SLOT[w], p] if ISPOS[w] else E[SLOT[w], q]
                    if val == 0.0:
                        continue
                    rows[c] = r; cols[c] = gidm[q]; vals[c] = val; c += 1
    return rows[:c], cols[:c], vals[:c]


# ---------------------------------------------------------------------------
# Interior apply / Gauss-Seidel with materialized stencils
# ---------------------------------------------------------------------------

@nb.njit(**_opts)
def apply_interior(S, u, v, gidm, rowstart, n):
    """``v[I] = sum_w S[q, w] u[I_w]`` for the interior nodes of one element."""
    q = 0
    for k in range(1, n - 2):
        for j in range(1, n - k - 1):
            for i in range(1, n - k - j):
                acc = 0.0
                for w in range(15):
                    g = gidm[rowstart[k + DK[w], j + DJ[w]] + i + DI[w]]
                    acc += S[q, w] * u[g]
                v[gidm[rowstart[k, j] + i]] = acc
                q += 1


@nb.njit(**_opts)
def gs_interior(S, u, f, gidm, rowstart, n):
    """Lexicographic Gauss-Seidel sweep over the interior of one element."""
    q = 0
    for k in range(1, n - 2):
        for j in range(1, n - k - 1):
            for i in range(1, n - k - j):
                acc = 0.0
                for w in range(15):
                    if w == MC:
                        continue
                    g = gidm[rowstart[k + DK[w], j + DJ[w]] + i + DI[w]]
                    acc += S[q, w] * u[g]
                g0 = gidm[rowstart[k, j] + i]
                u[g0] = (f[g0] - acc) / S[q, MC]
                q += 1


@nb.njit(**_opts)
def gs_rows(indptr, indices, data, rows, u, f):
    """Gauss-Seidel over sparse rows in the given order."""
    for r in range(rows.shape[0]):
        g = rows[r]
        acc = f[g]
        diag = 0.0
        for c in range(indptr[r], indptr[r + 1]):
            col = indices[c]
            if col == g:
                diag += data[c]
            else:
                acc -= data[c] * u[col]
        u[g] = acc / diag


# ---------------------------------------------------------------------------
# Surrogate polynomials
# ---------------------------------------------------------------------------

@nb.njit(**_opts)
def eval_interior(coeffs, exps, n, direct_center):
    """Evaluate the 15 surrogate polynomials at all interior nodes.

    ``coeffs`` is (15, m_q) in the monomial basis of ``(i, j, k) / n``.
    Per lattice line the polynomials are collapsed to univariate ones in
    ``x = i / n`` and evaluated by Horner's rule.
    """
    m = (n - 3) * (n - 2) * (n - 1) // 6
    S = np.empty((m, 15))
    nt = exps.shape[0]
    deg = 0
    for c in range(nt):
        deg = max(deg, exps[c, 0] + exps[c, 1] + exps[c, 2])
    py = np.empty(deg + 1)
    pz = np.empty(deg + 1)
    line = np.empty((15, deg + 1))
    q = 0
    inv = 1.0 / n
    for k in range(1, n - 2):
        z = k * inv
        pz[0] = 1.0
        for e in range(1, deg + 1):
            pz[e] = pz[e - 1] * z
        for j in range(1, n - k - 1):
            y = j * inv
            py[0] = 1.0
            for e in range(1, deg + 1):
                py[e] = py[e - 1] * y
            line[:, :] = 0.0
            for c in range(nt):
                f = py[exps[c, 1]] * pz[exps[c, 2]]
                for w in range(15):
                    line[w, exps[c, 0]] += coeffs[w, c] * f
            for i in range(1, n - k - j):
                x = i * inv
                acc_c = 0.0
                for w in range(15):
                    val = line[w, deg]
                    for e in range(deg - 1, -1, -1):
                        val = val * x + line[w, e]
                    S[q, w] = val
                    if w != MC:
                        acc_c += val
                if not direct_center:
                    S[q, MC] = -acc_c
                q += 1
    return S


@nb.njit(**_opts)
def gs_split(T0, deg, u, f, gidm, rowstart, n):
    """Split Gauss-Seidel sweep with incremental stencil evaluation.

    ``T0[w, r, s, t]`` holds the forward differences in ``i, j, k`` of the
    surrogate polynomial of direction ``w`` at lattice point ``(0, 1, 1)``.
    Per line the non-recursive part is accumulated over two direction
    groups, then the recursion along ``mw`` is resolved.  The center weight
    is the negated sum of the other fourteen.
    """
    P = T0.copy()
    J = np.empty((15, deg + 1, deg + 1))
    L = np.empty((15, deg + 1))
    tmp = np.empty(n)
    tmw = np.empty(n)
    tmc = np.empty(n)
    for k in range(1, n - 2):
        for w in range(15):
            for r in range(deg + 1):
                for s in range(deg + 1 - r):
                    J[w, r, s] = P[w, r, s, 0]
        for j in range(1, n - k - 1):
            nl = n - k - j - 1
            row = rowstart[k, j]
            for w in range(15):
                for r in range(deg + 1):
                    L[w, r] = J[w, r, 0]
                # move from i = 0 to i = 1
                for r in range(deg):
                    L[w, r] += L[w, r + 1]
            # loop 1
            for d in range(nl):
                i = d + 1
                g0 = gidm[row + i]
                acc = f[g0]
                mc = 0.0
                for a in range(W1.shape[0]):
                    w = W1[a]
                    sw = L[w, 0]
                    acc -= sw * u[gidm[rowstart[k + DK[w], j + DJ[w]] + i + DI[w]]]
                    mc -= sw
                    for r in range(deg):
                        L[w, r] += L[w, r + 1]
                tmp[d] = acc
                tmc[d] = mc
            # loop 2
            for d in range(nl):
                i = d + 1
                acc = tmp[d]
                mc = tmc[d]
                for a in range(W2.shape[0]):
                    w = W2[a]
                    sw = L[w, 0]
                    acc -= sw * u[gidm[rowstart[k + DK[w], j + DJ[w]] + i + DI[w]]]
                    mc -= sw
                    for r in range(deg):
                        L[w, r] += L[w, r + 1]
                smw = L[MW, 0]
                for r in range(deg):
                    L[MW, r] += L[MW, r + 1]
                mc -= smw
                s0 = 1.0 / mc
                tmw[d] = s0 * smw
                tmp[d] = acc * s0
            # loop 3: recursive part
            prev = u[gidm[row]]
            for d in range(nl):
                val = tmp[d] - tmw[d] * prev
                u[gidm[row + d + 1]] = val
                prev = val
            for w in range(15):
                for r in range(deg + 1):
                    for s in range(deg - r):
                        J[w, r, s] += J[w, r, s + 1]
        for w in range(15):
            for r in range(deg + 1):
                for s in range(deg + 1 - r):
                    for t in range(deg - r - s):
                        P[w, r, s, t] += P[w, r, s, t + 1]


# ---------------------------------------------------------------------------
# Grid transfer
# ---------------------------------------------------------------------------

@nb.njit(**_opts)
def _coarse_edge(i, j, k):
    """Offset (di, dj, dk) of the coarse edge through an odd fine node."""
    pi = i & 1; pj = j & 1; pk = k & 1
    if pi and pj and pk:
        return 1, -1, 1
    if pi and pj:
        return 1, -1, 0
    if pi and pk:
        return 1, 0, -1
    if pj and pk:
        return 0, 1, -1
    return pi, pj, pk


@nb.njit(**_opts)
def prolongate_block(uc, uf, gidc, gidf, rsc, rsf, nf):
    for k in range(nf + 1):
        for j in range(nf + 1 - k):
            for i in range(nf + 1 - k - j):
                gf = gidf[rsf[k, j] + i]
                if (i | j | k) & 1 == 0:
                    uf[gf] = uc[gidc[rsc[k >> 1, j >> 1] + (i >> 1)]]
                else:
                    di, dj, dk = _coarse_edge(i, j, k)
                    a = gidc[rsc[(k - dk) >> 1, (j - dj) >> 1] + ((i - di) >> 1)]
                    b = gidc[rsc[(k + dk) >> 1, (j + dj) >> 1] + ((i + di) >> 1)]
                    uf[gf] = 0.5 * (uc[a] + uc[b])


@nb.njit(**_opts)
def restrict_block(rf, rc, gidc, gidf, rsc, rsf, nf, owner, m):
    for k in range(nf + 1):
        for j in range(nf + 1 - k):
            for i in range(nf + 1 - k - j):
                gf = gidf[rsf[k, j] + i]
                if owner[gf] != m:
                    continue
                val = rf[gf]
                if (i | j | k) & 1 == 0:
                    rc[gidc[rsc[k >> 1, j >> 1] + (i >> 1)]] += val
                else:
                    di, dj, dk = _coarse_edge(i, j, k)
                    rc[gidc[rsc[(k - dk) >> 1, (j - dj) >> 1] + ((i - di) >> 1)]] += 0.5 * val
                    rc[gidc[rsc[(k + dk) >> 1, (j + dj) >> 1] + ((i + di) >> 1)]] += 0.5 * val
