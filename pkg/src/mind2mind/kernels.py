"""Hot loops for optimal transport and Lipschitz estimation.

Each kernel exists as a loop implementation (``*_loops``), compiled with
numba unless ``M2M_NUMBA=0``, and a vectorised numpy fallback
(``*_numpy``) where one exists. The transport simplex has no vectorised
form; with numba disabled it runs as plain Python.
"""

from __future__ import annotations

import math

import numpy as np

from ._accel import USE_NUMBA, njit

OPTIMAL = 0
ITERATION_LIMIT = 1


# ------------------------------------------------------------ distances

def pairwise_distances_loops(x, y):
    n, d = x.shape
    m = y.shape[0]
    out = np.empty((n, m))
    for i in range(n):
        for j in range(m):
            s = 0.0
            for k in range(d):
                t = x[i, k] - y[j, k]
                s += t * t
            out[i, j] = math.sqrt(s)
    return out


def pairwise_distances_numpy(x, y, budget=1 << 22):
    # rows per chunk keep the (chunk, m, d) difference array near `budget` floats
    n, m, d = x.shape[0], y.shape[0], x.shape[1]
    chunk = max(1, budget // max(1, m * d))
    out = np.empty((n, m))
    for s in range(0, n, chunk):
        diff = x[s:s + chunk, None, :] - y[None, :, :]
        out[s:s + chunk] = np.sqrt(np.einsum("ijk,ijk->ij", diff, diff))
    return out


def max_distance_ratio_loops(x, y):
    """max over pairs with x_i != x_j of |y_i - y_j| / |x_i - x_j|; -1 if none."""
    n = x.shape[0]
    best = -1.0
    for i in range(n):
        for j in range(i + 1, n):
            dx = 0.0
            for k in range(x.shape[1]):
                t = x[i, k] - x[j, k]
                dx += t * t
            if dx == 0.0:
                continue
            dy = 0.0
            for k in range(y.shape[1]):
                t = y[i, k] - y[j, k]
                dy += t * t
            r = math.sqrt(dy) / math.sqrt(dx)
            if r > best:
                best = r
    return best


def max_distance_ratio_numpy(x, y):
    dx = pairwise_distances_numpy(x, x)
    dy = pairwise_distances_numpy(y, y)
    iu = np.triu_indices(x.shape[0], k=1)
    dx, dy = dx[iu], dy[iu]
    keep = dx > 0.0
    if not keep.any():
        return -1.0
    return float(np.max(dy[keep] / dx[keep]))


# ------------------------------------------------------ transport simplex

def transport_simplex_loops(a, b, cost, tol, max_iter):
    """Network simplex for the balanced transportation problem.

    Returns ``(rows, cols, flows, iterations, status)`` describing the
    ``n + m - 1`` basic cells of an optimal spanning-tree basis.
    Pricing uses rotating block search; after a long run of degenerate
    pivots it switches to Bland's rule, which cannot cycle.
    """
    n = a.shape[0]
    m = b.shape[0]
    nodes = n + m
    k_basic = nodes - 1
    rows = np.empty(k_basic, np.int64)
    cols = np.empty(k_basic, np.int64)
    flow = np.empty(k_basic)

    # north-west corner start, always a spanning tree
    ra = a.copy()
    rb = b.copy()
    i = 0
    j = 0
    for k in range(k_basic):
        q = min(ra[i], rb[j])
        rows[k] = i
        cols[k] = j
        flow[k] = q
        move_row = ra[i] <= rb[j]
        ra[i] -= q
        rb[j] -= q
        if i == n - 1:
            j += 1
        elif j == m - 1:
            i += 1
        elif move_row:
            i += 1
        else:
            j += 1

    deg = np.empty(nodes, np.int64)
    start = np.empty(nodes + 1, np.int64)
    fill = np.empty(nodes, np.int64)
    adj_node = np.empty(2 * k_basic, np.int64)
    adj_edge = np.empty(2 * k_basic, np.int64)
    parent = np.empty(nodes, np.int64)
    pedge = np.empty(nodes, np.int64)
    depth = np.empty(nodes, np.int64)
    pot = np.empty(nodes)
    queue = np.empty(nodes, np.int64)
    path_q = np.empty(nodes, np.int64)
    path_p = np.empty(nodes, np.int64)
    cyc = np.empty(nodes + 1, np.int64)

    total = n * m
    block = max(int(math.sqrt(total)), min(total, 32))
    cursor = 0
    degenerate_run = 0
    bland = False
    bland_after = 50 * nodes + 100
    it = 0

    while True:
        # rebuild tree adjacency, depths and dual potentials
        for v in range(nodes):
            deg[v] = 0
        for k in range(k_basic):
            deg[rows[k]] += 1
            deg[n + cols[k]] += 1
        start[0] = 0
        for v in range(nodes):
            start[v + 1] = start[v] + deg[v]
            fill[v] = start[v]
        for k in range(k_basic):
            r = rows[k]
            c = n + cols[k]
            adj_node[fill[r]] = c
            adj_edge[fill[r]] = k
            fill[r] += 1
            adj_node[fill[c]] = r
            adj_edge[fill[c]] = k
            fill[c] += 1
        for v in range(nodes):
            parent[v] = -2
        parent[0] = -1
        pedge[0] = -1
        depth[0] = 0
        pot[0] = 0.0
        head = 0
        tail = 1
        queue[0] = 0
        while head < tail:
            v = queue[head]
            head += 1
            for s in range(start[v], start[v + 1]):
                w = adj_node[s]
                if parent[w] != -2:
                    continue
                k = adj_edge[s]
                parent[w] = v
                pedge[w] = k
                depth[w] = depth[v] + 1
                pot[w] = cost[rows[k], cols[k]] - pot[v]
                queue[tail] = w
                tail += 1

        # pricing
        enter_i = -1
        enter_j = -1
        best = -tol
        if bland:
            for idx in range(total):
                ii = idx // m
                jj = idx - ii * m
                rc = cost[ii, jj] - pot[ii] - pot[n + jj]
                if rc < -tol:
                    enter_i = ii
                    enter_j = jj
                    break
        else:
            scanned = 0
            while scanned < total:
                stop = min(block, total - scanned)
                for _ in range(stop):
                    ii = cursor // m
                    jj = cursor - ii * m
                    rc = cost[ii, jj] - pot[ii] - pot[n + jj]
                    if rc < best:
                        best = rc
                        enter_i = ii
                        enter_j = jj
                    cursor += 1
                    if cursor == total:
                        cursor = 0
                scanned += stop
                if enter_i >= 0:
                    break
        if enter_i < 0:
            return rows, cols, flow, it, OPTIMAL
        if it >= max_iter:
            return rows, cols, flow, it, ITERATION_LIMIT
        it += 1

        # cycle through the tree from column node back to row node
        p = enter_i
        q = n + enter_j
        lp = 0
        lq = 0
        while depth[q] > depth[p]:
            path_q[lq] = pedge[q]
            lq += 1
            q = parent[q]
        while depth[p] > depth[q]:
            path_p[lp] = pedge[p]
            lp += 1
            p = parent[p]
        while p != q:
            path_q[lq] = pedge[q]
            lq += 1
            q = parent[q]
            path_p[lp] = pedge[p]
            lp += 1
            p = parent[p]
        length = 0
        for s in range(lq):
            cyc[length] = path_q[s]
            length += 1
        for s in range(lp - 1, -1, -1):
            cyc[length] = path_p[s]
            length += 1

        # ratio test over the decreasing edges (even positions)
        theta = np.inf
        leave = -1
        leave_key = -1
        for s in range(0, length, 2):
            k = cyc[s]
            key = rows[k] * m + cols[k]
            if flow[k] < theta or (bland and flow[k] == theta and key < leave_key):
                theta = flow[k]
                leave = k
                leave_key = key
        for s in range(length):
            k = cyc[s]
            if s % 2 == 0:
                flow[k] -= theta
            else:
                flow[k] += theta
        rows[leave] = enter_i
        cols[leave] = enter_j
        flow[leave] = theta

        if theta > 0.0:
            degenerate_run = 0
        else:
            degenerate_run += 1
            if degenerate_run > bland_after:
                bland = True


if USE_NUMBA:
    pairwise_distances = njit(pairwise_distances_loops)
    max_distance_ratio = njit(max_distance_ratio_loops)
else:
    pairwise_distances = pairwise_distances_numpy
    max_distance_ratio = max_distance_ratio_numpy

transport_simplex = njit(transport_simplex_loops)
