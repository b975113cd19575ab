"""Exhaustive-grid reference optimum for the gating QP.

Minimizes sum_i (r_i - m_i g_i)^2 + kappa * sum_i g_i over grid points of
[0, 1]^n subject to DAG order constraints, by exact enumeration. Weakly
connected components are independent (the objective is separable), and a
branch-and-bound bound prunes assignments that cannot beat the incumbent.
Intended for small n; completely independent of the package's solver.
"""

import numpy as np


def _components(n, edges):
    parent = list(range(n))

    def find(a):
        while parent[a] != a:
            parent[a] = parent[parent[a]]
            a = parent[a]
        return a

    for i, j in edges:
        ri, rj = find(int(i)), find(int(j))
        if ri != rj:
            parent[ri] = rj
    groups = {}
    for v in range(n):
        groups.setdefault(find(v), []).append(v)
    return list(groups.values())


def _reverse_topo(nodes, out_edges):
    # order with every node after all of its out-neighbors
    state = {v: 0 for v in nodes}
    order = []

    def visit(v):
        if state[v] == 1:
            raise ValueError("cycle in constraint graph")
        if state[v] == 2:
            return
        state[v] = 1
        for u, _ in out_edges[v]:
            visit(u)
        state[v] = 2
        order.append(v)

    for v in nodes:
        visit(v)
    return order


def grid_qp_optimum(m, r, kappa, edges, equality, step=0.05):
    """(best_objective, best_g) over the feasible grid, exact."""
    m = np.asarray(m, dtype=float).ravel()
    r = np.asarray(r, dtype=float).ravel()
    n = m.size
    edges = [(int(i), int(j)) for i, j in np.asarray(edges, dtype=int).reshape(-1, 2)]
    equality = list(np.asarray(equality, dtype=bool).ravel())
    levels = int(round(1.0 / step))
    vals = np.linspace(0.0, 1.0, levels + 1)
    tables = [(r[i] - m[i] * vals) ** 2 + kappa * vals for i in range(n)]
    col_min = np.array([t.min() for t in tables])

    out_edges = {v: [] for v in range(n)}
    for (i, j), eq in zip(edges, equality):
        out_edges[i].append((j, eq))

    best_g = np.zeros(n)
    total = 0.0
    for comp in _components(n, edges):
        order = _reverse_topo(comp, out_edges)
        tail_min = np.concatenate([
            np.cumsum(col_min[order[::-1]])[::-1], [0.0]
        ])
        assign = {}
        best = [np.inf, None]

        def walk(pos, acc):
            if acc + tail_min[pos] >= best[0]:
                return
            if pos == len(order):
                best[0] = acc
                best[1] = dict(assign)
                return
            v = order[pos]
            ub = levels
            forced = None
            for u, eq in out_edges[v]:
                ku = assign[u]
                if eq:
                    forced = ku if forced is None or forced == ku else -1
                ub = min(ub, ku)
            if forced == -1:
                return
            choices = (forced,) if forced is not None else range(ub, -1, -1)
            for k in choices:
                if k > ub:
                    continue
                assign[v] = k
                walk(pos + 1, acc + tables[v][k])
            del assign[v]

        walk(0, 0.0)
        if best[1] is None:
            raise RuntimeError("no feasible grid assignment found")
        total += best[0]
        for v, k in best[1].items():
            best_g[v] = vals[k]
    return float(total), best_g
