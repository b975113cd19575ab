"""Uncertainty-driven gating: monotone QP over a dominance DAG plus
out-of-sample interpolation.

Training error pairs are canonicalized to sorted order (high, low). A pair
that dominates another component-wise must get a gate no larger, which the
DAG encodes edge by edge; exact ties become a single equality-flagged edge
so duplicated samples stay tied exactly.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy import optimize
from scipy.spatial import cKDTree

__all__ = [
    "OrderDag",
    "GatingSolution",
    "QpConvergenceError",
    "canonical_error_pair",
    "build_order_dag",
    "transitive_reduction",
    "solve_gating_qp",
    "gating_interpolate",
]


class QpConvergenceError(RuntimeError):
    """The gating QP failed to reach tolerance within the iteration cap."""


@dataclass(frozen=True)
class OrderDag:
    """Directed constraint graph: edge (i, j) means g[i] <= g[j].

    Edges flagged in `equality` additionally force g[j] <= g[i]; they encode
    exact error-pair ties and point from the higher index to the lower so
    the digraph stays acyclic.
    """

    node_count: int
    edges: np.ndarray
    equality: np.ndarray

    def __post_init__(self):
        edges = np.asarray(self.edges, dtype=np.int64).reshape(-1, 2)
        eq = np.asarray(self.equality, dtype=bool).ravel()
        if eq.size != edges.shape[0]:
            raise ValueError("one equality flag per edge is required")
        if edges.size and (edges.min() < 0 or edges.max() >= self.node_count):
            raise ValueError("edge endpoints out of range")
        if edges.size and np.any(edges[:, 0] == edges[:, 1]):
            raise ValueError("self-edges are not allowed")
        object.__setattr__(self, "edges", edges)
        object.__setattr__(self, "equality", eq)

    @classmethod
    def from_edge_list(cls, node_count: int, edges, equality=None) -> "OrderDag":
        arr = np.array(list(edges), dtype=np.int64).reshape(-1, 2)
        eq = (
            np.zeros(arr.shape[0], dtype=bool)
            if equality is None
            else np.asarray(equality, dtype=bool)
        )
        return cls(node_count=node_count, edges=arr, equality=eq)

    @property
    def edge_count(self) -> int:
        return self.edges.shape[0]

    def edge_set(self) -> set:
        return {(int(i), int(j)) for i, j in self.edges}


def canonical_error_pair(e) -> np.ndarray:
    """Sort an uncertainty pair to (high, low); gates only see this form."""
    e = np.asarray(e, dtype=float).ravel()
    if e.size != 2 or np.any(e < 0) or not np.all(np.isfinite(e)):
        raise ValueError("error pair must be two finite non-negative reals")
    return np.array([max(e[0], e[1]), min(e[0], e[1])])


def build_order_dag(error_pairs) -> OrderDag:
    """Dominance DAG over canonicalized error pairs.

    Edge (i, j) whenever pair i dominates pair j component-wise (i != j).
    Exact ties contribute one equality edge from the higher index to the
    lower instead of a two-cycle.
    """
    e = np.asarray(error_pairs, dtype=float)
    if e.ndim != 2 or e.shape[1] != 2:
        raise ValueError("error_pairs must be (n, 2)")
    if np.any(e < 0) or not np.all(np.isfinite(e)):
        raise ValueError("error pairs must be finite and non-negative")
    n = e.shape[0]
    dom = (e[:, None, 0] >= e[None, :, 0]) & (e[:, None, 1] >= e[None, :, 1])
    tie = dom & dom.T
    np.fill_diagonal(dom, False)
    np.fill_diagonal(tie, False)
    strict = dom & ~tie
    tie_lower = np.tril(tie)  # keep (i, j) with i > j only
    si, sj = np.nonzero(strict)
    ti, tj = np.nonzero(tie_lower)
    edges = np.concatenate(
        [np.stack([si, sj], axis=1), np.stack([ti, tj], axis=1)], axis=0
    ).astype(np.int64)
    equality = np.concatenate([np.zeros(si.size, dtype=bool), np.ones(ti.size, dtype=bool)])
    return OrderDag(node_count=n, edges=edges, equality=equality)


def _topological_order(n: int, edges: np.ndarray) -> np.ndarray:
    indeg = np.zeros(n, dtype=np.int64)
    np.add.at(indeg, edges[:, 1], 1)
    out_heads = [[] for _ in range(n)]
    for idx in range(edges.shape[0]):
        out_heads[edges[idx, 0]].append(edges[idx, 1])
    stack = [v for v in range(n) if indeg[v] == 0]
    order = []
    while stack:
        v = stack.pop()
        order.append(v)
        for u in out_heads[v]:
            indeg[u] -= 1
            if indeg[u] == 0:
                stack.append(u)
    if len(order) != n:
        raise ValueError("constraint graph contains a cycle")
    return np.array(order, dtype=np.int64)


def _reachability(n: int, edges: np.ndarray) -> np.ndarray:
    """closure[u, v] == True iff v is reachable from u (v == u included)."""
    order = _topological_order(n, edges)
    children = [[] for _ in range(n)]
    for idx in range(edges.shape[0]):
        children[edges[idx, 0]].append(edges[idx, 1])
    closure = np.zeros((n, n), dtype=bool)
    for v in order[::-1]:
        row = closure[v]
        row[v] = True
        for u in children[v]:
            row |= closure[u]
    return closure


def transitive_reduction(dag: OrderDag) -> OrderDag:
    """Minimal edge set with the same constraint implications.

    An inequality edge is dropped when another out-neighbor of its tail
    already reaches its head. An equality edge is only dropped when an
    equality-edge path ties the same two nodes, since inequality paths do
    not imply equality.
    """
    n = dag.node_count
    if dag.edge_count == 0:
        return dag
    edges = dag.edges
    eq = dag.equality
    closure = _reachability(n, edges)

    children: list = [[] for _ in range(n)]
    for idx in range(edges.shape[0]):
        children[edges[idx, 0]].append(edges[idx, 1])
    keep = np.ones(edges.shape[0], dtype=bool)
    child_arrays = [np.array(c, dtype=np.int64) for c in children]
    counts = [None] * n
    for idx in range(edges.shape[0]):
        u, v = edges[idx]
        if counts[u] is None:
            counts[u] = closure[child_arrays[u]].sum(axis=0)
        if counts[u][v] >= 2:
            keep[idx] = False

    eq_edges = edges[eq]
    if eq_edges.size:
        closure_eq = _reachability(n, eq_edges)
        eq_children: list = [[] for _ in range(n)]
        for i, j in eq_edges:
            eq_children[i].append(j)
        eq_idx = np.nonzero(eq)[0]
        for idx in eq_idx:
            u, v = edges[idx]
            cnt = closure_eq[np.array(eq_children[u], dtype=np.int64)].sum(axis=0)
            # equality edges are exempt from the inequality-path rule
            keep[idx] = cnt[v] < 2
    return OrderDag(node_count=n, edges=edges[keep], equality=eq[keep])


def _qp_objective(g, m, r, kappa) -> float:
    resid = r - m * g
    return float(resid @ resid + kappa * g.sum())


def solve_gating_qp(
    f_l,
    f_p,
    c_obs,
    linear_coeff: float,
    dag: OrderDag,
    tol: float = 1e-6,
    max_iters: int = 50_000,
    warm: dict | None = None,
) -> np.ndarray:
    """Minimize ||c - f_p - diag(f_l - f_p) g||^2 + linear_coeff * sum(g)
    over the box [0, 1]^n subject to the DAG's order constraints.

    Operator-splitting solver: augmented Lagrangian with one multiplier per
    edge; the inner minimization runs clipped gradient steps at a fixed
    step size from the quadratic's Lipschitz constant. linear_coeff may be
    negative; the problem stays convex.

    `warm` (optional dict) carries g/duals between related solves and is
    updated in place.
    """
    f_l = np.asarray(f_l, dtype=float).ravel()
    f_p = np.asarray(f_p, dtype=float).ravel()
    c = np.asarray(c_obs, dtype=float).ravel()
    n = c.size
    if f_l.size != n or f_p.size != n:
        raise ValueError("f_l, f_p and c_obs sizes differ")
    if dag.node_count != n:
        raise ValueError("dag node count does not match vector length")
    if n == 0:
        return np.zeros(0)

    m = f_l - f_p
    r = c - f_p
    kappa = float(linear_coeff)
    edges = dag.edges
    eq = dag.equality
    _topological_order(n, edges)  # rejects cyclic constraint sets

    if edges.shape[0] == 0:
        # separable: per-coordinate quadratic over [0, 1]
        g = np.full(n, 0.5)
        nz = m != 0.0
        g[nz] = np.clip((2.0 * m[nz] * r[nz] - kappa) / (2.0 * m[nz] ** 2), 0.0, 1.0)
        if kappa > 0:
            g[~nz] = 0.0
        elif kappa < 0:
            g[~nz] = 1.0
        if warm is not None:
            warm["g"] = g.copy()
        return g

    ei = edges[:, 0]
    ej = edges[:, 1]
    ineq = ~eq
    g = np.full(n, 0.5)
    lam = np.zeros(edges.shape[0])  # one multiplier per edge
    skip_phase1 = False
    if warm:
        if warm.get("g") is not None and warm["g"].size == n:
            g = np.clip(np.asarray(warm["g"], dtype=float).copy(), 0.0, 1.0)
        if warm.get("lam") is not None and warm["lam"].size == edges.shape[0]:
            lam = np.asarray(warm["lam"], dtype=float).copy()
        # a previous solve of this instance family already found phase 1
        # too stiff; repeating the attempt every call just burns iterations
        skip_phase1 = bool(warm.get("phase1_stiff", False))

    deg = np.bincount(np.concatenate([ei, ej]), minlength=n).astype(float)
    quad_diag = 2.0 * m * m
    obj_scale = 1.0 + abs(kappa) + 2.0 * float(np.abs(m * r).max(initial=0.0))
    grad_tol = 0.1 * tol * max(1.0, obj_scale)
    rho = max(1.0, float(quad_diag.max(initial=0.0)))
    mu = lam / rho  # scaled duals for the phase-1 updates

    def violation(vec: np.ndarray) -> float:
        s = vec[ei] - vec[ej]
        return float(np.maximum(np.where(ineq, s, np.abs(s)), 0.0).max(initial=0.0))

    def suboptimality(g_cand: np.ndarray, lam_cand: np.ndarray) -> float:
        # Rigorous stopping certificate. Any multiplier vector that is
        # non-negative on the inequality edges gives a dual value below the
        # constrained optimum, so the primal-dual objective difference
        # bounds how far g_cand is from optimal. Infeasible points never
        # certify.
        if violation(g_cand) > tol:
            return math.inf
        lam_feas = np.where(ineq, np.maximum(lam_cand, 0.0), lam_cand)
        g_lag = _lagrangian_minimizer(lam_feas, m, r, kappa, ei, ej, n)
        dual_val = _qp_objective(g_lag, m, r, kappa) + float(
            lam_feas @ (g_lag[ei] - g_lag[ej])
        )
        obj = _qp_objective(g_cand, m, r, kappa)
        return (obj - dual_val) / max(1.0, abs(obj))

    total_iters = 0
    phase1_budget = 0 if skip_phase1 else min(max_iters, max(6000, max_iters // 8))
    viol_prev = math.inf
    converged = False
    strikes = 0
    while total_iters < phase1_budget and not converged:
        # coordinate-wise fixed steps from the quadratic + penalty curvature
        # bound (Gershgorin), so weakly-curved coordinates still move
        inv_curv = 1.0 / (quad_diag + 2.0 * rho * deg + 1e-12)
        inner_budget = min(2000, phase1_budget - total_iters)
        inner_converged = False
        for _ in range(inner_budget):
            total_iters += 1
            s = g[ei] - g[ej]
            act = np.where(ineq, np.maximum(0.0, s + mu), s + mu)
            pen = rho * act
            grad = 2.0 * m * (m * g - r) + kappa
            grad += np.bincount(ei, weights=pen, minlength=n)
            grad -= np.bincount(ej, weights=pen, minlength=n)
            g_new = np.clip(g - inv_curv * grad, 0.0, 1.0)
            stat = float((np.abs(g_new - g) / inv_curv).max())
            g = g_new
            if stat <= grad_tol:
                inner_converged = True
                break
        viol = violation(g)
        s = g[ei] - g[ej]
        mu_new = np.where(ineq, np.maximum(0.0, mu + s), mu + s)
        # feasibility alone is not convergence: a stale multiplier keeps the
        # penalty pulling at a strictly feasible point, so also require the
        # dual update to have settled (complementarity)
        dual_move = float(np.abs(mu_new - mu).max(initial=0.0))
        mu = mu_new
        if inner_converged and viol <= tol and dual_move <= tol:
            converged = True
        elif not inner_converged:
            # the fixed step cannot reach stationarity in a sane budget:
            # the conditioning is beyond phase 1
            strikes += 1
            if strikes >= 1:
                break
        elif viol > tol and viol > 0.25 * viol_prev:
            rho = min(rho * 2.0, 1e10)
        viol_prev = viol

    lam = rho * mu
    if converged and suboptimality(g, lam) > 0.1 * tol:
        # feasible with settled duals, yet measurably short of optimal: the
        # fixed-step tail is crawling toward a boundary optimum
        converged = False
    phase1_stiff = not converged
    if not converged:
        # phase 2: same multiplier scheme, but the inner minimization runs
        # bound-constrained quasi-Newton steps, which cope with the badly
        # conditioned quadratics the fixed step cannot
        attempts = (
            (g, lam, 40, max(400, n)),
            (np.full(n, 0.5), np.zeros(edges.shape[0]), 80, max(800, 2 * n)),
        )
        best_gap = math.inf
        for g0, lam0, rounds, inner_budget in attempts:
            cand_g, cand_lam, gap = _fallback_qp_solve(
                m, r, kappa, ei, ej, ineq, grad_tol, g0, lam0,
                suboptimality, 0.1 * tol, rounds, inner_budget,
            )
            if gap < best_gap:
                best_gap, g, lam = gap, cand_g, cand_lam
            if best_gap <= 0.1 * tol:
                break
        if best_gap > 0.1 * tol:
            raise QpConvergenceError(
                f"gating QP failed to converge (constraint violation "
                f"{violation(g):.3e}, relative objective gap {best_gap:.3e}, "
                f"tol {tol:.1e})"
            )

    if warm is not None:
        warm["g"] = g.copy()
        warm["lam"] = lam.copy()
        warm["phase1_stiff"] = phase1_stiff
    return g


def _lagrangian_minimizer(lam, m, r, kappa, ei, ej, n):
    """Exact box-constrained minimizer of the plain Lagrangian at `lam`.

    Separable per coordinate: a clipped quadratic where the gain difference
    is nonzero, a bang-bang choice on the linear coefficient where it is
    zero. Used to evaluate the dual lower bound in the stopping
    certificate.
    """
    pull = np.bincount(ei, weights=lam, minlength=n) - np.bincount(
        ej, weights=lam, minlength=n
    )
    a = m * m
    b = -2.0 * m * r + kappa + pull
    g = np.where(b > 0.0, 0.0, 1.0)
    nz = a > 0.0
    g[nz] = np.clip(-b[nz] / (2.0 * a[nz]), 0.0, 1.0)
    return g


def _fallback_qp_solve(
    m, r, kappa, ei, ej, ineq, grad_tol, g0, lam0, gap_fn, accept_tol,
    rounds, inner_budget,
):
    """Multiplier loop with quasi-Newton inner solves for stiff instances.

    Each round minimizes the augmented Lagrangian over the native box with
    L-BFGS-B, then updates the edge multipliers. The penalty weight only
    grows when feasibility stalls, and the scaled duals are rescaled with
    it so the actual multiplier estimates stay continuous. Returns the
    best (g, lam, certificate gap) seen; the caller decides acceptance.
    """
    n = m.size
    g = np.asarray(g0, dtype=float).copy()
    quad_diag = 2.0 * m * m
    rho = max(1.0, float(quad_diag.max(initial=0.0)))
    mu = np.asarray(lam0, dtype=float) / rho
    bounds = [(0.0, 1.0)] * n
    best = (g.copy(), rho * mu, math.inf)
    viol_prev = math.inf
    for _ in range(rounds):
        def al_value_grad(vec: np.ndarray):
            s = vec[ei] - vec[ej]
            z = np.where(ineq, np.maximum(0.0, mu + s), mu + s)
            resid = m * vec - r
            val = float(resid @ resid) + kappa * float(vec.sum())
            val += 0.5 * rho * float(z @ z)
            grad = 2.0 * m * resid + kappa
            pen = rho * z
            grad += np.bincount(ei, weights=pen, minlength=n)
            grad -= np.bincount(ej, weights=pen, minlength=n)
            return val, grad

        res = optimize.minimize(
            al_value_grad,
            g,
            jac=True,
            method="L-BFGS-B",
            bounds=bounds,
            options={
                "maxiter": int(inner_budget),
                "maxfun": int(4 * inner_budget),
                "ftol": 0.0,
                "gtol": 1e-2 * grad_tol,
                "maxcor": 10,
                "maxls": 60,
            },
        )
        g = np.clip(np.asarray(res.x, dtype=float), 0.0, 1.0)
        s = g[ei] - g[ej]
        mu = np.where(ineq, np.maximum(0.0, mu + s), mu + s)
        gap = gap_fn(g, rho * mu)
        if gap < best[2]:
            best = (g.copy(), rho * mu, gap)
        if gap <= accept_tol:
            break
        viol = float(np.maximum(np.where(ineq, s, np.abs(s)), 0.0).max(initial=0.0))
        if viol > viol_prev * 0.25:
            rho_new = min(rho * 10.0, 1e12)
            mu *= rho / rho_new
            rho = rho_new
        viol_prev = viol
    return best


@dataclass
class GatingSolution:
    """Trained gate values at canonical error pairs plus KNN metadata."""

    g: np.ndarray
    error_pairs: np.ndarray
    knn_k: int = 5
    r_max: float | None = None

    def __post_init__(self):
        self.g = np.asarray(self.g, dtype=float).ravel()
        self.error_pairs = np.asarray(self.error_pairs, dtype=float).reshape(-1, 2)
        if self.g.size != self.error_pairs.shape[0]:
            raise ValueError("one gate value per error pair is required")
        if self.g.size == 0:
            raise ValueError("a gating solution needs at least one sample")
        if np.any(self.g < -1e-9) or np.any(self.g > 1.0 + 1e-9):
            raise ValueError("gate values must lie in [0, 1]")
        if np.any(self.error_pairs[:, 0] < self.error_pairs[:, 1] - 1e-12):
            raise ValueError("error pairs must be canonical (high, low)")
        self.g = np.clip(self.g, 0.0, 1.0)
        if self.knn_k < 1:
            raise ValueError("knn_k must be >= 1")
        if self.r_max is None:
            self.r_max = float(np.sqrt((self.error_pairs**2).sum(axis=1)).max())
        self._tree = None

    def _kdtree(self) -> cKDTree:
        if self._tree is None:
            self._tree = cKDTree(self.error_pairs)
        return self._tree


def gating_interpolate(sol: GatingSolution, e_query) -> float:
    """Gate value at an unseen error pair.

    Inverse-distance weighted KNN over canonical training pairs, then a
    radial taper: full weight inside the training radius r_max, linear to
    zero by 2 r_max, exactly zero beyond. Gates therefore vanish for far
    out-of-distribution uncertainty, as a sane gate must.
    """
    q = canonical_error_pair(e_query)
    norm = float(np.hypot(q[0], q[1]))
    r_max = float(sol.r_max)
    if r_max > 0.0:
        if norm >= 2.0 * r_max:
            return 0.0
        taper = (2.0 * r_max - norm) / r_max if norm > r_max else 1.0
    else:
        # every training pair sits at the origin; only that point is in-sample
        if norm > 0.0:
            return 0.0
        taper = 1.0

    k = min(int(sol.knn_k), sol.g.size)
    dist, idx = sol._kdtree().query(q, k=k)
    dist = np.atleast_1d(np.asarray(dist, dtype=float))
    idx = np.atleast_1d(np.asarray(idx, dtype=np.int64))
    tiny = 1e-12 * max(1.0, r_max)
    exact = dist <= tiny
    if exact.any():
        value = float(sol.g[idx[exact]].mean())
    else:
        w = 1.0 / dist
        value = float((w * sol.g[idx]).sum() / w.sum())
    return value * taper
