"""Gating tests: dominance DAG, transitive reduction, QP, interpolation."""

import math

import numpy as np
import pytest
from scipy import optimize

from _qp_grid_oracle import grid_qp_optimum
from cgmap.gating import (
    GatingSolution,
    OrderDag,
    QpConvergenceError,
    build_order_dag,
    canonical_error_pair,
    gating_interpolate,
    solve_gating_qp,
    transitive_reduction,
)


def qp_objective(g, m, r, kappa):
    resid = r - m * g
    return float(resid @ resid + kappa * g.sum())


def max_violation(g, dag):
    if dag.edge_count == 0:
        return 0.0
    s = g[dag.edges[:, 0]] - g[dag.edges[:, 1]]
    return float(np.maximum(np.where(dag.equality, np.abs(s), s), 0.0).max())


# ---------------------------------------------------------------------------
# canonicalization and DAG construction

def test_canonical_error_pair():
    np.testing.assert_array_equal(canonical_error_pair((2.0, 5.0)), [5.0, 2.0])
    np.testing.assert_array_equal(canonical_error_pair([5.0, 2.0]), [5.0, 2.0])
    np.testing.assert_array_equal(canonical_error_pair((0.0, 0.0)), [0.0, 0.0])
    with pytest.raises(ValueError):
        canonical_error_pair((1.0, -0.5))
    with pytest.raises(ValueError):
        canonical_error_pair((1.0, math.inf))
    with pytest.raises(ValueError):
        canonical_error_pair((1.0, 2.0, 3.0))


def dominance_oracle(pairs):
    """Brute-force edge/equality sets for the dominance DAG."""
    n = len(pairs)
    strict, ties = set(), set()
    for i in range(n):
        for j in range(n):
            if i == j:
                continue
            if pairs[i] == pairs[j]:
                if i > j:
                    ties.add((i, j))
            elif pairs[i][0] >= pairs[j][0] and pairs[i][1] >= pairs[j][1]:
                strict.add((i, j))
    return strict, ties


def test_build_order_dag_matches_brute_force():
    rng = np.random.default_rng(0)
    for _ in range(25):
        n = int(rng.integers(2, 12))
        base = np.round(rng.uniform(0.0, 3.0, size=(n, 2)), 1)
        base = np.sort(base, axis=1)[:, ::-1]  # canonical (high, low)
        # plant exact duplicates
        if n >= 4:
            base[1] = base[0]
            base[3] = base[2]
        pairs = [tuple(row) for row in base]
        dag = build_order_dag(base)
        strict, ties = dominance_oracle(pairs)
        got_strict = {
            (int(i), int(j))
            for (i, j), eq in zip(dag.edges, dag.equality) if not eq
        }
        got_ties = {
            (int(i), int(j))
            for (i, j), eq in zip(dag.edges, dag.equality) if eq
        }
        assert got_strict == strict
        assert got_ties == ties


def test_build_order_dag_validation():
    with pytest.raises(ValueError):
        build_order_dag(np.array([[1.0, -2.0]]))
    with pytest.raises(ValueError):
        build_order_dag(np.array([1.0, 2.0]))


def test_order_dag_validation():
    with pytest.raises(ValueError):
        OrderDag(node_count=2, edges=np.array([[0, 2]]), equality=np.array([False]))
    with pytest.raises(ValueError):
        OrderDag(node_count=2, edges=np.array([[1, 1]]), equality=np.array([False]))
    with pytest.raises(ValueError):
        OrderDag(node_count=2, edges=np.array([[0, 1]]), equality=np.array([], dtype=bool))


# ---------------------------------------------------------------------------
# transitive reduction

def floyd_warshall_closure(n, edges):
    reach = np.eye(n, dtype=bool)
    for i, j in edges:
        reach[int(i), int(j)] = True
    for k in range(n):
        reach |= reach[:, k][:, None] & reach[k, :][None, :]
    return reach


def reference_reduction(n, edges):
    """Unique DAG transitive reduction: drop (u, v) when some other direct
    successor of u already reaches v."""
    edge_set = {(int(i), int(j)) for i, j in edges}
    closure = floyd_warshall_closure(n, edges)
    keep = set()
    for u, v in edge_set:
        via = any(
            (u, w) in edge_set and closure[w, v] for w in range(n) if w != u and w != v
        )
        if not via:
            keep.add((u, v))
    return keep


def random_dag_edges(rng, n):
    # order-respecting random edges: i < j only, so the graph is acyclic
    edges = set()
    for _ in range(int(rng.integers(0, n * 2))):
        i, j = sorted(rng.choice(n, size=2, replace=False))
        edges.add((int(i), int(j)))
    return list(edges)


def test_transitive_reduction_matches_reference_on_random_dags():
    rng = np.random.default_rng(1)
    for _ in range(40):
        n = int(rng.integers(2, 12))
        edges = random_dag_edges(rng, n)
        dag = OrderDag.from_edge_list(n, edges)
        red = transitive_reduction(dag)
        # same reachability
        assert np.array_equal(
            floyd_warshall_closure(n, red.edges),
            floyd_warshall_closure(n, edges),
        )
        # exactly the unique minimal edge set
        assert red.edge_set() == reference_reduction(n, edges)


def test_transitive_reduction_chain():
    dag = OrderDag.from_edge_list(4, [(0, 1), (1, 2), (2, 3), (0, 2), (0, 3), (1, 3)])
    red = transitive_reduction(dag)
    assert red.edge_set() == {(0, 1), (1, 2), (2, 3)}


def test_transitive_reduction_keeps_equality_semantics():
    pairs = np.array([[2.0, 1.0], [2.0, 1.0], [2.0, 1.0], [0.5, 0.25]])
    dag = build_order_dag(pairs)
    red = transitive_reduction(dag)
    # ties stay pairwise connected through equality edges
    eq_edges = red.edges[red.equality]
    assert eq_edges.shape[0] == 2  # 3 duplicates chained by 2 equality edges
    # and the duplicate block still dominates the small pair
    closure = floyd_warshall_closure(4, red.edges)
    assert closure[0, 3] and closure[1, 3] and closure[2, 3]
    # reduced dominance edges: only one strict edge into node 3 is needed
    assert int((~red.equality).sum()) == 1


def test_transitive_reduction_of_dominance_dags_preserves_constraints():
    rng = np.random.default_rng(2)
    for _ in range(20):
        n = int(rng.integers(2, 10))
        pairs = np.sort(np.round(rng.uniform(0, 2, size=(n, 2)), 1), axis=1)[:, ::-1]
        dag = build_order_dag(pairs)
        red = transitive_reduction(dag)
        assert red.edge_count <= dag.edge_count
        # implication closure treats an equality edge as both directions
        def impl_edges(d):
            out = [(int(i), int(j)) for i, j in d.edges]
            out += [
                (int(j), int(i))
                for (i, j), eq in zip(d.edges, d.equality) if eq
            ]
            return out
        assert np.array_equal(
            floyd_warshall_closure(n, impl_edges(red)),
            floyd_warshall_closure(n, impl_edges(dag)),
        )


# ---------------------------------------------------------------------------
# QP solver

def random_qp_instance(rng, n, dag_kind="dominance"):
    m = rng.normal(scale=rng.choice([0.5, 2.0, 20.0]), size=n)
    if rng.uniform() < 0.3:
        m[rng.integers(n)] = 0.0  # zero-curvature coordinate
    r = rng.normal(scale=2.0, size=n)
    kappa = float(rng.normal(scale=2.0))
    if dag_kind == "chain":
        edges = [(i, i + 1) for i in range(n - 1)]
        dag = OrderDag.from_edge_list(n, edges)
    elif dag_kind == "antichain":
        dag = OrderDag.from_edge_list(n, [])
    else:
        pairs = np.sort(rng.uniform(0, 2, size=(n, 2)), axis=1)[:, ::-1]
        if n >= 3 and rng.uniform() < 0.5:
            pairs[1] = pairs[0]  # exact tie -> equality edge
        dag = transitive_reduction(build_order_dag(pairs))
    return m, r, kappa, dag


def test_qp_matches_exhaustive_grid():
    rng = np.random.default_rng(3)
    for kind in ("chain", "antichain", "dominance"):
        for _ in range(6):
            n = 5
            m, r, kappa, dag = random_qp_instance(rng, n, kind)
            # solve_gating_qp takes (f_l, f_p, c); f_p = 0 gives m = f_l, r = c
            g = solve_gating_qp(m, np.zeros(n), r, kappa, dag)
            assert max_violation(g, dag) <= 1e-6
            ours = qp_objective(g, m, r, kappa)
            best, _ = grid_qp_optimum(m, r, kappa, dag.edges, dag.equality)
            assert ours <= best + 1e-6 * max(1.0, abs(best))


def test_qp_matches_slsqp_reference():
    rng = np.random.default_rng(4)
    for _ in range(8):
        n = int(rng.integers(3, 16))
        m, r, kappa, dag = random_qp_instance(rng, n)
        g = solve_gating_qp(m, np.zeros(n), r, kappa, dag)
        assert max_violation(g, dag) <= 1e-6
        cons = []
        for (i, j), eq in zip(dag.edges, dag.equality):
            i, j = int(i), int(j)
            if eq:
                cons.append({"type": "eq", "fun": lambda x, i=i, j=j: x[i] - x[j]})
            else:
                cons.append({"type": "ineq", "fun": lambda x, i=i, j=j: x[j] - x[i]})
        ref = optimize.minimize(
            lambda x: qp_objective(x, m, r, kappa),
            np.full(n, 0.5),
            method="SLSQP",
            bounds=[(0.0, 1.0)] * n,
            constraints=cons,
            options={"maxiter": 500, "ftol": 1e-14},
        )
        ours = qp_objective(g, m, r, kappa)
        assert ours <= ref.fun + 1e-6 * max(1.0, abs(ref.fun))


def test_qp_separable_no_edges():
    # closed form per coordinate: clip((2 m r - kappa) / (2 m^2), 0, 1)
    m = np.array([2.0, -1.0, 0.5, 0.0, 0.0])
    r = np.array([1.0, 1.0, -3.0, 5.0, -5.0])
    dag = OrderDag.from_edge_list(5, [])
    kappa = 0.8
    g = solve_gating_qp(m, np.zeros(5), r, kappa, dag)
    expect = np.clip((2 * m[:3] * r[:3] - kappa) / (2 * m[:3] ** 2), 0, 1)
    np.testing.assert_allclose(g[:3], expect, atol=1e-12, rtol=0.0)
    assert g[3] == 0.0 and g[4] == 0.0  # kappa > 0 pushes flat coords down

    g = solve_gating_qp(m, np.zeros(5), r, -0.8, dag)
    assert g[3] == 1.0 and g[4] == 1.0


def test_qp_equality_edges_tie_duplicates():
    rng = np.random.default_rng(5)
    pairs = np.array([[1.5, 0.5], [1.5, 0.5], [0.4, 0.1], [2.0, 1.9]])
    dag = transitive_reduction(build_order_dag(pairs))
    m = rng.normal(size=4)
    r = rng.normal(size=4)
    g = solve_gating_qp(m, np.zeros(4), r, 0.3, dag)
    assert abs(g[0] - g[1]) <= 1e-6
    # full dominance must hold, not just reduced edges
    full = build_order_dag(pairs)
    assert max_violation(g, full) <= 1e-6


def test_qp_monotone_under_dominance():
    rng = np.random.default_rng(6)
    for _ in range(10):
        n = 12
        pairs = np.sort(rng.uniform(0, 3, size=(n, 2)), axis=1)[:, ::-1]
        full = build_order_dag(pairs)
        dag = transitive_reduction(full)
        f_l = rng.normal(scale=3.0, size=n)
        f_p = rng.normal(scale=3.0, size=n)
        c = rng.normal(scale=3.0, size=n)
        g = solve_gating_qp(f_l, f_p, c, float(rng.normal()), dag)
        assert np.all(g >= 0.0) and np.all(g <= 1.0)
        assert max_violation(g, full) <= 1e-6


def test_qp_warm_start_consistency():
    rng = np.random.default_rng(7)
    m, r, kappa, dag = random_qp_instance(rng, 10)
    cold = solve_gating_qp(m, np.zeros(10), r, kappa, dag)
    warm_state: dict = {}
    first = solve_gating_qp(m, np.zeros(10), r, kappa, dag, warm=warm_state)
    again = solve_gating_qp(m, np.zeros(10), r, kappa, dag, warm=warm_state)
    base = qp_objective(cold, m, r, kappa)
    for g in (first, again):
        assert max_violation(g, dag) <= 1e-6
        assert qp_objective(g, m, r, kappa) <= base + 1e-6 * max(1.0, abs(base))
    assert "g" in warm_state


def test_qp_ill_scaled_instance_meets_contract():
    # wide dynamic range in m: phase 1 cannot finish, phase 2 must
    rng = np.random.default_rng(8)
    n = 40
    m = np.concatenate([rng.normal(scale=600.0, size=n // 2),
                        rng.normal(scale=0.05, size=n - n // 2)])
    r = rng.normal(scale=300.0, size=n)
    pairs = np.sort(rng.uniform(0, 5, size=(n, 2)), axis=1)[:, ::-1]
    full = build_order_dag(pairs)
    dag = transitive_reduction(full)
    g = solve_gating_qp(m, np.zeros(n), r, 12.3, dag)
    assert max_violation(g, full) <= 1e-6
    cons = [
        {"type": "ineq", "fun": lambda x, i=int(i), j=int(j): x[j] - x[i]}
        for (i, j), eq in zip(dag.edges, dag.equality) if not eq
    ] + [
        {"type": "eq", "fun": lambda x, i=int(i), j=int(j): x[i] - x[j]}
        for (i, j), eq in zip(dag.edges, dag.equality) if eq
    ]
    ref = optimize.minimize(
        lambda x: qp_objective(x, m, r, 12.3), np.clip(g + 0.01, 0, 1),
        method="SLSQP", bounds=[(0.0, 1.0)] * n, constraints=cons,
        options={"maxiter": 1000, "ftol": 1e-14},
    )
    ours = qp_objective(g, m, r, 12.3)
    assert ours <= ref.fun + 1e-6 * max(1.0, abs(ref.fun))


def test_qp_validation_and_edge_cases():
    dag0 = OrderDag.from_edge_list(0, [])
    assert solve_gating_qp([], [], [], 0.0, dag0).size == 0
    dag = OrderDag.from_edge_list(2, [(0, 1)])
    with pytest.raises(ValueError):
        solve_gating_qp([1.0], [0.0], [0.0], 0.0, dag)  # size mismatch
    cyc = OrderDag.from_edge_list(2, [(0, 1), (1, 0)])
    with pytest.raises(ValueError):
        solve_gating_qp([1.0, 1.0], [0.0, 0.0], [0.0, 0.0], 0.0, cyc)


def test_qp_raises_when_both_phases_fail(monkeypatch):
    import cgmap.gating as gt

    # force the fallback to return an uncertified point so the error path runs
    monkeypatch.setattr(
        gt, "_fallback_qp_solve",
        lambda *args, **kwargs: (np.array([1.0, 0.0]), np.zeros(1), np.inf),
    )
    # unconstrained optimum (0.798, 0) violates g0 <= g1, so 16 phase-1
    # iterations cannot converge and the poisoned fallback gets exercised
    with pytest.raises(QpConvergenceError):
        gt.solve_gating_qp(
            np.array([5.0, -3.0]), np.zeros(2), np.array([4.0, 4.0]), 0.1,
            OrderDag.from_edge_list(2, [(0, 1)]), max_iters=16,
        )


# ---------------------------------------------------------------------------
# interpolation

def test_interpolate_exact_match_and_mean_of_duplicates():
    sol = GatingSolution(
        g=np.array([0.2, 0.8, 0.5]),
        error_pairs=np.array([[1.0, 0.5], [1.0, 0.5], [2.0, 1.0]]),
    )
    assert gating_interpolate(sol, (1.0, 0.5)) == pytest.approx(0.5)  # mean(0.2, 0.8)
    assert gating_interpolate(sol, (0.5, 1.0)) == pytest.approx(0.5)  # canonical swap
    assert gating_interpolate(sol, (2.0, 1.0)) == pytest.approx(0.5)


def test_interpolate_inverse_distance_hand_value():
    sol = GatingSolution(
        g=np.array([0.0, 1.0]),
        error_pairs=np.array([[1.0, 0.0], [3.0, 0.0]]),
        knn_k=2,
    )
    # query (2, 0): distances 1 and 1 -> plain mean, inside r_max
    assert gating_interpolate(sol, (2.0, 0.0)) == pytest.approx(0.5)
    # query (1.5, 0): weights 2 and 2/3 -> 0.25
    assert gating_interpolate(sol, (1.5, 0.0)) == pytest.approx(0.25)


def test_interpolate_radial_taper():
    sol = GatingSolution(g=np.array([0.8]), error_pairs=np.array([[4.0, 3.0]]))
    assert sol.r_max == pytest.approx(5.0)
    # norm 5 -> exact match at full weight
    assert gating_interpolate(sol, (3.0, 4.0)) == pytest.approx(0.8)
    # norm 7.5 -> taper (10 - 7.5)/5 = 0.5
    assert gating_interpolate(sol, (4.5, 6.0)) == pytest.approx(0.4)
    # norm 10 -> zero
    assert gating_interpolate(sol, (6.0, 8.0)) == 0.0
    assert gating_interpolate(sol, (60.0, 80.0)) == 0.0


def test_interpolate_degenerate_all_zero_training():
    sol = GatingSolution(g=np.array([0.7, 0.3]), error_pairs=np.zeros((2, 2)))
    assert sol.r_max == 0.0
    assert gating_interpolate(sol, (0.0, 0.0)) == pytest.approx(0.5)
    assert gating_interpolate(sol, (0.1, 0.0)) == 0.0


def test_interpolate_k_larger_than_sample():
    sol = GatingSolution(
        g=np.array([0.0, 1.0]),
        error_pairs=np.array([[1.0, 0.0], [0.0, 0.0]]),
        knn_k=5,
    )
    got = gating_interpolate(sol, (0.5, 0.0))
    assert got == pytest.approx(0.5)  # equidistant, uses both


def test_gating_solution_validation():
    with pytest.raises(ValueError):
        GatingSolution(g=np.array([0.5]), error_pairs=np.array([[0.5, 1.0]]))
    with pytest.raises(ValueError):
        GatingSolution(g=np.array([1.5]), error_pairs=np.array([[1.0, 0.5]]))
    with pytest.raises(ValueError):
        GatingSolution(g=np.zeros(0), error_pairs=np.zeros((0, 2)))
    with pytest.raises(ValueError):
        GatingSolution(g=np.array([0.5, 0.5]), error_pairs=np.array([[1.0, 0.5]]))
