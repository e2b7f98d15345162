import warnings

import numpy as np
import pytest

from trustroute.ctm import raw_objective, routing_schedule, simulate
from trustroute.errors import InfeasibleTopologyError, StructuralError
from trustroute.instances import bundled_scenario, merge_scenario, split_jam_scenario
from trustroute.network import NetworkTopology, RoutingMatrix
from trustroute.optimize import (
    SolverOptions,
    assemble_problem,
    kkt_residual,
    objective_and_gradient,
    project_simplex,
    rollout,
    selfish_objective,
    solve,
)


def grid_objective(scenario, sigma0, r21):
    """Objective of the merge network by plain simulation, share r21 onto link 2."""
    rc = np.array([r21, 1.0 - r21, 1.0, 1.0])
    traj = simulate(scenario, routing_schedule(scenario, rc, np.full(4, sigma0)))
    return raw_objective(traj)


def test_constraint_counts_bundled():
    """[TRIVIAL] closed-form counts."""
    pr = assemble_problem(bundled_scenario(horizon=10), 0.3)
    n, h, nr = 16, 10, 21
    assert pr.decision_dim == nr
    assert pr.num_eq == h * n + n
    assert pr.num_ineq == 2 * nr + h * n


def test_hand_enumerated_layout():
    """[DERIVED] one step, one splitting column."""
    pr = assemble_problem(split_jam_scenario(horizon=1), 0.2)
    assert (pr.decision_dim, pr.num_eq, pr.num_ineq) == (2, 6, 7)
    assert [pr.eq_dynamics(0, i) for i in range(3)] == [0, 1, 2]
    assert [pr.eq_column(j) for j in range(3)] == [3, 4, 5]
    assert [pr.ineq_upper(p) for p in range(2)] == [0, 1]
    assert [pr.ineq_lower(p) for p in range(2)] == [2, 3]
    assert [pr.ineq_jam(0, i) for i in range(3)] == [4, 5, 6]
    E = pr.column_matrix()
    assert E.tolist() == [[1, 1], [0, 0], [0, 0]]


def test_assembly_rejects_dead_end_link():
    """[TRIVIAL]"""
    sc = merge_scenario()
    topo = NetworkTopology(2, 4, frozenset({(1, 0), (2, 0), (3, 1)}), frozenset({0}), frozenset({1, 2}),
                           frozenset({3}))
    with pytest.raises((InfeasibleTopologyError, StructuralError)):
        rs = RoutingMatrix.from_entries(topo, {(1, 0): 0.5, (2, 0): 0.5, (3, 1): 1.0})
        assemble_problem(type(sc)(topo, sc.params, sc.inflow, sc.x0, 0.5, rs, sc.step_hours), 0.5)


def test_zero_trust_objective_constant(rng):
    """[TRIVIAL]"""
    pr = assemble_problem(bundled_scenario(), 0.0)
    base, g = objective_and_gradient(pr.selfish_point, pr)
    assert np.all(g == 0)
    for _ in range(3):
        z = pr.selfish_point
        for grp in pr.groups:
            z[grp] = rng.dirichlet(np.ones(grp.size))
        assert objective_and_gradient(z, pr)[0] == base


def test_gradient_matches_central_differences(rng):
    """[DERIVED] central differences, step 1e-6."""
    pr = assemble_problem(bundled_scenario(), 0.7)
    for _ in range(3):
        z = pr.selfish_point
        for grp in pr.groups:
            if grp.size > 1:
                z[grp] = rng.dirichlet(np.ones(grp.size))
        _, g = objective_and_gradient(z, pr)
        fd = np.zeros_like(z)
        for p in range(z.size):
            e = np.zeros_like(z)
            e[p] = 1e-6
            fd[p] = (objective_and_gradient(z + e, pr)[0] - objective_and_gradient(z - e, pr)[0]) / 2e-6
        assert np.linalg.norm(g - fd) <= 1e-4 * np.linalg.norm(fd)


def test_objective_is_deterministic():
    """[TRIVIAL]"""
    pr = assemble_problem(bundled_scenario(), 0.5)
    a = objective_and_gradient(pr.selfish_point, pr)
    b = objective_and_gradient(pr.selfish_point, pr)
    assert a[0] == b[0] and np.array_equal(a[1], b[1])


def test_zero_trust_returns_initial_guess():
    """[TRIVIAL]"""
    sc = bundled_scenario()
    pr = assemble_problem(sc, 0.0)
    sol = solve(pr)
    assert np.array_equal(sol.rc_star.values, sc.rs.values)
    assert sol.objective == selfish_objective(pr)
    assert sol.converged


@pytest.mark.parametrize("x0, sigma0", [((150.0, 10.0, 0.0, 0.0), 1.0), ((150.0, 10.0, 0.0, 0.0), 0.5),
                                        ((150.0, 40.0, 0.0, 0.0), 1.0)])
def test_merge_matches_grid_search(x0, sigma0):
    """[DERIVED] one free split ratio, grid at resolution 1e-3."""
    sc = merge_scenario(sigma=sigma0, x0=x0)
    sol = solve(assemble_problem(sc, sigma0))
    grid = np.linspace(0, 1, 1001)
    vals = np.array([grid_objective(sc, sigma0, r) for r in grid])
    best = vals.min()
    assert sol.converged
    assert sol.objective <= best * (1 + 1e-3)
    assert abs(sol.objective - best) <= 1e-3 * abs(best)
    assert abs(sol.rc_star.values[0] - grid[vals.argmin()]) <= 2e-3


def test_merge_prefers_emptier_branch():
    """[DERIVED] loaded link 2 pushes the split to the empty branch."""
    sc = merge_scenario(sigma=1.0, x0=(150.0, 40.0, 0.0, 0.0))
    sol = solve(assemble_problem(sc, 1.0))
    assert sol.rc_star.entries()[(2, 0)] > 0.99


def test_solution_invariants(bundled_03):
    """[TRIVIAL] stored trajectory, feasibility, multiplier signs, dominance."""
    sol, pr, sc = bundled_03.solution, bundled_03.problem, bundled_03.scenario
    assert sol.converged and sol.kkt_residual_norm <= 1e-6
    assert np.all(sol.multipliers_ineq >= 0)
    assert sol.multipliers_eq.shape == (pr.num_eq,) and sol.multipliers_ineq.shape == (pr.num_ineq,)
    resim = simulate(sc, routing_schedule(sc, sol.rc_star.values, np.full(16, 0.3)))
    assert np.max(np.abs(resim.states - sol.states)) <= 1e-6
    sums = np.bincount(pr.pattern.cols, weights=sol.rc_star.values, minlength=16)
    assert np.allclose(sums, sc.topology.column_targets, atol=1e-12)
    assert np.all(sol.rc_star.values >= 0)
    assert sol.objective <= selfish_objective(pr) + 1e-6
    assert sol.ttt == pytest.approx(sol.objective * sc.step_hours)


def test_kkt_residual_grows_off_optimum(merge_05):
    """[DERIVED] moving rc by 1e-2 breaks stationarity."""
    sol, pr = merge_05.solution, merge_05.problem
    base = kkt_residual(sol, pr)
    vals = np.array(sol.rc_star.values)
    vals[0] += 1e-2
    vals[1] -= 1e-2
    moved = type(sol)(RoutingMatrix(sol.rc_star.topology, vals), sol.trajectory, sol.multipliers_eq,
                      sol.multipliers_ineq, sol.objective, 0.0, 0, True, sol.sigma0, sol.scenario)
    object.__setattr__(moved, "trajectory", type(sol.trajectory)(rollout(pr, vals)[0], sol.trajectory.outflows))
    assert kkt_residual(moved, pr) > base + 1e-6


def test_kkt_residual_zero_without_dynamics():
    """[TRIVIAL] no steps, interior point, zero multipliers."""
    pr = assemble_problem(bundled_scenario(horizon=0), 0.3)
    sol = solve(pr)
    assert np.all(sol.multipliers_ineq == 0) and np.all(sol.multipliers_eq == 0)
    assert kkt_residual(sol, pr) == 0.0


def test_jam_boundary_start():
    """[DERIVED] the selfish split fills link 2 exactly to jam density (supply
    caps the inflow); the optimum stays feasible and moves traffic away."""
    sc = split_jam_scenario(selfish_share=0.2)
    pr = assemble_problem(sc, 0.2)
    start = rollout(pr, pr.selfish_point)[0]
    assert start[1, 1] == pytest.approx(200.0, rel=1e-12)
    with warnings.catch_warnings():
        warnings.simplefilter("error")
        sol = solve(pr)
    assert sol.converged
    assert np.all(sol.states[1:, 1:] <= 200.0 * (1 + 1e-12))
    assert sol.rc_star.entries()[(2, 0)] > sc.rs.entries()[(2, 0)]


def test_degenerate_jam_row_keeps_multipliers_nonnegative():
    """[DERIVED] a jam row parallel to its dynamics row has multiplier 0."""
    sol = solve(assemble_problem(split_jam_scenario(horizon=1), 0.2))
    assert sol.converged and sol.kkt_residual_norm <= 1e-10


def test_iteration_cap_reports_nonconvergence(caplog):
    """[TRIVIAL]"""
    pr = assemble_problem(bundled_scenario(), 0.9)
    sol = solve(pr, SolverOptions(max_iter=1))
    assert not sol.converged
    sums = np.bincount(pr.pattern.cols, weights=sol.rc_star.values, minlength=16)
    assert np.allclose(sums, pr.scenario.topology.column_targets)


def test_smoothing_reports_hard_min_values():
    """[TRIVIAL] smoothed solves are re-evaluated under hard minima."""
    sc = merge_scenario(sigma=1.0)
    pr = assemble_problem(sc, 1.0)
    sol = solve(pr, SolverOptions(smoothing=True))
    assert any("smoothed" in m for m in sol.messages)
    traj = simulate(sc, routing_schedule(sc, sol.rc_star.values, np.ones(4)))
    assert sol.objective == raw_objective(traj)
    hard = solve(pr)
    assert abs(sol.objective - hard.objective) <= 1e-3 * hard.objective


def test_edge_order_does_not_change_objective():
    """[TRIVIAL] the decision index map depends only on the edge set."""
    sc = bundled_scenario()
    edges = list(sc.topology.edges)
    topo2 = NetworkTopology(7, 16, frozenset(reversed(edges)), sc.topology.on_ramps, sc.topology.internal,
                            sc.topology.off_ramps)
    assert np.array_equal(topo2.pattern.rows, sc.topology.pattern.rows)
    assert np.array_equal(topo2.pattern.cols, sc.topology.pattern.cols)


def test_project_simplex():
    """[DERIVED] projection matches a brute-force KKT characterisation."""
    v = np.array([0.9, 0.5, -0.2])
    p = project_simplex(v)
    assert p.sum() == pytest.approx(1.0) and np.all(p >= 0)
    theta = v[p > 0] - p[p > 0]
    assert np.allclose(theta, theta[0])
    assert np.all(v[p == 0] <= theta[0] + 1e-12)
