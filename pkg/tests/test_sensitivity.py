import json
import time

import numpy as np
import pytest

from trustroute.ctm import LinkParams, Scenario
from trustroute.errors import AssumptionViolation
from trustroute.instances import FREEWAY, split_jam_scenario
from trustroute.network import NetworkTopology, build_uniform_selfish
from trustroute.optimize import assemble_problem, solve
from trustroute.sensitivity import (
    KKTSystem,
    assemble_sensitivity,
    check_assumptions,
    linear_update,
    loglog_slope,
)


def test_merge_eta_closed_form(merge_05):
    """[DERIVED] the optimal mixed split is trust-independent, so
    rc*(s) = rs + (r* - rs)/s and d rc*/d s = -(rc* - rs)/s."""
    sol, sc = merge_05.solution, merge_05.scenario
    eta1 = merge_05.sens.eta1
    expected = -(sol.rc_star.values - sc.rs.values) / 0.5
    assert np.allclose(eta1[:, 0], expected, rtol=1e-4, atol=1e-9)
    assert np.allclose(eta1[:, 1:], 0.0, atol=1e-9)


def test_linear_system_residual(bundled_03):
    """[TRIVIAL] M eta + N = 0 to 1e-8 |N|."""
    d = bundled_03.sens
    assert np.max(np.abs(d.M @ d.eta + d.N)) <= 1e-8 * np.max(np.abs(d.N))
    nr = bundled_03.problem.decision_dim
    assert d.eta1.shape == (nr, 16)
    assert d.eta2.shape == (bundled_03.problem.num_ineq, 16)
    assert d.eta3.shape == (bundled_03.problem.num_eq, 16)


def test_analytic_and_difference_jacobians_agree(bundled_03):
    """[DERIVED] two independent Jacobian paths."""
    system = KKTSystem(bundled_03.problem, bundled_03.solution)
    M1, N1 = system.jacobian_fd()
    M2, N2 = system.jacobian_analytic()
    scale = max(1.0, np.max(np.abs(M1)))
    assert np.max(np.abs(M1 - M2)) <= 1e-4 * scale
    assert np.max(np.abs(N1 - N2)) <= 1e-4 * max(1.0, np.max(np.abs(N1)))
    d = assemble_sensitivity(bundled_03.solution, bundled_03.problem, method="analytic")
    assert np.allclose(d.eta1, bundled_03.sens.eta1, atol=1e-4 * max(1.0, np.abs(d.eta1).max()))


def test_forward_differences_are_close_on_merge(merge_05):
    """[DERIVED] the optional forward scheme agrees with the central one."""
    fwd = assemble_sensitivity(merge_05.solution, merge_05.problem, scheme="forward")
    assert np.allclose(fwd.eta1, merge_05.sens.eta1, atol=1e-3 * np.abs(merge_05.sens.eta1).max())


def test_eta_matches_resolve_differences_on_merge(merge_05):
    """[DERIVED] re-solve oracle with central differences in trust."""
    sc, s0 = merge_05.scenario, 0.5
    eta1 = merge_05.sens.eta1
    start = np.array(merge_05.solution.rc_star.values)
    for j in range(4):
        e = np.zeros(4)
        e[j] = 1e-4
        up = solve(assemble_problem(sc, s0 + e), initial=start).rc_star.values
        dn = solve(assemble_problem(sc, s0 - e), initial=start).rc_star.values
        fd = (up - dn) / 2e-4
        assert np.linalg.norm(eta1[:, j] - fd) <= 1e-2 * max(np.linalg.norm(fd), np.linalg.norm(eta1[:, j])) + 1e-8


def chain(x0, inflow):
    topo = NetworkTopology.from_junctions(2, (None, 0, 1), (0, 1, None))
    lam = np.zeros((4, 3))
    lam[:, 0] = inflow
    return Scenario(topo, (LinkParams(**FREEWAY),) * 3, lam, np.full(3, x0), 0.4, build_uniform_selfish(topo), 0.15)


def test_trust_independent_problem_has_zero_sensitivity():
    """[TRIVIAL] without any flow trust enters nowhere: N = 0 and eta = 0."""
    pr = assemble_problem(chain(0.0, 0.0), 0.4)
    d = assemble_sensitivity(solve(pr), pr)
    assert np.all(d.N == 0)
    assert np.all(d.eta == 0)


def test_structurally_fixed_routing_has_zero_eta1():
    """[TRIVIAL] a chain without splits: rc cannot move, only multipliers do."""
    pr = assemble_problem(chain(100.0, 600.0), 0.4)
    d = assemble_sensitivity(solve(pr), pr)
    assert np.all(d.eta1 == 0)
    assert np.any(d.eta3 != 0)


def test_assumptions_pass_on_merge(merge_05):
    """[DERIVED] nondegenerate interior optimum."""
    rep = merge_05.sens.assumptions
    assert rep.ok and rep.licq_ok and rep.second_order_ok and rep.strict_complementarity_ok
    assert rep.min_reduced_eigenvalue > 0 and rep.min_singular_value > 0
    assert rep.active_lower == () and rep.active_jam == ()


def test_active_bound_with_zero_multiplier_fails_strict_complementarity(split_02):
    """[TRIVIAL]"""
    sol, pr = split_02.solution, split_02.problem
    rep = split_02.sens.assumptions
    assert rep.strict_complementarity_ok and rep.active_lower
    u = sol.multipliers_ineq.copy()
    u[list(rep.active_lower)] = 0.0
    broken = type(sol)(sol.rc_star, sol.trajectory, sol.multipliers_eq, u, sol.objective, sol.kkt_residual_norm,
                       sol.iterations, sol.converged, sol.sigma0, sol.scenario)
    bad = check_assumptions(broken, pr)
    assert not bad.strict_complementarity_ok and "strict_complementarity" in bad.failed
    with pytest.raises(AssumptionViolation) as err:
        assemble_sensitivity(broken, pr)
    assert "strict_complementarity" in err.value.failed


def test_degenerate_jam_row_is_rejected():
    """[DERIVED] a jam row parallel to its dynamics row violates LICQ."""
    pr = assemble_problem(split_jam_scenario(horizon=1), 0.2)
    sol = solve(pr)
    rep = check_assumptions(sol, pr)
    assert not rep.ok
    with pytest.raises(AssumptionViolation):
        assemble_sensitivity(sol, pr)


def test_linear_update_identities(bundled_03):
    """[TRIVIAL] zero step is exact; zero eta is constant in trust."""
    rc = bundled_03.solution.rc_star
    eta1 = bundled_03.sens.eta1
    s0 = np.full(16, 0.3)
    assert linear_update(rc, eta1, s0, s0) == rc
    zero = np.zeros_like(eta1)
    assert linear_update(rc, zero, np.full(16, 0.9), s0) == rc


def test_linear_update_projects_and_reports_raw(merge_05):
    """[TRIVIAL] a large step leaves the simplex and is projected back."""
    rc = merge_05.solution.rc_star
    eta1 = np.zeros((4, 4))
    eta1[0, 0], eta1[1, 0] = 10.0, -10.0
    R, raw = linear_update(rc, eta1, np.array([0.6, 0.5, 0.5, 0.5]), np.full(4, 0.5), return_raw=True)
    assert raw[0] > 1 and raw[1] < 0
    assert R.values[:2].tolist() == [1.0, 0.0]
    assert np.array_equal(R.values[2:], rc.values[2:])


def test_linear_update_much_faster_than_solve(bundled_03):
    """[DERIVED] wall-clock ratio."""
    sc = bundled_03.scenario
    rc, eta1 = bundled_03.solution.rc_star, bundled_03.sens.eta1
    s0, s1 = np.full(16, 0.3), np.full(16, 0.31)
    t0 = time.perf_counter()
    for _ in range(20):
        linear_update(rc, eta1, s1, s0)
    t_upd = (time.perf_counter() - t0) / 20
    t0 = time.perf_counter()
    solve(assemble_problem(sc, s1), initial=np.array(rc.values))
    t_solve = time.perf_counter() - t0
    assert t_solve >= 10 * t_upd


def test_sensitivity_json_shapes(merge_05):
    """[TRIVIAL]"""
    doc = json.loads(merge_05.sens.to_json())
    assert doc["eta1"]["shape"] == list(merge_05.sens.eta1.shape)
    assert len(doc["M"]["data"]) == np.prod(doc["M"]["shape"])


def test_loglog_slope_exact_power():
    """[TRIVIAL]"""
    eps = np.array([0.04, 0.02, 0.01])
    assert loglog_slope(eps, 3 * eps**2) == pytest.approx(2.0)
