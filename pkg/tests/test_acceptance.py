"""Acceptance checks, one test per criterion, each printing a PASS/FAIL line."""

import time

import numpy as np
import pytest

from trustroute.cli import decay_direction, main
from trustroute.ctm import LinkParams, Scenario, check_cfl, simulate
from trustroute.experiments import decay_study, fragility_counts, nominal_solution, resilience_study, ttt_sweep
from trustroute.instances import FREEWAY, STEP_HOURS, bundled_scenario, merge_scenario
from trustroute.optimize import assemble_problem, objective_and_gradient, solve
from trustroute.resilience import brute_force_margin, build_report, psi_matrices, resilience_lower_bound

from conftest import random_routing
from test_ctm import random_network
from test_optimize import grid_objective

REL_SLACK = 0.05


@pytest.fixture
def verdict(capsys):
    start = time.perf_counter()

    def report(n, ok, detail, limit_s=None):
        elapsed = time.perf_counter() - start
        if limit_s is not None and elapsed >= limit_s:
            ok, detail = False, f"{detail}; runtime {elapsed:.1f}s exceeds {limit_s}s"
        with capsys.disabled():
            print(f"\ncriterion {n:2d}: {'PASS' if ok else 'FAIL'}  {detail}  ({elapsed:.2f}s)")
        assert ok, detail

    return report


def test_criterion_01_cfl(verdict):
    rep = check_cfl([LinkParams(**FREEWAY)], STEP_HOURS)
    verdict(1, rep.max_ratio == 1.0 and rep.passed, f"max v*T_s/L = {rep.max_ratio!r}", limit_s=1)


def test_criterion_02_mass_conservation(verdict):
    rng = np.random.default_rng(2024)
    worst, sizes = 0.0, []
    for _ in range(100):
        topo = random_network(rng, int(rng.integers(2, 6)))
        n, h = topo.num_links, int(rng.integers(0, 31))
        sizes.append(n)
        params = tuple(LinkParams(rng.uniform(50, 300), rng.uniform(2, 6), rng.uniform(10, 60),
                                  rng.uniform(0.005, 0.05)) for _ in range(n))
        T_s = min(p.length / p.free_speed for p in params) * rng.uniform(0.5, 1.0)
        lam = np.zeros((h, n))
        lam[:, sorted(topo.on_ramps)] = rng.uniform(0, 900, size=(h, len(topo.on_ramps)))
        x0 = np.array([rng.uniform(0, p.jam_density) for p in params])
        sc = Scenario(topo, params, lam, x0, 0.0, random_routing(topo, rng), T_s)
        traj = simulate(sc, sc.rs)
        off = sorted(topo.off_ramps)
        for k in range(h):
            lhs = traj.states[k + 1].sum() - traj.states[k].sum()
            rhs = T_s * (lam[k].sum() - traj.outflows[k, off].sum())
            worst = max(worst, abs(lhs - rhs))
    assert max(sizes) <= 16
    verdict(2, worst <= 1e-9, f"max per-step balance residual {worst:.2e} over 100 networks", limit_s=30)


def test_criterion_03_gradient(verdict):
    rng = np.random.default_rng(3)
    pr = assemble_problem(bundled_scenario(), 0.3)
    worst = 0.0
    for _ in range(20):
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
        worst = max(worst, np.linalg.norm(g - fd) / np.linalg.norm(fd))
    verdict(3, worst <= 1e-4, f"max relative gradient error {worst:.2e} at 20 points", limit_s=120)


def test_criterion_04_control_dominance(verdict):
    sigmas, horizons = [0.25, 0.5, 0.75, 1.0], [10, 20, 30]
    rows = ttt_sweep(bundled_scenario(), sigmas, horizons)
    dominated = all(r.optimized_ttt <= r.selfish_ttt + 1e-6 for r in rows)
    monotone = True
    for h in horizons:
        red = [r.reduction_pct for r in rows if r.horizon == h]
        monotone &= all(b >= a for a, b in zip(red, red[1:]))
    summary = ", ".join(f"h={h}: " + "/".join(f"{r.reduction_pct:.2e}" for r in rows if r.horizon == h)
                        for h in horizons)
    verdict(4, dominated and monotone, f"reductions % ({summary})", limit_s=600)


def test_criterion_05_merge_optimality(verdict):
    sc = merge_scenario(sigma=1.0)
    sol = solve(assemble_problem(sc, 1.0))
    vals = np.array([grid_objective(sc, 1.0, r) for r in np.linspace(0, 1, 1001)])
    rel = abs(sol.objective - vals.min()) / abs(vals.min())
    verdict(5, rel <= 1e-3 and sol.objective <= vals.min() * (1 + 1e-3),
            f"solver vs grid relative gap {rel:.2e}", limit_s=60)


def test_criterion_06_quadratic_decay(verdict):
    eps = [0.04, 0.02, 0.01, 0.005]
    sc = bundled_scenario(sigma=0.3)
    sigma0 = np.full(sc.n, 0.3)
    study = decay_study(sc, sigma0, eps, decay_direction(sigma0, max(eps)))
    ok = 1.8 <= study.slope <= 2.2 and study.ratios.size == 3 and np.all((study.ratios >= 3.5) & (study.ratios <= 4.5))
    verdict(6, ok, f"slope {study.slope:.3f}, e(2e)/e(e) = {np.round(study.ratios, 3).tolist()}", limit_s=600)


def test_criterion_07_sensitivity_vs_resolves(verdict, bundled_03):
    sc, s0 = bundled_03.scenario, 0.3
    eta1 = bundled_03.sens.eta1
    start = np.array(bundled_03.solution.rc_star.values)
    worst = 0.0
    for j in range(sc.n):
        e = np.zeros(sc.n)
        e[j] = 1e-4
        up = solve(assemble_problem(sc, s0 + e), initial=start).rc_star.values
        dn = solve(assemble_problem(sc, s0 - e), initial=start).rc_star.values
        fd = (up - dn) / 2e-4
        scale = max(np.linalg.norm(fd), np.linalg.norm(eta1[:, j]))
        err = np.linalg.norm(eta1[:, j] - fd)
        worst = max(worst, err / scale if scale > 1e-8 else err)
    verdict(7, worst <= 1e-2, f"max column relative error {worst:.2e} (max |eta1| {np.abs(eta1).max():.3g})",
            limit_s=600)


def _bound_vs_brute(solved):
    bound = resilience_lower_bound(solved.solution, solved.sens)
    bf = brute_force_margin(solved.scenario, solved.solution, eta1=solved.sens)
    fails = np.isfinite(bf)
    below = np.all(bound[fails] <= bf[fails] * (1 + REL_SLACK))
    quiet = np.all(~fails[np.isinf(bound)])
    return bool(below and quiet), bound, bf


def test_criterion_08_bound_vs_brute_force(verdict, split_02, bundled_03):
    ok_s, b_s, f_s = _bound_vs_brute(split_02)
    ok_b, b_b, f_b = _bound_vs_brute(bundled_03)
    detail = (f"split-jam bound {np.round(b_s, 4).tolist()} brute {f_s.tolist()}; "
              f"bundled failures found on {int(np.isfinite(f_b).sum())} links, "
              f"finite bounds in [{b_b[np.isfinite(b_b)].min():.3g}, {b_b[np.isfinite(b_b)].max():.3g}]")
    verdict(8, ok_s and ok_b, detail, limit_s=900)


def test_criterion_09_holder_step(verdict, bundled_03):
    rng = np.random.default_rng(9)
    psi = psi_matrices(bundled_03.solution, bundled_03.sens)
    ok, checked = True, 0
    for k in range(psi.shape[0]):
        for row in psi[k]:
            norm = np.max(np.abs(row))
            d = rng.normal(size=(1000, row.size)) * rng.random((1000, 1))
            ok &= bool(np.all(np.abs(d @ row) <= norm * np.abs(d).sum(axis=1) + 1e-12))
            j = int(np.argmax(np.abs(row)))
            ok &= abs(np.sign(row[j]) * row[j] - norm) <= 1e-12
            checked += 1
    verdict(9, ok, f"{checked} (step, link) rows, 1000 random directions each", limit_s=60)


def test_criterion_10_fragility_trend(verdict):
    sc = bundled_scenario(sigma=0.3)
    internal = sorted(sc.topology.internal)
    reps = resilience_study(sc, [0.0, 0.3])
    k, m = fragility_counts(reps[0.0], reps[0.3], internal)
    sol, eta = nominal_solution(sc, 0.0, zero_trust="limit")
    k_lim, _ = fragility_counts(build_report(sol, eta), reps[0.3], internal)
    detail = (f"bound(0) >= bound(0.3) on {k}/{m} internal links (selfish zero-trust optimum, bounds unbounded); "
              f"info: vanishing-trust limit routing gives {k_lim}/{m}")
    verdict(10, 2 * k > m, detail, limit_s=600)


CLI_RUNS = [
    ["simulate", "--scenario", "bundled"],
    ["optimize", "--scenario", "bundled"],
    ["optimize", "--scenario", "bundled", "--sweep-sigma", "0:1:0.5", "--sweep-horizon", "10"],
    ["sensitivity", "--scenario", "bundled"],
    ["resilience", "--scenario", "bundled", "--brute-force"],
    ["realtime", "--scenario", "bundled", "--tc", "0.45"],
]


def test_criterion_11_determinism(verdict, tmp_path):
    diffs = []
    for c, args in enumerate(CLI_RUNS):
        outs = []
        for rep in range(2):
            d = tmp_path / f"{c}_{rep}"
            assert main(args + ["--out", str(d)]) == 0
            outs.append({p.name: p.read_bytes() for p in sorted(d.iterdir())})
        if outs[0] != outs[1]:
            diffs.append(args[0])
    verdict(11, not diffs, f"{len(CLI_RUNS)} command lines re-run, differing: {diffs or 'none'}")
