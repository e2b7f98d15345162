"""Experiment drivers: travel-time sweeps, update-error decay, resilience
tables and the simulated real-time update loop."""

from __future__ import annotations

import logging
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from .ctm import Scenario, flow_terms
from .errors import AssumptionViolation, StructuralError
from .network import mix_values, trust_vector
from .optimize import (
    OptimizationSolution,
    SolverOptions,
    assemble_problem,
    project_routing,
    selfish_objective,
    solution_at,
    solve,
    vanishing_trust_routing,
)
from .resilience import GridSpec, ResilienceReport, build_report, worker_count
from .sensitivity import DecayStudy, assemble_sensitivity, linear_update, loglog_slope

log = logging.getLogger(__name__)


# --------------------------------------------------------------------------
# travel-time sweep


@dataclass(frozen=True)
class SweepRow:
    sigma0: float
    horizon: int
    selfish_ttt: float
    optimized_ttt: float
    reduction_pct: float
    converged: bool
    kkt_residual: float
    iterations: int


def continuation_start(rc, rs, sigma_prev: float, sigma_next: float) -> np.ndarray:
    """Warm start that keeps the mixed routing of the previous optimum."""
    if sigma_prev <= 0 or sigma_next <= 0:
        return np.array(rs, dtype=float)
    return rs + (sigma_prev / sigma_next) * (np.asarray(rc) - rs)


def _sweep_horizon(args) -> list:
    scenario, sigmas, h, options = args
    sc = scenario.with_horizon(h)
    rows = []
    prev_rc, prev_s = None, 0.0
    for s in sigmas:
        pr = assemble_problem(sc, s)
        base = selfish_objective(pr) * sc.step_hours
        start = None
        if prev_rc is not None:
            start = project_routing(continuation_start(prev_rc, sc.rs.values, prev_s, s), pr.groups,
                                    sc.topology.column_targets)
        sol = solve(pr, options, initial=start)
        red = 100.0 * (base - sol.ttt) / base if base > 0 else 0.0
        rows.append(SweepRow(float(s), int(h), base, sol.ttt, red, sol.converged, sol.kkt_residual_norm,
                             sol.iterations))
        if s > 0:
            prev_rc, prev_s = np.array(sol.rc_star.values), s
    return rows


def ttt_sweep(scenario: Scenario, sigmas, horizons, options: SolverOptions = None, workers: int = None) -> list:
    """Selfish vs optimized total travel time over a trust x horizon grid.

    Trust values are visited in increasing order per horizon, each solve
    warm-started from the previous optimum. Horizons are independent and may
    run in separate processes.
    """
    sigmas = sorted(float(s) for s in sigmas)
    jobs = [(scenario, sigmas, int(h), options) for h in horizons]
    workers = worker_count() if workers is None else max(1, workers)
    if workers > 1 and len(jobs) > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            parts = list(pool.map(_sweep_horizon, jobs))
    else:
        parts = [_sweep_horizon(j) for j in jobs]
    return [row for part in parts for row in part]


# --------------------------------------------------------------------------
# first-order update error


def decay_study(scenario: Scenario, sigma0, epsilons, direction=None, options: SolverOptions = None,
                solution: OptimizationSolution = None, eta1=None) -> DecayStudy:
    """Error of the first-order routing update against re-solves.

    For each ``eps`` the trust moves to ``sigma0 + eps * direction``; the error
    is the Euclidean distance between the updated routing and the re-solved
    optimum (warm-started at the nominal optimum).
    """
    n = scenario.n
    s0 = trust_vector(sigma0, n)
    d = np.ones(n) if direction is None else np.asarray(direction, dtype=float)
    if d.shape != (n,):
        raise StructuralError(f"direction must have length {n}")
    pr0 = assemble_problem(scenario, s0)
    sol0 = solution or solve(pr0, options)
    if eta1 is None:
        eta1 = assemble_sensitivity(sol0, pr0).eta1
    eps = np.asarray(list(epsilons), dtype=float)
    errors = np.zeros(eps.size)
    for m, e in enumerate(eps):
        if e == 0:
            continue
        s = s0 + e * d
        if np.any(s < 0) or np.any(s > 1):
            raise StructuralError(f"sigma0 + {e} * direction leaves [0, 1]")
        upd = linear_update(sol0.rc_star, eta1, s, s0)
        ref = solve(assemble_problem(scenario, s), options, initial=np.array(sol0.rc_star.values))
        errors[m] = float(np.linalg.norm(upd.values - ref.rc_star.values))
    pos = eps > 0
    order = np.argsort(eps[pos])
    e_sorted, err_sorted = eps[pos][order], errors[pos][order]
    ratios = np.array([err_sorted[m + 1] / err_sorted[m] for m in range(err_sorted.size - 1)
                       if np.isclose(e_sorted[m + 1], 2 * e_sorted[m]) and err_sorted[m] > 0])
    slope = loglog_slope(eps[pos], errors[pos]) if pos.sum() >= 2 else float("nan")
    return DecayStudy(eps, errors, slope, ratios)


# --------------------------------------------------------------------------
# resilience


def nominal_solution(scenario: Scenario, sigma0, options: SolverOptions = None, zero_trust: str = "selfish"):
    """Optimum and first-order sensitivity at ``sigma0``.

    At zero trust the optimum is not unique. ``zero_trust="selfish"`` keeps
    the solver's answer (the selfish routing, whose trust response is zero);
    ``"limit"`` uses the limit of the optimum as trust vanishes, for which
    the sensitivity is also zero but the mixing term is not.
    """
    s0 = trust_vector(sigma0, scenario.n)
    pr = assemble_problem(scenario, s0)
    if zero_trust not in ("selfish", "limit"):
        raise StructuralError(f"unknown zero-trust convention {zero_trust!r}")
    if np.all(s0 == 0) and zero_trust == "limit":
        sol = solution_at(pr, vanishing_trust_routing(pr), messages=("vanishing-trust limit routing",))
        return sol, np.zeros((pr.decision_dim, pr.n))
    sol = solve(pr, options)
    return sol, assemble_sensitivity(sol, pr).eta1


def resilience_study(scenario: Scenario, sigma0s, brute_force: bool = False, options: SolverOptions = None,
                     grid: GridSpec = None, zero_trust: str = "selfish") -> dict:
    out = {}
    for s in sigma0s:
        sol, eta1 = nominal_solution(scenario, s, options, zero_trust)
        out[float(s)] = build_report(sol, eta1, brute_force=brute_force, grid_spec=grid)
    return out


def fragility_counts(low: ResilienceReport, high: ResilienceReport, links) -> tuple:
    """How many of ``links`` keep a bound at the lower trust at least as large."""
    links = list(links)
    ok = [i for i in links if low.rho_lower_bound[i] >= high.rho_lower_bound[i]]
    return len(ok), len(links)


# --------------------------------------------------------------------------
# real-time loop


@dataclass(frozen=True, eq=False)
class RealtimeRun:
    strategy: str
    states: np.ndarray
    applied_rc: np.ndarray       # (h, n_r) controlled routing in force at each step
    resolve_steps: tuple
    ttt: float
    messages: tuple = field(default=())


@dataclass(frozen=True, eq=False)
class RealtimeResult:
    period_steps: int
    runs: dict

    def gap(self, strategy: str, reference: str = "resolve") -> float:
        return self.runs[strategy].ttt - self.runs[reference].ttt


def _period_steps(T_c: float, T_s: float) -> int:
    if not T_c > 0:
        raise StructuralError("re-solve period must be positive")
    return max(1, int(round(T_c / T_s)))


def _closed_loop(scenario: Scenario, trace: np.ndarray, period: int, strategy: str, options, cache: dict):
    """Simulate one strategy; ``cache`` maps trust vectors to (solution, eta1)."""
    h, n = scenario.horizon, scenario.n
    topo = scenario.topology
    x = np.array(scenario.x0, dtype=float)
    states = [x.copy()]
    applied, resolves, messages = [], [], []
    anchor = None
    for k in range(h):
        sig = trace[k]
        if anchor is None or (strategy == "resolve") or k % period == 0:
            key = sig.tobytes()
            if key not in cache:
                pr = assemble_problem(scenario, sig)
                sol = solve(pr, options)
                try:
                    eta1 = assemble_sensitivity(sol, pr).eta1
                except AssumptionViolation as exc:
                    log.warning("sensitivity unavailable at step %d (%s); holding the routing until the next re-solve",
                                k, ", ".join(exc.failed))
                    eta1 = None
                cache[key] = (sol, eta1)
            sol, eta1 = cache[key]
            if eta1 is None:
                messages.append(f"step {k}: sensitivity assumptions failed, routing held")
            anchor = (sol, eta1, sig)
            resolves.append(k)
        sol, eta1, s_anchor = anchor
        if strategy == "linear" and eta1 is not None:
            rc = linear_update(sol.rc_star, eta1, sig, s_anchor).values
        else:
            rc = np.array(sol.rc_star.values)
        applied.append(rc)
        R = np.zeros((n, n))
        p = topo.pattern
        R[p.rows, p.cols] = mix_values(sig, rc, scenario.rs.values, p)
        x = flow_terms(x, R, scenario.inflow[k], scenario.arrays, scenario.step_hours).next_state
        states.append(x.copy())
    states = np.array(states)
    ttt = float(scenario.step_hours * states[1:].sum())
    rc_arr = np.array(applied) if applied else np.zeros((0, topo.pattern.size))
    return RealtimeRun(strategy, states, rc_arr, tuple(resolves), ttt, tuple(messages))


def realtime_loop(scenario: Scenario, T_c: float, sigma_trace=None, options: SolverOptions = None) -> RealtimeResult:
    """Compare three ways of tracking a time-varying trust level.

    ``linear`` re-solves every ``T_c`` hours and applies first-order updates
    in between; ``hold`` re-solves on the same schedule but keeps the last
    optimum; ``resolve`` re-solves at every step. Each re-solve computes the
    optimum of the nominal problem at the trust observed at that step. The
    applied routing is mixed with the actual trust of the step.
    """
    trace = scenario.sigma if sigma_trace is None else np.asarray(sigma_trace, dtype=float)
    if trace.ndim == 1:
        trace = np.tile(trace[:, None], (1, scenario.n)) if trace.size == scenario.horizon else \
            np.tile(trust_vector(trace, scenario.n), (scenario.horizon, 1))
    if trace.shape != (scenario.horizon, scenario.n):
        raise StructuralError(f"trust trace must have shape ({scenario.horizon}, {scenario.n})")
    for row in trace:
        trust_vector(row, scenario.n)
    period = _period_steps(T_c, scenario.step_hours)
    cache = {}
    runs = {s: _closed_loop(scenario, trace, period, s, options, cache) for s in ("linear", "hold", "resolve")}
    return RealtimeResult(period, runs)


def step_trace(scenario: Scenario, before: float, after: float, at_step: int) -> np.ndarray:
    trace = np.full((scenario.horizon, scenario.n), float(before))
    trace[at_step:] = float(after)
    return trace
