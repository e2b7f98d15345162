"""Optimal controlled routing under trust-weighted mixing.

Decision variables are the controlled turning ratios ``rc`` on the active
pattern (``n_r`` entries, column-major). The program is

    min   sum_{k=1..h} 1^T x_k
    s.t.  x_{k+1} = F(x_k, r_k, lambda_k)        k = 0..h-1  (h*n rows)
          r_k = mix(sigma0, rs, rc)                 folded in by substitution
          sum_i rc_ij = b_j                         (n rows)
          rc - 1 <= 0,  -rc <= 0                    (2*n_r rows)
          x_k - B <= 0                              k = 1..h    (h*n rows)

Constraint rows are laid out exactly in that order. The solver works in the
reduced space (states eliminated by forward simulation); full-space
multipliers are fitted afterwards.
"""

from __future__ import annotations

import logging
import warnings
from dataclasses import dataclass, field

import numpy as np
import scipy.optimize

from .ctm import Scenario, Trajectory, check_cfl, flow_terms
from .errors import InfeasibleTopologyError, StructuralError
from .network import RoutingMatrix, mix_values, trust_vector, validate_topology

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class SolverOptions:
    max_iter: int = 200
    kkt_tol: float = 1e-6
    stationarity_tol: float = 1e-14
    max_outer: int = 30
    penalty_initial: float = 1.0
    penalty_growth: float = 10.0
    penalty_max: float = 1e8
    feasibility_tol: float = 1e-8
    smoothing: bool = False
    smoothing_temperature: float = 20.0
    active_tol: float = 1e-9
    hessian_step: float = 1e-6

    @property
    def tau(self):
        return self.smoothing_temperature if self.smoothing else None


@dataclass(frozen=True, eq=False)
class OptimizationProblem:
    scenario: Scenario
    sigma0: np.ndarray
    decision_dim: int
    num_eq: int
    num_ineq: int

    @property
    def n(self) -> int:
        return self.scenario.n

    @property
    def horizon(self) -> int:
        return self.scenario.horizon

    @property
    def pattern(self):
        return self.scenario.topology.pattern

    @property
    def groups(self) -> list:
        return self.pattern.column_groups()

    @property
    def jam_limit(self) -> np.ndarray:
        return self.scenario.arrays.jam_limit

    # constraint layout -------------------------------------------------
    def eq_dynamics(self, k: int, i: int) -> int:
        return k * self.n + i

    def eq_column(self, j: int) -> int:
        return self.horizon * self.n + j

    def ineq_upper(self, p: int) -> int:
        return p

    def ineq_lower(self, p: int) -> int:
        return self.decision_dim + p

    def ineq_jam(self, k: int, i: int) -> int:
        """Row of ``x_{k+1, i} <= B_i`` (``k`` counts from 0)."""
        return 2 * self.decision_dim + k * self.n + i

    def column_matrix(self) -> np.ndarray:
        E = np.zeros((self.n, self.decision_dim))
        E[self.pattern.cols, np.arange(self.decision_dim)] = 1.0
        return E

    def mixed_dense(self, rc, sigma=None) -> np.ndarray:
        sig = self.sigma0 if sigma is None else sigma
        p = self.pattern
        R = np.zeros((self.n, self.n))
        R[p.rows, p.cols] = mix_values(sig, np.asarray(rc, dtype=float), self.scenario.rs.values, p)
        return R

    @property
    def selfish_point(self) -> np.ndarray:
        return self.scenario.rs.values.copy()


@dataclass(frozen=True, eq=False)
class OptimizationSolution:
    rc_star: RoutingMatrix
    trajectory: Trajectory
    multipliers_eq: np.ndarray
    multipliers_ineq: np.ndarray
    objective: float
    kkt_residual_norm: float
    iterations: int
    converged: bool
    sigma0: np.ndarray
    scenario: Scenario = None
    stationarity: float = 0.0
    messages: tuple = field(default=())

    @property
    def ttt(self) -> float:
        """Total travel time in vehicle-hours."""
        return self.objective * self.scenario.step_hours

    @property
    def states(self) -> np.ndarray:
        return self.trajectory.states

    def to_dict(self) -> dict:
        p = self.rc_star.topology.pattern
        return {
            "rc_star": [
                {"to_link": int(i) + 1, "from_link": int(j) + 1, "value": float(v)}
                for i, j, v in zip(p.rows, p.cols, self.rc_star.values)
            ],
            "objective": self.objective,
            "ttt_veh_hours": self.ttt,
            "sigma0": self.sigma0.tolist(),
            "multipliers_eq": self.multipliers_eq.tolist(),
            "multipliers_ineq": self.multipliers_ineq.tolist(),
            "diagnostics": {
                "kkt_residual_norm": self.kkt_residual_norm,
                "iterations": self.iterations,
                "converged": self.converged,
                "stationarity": self.stationarity,
                "messages": list(self.messages),
            },
        }


def assemble_problem(scenario: Scenario, sigma0) -> OptimizationProblem:
    report = validate_topology(scenario.topology)
    if not report.ok:
        if any("without successors" in v for v in report.violations):
            raise InfeasibleTopologyError("; ".join(report.violations))
        raise StructuralError("; ".join(report.violations))
    cfl = check_cfl(scenario)
    if not cfl.passed:
        raise StructuralError(f"CFL condition violated: max v*T_s/L = {cfl.max_ratio:.6g}")
    n, h = scenario.n, scenario.horizon
    nr = scenario.topology.pattern.size
    s0 = trust_vector(sigma0, n)
    return OptimizationProblem(scenario, s0, nr, h * n + n, 2 * nr + h * n)


# --------------------------------------------------------------------------
# reduced-space evaluation


def rollout(problem: OptimizationProblem, rc, sigma=None, tau=None, jacobians=False):
    """States x_0..x_h and per-step terms for controlled routing ``rc``."""
    sc = problem.scenario
    R = problem.mixed_dense(rc, sigma)
    pattern = problem.pattern if jacobians else None
    states = np.empty((sc.horizon + 1, sc.n))
    states[0] = sc.x0
    steps = []
    for k in range(sc.horizon):
        t = flow_terms(states[k], R, sc.inflow[k], sc.arrays, sc.step_hours, pattern=pattern, tau=tau)
        states[k + 1] = t.next_state
        steps.append(t)
    return states, steps


def _adjoint_gradient(problem, steps, seeds, sigma):
    """Gradient of sum_k seeds[k-1] . x_k with respect to rc."""
    scale = sigma[problem.pattern.cols]
    grad = np.zeros(problem.decision_dim)
    h = problem.horizon
    if h == 0:
        return grad
    lam = seeds[h - 1].copy()
    for k in range(h - 1, -1, -1):
        grad += (steps[k].dF_dR.T @ lam) * scale
        if k > 0:
            lam = seeds[k - 1] + steps[k].dF_dx.T @ lam
    return grad


def objective_and_gradient(rc, problem: OptimizationProblem, tau=None):
    """Objective ``sum_k 1^T x_k`` and its adjoint gradient in ``rc``."""
    rc = np.asarray(rc, dtype=float)
    states, steps = rollout(problem, rc, tau=tau, jacobians=True)
    seeds = np.ones((problem.horizon, problem.n))
    return float(states[1:].sum()), _adjoint_gradient(problem, steps, seeds, problem.sigma0)


def _merit(problem, rc, mu, rho, tau):
    """Augmented Lagrangian of the jam-density path constraints."""
    states, steps = rollout(problem, rc, tau=tau, jacobians=True)
    B = problem.jam_limit
    finite = np.isfinite(B)
    c = np.where(finite, states[1:] - np.where(finite, B, 0.0), -np.inf)
    shifted = np.where(finite, np.maximum(0.0, mu + rho * np.where(finite, c, 0.0)), 0.0)
    phi = states[1:].sum() + (np.sum(shifted**2) - np.sum(mu**2)) / (2.0 * rho)
    seeds = 1.0 + shifted
    return float(phi), _adjoint_gradient(problem, steps, seeds, problem.sigma0), states


# --------------------------------------------------------------------------
# simplex geometry


def project_simplex(v: np.ndarray, total: float = 1.0) -> np.ndarray:
    """Euclidean projection onto {z >= 0, sum z = total} (sort-based)."""
    if v.size == 1:
        return np.array([total])
    u = np.sort(v)[::-1]
    css = np.cumsum(u) - total
    ind = np.arange(1, v.size + 1)
    cond = u - css / ind > 0
    r = ind[cond][-1]
    theta = css[cond][-1] / r
    return np.maximum(v - theta, 0.0)


def project_routing(values, groups, targets) -> np.ndarray:
    out = np.array(values, dtype=float)
    for j, g in enumerate(groups):
        if g.size:
            out[g] = project_simplex(out[g], targets[j])
    return out


def _stationarity(z, g, groups):
    worst = 0.0
    for grp in groups:
        if grp.size > 1:
            worst = max(worst, float(np.max(np.abs(z[grp] - project_simplex(z[grp] - g[grp])))))
    return worst


def _nullspace_basis(groups, size):
    """Orthonormal basis of {d : sum of d over each group = 0} (block diagonal)."""
    cols = []
    for grp in groups:
        m = grp.size
        if m < 2:
            continue
        # Helmert-style orthonormal complement of the ones vector
        for r in range(1, m):
            v = np.zeros(size)
            v[grp[:r]] = 1.0
            v[grp[r]] = -float(r)
            cols.append(v / np.linalg.norm(v))
    return np.array(cols).T if cols else np.zeros((size, 0))


def _active_set_qp(H, g, groups, lower, W0, max_iter=500):
    """min g.d + d.H.d/2  s.t. group sums of d = 0, d >= lower.

    Primal active-set method from the feasible point d = 0 with working set
    ``W0`` (indices whose lower bound is 0). Each equality-constrained
    subproblem is solved in null-space form; the bound multiplier of a
    working index is its reduced-gradient excess over a free index of the
    same group. ``H`` must be positive definite on the equality null space.
    """
    size = g.size
    d = np.zeros(size)
    W = set(W0)
    for _ in range(max_iter):
        free_groups = [np.array([e for e in grp if e not in W]) for grp in groups]
        Z = _nullspace_basis(free_groups, size)
        r = H @ d + g
        if Z.shape[1]:
            p = -Z @ np.linalg.solve(Z.T @ H @ Z, Z.T @ r)
        else:
            p = np.zeros(size)
        if np.max(np.abs(p), initial=0.0) <= 1e-13:
            r = H @ (d + p) + g
            worst, drop = 0.0, None
            for grp, fg in zip(groups, free_groups):
                if fg.size == 0:
                    continue
                ref = r[fg].mean()
                for e in grp:
                    if e in W and r[e] - ref < worst:
                        worst, drop = r[e] - ref, e
            if drop is None:
                return d, sorted(W)
            W.discard(drop)
            continue
        alpha, block = 1.0, None
        for e in range(size):
            if e not in W and p[e] < 0:
                a = (lower[e] - d[e]) / p[e]
                if a < alpha:
                    alpha, block = a, e
        d = d + alpha * p
        if block is not None:
            d[block] = lower[block]
            W.add(block)
    return d, sorted(W)


def _modified_hessian(H, Z, rel=1e-10):
    Hz = Z.T @ H @ Z
    if Hz.size == 0:
        return H, False
    Hz = 0.5 * (Hz + Hz.T)
    vals, vecs = np.linalg.eigh(Hz)
    floor = max(rel * np.max(np.abs(vals)), 1e-300)
    modified = bool(np.any(vals < floor))
    vals = np.maximum(vals, floor) if modified else vals
    return Z @ (vecs * vals) @ vecs.T @ Z.T, modified


def _minimize_on_simplices(fun, z0, groups, targets, opts: SolverOptions, max_iter: int):
    """Projected Newton on a product of simplices.

    ``fun(z) -> (value, gradient)``. Only groups with two or more entries move.
    Returns (z, iterations, stationarity, history).
    """
    free = np.concatenate([g for g in groups if g.size > 1]) if any(g.size > 1 for g in groups) else np.array([], int)
    z = z0.copy()
    phi, g = fun(z)
    if free.size == 0:
        return z, 0, 0.0
    pos = {int(e): c for c, e in enumerate(free)}
    fgroups = [np.array([pos[int(e)] for e in grp]) for grp in groups if grp.size > 1]
    Z = _nullspace_basis(fgroups, free.size)
    gscale = max(1.0, float(np.max(np.abs(g))))
    tol = opts.stationarity_tol * gscale
    stat = _stationarity(z, g, groups)
    prev_W = None
    stall = 0
    it = 0
    for it in range(1, max_iter + 1):
        if stat <= tol:
            it -= 1
            break
        zf = z[free]
        hstep = opts.hessian_step
        H = np.empty((free.size, free.size))
        for c, e in enumerate(free):
            zp, zm = z.copy(), z.copy()
            zp[e] += hstep
            zm[e] -= hstep
            H[:, c] = (fun(zp)[1][free] - fun(zm)[1][free]) / (2 * hstep)
        H = 0.5 * (H + H.T)
        Hm, modified = _modified_hessian(H, Z)
        gf = g[free]
        lower = -zf
        W0 = [c for c in range(free.size) if zf[c] <= 0.0]
        d, W = _active_set_qp(Hm, gf, fgroups, lower, W0)
        if modified and prev_W is not None and W == prev_W:
            # active set settled: exact Newton step on the current face
            Ef = [np.isin(np.arange(free.size), grp).astype(float) for grp in fgroups]
            A = np.vstack(Ef + [np.eye(free.size)[W]]) if W else np.vstack(Ef)
            _, sv, vt = np.linalg.svd(A)
            rank = int(np.sum(sv > 1e-12))
            Zf = vt[rank:].T
            if Zf.shape[1]:
                Hf = Zf.T @ H @ Zf
                if np.min(np.linalg.eigvalsh(0.5 * (Hf + Hf.T))) > 0:
                    pn = -Zf @ np.linalg.solve(Hf, Zf.T @ gf)
                    if gf @ pn < 0 and np.all(pn >= lower):
                        d = pn
        prev_W = W
        slope = float(gf @ d)
        log.debug("iter %d: phi=%.12g stat=%.3e slope=%.3e |d|=%.3e active=%d modified=%s",
                  it, phi, stat, slope, np.max(np.abs(d)), len(W), modified)
        if slope >= 0 or not np.all(np.isfinite(d)):
            break
        alpha = 1.0
        accepted = False
        noisy = abs(slope) < 1e-11 * (1.0 + abs(phi))
        for _ in range(40):
            zt = z.copy()
            step = zf + alpha * d
            zt[free] = np.where(step < 1e-12, 0.0, step)
            zt = project_routing(zt, groups, targets)
            phit, gt = fun(zt)
            if phit <= phi + 1e-4 * alpha * slope:
                accepted = True
            elif noisy and _stationarity(zt, gt, groups) < stat:
                accepted = True
            if accepted:
                break
            alpha *= 0.5
        if not accepted:
            log.debug("line search failed at iter %d", it)
            stall += 1
            if stall >= 2:
                break
            continue
        new_stat = _stationarity(zt, gt, groups)
        z, phi, g = zt, phit, gt
        stall = stall + 1 if new_stat >= stat else 0
        stat = new_stat
        if stall >= 3:
            break
    return z, it, stat


# --------------------------------------------------------------------------
# full-space Lagrangian machinery


def full_steps(problem: OptimizationProblem, rc, X, sigma=None, tau=None):
    """Per-step terms evaluated at the full-space point (rc, x_1..x_h)."""
    sc = problem.scenario
    R = problem.mixed_dense(rc, sigma)
    out = []
    for k in range(sc.horizon):
        xk = sc.x0 if k == 0 else X[k - 1]
        out.append(flow_terms(xk, R, sc.inflow[k], sc.arrays, sc.step_hours, pattern=problem.pattern, tau=tau))
    return out


def split_multipliers(problem: OptimizationProblem, u, w):
    h, n, nr = problem.horizon, problem.n, problem.decision_dim
    return {
        "u_up": u[:nr],
        "u_lo": u[nr:2 * nr],
        "u_jam": u[2 * nr:].reshape(h, n),
        "w_dyn": w[: h * n].reshape(h, n),
        "w_sum": w[h * n:],
    }


def lagrangian_gradient(problem: OptimizationProblem, rc, X, u, w, steps, sigma=None):
    """(dL/drc, dL/dX) for the Lagrangian f0 + u.g + w.h."""
    sig = problem.sigma0 if sigma is None else sigma
    parts = split_multipliers(problem, u, w)
    scale = sig[problem.pattern.cols]
    h = problem.horizon
    g_rc = parts["u_up"] - parts["u_lo"] + problem.column_matrix().T @ parts["w_sum"]
    g_x = 1.0 + np.where(np.isfinite(problem.jam_limit), parts["u_jam"], 0.0)
    wd = parts["w_dyn"]
    for k in range(h):
        g_rc -= (steps[k].dF_dR.T @ wd[k]) * scale
        g_x[k] += wd[k]
        if k > 0:
            g_x[k - 1] -= steps[k].dF_dx.T @ wd[k]
    return g_rc, g_x


def constraint_values(problem: OptimizationProblem, rc, X, steps):
    """(g, h) in the documented row layout."""
    sc = problem.scenario
    rc = np.asarray(rc, dtype=float)
    next_states = np.array([t.next_state for t in steps]).reshape(sc.horizon, sc.n)
    h_dyn = (X - next_states).ravel()
    h_sum = problem.column_matrix() @ rc - sc.topology.column_targets
    g_jam = (X - problem.jam_limit).ravel()
    g = np.concatenate([rc - 1.0, -rc, g_jam])
    return g, np.concatenate([h_dyn, h_sum])


def kkt_residual_parts(problem, rc, X, u, w, sigma=None):
    steps = full_steps(problem, rc, X, sigma)
    g_rc, g_x = lagrangian_gradient(problem, rc, X, u, w, steps, sigma)
    g, hv = constraint_values(problem, rc, X, steps)
    finite = np.isfinite(g)
    comp = np.where(finite, u * np.where(finite, g, 0.0), u)
    return {
        "stationarity": np.concatenate([g_rc, g_x.ravel()]),
        "equality": hv,
        "inequality": np.maximum(np.where(finite, g, -np.inf), 0.0),
        "complementarity": comp,
        "dual": np.maximum(-u, 0.0),
    }


def kkt_residual(candidate: OptimizationSolution, problem: OptimizationProblem) -> float:
    """Max-norm of stationarity, primal feasibility, complementarity and dual sign."""
    X = candidate.trajectory.states[1:]
    parts = kkt_residual_parts(
        problem, candidate.rc_star.values, X, candidate.multipliers_ineq, candidate.multipliers_eq, candidate.sigma0
    )
    return max((float(np.max(np.abs(v))) if v.size else 0.0) for v in parts.values())


def active_sets(problem: OptimizationProblem, rc, X, tol: float):
    """Indices (in the inequality layout) of active lower bounds and jam rows.

    Upper bounds ``rc <= 1`` are implied by nonnegativity plus the column
    sum, so they never enter the active set.
    """
    lo = [problem.ineq_lower(p) for p in range(problem.decision_dim) if rc[p] <= tol and _in_free_group(problem, p)]
    B = problem.jam_limit
    jam = [
        problem.ineq_jam(k, i)
        for k in range(problem.horizon)
        for i in range(problem.n)
        if np.isfinite(B[i]) and X[k, i] - B[i] >= -tol * B[i]
    ]
    return lo, jam


def _in_free_group(problem, p):
    j = problem.pattern.cols[p]
    return int(np.sum(problem.pattern.cols == j)) > 1


def fit_multipliers(problem: OptimizationProblem, rc, X, active_ineq, sigma=None):
    """Least-squares multipliers on the full-space stationarity conditions."""
    h, n, nr = problem.horizon, problem.n, problem.decision_dim
    steps = full_steps(problem, rc, X, sigma)
    q, p = problem.num_ineq, problem.num_eq
    nz = nr + h * n
    active = list(active_ineq)
    cols = []
    # stationarity is affine in (u, w): probe each unknown column
    zero_u, zero_w = np.zeros(q), np.zeros(p)
    gr0, gx0 = lagrangian_gradient(problem, rc, X, zero_u, zero_w, steps, sigma)
    base = np.concatenate([gr0, gx0.ravel()])
    for idx in active:
        e = zero_u.copy()
        e[idx] = 1.0
        gr, gx = lagrangian_gradient(problem, rc, X, e, zero_w, steps, sigma)
        cols.append(np.concatenate([gr, gx.ravel()]) - base)
    for idx in range(p):
        e = zero_w.copy()
        e[idx] = 1.0
        gr, gx = lagrangian_gradient(problem, rc, X, zero_u, e, steps, sigma)
        cols.append(np.concatenate([gr, gx.ravel()]) - base)
    K = np.array(cols).T if cols else np.zeros((nz, 0))
    theta = np.linalg.lstsq(K, -base, rcond=None)[0]
    na = len(active)
    if na and np.min(theta[:na]) < 0:
        # degenerate active set: keep the inequality multipliers nonnegative
        lb = np.concatenate([np.zeros(na), np.full(p, -np.inf)])
        theta = scipy.optimize.lsq_linear(K, -base, bounds=(lb, np.inf), method="bvls", tol=1e-14).x
    u = np.zeros(q)
    u[active] = theta[: len(active)]
    w = theta[len(active):]
    return u, w


# --------------------------------------------------------------------------
# solver


def solve(problem: OptimizationProblem, options: SolverOptions = None, initial=None) -> OptimizationSolution:
    """Minimize total travel time over controlled routing.

    Augmented Lagrangian on the jam-density path constraints around a
    projected Newton inner loop on the routing simplices.
    """
    opts = options or SolverOptions()
    sc = problem.scenario
    groups = problem.groups
    targets = sc.topology.column_targets
    z = problem.selfish_point if initial is None else project_routing(initial, groups, targets)
    tau = opts.tau
    messages = []
    B = problem.jam_limit
    finite = np.isfinite(B)

    states0, _ = rollout(problem, z)
    if np.any(states0[1:, finite] > B[finite]):
        msg = "jam-density constraints violated at the initial routing; starting feasibility restoration"
        warnings.warn(msg, RuntimeWarning, stacklevel=2)
        messages.append(msg)

    mu = np.zeros((problem.horizon, problem.n))
    rho = opts.penalty_initial
    total_iter = 0
    prev_viol = np.inf
    stat = 0.0
    for outer in range(opts.max_outer):
        def fun(zz, mu=mu, rho=rho):
            phi, grad, _ = _merit(problem, zz, mu, rho, tau)
            return phi, grad

        z, iters, stat = _minimize_on_simplices(fun, z, groups, targets, opts, max(1, opts.max_iter - total_iter))
        total_iter += iters
        states, _ = rollout(problem, z, tau=tau)
        c = np.where(finite, states[1:] - np.where(finite, B, 0.0), -np.inf)
        viol = float(np.max(np.maximum(c, 0.0), initial=0.0))
        mu_new = np.where(finite, np.maximum(0.0, mu + rho * np.where(finite, c, 0.0)), 0.0)
        if viol <= opts.feasibility_tol and np.max(np.abs(mu_new - mu), initial=0.0) <= opts.feasibility_tol * max(1.0, rho):
            mu = mu_new
            break
        if viol > 0.25 * prev_viol:
            rho = min(rho * opts.penalty_growth, opts.penalty_max)
        prev_viol = viol
        mu = mu_new
        if total_iter >= opts.max_iter:
            break

    if tau is not None:
        messages.append("smoothed allocation used during optimization; reported values use hard minima")
    states, steps = rollout(problem, z)
    X = states[1:]
    lo, jam = active_sets(problem, z, X, opts.active_tol)
    u, w = fit_multipliers(problem, z, X, lo + jam)
    traj = Trajectory(states, np.array([t.outflow for t in steps]).reshape(problem.horizon, problem.n),
                      np.array([t.kappa for t in steps]).reshape(problem.horizon, problem.n))
    rc_mat = RoutingMatrix(sc.topology, z)
    sol = OptimizationSolution(
        rc_star=rc_mat,
        trajectory=traj,
        multipliers_eq=w,
        multipliers_ineq=u,
        objective=float(X.sum()),
        kkt_residual_norm=np.nan,
        iterations=total_iter,
        converged=False,
        sigma0=problem.sigma0,
        scenario=sc,
        stationarity=stat,
        messages=tuple(messages),
    )
    res = kkt_residual(sol, problem)
    dual_ok = bool(np.all(u >= -opts.kkt_tol))
    converged = res <= opts.kkt_tol and dual_ok and total_iter < opts.max_iter
    if not converged:
        log.warning("solver did not converge: kkt residual %.3e after %d iterations", res, total_iter)
    object.__setattr__(sol, "kkt_residual_norm", res)
    object.__setattr__(sol, "converged", converged)
    object.__setattr__(sol, "multipliers_ineq", np.maximum(u, 0.0))
    return sol


def vanishing_trust_routing(problem: OptimizationProblem) -> np.ndarray:
    """Limit of the optimal controlled routing as trust tends to zero.

    For small trust the objective is linear in ``rc`` to first order, so the
    minimizer is the vertex that sends each column entirely to the successor
    with the smallest marginal cost at the selfish routing (lowest link index
    on ties).
    """
    full = OptimizationProblem(problem.scenario, np.ones(problem.n), problem.decision_dim, problem.num_eq, problem.num_ineq)
    _, grad = objective_and_gradient(problem.selfish_point, full)
    out = problem.selfish_point
    for grp in problem.groups:
        if grp.size > 1:
            out[grp] = 0.0
            out[grp[int(np.argmin(grad[grp]))]] = 1.0
    return out


def solution_at(problem: OptimizationProblem, rc, messages=(), options: SolverOptions = None) -> OptimizationSolution:
    """Package a given routing as a solution record (multipliers fitted)."""
    opts = options or SolverOptions()
    sc = problem.scenario
    rc = project_routing(rc, problem.groups, sc.topology.column_targets)
    states, steps = rollout(problem, rc)
    X = states[1:]
    lo, jam = active_sets(problem, rc, X, opts.active_tol)
    u, w = fit_multipliers(problem, rc, X, lo + jam)
    traj = Trajectory(states, np.array([t.outflow for t in steps]).reshape(problem.horizon, problem.n),
                      np.array([t.kappa for t in steps]).reshape(problem.horizon, problem.n))
    sol = OptimizationSolution(RoutingMatrix(sc.topology, rc), traj, w, np.maximum(u, 0.0), float(X.sum()), np.nan,
                               0, False, problem.sigma0, sc, 0.0, tuple(messages))
    res = kkt_residual(sol, problem)
    object.__setattr__(sol, "kkt_residual_norm", res)
    object.__setattr__(sol, "converged", res <= opts.kkt_tol)
    return sol


def selfish_objective(problem: OptimizationProblem) -> float:
    states, _ = rollout(problem, problem.selfish_point)
    return float(states[1:].sum())
