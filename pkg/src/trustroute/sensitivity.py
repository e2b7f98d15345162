"""Sensitivity of the optimal routing to the trust vector.

The KKT system of the full-space program is differentiated with the active
set frozen at the nominal solution. With ``y = (rc, x_1..x_h, u, w)`` the
residual ``F(y, sigma)`` stacks

    stationarity in rc      (n_r rows)
    stationarity in states  (h*n rows)
    complementarity         (q rows; u_i g_i if active, u_i otherwise)
    equalities              (p rows; vacuous column sums become w_j)

and ``M dy/dsigma = -N`` with ``M = dF/dy``, ``N = dF/dsigma``.

Columns whose trust is zero carry no decision; their routing entries and
column multiplier are frozen (identity rows), so their sensitivity is zero.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np
import scipy.linalg

from .ctm import flow_terms
from .errors import AssumptionViolation, StructuralError
from .network import RoutingMatrix, trust_vector
from .optimize import (
    OptimizationProblem,
    OptimizationSolution,
    active_sets,
    constraint_values,
    full_steps,
    lagrangian_gradient,
    project_simplex,
)

FD_STEP = {"forward": 1e-7, "central": 1e-5}
FROZEN_TRUST = 1e-12


@dataclass(frozen=True)
class AssumptionReport:
    second_order_ok: bool
    min_reduced_eigenvalue: float
    licq_ok: bool
    min_singular_value: float
    strict_complementarity_ok: bool
    min_active_multiplier: float
    active_lower: tuple = ()
    active_jam: tuple = ()
    note: str = (
        "second-order check uses the null space of all active constraints, "
        "a conservative proxy for the critical cone"
    )

    @property
    def ok(self) -> bool:
        return self.second_order_ok and self.licq_ok and self.strict_complementarity_ok

    @property
    def failed(self) -> tuple:
        out = []
        if not self.licq_ok:
            out.append("licq")
        if not self.strict_complementarity_ok:
            out.append("strict_complementarity")
        if not self.second_order_ok:
            out.append("second_order")
        return tuple(out)


@dataclass(frozen=True, eq=False)
class SensitivityData:
    M: np.ndarray
    N: np.ndarray
    eta1: np.ndarray
    eta_states: np.ndarray
    eta2: np.ndarray
    eta3: np.ndarray
    sigma0: np.ndarray
    rc_star: np.ndarray
    residual: float
    method: str = "fd"
    assumptions: AssumptionReport = None

    @property
    def eta(self) -> np.ndarray:
        return np.vstack([self.eta1, self.eta_states, self.eta2, self.eta3])

    def to_json(self) -> str:
        def mat(a):
            a = np.asarray(a)
            return {"shape": list(a.shape), "data": a.ravel(order="C").tolist()}

        doc = {
            "M": mat(self.M),
            "N": mat(self.N),
            "eta1": mat(self.eta1),
            "eta_states": mat(self.eta_states),
            "eta2": mat(self.eta2),
            "eta3": mat(self.eta3),
            "sigma0": self.sigma0.tolist(),
            "rc_star": self.rc_star.tolist(),
            "residual": self.residual,
            "method": self.method,
        }
        return json.dumps(doc, sort_keys=True)


def _scheme(scheme, step):
    if scheme not in FD_STEP:
        raise ValueError(f"unknown difference scheme {scheme!r}")
    return scheme == "central", FD_STEP[scheme] if step is None else step


class KKTSystem:
    """Frozen-active-set KKT residual around a nominal solution."""

    def __init__(self, problem: OptimizationProblem, solution: OptimizationSolution, active_tol: float = 1e-9):
        self.problem = problem
        self.solution = solution
        self.sigma0 = solution.sigma0
        self.rc0 = np.array(solution.rc_star.values)
        self.X0 = np.array(solution.trajectory.states[1:])
        self.u0 = np.array(solution.multipliers_ineq)
        self.w0 = np.array(solution.multipliers_eq)
        pr = problem
        lo, jam = active_sets(pr, self.rc0, self.X0, active_tol)
        frozen_cols = {j for j in range(pr.n) if self.sigma0[j] <= FROZEN_TRUST}
        cols = pr.pattern.cols
        self.frozen = np.array([cols[p] in frozen_cols for p in range(pr.decision_dim)], dtype=bool)
        self.frozen_cols = np.array(sorted(frozen_cols), dtype=int)
        lo = [i for i in lo if not self.frozen[i - pr.decision_dim]]
        self.active_lower = tuple(lo)
        self.active_jam = tuple(jam)
        self.active = np.zeros(pr.num_ineq, dtype=bool)
        self.active[list(lo) + list(jam)] = True
        counts = np.bincount(cols, minlength=pr.n)
        self.vacuous_cols = np.array([j for j in range(pr.n) if counts[j] == 0 or j in frozen_cols], dtype=int)
        nr, hn = pr.decision_dim, pr.horizon * pr.n
        self.sizes = (nr, hn, pr.num_ineq, pr.num_eq)
        self.offsets = np.cumsum((0,) + self.sizes)

    @property
    def dim(self) -> int:
        return int(self.offsets[-1])

    def pack(self, rc, X, u, w):
        return np.concatenate([rc, np.ravel(X), u, w])

    def unpack(self, y):
        o = self.offsets
        pr = self.problem
        return y[o[0]:o[1]], y[o[1]:o[2]].reshape(pr.horizon, pr.n), y[o[2]:o[3]], y[o[3]:o[4]]

    @property
    def y0(self) -> np.ndarray:
        return self.pack(self.rc0, self.X0, self.u0, self.w0)

    def residual(self, y, sigma=None, steps=None) -> np.ndarray:
        pr = self.problem
        sig = self.sigma0 if sigma is None else sigma
        rc, X, u, w = self.unpack(y)
        if steps is None:
            steps = full_steps(pr, rc, X, sig)
        g_rc, g_x = lagrangian_gradient(pr, rc, X, u, w, steps, sig)
        g_rc = np.where(self.frozen, rc - self.rc0, g_rc)
        g, hv = constraint_values(pr, rc, X, steps)
        finite = np.isfinite(g)
        comp = np.where(self.active & finite, u * np.where(finite, g, 0.0), u)
        hv = hv.copy()
        col_rows = pr.horizon * pr.n + self.vacuous_cols
        hv[col_rows] = w[col_rows]
        return np.concatenate([g_rc, g_x.ravel(), comp, hv])

    def _steps_for_column(self, y, c, base_steps, sigma):
        """Recompute only the step terms that depend on coordinate ``c``."""
        o = self.offsets
        if c < o[1]:
            rc, X, _, _ = self.unpack(y)
            return full_steps(self.problem, rc, X, sigma)
        if c < o[2]:
            k = (c - o[1]) // self.problem.n + 1
            if k >= self.problem.horizon:
                return base_steps
            rc, X, _, _ = self.unpack(y)
            sc = self.problem.scenario
            R = self.problem.mixed_dense(rc, sigma)
            t = flow_terms(X[k - 1], R, sc.inflow[k], sc.arrays, sc.step_hours, pattern=self.problem.pattern)
            steps = list(base_steps)
            steps[k] = t
            return steps
        return base_steps

    def _diff_y(self, y0, c, base_steps, F0, step, central):
        y = y0.copy()
        y[c] += step
        Fp = self.residual(y, steps=self._steps_for_column(y, c, base_steps, self.sigma0))
        if not central:
            return (Fp - F0) / step
        y[c] = y0[c] - step
        Fm = self.residual(y, steps=self._steps_for_column(y, c, base_steps, self.sigma0))
        return (Fp - Fm) / (2 * step)

    def _diff_sigma(self, y0, j, F0, step, central):
        s = self.sigma0.copy()
        s[j] += step
        Fp = self.residual(y0, sigma=s)
        if not central:
            return (Fp - F0) / step
        s[j] = self.sigma0[j] - step
        return (Fp - self.residual(y0, sigma=s)) / (2 * step)

    def jacobian_fd(self, step: float = None, scheme: str = "central"):
        """(M, N) by finite differences of the residual.

        ``scheme="forward"`` with step 1e-7 is the cheap variant; its
        truncation and rounding errors (about 1e-7 per entry) can be as large
        as the smallest reduced curvature, so central differences with step
        1e-5 are the default.
        """
        central, step = _scheme(scheme, step)
        y0 = self.y0
        rc, X, _, _ = self.unpack(y0)
        base_steps = full_steps(self.problem, rc, X, self.sigma0)
        F0 = self.residual(y0, steps=base_steps)
        M = np.empty((F0.size, y0.size))
        for c in range(y0.size):
            M[:, c] = self._diff_y(y0, c, base_steps, F0, step, central)
        N = np.empty((F0.size, self.problem.n))
        for j in range(self.problem.n):
            N[:, j] = self._diff_sigma(y0, j, F0, step, central)
        return M, N

    def jacobian_analytic(self, step: float = None, scheme: str = "central"):
        """(M, N) with exact blocks for every row that is linear in u and w
        or built from one-step Jacobians; the Lagrangian Hessian block and the
        sigma-derivative of stationarity still use finite differences."""
        central, step = _scheme(scheme, step)
        pr = self.problem
        nr, hn, q, p = self.sizes
        o = self.offsets
        y0 = self.y0
        rc, X, u, w = self.unpack(y0)
        steps = full_steps(pr, rc, X, self.sigma0)
        F0 = self.residual(y0, steps=steps)
        M = np.zeros((F0.size, y0.size))
        N = np.zeros((F0.size, pr.n))
        # stationarity rows: Hessian block by differences, multiplier blocks exact
        nz = nr + hn
        for c in range(nz):
            M[:nz, c] = self._diff_y(y0, c, steps, F0, step, central)[:nz]
        zero_u, zero_w = np.zeros(q), np.zeros(p)
        gr0, gx0 = lagrangian_gradient(pr, rc, X, zero_u, zero_w, steps)
        base = np.concatenate([gr0, gx0.ravel()])
        for c in range(q + p):
            uu, ww = zero_u.copy(), zero_w.copy()
            if c < q:
                uu[c] = 1.0
            else:
                ww[c - q] = 1.0
            gr, gx = lagrangian_gradient(pr, rc, X, uu, ww, steps)
            col = np.concatenate([gr, gx.ravel()]) - base
            col[:nr][self.frozen] = 0.0
            M[:nz, nz + c] = col
        for j in range(pr.n):
            N[:nz, j] = self._diff_sigma(y0, j, F0, step, central)[:nz]
        # complementarity rows
        g, _ = constraint_values(pr, rc, X, steps)
        finite = np.isfinite(g)
        for i in range(q):
            r = o[2] + i
            if self.active[i] and finite[i]:
                M[r, o[2] + i] = g[i]
                M[r, :nz] = u[i] * self._ineq_gradient(i)
            else:
                M[r, o[2] + i] = 1.0
        # equality rows
        scale = self.sigma0[pr.pattern.cols]
        n = pr.n
        for k in range(pr.horizon):
            rows = o[3] + k * n + np.arange(n)
            M[rows, o[1] + k * n + np.arange(n)] = 1.0
            M[rows, :nr] = -steps[k].dF_dR * scale
            if k > 0:
                M[rows, o[1] + (k - 1) * n:o[1] + k * n] -= steps[k].dF_dx
            N[rows, :] = -self._dF_dsigma(steps[k], rc)
        E = pr.column_matrix()
        for j in range(n):
            r = o[3] + pr.horizon * n + j
            if j in self.vacuous_cols:
                M[r, r] = 1.0
            else:
                M[r, :nr] = E[j]
        return M, N

    def _ineq_gradient(self, i):
        nr, hn, _, _ = self.sizes
        grad = np.zeros(nr + hn)
        if i < nr:
            grad[i] = 1.0
        elif i < 2 * nr:
            grad[i - nr] = -1.0
        else:
            grad[nr + i - 2 * nr] = 1.0
        return grad

    def _dF_dsigma(self, terms, rc):
        """d next_state / d sigma_j = sum over column j of dF/dR (rc - rs)."""
        pr = self.problem
        diff = rc - pr.scenario.rs.values
        out = np.zeros((pr.n, pr.n))
        np.add.at(out.T, pr.pattern.cols, (terms.dF_dR * diff).T)
        return out

    def active_jacobian(self):
        """Gradients (rows) of equality and active inequality constraints in z = (rc, X),
        restricted to the non-frozen decision entries."""
        pr = self.problem
        nr, hn, _, _ = self.sizes
        rc, X = self.rc0, self.X0
        steps = full_steps(pr, rc, X, self.sigma0)
        scale = self.sigma0[pr.pattern.cols]
        n = pr.n
        rows = []
        for k in range(pr.horizon):
            block = np.zeros((n, nr + hn))
            block[:, :nr] = -steps[k].dF_dR * scale
            block[:, nr + k * n:nr + (k + 1) * n] = np.eye(n)
            if k > 0:
                block[:, nr + (k - 1) * n:nr + k * n] = -steps[k].dF_dx
            rows.append(block)
        E = pr.column_matrix()
        for j in range(n):
            if j in self.vacuous_cols:
                continue
            row = np.zeros(nr + hn)
            row[:nr] = E[j]
            rows.append(row[None, :])
        for i in self.active_lower + self.active_jam:
            rows.append(self._ineq_gradient(i)[None, :])
        J = np.vstack(rows) if rows else np.zeros((0, nr + hn))
        keep = np.concatenate([~self.frozen, np.ones(hn, dtype=bool)])
        return J[:, keep], keep


def check_assumptions(
    solution: OptimizationSolution,
    problem: OptimizationProblem,
    licq_tol: float = 1e-9,
    complementarity_tol: float = 1e-9,
    curvature_tol: float = 1e-9,
    system: KKTSystem = None,
    hessian: np.ndarray = None,
) -> AssumptionReport:
    """Numerical certificates for LICQ, strict complementarity and second order."""
    sys_ = system or KKTSystem(problem, solution)
    J, keep = sys_.active_jacobian()
    if J.shape[0]:
        sv = np.linalg.svd(J, compute_uv=False)
        smin = float(sv[min(J.shape) - 1]) if J.shape[0] <= J.shape[1] else 0.0
        smax = float(sv[0])
    else:
        smin, smax = np.inf, 0.0
    licq_ok = smin > licq_tol * max(1.0, smax)

    act = list(sys_.active_lower + sys_.active_jam)
    u = solution.multipliers_ineq
    umin = float(np.min(u[act])) if act else np.inf
    sc_ok = umin > complementarity_tol

    if hessian is None:
        M, _ = sys_.jacobian_fd()
        nz = sys_.sizes[0] + sys_.sizes[1]
        hessian = M[:nz, :nz]
    H = 0.5 * (hessian + hessian.T)[np.ix_(keep, keep)]
    Z = scipy.linalg.null_space(J) if J.shape[0] else np.eye(H.shape[0])
    if Z.shape[1]:
        Hr = Z.T @ H @ Z
        eig = float(np.min(np.linalg.eigvalsh(0.5 * (Hr + Hr.T))))
        so_ok = eig > curvature_tol * max(1.0, float(np.max(np.abs(Hr))))
    else:
        eig, so_ok = np.inf, True
    return AssumptionReport(so_ok, eig, licq_ok, smin, sc_ok, umin, tuple(sys_.active_lower), tuple(sys_.active_jam))


def assemble_sensitivity(
    solution: OptimizationSolution,
    problem: OptimizationProblem,
    method: str = "fd",
    require_assumptions: bool = True,
    report: AssumptionReport = None,
    scheme: str = "central",
    step: float = None,
) -> SensitivityData:
    """Solve ``M eta = -N`` at the nominal solution.

    ``method="fd"`` differences the whole residual; ``"analytic"`` uses exact
    blocks wherever they are available.
    """
    if solution is None:
        raise StructuralError("no solution supplied")
    system = KKTSystem(problem, solution)
    if method == "fd":
        M, N = system.jacobian_fd(step, scheme)
    elif method == "analytic":
        M, N = system.jacobian_analytic(step, scheme)
    else:
        raise ValueError(f"unknown method {method!r}")
    nz = system.sizes[0] + system.sizes[1]
    if report is None:
        report = check_assumptions(solution, problem, system=system, hessian=M[:nz, :nz])
    if require_assumptions and not report.ok:
        raise AssumptionViolation(f"assumption check failed: {', '.join(report.failed)}", report.failed)
    scale = np.max(np.abs(M), axis=1)
    scale[scale == 0] = 1.0
    Ms, Ns = M / scale[:, None], N / scale[:, None]
    try:
        lu = scipy.linalg.lu_factor(Ms, check_finite=True)
    except (ValueError, np.linalg.LinAlgError) as exc:
        raise AssumptionViolation(f"KKT matrix could not be factorized: {exc}", report.failed or ("licq",)) from exc
    if np.min(np.abs(np.diag(lu[0]))) == 0.0:
        raise AssumptionViolation("KKT matrix is singular", report.failed or ("licq",))
    eta = scipy.linalg.lu_solve(lu, -Ns)
    eta += scipy.linalg.lu_solve(lu, -Ns - Ms @ eta)
    resid = float(np.max(np.abs(M @ eta + N), initial=0.0))
    nmax = float(np.max(np.abs(N), initial=0.0))
    if not np.all(np.isfinite(eta)) or resid > 1e-8 * max(nmax, 1e-300) and nmax > 0:
        raise AssumptionViolation(
            f"sensitivity system residual {resid:.3e} exceeds 1e-8 * |N| = {1e-8 * nmax:.3e}",
            report.failed or ("second_order",),
        )
    o = system.offsets
    return SensitivityData(
        M=M,
        N=N,
        eta1=eta[o[0]:o[1]],
        eta_states=eta[o[1]:o[2]],
        eta2=eta[o[2]:o[3]],
        eta3=eta[o[3]:o[4]],
        sigma0=solution.sigma0.copy(),
        rc_star=np.array(solution.rc_star.values),
        residual=resid,
        method=method,
        assumptions=report,
    )


def linear_update(rc_star_at_sigma0: RoutingMatrix, eta1, sigma, sigma0, return_raw: bool = False):
    """First-order update ``rc*(sigma0) + eta1 (sigma - sigma0)``.

    Columns that leave the routing simplex are projected back onto it.
    With ``return_raw`` the unprojected vector is returned as well.
    """
    topo = rc_star_at_sigma0.topology
    n = topo.num_links
    s = trust_vector(sigma, n)
    s0 = trust_vector(sigma0, n)
    eta1 = np.asarray(eta1, dtype=float)
    if eta1.shape != (topo.pattern.size, n):
        raise StructuralError(f"eta1 must have shape ({topo.pattern.size}, {n}), got {eta1.shape}")
    base = np.array(rc_star_at_sigma0.values)
    raw = base + eta1 @ (s - s0)
    out = raw.copy()
    targets = topo.column_targets
    for j, grp in enumerate(topo.pattern.column_groups()):
        if grp.size == 0:
            continue
        col = raw[grp]
        if np.any(col < 0) or np.any(col > 1) or abs(col.sum() - targets[j]) > 1e-12:
            out[grp] = project_simplex(col, targets[j])
    R = RoutingMatrix(topo, out)
    return (R, raw) if return_raw else R


@dataclass(frozen=True)
class DecayStudy:
    epsilons: np.ndarray
    errors: np.ndarray
    slope: float
    ratios: np.ndarray = field(default_factory=lambda: np.zeros(0))


def loglog_slope(epsilons, errors) -> float:
    """Least-squares slope of log(error) against log(epsilon) over positive pairs."""
    eps = np.asarray(epsilons, dtype=float)
    err = np.asarray(errors, dtype=float)
    mask = (eps > 0) & (err > 0)
    if mask.sum() < 2:
        return float("nan")
    return float(np.polyfit(np.log(eps[mask]), np.log(err[mask]), 1)[0])
