"""Discrete-time Cell Transmission Model on a link network.

States are vehicles per link, flows are vehicles per hour, time is in hours.
One step of the dynamics is

    x_{k+1} = x_k + T_s ((R_k - I) f(x_k) + lambda_k)

with link outflows ``f_j = kappa_j d_j(x_j)`` and ``kappa`` chosen by a
proportional allocation rule so that no receiver gets more than its supply.
"""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass, field, replace
from functools import cached_property

import numpy as np

from .errors import DomainError, NumericalError, StructuralError
from .network import NetworkTopology, RoutingMatrix, mix_values, trust_vector

NEGATIVE_STATE_TOL = 1e-9


@dataclass(frozen=True)
class LinkParams:
    jam_density: float
    length: float
    free_speed: float
    demand_shape: float

    def __post_init__(self):
        for name in ("jam_density", "length", "free_speed", "demand_shape"):
            val = getattr(self, name)
            if not np.isfinite(val) or val <= 0:
                raise DomainError(f"{name} must be positive, got {val}")


def demand(x, p: LinkParams):
    """d(x) = v (1 - exp(-a x)), vehicles per hour."""
    x = np.asarray(x, dtype=float)
    if np.any(x < 0):
        raise DomainError("demand is undefined for negative density")
    out = p.free_speed * -np.expm1(-p.demand_shape * x)
    return float(out) if out.ndim == 0 else out


def supply(x, p: LinkParams, is_on_ramp: bool = False):
    """s(x) = (v / L)(B - x), floored at 0; on-ramps accept everything."""
    x = np.asarray(x, dtype=float)
    if is_on_ramp:
        out = np.full(x.shape, np.inf)
    else:
        out = (p.free_speed / p.length) * np.maximum(p.jam_density - x, 0.0)
    return float(out) if out.ndim == 0 else out


@dataclass(frozen=True)
class LinkArrays:
    v: np.ndarray
    a: np.ndarray
    L: np.ndarray
    B: np.ndarray
    on_ramp: np.ndarray

    @cached_property
    def jam_limit(self) -> np.ndarray:
        # on-ramps have infinite supply, hence no finite jam density
        return np.where(self.on_ramp, np.inf, self.B)


@dataclass(frozen=True, eq=False)
class Scenario:
    """Full problem instance. ``inflow`` and ``sigma`` have one row per step."""

    topology: NetworkTopology
    params: tuple
    inflow: np.ndarray
    x0: np.ndarray
    sigma: np.ndarray
    rs: RoutingMatrix
    step_hours: float
    name: str = ""

    def __post_init__(self):
        n = self.topology.num_links
        params = tuple(self.params)
        if len(params) != n:
            raise StructuralError(f"need {n} link parameter sets, got {len(params)}")
        object.__setattr__(self, "params", params)
        lam = np.array(self.inflow, dtype=float).reshape(-1, n) if np.size(self.inflow) else np.zeros((0, n))
        h = lam.shape[0]
        sig = np.asarray(self.sigma, dtype=float)
        if sig.ndim <= 1:
            sig = np.tile(trust_vector(sig, n), (h, 1))
        if sig.shape != (h, n):
            raise StructuralError(f"sigma schedule must have shape ({h}, {n}), got {sig.shape}")
        for row in sig:
            trust_vector(row, n)
        x0 = np.asarray(self.x0, dtype=float)
        if x0.ndim == 0:
            x0 = np.full(n, float(x0))
        if x0.shape != (n,):
            raise StructuralError(f"x0 must have length {n}")
        if np.any(lam[:, ~self.topology.on_ramp_mask] != 0):
            raise StructuralError("exogenous inflow is only allowed on on-ramps")
        if np.any(lam < 0):
            raise DomainError("inflows must be nonnegative")
        if np.any(x0 < 0) or np.any(x0 > self.arrays.jam_limit):
            raise DomainError("initial state must satisfy 0 <= x0 <= B")
        if not self.step_hours > 0:
            raise DomainError("step length must be positive")
        if self.rs.topology != self.topology:
            raise StructuralError("selfish routing is defined on a different topology")
        for arr in (lam, sig, x0):
            arr.setflags(write=False)
        object.__setattr__(self, "inflow", lam)
        object.__setattr__(self, "sigma", sig)
        object.__setattr__(self, "x0", x0)

    @property
    def horizon(self) -> int:
        return self.inflow.shape[0]

    @property
    def n(self) -> int:
        return self.topology.num_links

    @cached_property
    def arrays(self) -> LinkArrays:
        ps = self.params
        return LinkArrays(
            v=np.array([p.free_speed for p in ps]),
            a=np.array([p.demand_shape for p in ps]),
            L=np.array([p.length for p in ps]),
            B=np.array([p.jam_density for p in ps]),
            on_ramp=self.topology.on_ramp_mask.copy(),
        )

    def with_horizon(self, h: int) -> "Scenario":
        """Truncate, or extend by repeating the last inflow/trust rows."""
        if h <= self.horizon:
            return replace(self, inflow=self.inflow[:h], sigma=self.sigma[:h])
        if self.horizon == 0:
            raise StructuralError("cannot extend a zero-horizon scenario")
        extra = h - self.horizon
        lam = np.vstack([self.inflow, np.tile(self.inflow[-1], (extra, 1))])
        sig = np.vstack([self.sigma, np.tile(self.sigma[-1], (extra, 1))])
        return replace(self, inflow=lam, sigma=sig)

    def with_sigma(self, sigma) -> "Scenario":
        sig = np.asarray(sigma, dtype=float)
        if sig.ndim <= 1:
            sig = np.tile(trust_vector(sig, self.n), (self.horizon, 1))
        return replace(self, sigma=sig)

    def with_x0(self, x0) -> "Scenario":
        return replace(self, x0=np.asarray(x0, dtype=float))


@dataclass(frozen=True, eq=False)
class Trajectory:
    states: np.ndarray
    outflows: np.ndarray
    kappa: np.ndarray = field(default=None)

    @property
    def horizon(self) -> int:
        return self.outflows.shape[0]


@dataclass(frozen=True)
class CFLReport:
    ratios: np.ndarray
    max_ratio: float
    passed: bool


# --------------------------------------------------------------------------
# flow model


@dataclass
class StepTerms:
    """Everything one step needs, optionally with first derivatives.

    ``dF_dx`` is n x n, ``dF_dR`` is n x n_r over the active pattern entries.
    """

    next_state: np.ndarray
    demand: np.ndarray
    kappa: np.ndarray
    outflow: np.ndarray
    inflow: np.ndarray
    supply: np.ndarray
    dF_dx: np.ndarray = None
    dF_dR: np.ndarray = None


def _softmin(z: np.ndarray, tau: float, axis: int = 0):
    """Log-sum-exp soft minimum and its gradient weights; +inf entries drop out."""
    finite = np.isfinite(z)
    zmin = np.min(np.where(finite, z, np.inf), axis=axis, keepdims=True)
    shifted = np.where(finite, np.exp(-tau * (np.where(finite, z, 0.0) - zmin)), 0.0)
    total = shifted.sum(axis=axis, keepdims=True)
    value = zmin - np.log(total) / tau
    return np.squeeze(value, axis=axis), shifted / total


def flow_terms(x, R_dense, lam, arrays: LinkArrays, T_s: float, pattern=None, tau=None) -> StepTerms:
    """Evaluate the one-step map; with ``pattern`` also its Jacobians.

    Hard minima by default; ``tau`` switches to a log-sum-exp soft minimum in
    both the receiver scaling and the sender scaling.
    """
    n = x.size
    ex = np.exp(-arrays.a * x)
    d = arrays.v * (1.0 - ex)
    dd = arrays.v * arrays.a * ex
    gap = arrays.B - x
    s = np.where(arrays.on_ramp, np.inf, (arrays.v / arrays.L) * np.maximum(gap, 0.0))
    ds = np.where(arrays.on_ramp | (gap <= 0), 0.0, -arrays.v / arrays.L)
    D = R_dense @ d
    with np.errstate(divide="ignore", invalid="ignore"):
        q = np.where((D > 0) & np.isfinite(s), s / np.where(D > 0, D, 1.0), np.inf)
    recv = R_dense > 0

    if tau is None:
        alpha = np.minimum(1.0, q)
        beta = (q < 1.0).astype(float)
        cand = np.where(recv, alpha[:, None], np.inf)
        cmin = cand.min(axis=0)
        kappa = np.minimum(1.0, cmin)
        W = np.zeros((n, n))
        bind = np.flatnonzero(cmin < 1.0)
        W[bind, np.argmin(cand, axis=0)[bind]] = 1.0
    else:
        alpha, wts = _softmin(np.vstack([np.ones(n), q]), tau, axis=0)
        beta = wts[1]
        cand = np.where(recv, alpha[:, None], np.inf)
        kappa, w2 = _softmin(np.vstack([np.ones((1, n)), cand]), tau, axis=0)
        W = w2[1:].T

    f = kappa * d
    fin = R_dense @ f
    x_next = x + T_s * (fin - f + lam)
    terms = StepTerms(x_next, d, kappa, f, fin, s)
    if pattern is None:
        return terms

    finite = np.isfinite(q)
    D_safe = np.where(D > 0, D, 1.0)
    s_safe = np.where(finite, s, 0.0)
    gamma = np.where(finite, -s_safe / D_safe**2, 0.0)
    C = W * beta[None, :]
    Qx = np.diag(np.where(finite, ds / D_safe, 0.0)) + gamma[:, None] * R_dense * dd[None, :]
    Jf = np.diag(kappa * dd) + d[:, None] * (C @ Qx)
    RmI = R_dense - np.eye(n)
    terms.dF_dx = np.eye(n) + T_s * (RmI @ Jf)

    rows, cols = pattern.rows, pattern.cols
    JfR = d[:, None] * C[:, rows] * (gamma[rows] * d[cols])[None, :]
    dFdR = RmI @ JfR
    dFdR[rows, np.arange(rows.size)] += f[cols]
    terms.dF_dR = T_s * dFdR
    return terms


def allocation_kappa(x, R: RoutingMatrix, scenario: Scenario) -> np.ndarray:
    """Sender scaling of the proportional allocation rule.

    Receiver ``i`` admits ``alpha_i = min(1, s_i / sum_j r_ij d_j)`` of its
    requested inflow; sender ``j`` is throttled to the smallest ``alpha_i``
    over receivers it actually sends to.
    """
    x = np.asarray(x, dtype=float)
    lam = np.zeros(scenario.n)
    return flow_terms(x, R.dense(), lam, scenario.arrays, scenario.step_hours).kappa


def _check_state(x_next: np.ndarray, step_index=None):
    bad = np.flatnonzero(~np.isfinite(x_next) | (x_next < -NEGATIVE_STATE_TOL))
    if bad.size:
        i = int(bad[0])
        where = f" at step {step_index}" if step_index is not None else ""
        raise NumericalError(f"invalid state {x_next[i]!r} on link {i + 1}{where}", link=i + 1, step=step_index)


def _dense(R) -> np.ndarray:
    return R.dense() if isinstance(R, RoutingMatrix) else np.asarray(R, dtype=float)


def step(x_k, R_k, lam_k, scenario: Scenario) -> np.ndarray:
    """One Euler step of the network dynamics."""
    x = np.asarray(x_k, dtype=float)
    if np.any(x < 0):
        raise DomainError("state must be nonnegative")
    out = flow_terms(x, _dense(R_k), np.asarray(lam_k, dtype=float), scenario.arrays, scenario.step_hours).next_state
    _check_state(out)
    return out


def simulate(scenario: Scenario, routing) -> Trajectory:
    """Roll the dynamics forward over the scenario horizon.

    ``routing`` is a single matrix (held constant) or one matrix per step.
    """
    h, n = scenario.horizon, scenario.n
    if isinstance(routing, (RoutingMatrix, np.ndarray)) and np.ndim(_dense(routing)) == 2:
        mats = [_dense(routing)] * h
    else:
        mats = [_dense(R) for R in routing]
        if len(mats) == 1 and h != 1:
            mats = mats * h
        if len(mats) != h:
            raise StructuralError(f"need {h} routing matrices, got {len(mats)}")
    states = np.empty((h + 1, n))
    flows = np.empty((h, n))
    kap = np.empty((h, n))
    states[0] = scenario.x0
    arr, T_s = scenario.arrays, scenario.step_hours
    for k in range(h):
        t = flow_terms(states[k], mats[k], scenario.inflow[k], arr, T_s)
        try:
            _check_state(t.next_state, k)
        except NumericalError as exc:
            raise NumericalError(f"simulation failed: {exc}", link=exc.link, step=k) from exc
        states[k + 1] = t.next_state
        flows[k] = t.outflow
        kap[k] = t.kappa
    return Trajectory(states, flows, kap)


def routing_schedule(scenario: Scenario, rc_values, sigma=None) -> list:
    """Dense mixed routing per step for controlled entries ``rc_values``."""
    pattern = scenario.topology.pattern
    sig = scenario.sigma if sigma is None else np.asarray(sigma, dtype=float)
    if sig.ndim == 1:
        sig = np.tile(sig, (scenario.horizon, 1))
    n = scenario.n
    out = []
    rc_values = np.asarray(rc_values, dtype=float)
    for k in range(scenario.horizon):
        dense = np.zeros((n, n))
        dense[pattern.rows, pattern.cols] = mix_values(sig[k], rc_values, scenario.rs.values, pattern)
        out.append(dense)
    return out


def total_travel_time(traj: Trajectory, T_s: float) -> float:
    """T_s * sum_{k=1..h} sum_i x_i(k), in vehicle-hours."""
    return float(T_s * traj.states[1:].sum())


def raw_objective(traj: Trajectory) -> float:
    """The optimizer's objective: sum_{k=1..h} 1^T x_k (no T_s factor)."""
    return float(traj.states[1:].sum())


def check_cfl(scenario_or_params, step_hours: float = None) -> CFLReport:
    if isinstance(scenario_or_params, Scenario):
        params, T_s = scenario_or_params.params, scenario_or_params.step_hours
    else:
        params, T_s = scenario_or_params, step_hours
    ratios = np.array([p.free_speed * T_s / p.length for p in params])
    mx = float(ratios.max()) if ratios.size else 0.0
    return CFLReport(ratios, mx, bool(mx <= 1.0))


def trajectory_csv(traj: Trajectory, T_s: float, extra_columns: dict = None) -> str:
    """Long format, one row per (step, link); outflow is blank on the final step."""
    extra = dict(extra_columns or {})
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["step", "time_hours", "link_id", "density_veh", "outflow_veh_per_hour"] + list(extra))
    h, n = traj.horizon, traj.states.shape[1]
    for k in range(h + 1):
        for i in range(n):
            out = repr(float(traj.outflows[k, i])) if k < h else ""
            w.writerow([k, repr(k * T_s), i + 1, repr(float(traj.states[k, i])), out] + list(extra.values()))
    return buf.getvalue()


def mass_balance_residuals(traj: Trajectory, scenario: Scenario) -> np.ndarray:
    """Per-step residual of the network-level vehicle balance."""
    off = scenario.topology.off_ramp_mask
    lhs = np.diff(traj.states.sum(axis=1))
    rhs = scenario.step_hours * (scenario.inflow.sum(axis=1) - traj.outflows[:, off].sum(axis=1))
    return lhs - rhs
