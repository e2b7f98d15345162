"""Per-link margins of resilience against trust perturbations.

A link fails when its density reaches jam density within the horizon. The
margin of a link is the smallest L1 change of the trust vector that causes
such a failure when the controller answers with the first-order routing
update. We provide the sensitivity-based lower bound, a brute-force grid
search for it, and residual capacity as a simpler congestion indicator.
"""

from __future__ import annotations

import io
import itertools
import logging
import os
import warnings
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from .ctm import LinkArrays, Scenario, Trajectory, flow_terms
from .errors import DependencyError, StructuralError
from .network import mix_values, trust_vector
from .optimize import OptimizationSolution, assemble_problem, full_steps, project_simplex

log = logging.getLogger(__name__)

UNBOUNDED = float("inf")
PSI_ZERO_TOL = 1e-10
JAM_REL_TOL = 1e-9
COARSE_GRID_STEP = 0.05
WORKERS_ENV = "TRUSTROUTE_WORKERS"


@dataclass(frozen=True, eq=False)
class ResilienceReport:
    residual_capacity: np.ndarray
    rho_lower_bound: np.ndarray
    psi_norms: np.ndarray          # (horizon, n)
    brute_force_margin: np.ndarray = None
    sigma0: np.ndarray = None
    feasible_diameter: float = np.nan
    messages: tuple = field(default=())

    @property
    def n(self) -> int:
        return self.residual_capacity.size

    @property
    def exceeds_feasible(self) -> np.ndarray:
        """Bounds larger than any admissible trust change (no failure possible)."""
        return self.rho_lower_bound > self.feasible_diameter

    def to_csv(self, extra_columns: dict = None) -> str:
        extra = dict(extra_columns or {})
        buf = io.StringIO()
        head = ["link_id", "residual_capacity", "rho_lower_bound", "brute_force_margin", "exceeds_feasible_diameter"]
        buf.write(",".join(head + list(extra)) + "\n")
        bf = self.brute_force_margin
        for i in range(self.n):
            row = [
                str(i + 1),
                _fmt(self.residual_capacity[i]),
                _fmt(self.rho_lower_bound[i]),
                "" if bf is None else _fmt(bf[i]),
                str(bool(self.exceeds_feasible[i])).lower(),
            ]
            buf.write(",".join(row + [str(v) for v in extra.values()]) + "\n")
        return buf.getvalue()


def _fmt(v: float) -> str:
    return "inf" if np.isinf(v) else repr(float(v))


def _jam_limits(params) -> np.ndarray:
    if isinstance(params, Scenario):
        return params.arrays.jam_limit
    if isinstance(params, LinkArrays):
        return params.jam_limit
    return np.array([p.jam_density for p in params], dtype=float)


def residual_capacity(traj: Trajectory, params) -> np.ndarray:
    """``min_k (B_i - x_{k+1,i}) / B_i`` per link.

    ``params`` is a scenario, its link arrays or a sequence of link
    parameters. Links without a jam limit (on-ramps) report 1. A trajectory
    with no steps uses the initial state.
    """
    B = _jam_limits(params)
    states = np.asarray(traj.states, dtype=float)
    after = states[1:] if states.shape[0] > 1 else states[:1]
    if after.shape[1] != B.size:
        raise StructuralError(f"trajectory has {after.shape[1]} links, parameters have {B.size}")
    out = np.ones(B.size)
    fin = np.isfinite(B)
    out[fin] = np.min((B[fin] - after[:, fin]) / B[fin], axis=0)
    return out


def _eta1_array(eta1) -> np.ndarray:
    if eta1 is None:
        raise DependencyError("first-order sensitivity eta1 is required; run the sensitivity stage first")
    return np.asarray(getattr(eta1, "eta1", eta1), dtype=float)


def psi_matrices(solution: OptimizationSolution, eta1) -> np.ndarray:
    """All one-step total trust derivatives, shape (horizon, n, n).

    Entry ``[k, i, j]`` is the derivative of the next density of link ``i``
    with respect to ``sigma_j`` at the stored state ``x_k``, with routing
    following the optimizer's first-order response.
    """
    e1 = _eta1_array(eta1)
    if solution.scenario is None:
        raise DependencyError("solution does not carry its scenario")
    pr = assemble_problem(solution.scenario, solution.sigma0)
    if e1.shape != (pr.decision_dim, pr.n):
        raise StructuralError(f"eta1 must have shape ({pr.decision_dim}, {pr.n}), got {e1.shape}")
    rc = np.array(solution.rc_star.values)
    X = solution.states[1:]
    steps = full_steps(pr, rc, X, pr.sigma0)
    cols = pr.pattern.cols
    scale = pr.sigma0[cols]
    diff = rc - pr.scenario.rs.values
    out = np.empty((pr.horizon, pr.n, pr.n))
    for k, t in enumerate(steps):
        d_sigma = np.zeros((pr.n, pr.n))
        np.add.at(d_sigma.T, cols, (t.dF_dR * diff).T)
        out[k] = d_sigma + (t.dF_dR * scale) @ e1
    return out


def psi_link_sensitivity(solution: OptimizationSolution, eta1, k: int, i: int) -> np.ndarray:
    """Row ``i`` of the step-``k`` total trust derivative (0-based indices)."""
    psi = psi_matrices(solution, eta1)
    if not (0 <= k < psi.shape[0] and 0 <= i < psi.shape[1]):
        raise StructuralError(f"step {k} / link {i} out of range")
    return psi[k, i]


def _bound_from(gaps: np.ndarray, norms: np.ndarray, tol: float = PSI_ZERO_TOL) -> np.ndarray:
    n = gaps.shape[1]
    out = np.full(n, UNBOUNDED)
    for i in range(n):
        g, nm = gaps[:, i], norms[:, i]
        if not np.all(np.isfinite(g)):
            continue
        if np.any(g <= 0):
            out[i] = 0.0
            continue
        live = nm > tol
        if np.any(live):
            out[i] = float(np.min(g[live] / nm[live]))
    return out


def resilience_lower_bound(solution: OptimizationSolution, eta1, return_norms: bool = False):
    """Per-link lower bound ``min_k (B_i - x_{k+1,i}) / ||Psi_i(k)||_inf``.

    Links whose trust derivative vanishes at every step get ``inf``; links
    already at jam density get 0.
    """
    psi = psi_matrices(solution, eta1)
    norms = np.max(np.abs(psi), axis=2)
    B = solution.scenario.arrays.jam_limit
    gaps = B[None, :] - solution.states[1:]
    bound = _bound_from(gaps, norms)
    return (bound, norms) if return_norms else bound


# --------------------------------------------------------------------------
# brute-force oracle


@dataclass(frozen=True)
class GridSpec:
    step: float = 0.01
    sparsity: tuple = (1, 2)
    uniform: bool = True
    confidence_step: float = COARSE_GRID_STEP

    def __post_init__(self):
        if not self.step > 0:
            raise StructuralError("grid step must be positive")


def _free_coordinates(scenario: Scenario) -> list:
    """Trust coordinates that can change the routing (columns that split)."""
    counts = np.bincount(scenario.topology.pattern.cols, minlength=scenario.n)
    return [j for j in range(scenario.n) if counts[j] > 1]


def perturbation_directions(scenario: Scenario, grid: GridSpec) -> list:
    """Unit-L1 search directions: signed sparse ones over splitting columns, plus uniform."""
    n = scenario.n
    coords = _free_coordinates(scenario)
    dirs = []
    for s in grid.sparsity:
        for support in itertools.combinations(coords, s):
            for signs in itertools.product((1.0, -1.0), repeat=s):
                d = np.zeros(n)
                d[list(support)] = np.array(signs) / s
                dirs.append(d)
    if grid.uniform:
        dirs += [np.full(n, 1.0 / n), np.full(n, -1.0 / n)]
    return dirs


def _max_norm(sigma0: np.ndarray, d: np.ndarray) -> float:
    """Largest t with sigma0 + t d inside the unit box."""
    up, down = d > 0, d < 0
    room = np.concatenate([(1.0 - sigma0[up]) / d[up], -sigma0[down] / d[down]])
    return float(np.min(room, initial=np.inf))


@dataclass(frozen=True, eq=False)
class _ClosedLoop:
    scenario: Scenario
    rc0: np.ndarray
    eta1: np.ndarray
    sigma0: np.ndarray

    def routing(self, sigma: np.ndarray) -> np.ndarray:
        sc = self.scenario
        pattern = sc.topology.pattern
        raw = self.rc0 + self.eta1 @ (sigma - self.sigma0)
        targets = sc.topology.column_targets
        for j, grp in enumerate(pattern.column_groups()):
            if grp.size == 0:
                continue
            col = raw[grp]
            if np.any(col < 0) or np.any(col > 1) or abs(col.sum() - targets[j]) > 1e-12:
                raw[grp] = project_simplex(col, targets[j])
        vals = mix_values(sigma, raw, sc.rs.values, pattern)
        R = np.zeros((sc.n, sc.n))
        R[pattern.rows, pattern.cols] = vals
        return R

    def failures(self, sigma: np.ndarray) -> np.ndarray:
        """Boolean per link: density reached jam density at some step."""
        sc = self.scenario
        R = self.routing(sigma)
        arr, B = sc.arrays, sc.arrays.jam_limit
        x = np.array(sc.x0, dtype=float)
        failed = np.zeros(sc.n, dtype=bool)
        for k in range(sc.horizon):
            x = flow_terms(x, R, sc.inflow[k], arr, sc.step_hours).next_state
            failed |= x >= B * (1.0 - JAM_REL_TOL)
        return failed


def _scan_direction(loop: _ClosedLoop, d: np.ndarray, step: float) -> np.ndarray:
    """Smallest grid norm along ``d`` at which each link fails (inf if none)."""
    n = loop.scenario.n
    first = np.full(n, UNBOUNDED)
    top = _max_norm(loop.sigma0, d)
    count = int(np.floor(top / step + 1e-9))
    for t in range(1, count + 1):
        m = t * step
        sigma = np.clip(loop.sigma0 + m * d, 0.0, 1.0)
        hit = loop.failures(sigma) & np.isinf(first)
        first[hit] = m
        if np.all(np.isfinite(first)):
            break
    return first


def _scan_many(args):
    loop, dirs, step = args
    return [_scan_direction(loop, d, step) for d in dirs]


def worker_count() -> int:
    raw = os.environ.get(WORKERS_ENV, "1")
    try:
        return max(1, int(raw))
    except ValueError:
        log.warning("ignoring non-integer %s=%r", WORKERS_ENV, raw)
        return 1


def brute_force_margin(scenario: Scenario, solution: OptimizationSolution, grid_spec: GridSpec = None,
                       eta1=None, workers: int = None) -> np.ndarray:
    """Grid search for the smallest L1 trust change that jams each link.

    The routing answers every perturbed trust vector with the projected
    first-order update around ``solution``. Links that never fail over the
    grid get ``inf``.
    """
    grid = grid_spec or GridSpec()
    if grid.step > grid.confidence_step:
        warnings.warn(f"grid step {grid.step} is coarser than {grid.confidence_step}; margins may be overestimated",
                      RuntimeWarning, stacklevel=2)
    e1 = _eta1_array(eta1)
    sigma0 = trust_vector(solution.sigma0, scenario.n)
    loop = _ClosedLoop(scenario, np.array(solution.rc_star.values), e1, sigma0)
    dirs = perturbation_directions(scenario, grid)
    workers = worker_count() if workers is None else max(1, int(workers))
    if workers == 1 or len(dirs) < 2 * workers:
        results = _scan_many((loop, dirs, grid.step))
    else:
        chunks = [dirs[w::workers] for w in range(workers)]
        with ProcessPoolExecutor(max_workers=workers) as pool:
            parts = list(pool.map(_scan_many, [(loop, c, grid.step) for c in chunks]))
        results = [r for part in parts for r in part]
    if not results:
        return np.full(scenario.n, UNBOUNDED)
    return np.min(np.vstack(results), axis=0)


def feasible_diameter(sigma0) -> float:
    """Largest L1 distance from ``sigma0`` to any point of the unit box."""
    s = np.asarray(sigma0, dtype=float)
    return float(np.sum(np.maximum(s, 1.0 - s)))


def build_report(solution: OptimizationSolution, eta1, brute_force: bool = False,
                 grid_spec: GridSpec = None, workers: int = None) -> ResilienceReport:
    sc = solution.scenario
    bound, norms = resilience_lower_bound(solution, eta1, return_norms=True)
    bf = brute_force_margin(sc, solution, grid_spec, eta1=eta1, workers=workers) if brute_force else None
    return ResilienceReport(
        residual_capacity=residual_capacity(solution.trajectory, sc),
        rho_lower_bound=bound,
        psi_norms=norms,
        brute_force_margin=bf,
        sigma0=np.array(solution.sigma0),
        feasible_diameter=feasible_diameter(solution.sigma0),
        messages=solution.messages,
    )


def network_resilience(report: ResilienceReport, field: str = "rho_lower_bound") -> float:
    """Smallest per-link margin; ``inf`` when no link can fail."""
    if field not in ("rho_lower_bound", "brute_force_margin"):
        raise StructuralError(f"unknown margin field {field!r}")
    vals = getattr(report, field)
    if vals is None:
        raise DependencyError(f"report has no {field}")
    vals = np.asarray(vals, dtype=float)
    return float(np.min(vals)) if vals.size else UNBOUNDED
