"""Command-line entry point.

Every command reads a scenario file, runs one experiment and writes CSV
tables plus a JSON summary into ``--out``. Outputs depend only on the inputs,
so re-running a command reproduces its files byte for byte.

Exit codes: 0 success, 2 invalid input, 3 solver or sensitivity failure,
4 numerical failure in the dynamics.
"""

from __future__ import annotations

import argparse
import csv
import io
import json
import logging
import math
import sys
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import __version__
from .ctm import simulate, total_travel_time, trajectory_csv
from .errors import AssumptionViolation, DependencyError, DomainError, NumericalError, StructuralError, \
    TrustRouteError
from .experiments import decay_study, realtime_loop, resilience_study, ttt_sweep
from .network import RoutingMatrix
from .optimize import assemble_problem, selfish_objective, solve
from .resilience import GridSpec, network_resilience
from .scenario import SCHEMA_VERSION, LoadedScenario, config_hash, load_scenario
from .sensitivity import assemble_sensitivity

log = logging.getLogger("trustroute")

EXIT_OK, EXIT_INVALID, EXIT_SOLVER, EXIT_NUMERICAL = 0, 2, 3, 4
DEFAULT_EPSILONS = (0.04, 0.02, 0.01, 0.005)


@dataclass
class ExperimentResult:
    experiment: str
    config_hash: str
    tables: dict = field(default_factory=dict)     # file name -> CSV text
    summary: dict = field(default_factory=dict)
    exit_code: int = EXIT_OK

    def write(self, out_dir: Path):
        out_dir.mkdir(parents=True, exist_ok=True)
        for name, text in sorted(self.tables.items()):
            (out_dir / name).write_text(text, encoding="utf-8", newline="\n")
        doc = {
            "experiment": self.experiment,
            "config_hash": self.config_hash,
            "schema_version": SCHEMA_VERSION,
            "package_version": __version__,
            "exit_code": self.exit_code,
            "tables": sorted(self.tables),
            "summary": self.summary,
        }
        (out_dir / f"{self.experiment}.json").write_text(dumps(doc) + "\n", encoding="utf-8", newline="\n")


def _jsonable(obj):
    if isinstance(obj, dict):
        return {str(k): _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return _jsonable(obj.tolist())
    if isinstance(obj, (np.floating, float)):
        v = float(obj)
        if math.isnan(v):
            return "nan"
        return ("inf" if v > 0 else "-inf") if math.isinf(v) else v
    if isinstance(obj, np.integer):
        return int(obj)
    if isinstance(obj, np.bool_):
        return bool(obj)
    return obj


def dumps(obj) -> str:
    return json.dumps(_jsonable(obj), sort_keys=True, indent=2, allow_nan=False)


def _cell(v) -> str:
    if isinstance(v, (bool, np.bool_)):
        return str(bool(v)).lower()
    if isinstance(v, (float, np.floating)):
        v = float(v)
        return "inf" if v == math.inf else "-inf" if v == -math.inf else repr(v)
    return str(v)


def table(header, rows, tag: dict) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(list(header) + list(tag))
    for row in rows:
        w.writerow([_cell(v) for v in row] + [_cell(v) for v in tag.values()])
    return buf.getvalue()


def _tag(h: str) -> dict:
    return {"schema_version": SCHEMA_VERSION, "config_hash": h}


def _run_hash(loaded: LoadedScenario, command: str, **args) -> str:
    return config_hash({"scenario": loaded.config, "command": command, "args": _jsonable(args)})


# --------------------------------------------------------------------------
# commands


def cmd_simulate(loaded: LoadedScenario) -> ExperimentResult:
    """Selfish baseline: the controller suggests the selfish routing."""
    sc = loaded.scenario
    h = _run_hash(loaded, "simulate")
    traj = simulate(sc, sc.rs)
    summary = {"ttt_veh_hours": total_travel_time(traj, sc.step_hours), "horizon": sc.horizon,
               "final_state": traj.states[-1]}
    return ExperimentResult("simulate", h, {"trajectory.csv": trajectory_csv(traj, sc.step_hours, _tag(h))}, summary)


def _routing_rows(rc: RoutingMatrix):
    p = rc.topology.pattern
    return [(int(i) + 1, int(j) + 1, float(v)) for i, j, v in zip(p.rows, p.cols, rc.values)]


def cmd_optimize(loaded: LoadedScenario, sweep_sigma=None, sweep_horizon=None) -> ExperimentResult:
    sc, opts = loaded.scenario, loaded.options
    h = _run_hash(loaded, "optimize", sweep_sigma=sweep_sigma, sweep_horizon=sweep_horizon)
    tag = _tag(h)
    res = ExperimentResult("optimize", h)
    cmp_head = ["sigma0", "horizon", "selfish_ttt", "optimized_ttt", "reduction_pct", "converged", "kkt_residual",
                "iterations"]
    if sweep_sigma is not None or sweep_horizon is not None:
        sigmas = sweep_sigma if sweep_sigma is not None else [float(np.mean(loaded.sigma0))]
        horizons = sweep_horizon if sweep_horizon is not None else [sc.horizon]
        rows = ttt_sweep(sc, sigmas, horizons, opts)
        res.tables["sweep.csv"] = table(cmp_head, [
            (r.sigma0, r.horizon, r.selfish_ttt, r.optimized_ttt, r.reduction_pct, r.converged, r.kkt_residual,
             r.iterations) for r in rows], tag)
        res.summary = {"points": len(rows), "all_converged": all(r.converged for r in rows)}
        if not res.summary["all_converged"]:
            res.exit_code = EXIT_SOLVER
        return res
    pr = assemble_problem(sc, loaded.sigma0)
    sol = solve(pr, opts)
    base = selfish_objective(pr) * sc.step_hours
    red = 100.0 * (base - sol.ttt) / base if base > 0 else 0.0
    res.tables["comparison.csv"] = table(cmp_head, [(
        float(np.mean(loaded.sigma0)), sc.horizon, base, sol.ttt, red, sol.converged, sol.kkt_residual_norm,
        sol.iterations)], tag)
    res.tables["routing.csv"] = table(["to_link", "from_link", "rc_star"], _routing_rows(sol.rc_star), tag)
    res.tables["trajectory.csv"] = trajectory_csv(sol.trajectory, sc.step_hours, tag)
    res.summary = {"solution": sol.to_dict(), "selfish_ttt": base, "reduction_pct": red}
    if not sol.converged:
        res.exit_code = EXIT_SOLVER
    return res


def decay_direction(sigma0: np.ndarray, eps_max: float, seed=None) -> np.ndarray:
    """All-ones direction (or seeded random magnitudes), signs flipped where the box would be left."""
    n = sigma0.size
    mag = np.ones(n) if seed is None else np.random.default_rng(seed).uniform(0.5, 1.0, n)
    sign = np.where(sigma0 + eps_max * mag > 1.0, -1.0, 1.0)
    return sign * mag


def cmd_sensitivity(loaded: LoadedScenario, epsilons=DEFAULT_EPSILONS, seed=None) -> ExperimentResult:
    sc, opts = loaded.scenario, loaded.options
    h = _run_hash(loaded, "sensitivity", epsilons=list(epsilons), seed=seed)
    tag = _tag(h)
    pr = assemble_problem(sc, loaded.sigma0)
    sol = solve(pr, opts)
    data = assemble_sensitivity(sol, pr)
    d = decay_direction(pr.sigma0, max(epsilons, default=0.0), seed)
    study = decay_study(sc, pr.sigma0, epsilons, d, opts, solution=sol, eta1=data.eta1)
    res = ExperimentResult("sensitivity", h)
    res.tables["decay.csv"] = table(["epsilon", "update_error"], zip(study.epsilons, study.errors), tag)
    p = sc.topology.pattern
    rows = [(int(i) + 1, int(j) + 1, k + 1, float(data.eta1[m, k]))
            for m, (i, j) in enumerate(zip(p.rows, p.cols)) for k in range(pr.n)]
    res.tables["eta1.csv"] = table(["to_link", "from_link", "trust_link", "eta1"], rows, tag)
    res.summary = {"loglog_slope": study.slope, "ratios": study.ratios, "direction": d,
                   "assumptions": vars(data.assumptions), "residual": data.residual, "converged": sol.converged}
    if not sol.converged:
        res.exit_code = EXIT_SOLVER
    return res


def cmd_resilience(loaded: LoadedScenario, sigma0s, brute_force=False, zero_trust="selfish") -> ExperimentResult:
    sc, opts = loaded.scenario, loaded.options
    h = _run_hash(loaded, "resilience", sigma0s=list(sigma0s), brute_force=brute_force, zero_trust=zero_trust)
    tag = _tag(h)
    reports = resilience_study(sc, sigma0s, brute_force, opts, GridSpec(), zero_trust)
    res = ExperimentResult("resilience", h)
    summary = {}
    for s, rep in reports.items():
        name = f"resilience_sigma0_{s:g}.csv"
        res.tables[name] = rep.to_csv(tag)
        entry = {"network_bound": network_resilience(rep), "feasible_diameter": rep.feasible_diameter,
                 "messages": rep.messages}
        if brute_force:
            entry["network_brute_force"] = network_resilience(rep, "brute_force_margin")
        summary[f"{s:g}"] = entry
    res.summary = summary
    return res


def read_trace(path, n: int, horizon: int) -> np.ndarray:
    """Trust trace CSV: one row per step, one column (uniform) or ``n`` columns."""
    try:
        text = Path(path).read_text(encoding="utf-8")
    except OSError as exc:
        raise StructuralError(f"{path}: cannot read trust trace ({exc.strerror})") from None
    rows = [r for r in csv.reader(io.StringIO(text)) if r]
    if rows and not _is_number(rows[0][0]):
        rows = rows[1:]
    try:
        arr = np.array([[float(v) for v in r] for r in rows], dtype=float)
    except ValueError as exc:
        raise StructuralError(f"{path}: {exc}") from None
    if arr.ndim != 2 or arr.shape[0] != horizon or arr.shape[1] not in (1, n):
        raise StructuralError(f"{path}: expected {horizon} rows of 1 or {n} values")
    return np.tile(arr, (1, n)) if arr.shape[1] == 1 else arr


def _is_number(s: str) -> bool:
    try:
        float(s)
        return True
    except ValueError:
        return False


def cmd_realtime(loaded: LoadedScenario, tc: float, trace_path=None) -> ExperimentResult:
    sc, opts = loaded.scenario, loaded.options
    trace = sc.sigma if trace_path is None else read_trace(trace_path, sc.n, sc.horizon)
    h = _run_hash(loaded, "realtime", tc=tc, trace=trace)
    tag = _tag(h)
    result = realtime_loop(sc, tc, trace, opts)
    res = ExperimentResult("realtime", h)
    summary_rows, routing_rows = [], []
    p = sc.topology.pattern
    for name in ("linear", "hold", "resolve"):
        run = result.runs[name]
        summary_rows.append((name, run.ttt, result.gap(name), len(run.resolve_steps)))
        for k, rc in enumerate(run.applied_rc):
            routing_rows += [(name, k, int(i) + 1, int(j) + 1, float(v)) for i, j, v in zip(p.rows, p.cols, rc)]
    res.tables["realtime_summary.csv"] = table(["strategy", "ttt", "gap_vs_resolve", "resolves"], summary_rows, tag)
    res.tables["realtime_routing.csv"] = table(["strategy", "step", "to_link", "from_link", "rc"], routing_rows, tag)
    res.summary = {"period_steps": result.period_steps,
                   "messages": {k: r.messages for k, r in result.runs.items()}}
    return res


# --------------------------------------------------------------------------
# argument parsing


def parse_range(text: str) -> list:
    """``a:b:step`` inclusive of ``b`` (up to rounding)."""
    try:
        a, b, s = (float(v) for v in text.split(":"))
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected a:b:step, got {text!r}") from None
    if s <= 0 or b < a:
        raise argparse.ArgumentTypeError("need step > 0 and b >= a")
    count = int(math.floor((b - a) / s + 1e-9))
    return [round(a + m * s, 12) for m in range(count + 1)]


def parse_floats(text: str) -> list:
    try:
        return [float(v) for v in text.split(",") if v.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated numbers, got {text!r}") from None


def parse_ints(text: str) -> list:
    try:
        return [int(v) for v in text.split(",") if v.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}") from None


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="trustroute", description=__doc__.splitlines()[0])
    ap.add_argument("--version", action="version", version=__version__)
    sub = ap.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--scenario", required=True,
                       help="scenario JSON file, or one of: bundled, merge, split-jam")
        p.add_argument("--out", required=True, type=Path, help="output directory")
        p.add_argument("--seed", type=int, default=None)
        p.add_argument("-v", "--verbose", action="store_true")
        return p

    common(sub.add_parser("simulate", help="simulate the selfish baseline"))
    p = common(sub.add_parser("optimize", help="optimal controlled routing and travel-time reduction"))
    p.add_argument("--sweep-sigma", type=parse_range, default=None, metavar="A:B:STEP")
    p.add_argument("--sweep-horizon", type=parse_ints, default=None, metavar="H1,H2,...")
    p = common(sub.add_parser("sensitivity", help="first-order update error against re-solves"))
    p.add_argument("--epsilons", type=parse_floats, default=list(DEFAULT_EPSILONS))
    p = common(sub.add_parser("resilience", help="per-link margins of resilience"))
    p.add_argument("--sigma0", type=parse_floats, default=None, help="nominal trust levels (default: 0 and the file's)")
    p.add_argument("--brute-force", action="store_true")
    p.add_argument("--zero-trust", choices=("selfish", "limit"), default="selfish")
    p = common(sub.add_parser("realtime", help="simulated real-time update loop"))
    p.add_argument("--tc", type=float, required=True, help="re-solve period in hours")
    p.add_argument("--sigma-trace", default=None, help="CSV trust trace (default: the file's schedule)")
    return ap


def run(args) -> ExperimentResult:
    loaded = load_scenario(args.scenario)
    if args.command == "simulate":
        return cmd_simulate(loaded)
    if args.command == "optimize":
        return cmd_optimize(loaded, args.sweep_sigma, args.sweep_horizon)
    if args.command == "sensitivity":
        return cmd_sensitivity(loaded, args.epsilons, args.seed)
    if args.command == "resilience":
        s0 = args.sigma0 if args.sigma0 is not None else sorted({0.0, float(np.mean(loaded.sigma0))})
        return cmd_resilience(loaded, s0, args.brute_force, args.zero_trust)
    return cmd_realtime(loaded, args.tc, args.sigma_trace)


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        result = run(args)
    except (StructuralError, DomainError, DependencyError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INVALID
    except AssumptionViolation as exc:
        print(f"error: sensitivity assumptions failed ({', '.join(exc.failed)}): {exc}", file=sys.stderr)
        return EXIT_SOLVER
    except NumericalError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL
    except TrustRouteError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INVALID
    result.write(args.out)
    if result.exit_code == EXIT_SOLVER:
        print("error: solver did not converge; results written for inspection", file=sys.stderr)
    return result.exit_code


if __name__ == "__main__":
    sys.exit(main())
