"""Scenario files: strict JSON schema, parsing and canonical hashing."""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass
from importlib import resources
from pathlib import Path
from typing import Literal, Optional, Union

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, ValidationError, model_validator

from .ctm import LinkParams, Scenario, check_cfl
from .errors import ScenarioFileError, TrustRouteError
from .network import NetworkTopology, RoutingMatrix, build_uniform_selfish, validate_topology
from .optimize import SolverOptions

SCHEMA_VERSION = 1
BUNDLED = {"bundled": "bundled.json", "merge": "merge.json", "split-jam": "split_jam.json"}


class _Strict(BaseModel):
    model_config = ConfigDict(extra="forbid", frozen=True)


class PhysicsModel(_Strict):
    jam_density: float = Field(gt=0)
    length: float = Field(gt=0)
    free_speed: float = Field(gt=0)
    demand_shape: float = Field(gt=0)


class TopologyModel(_Strict):
    num_nodes: int = Field(gt=0)
    num_links: int = Field(gt=0)
    edges: list[tuple[int, int]]  # (to_link, from_link), 1-based
    on_ramps: list[int]
    off_ramps: list[int]


class LinksModel(_Strict):
    default: PhysicsModel
    overrides: dict[str, PhysicsModel] = {}


class InflowModel(_Strict):
    rates: Optional[dict[str, float]] = None
    schedule: Optional[list[list[float]]] = None

    @model_validator(mode="after")
    def _one_form(self):
        if (self.rates is None) == (self.schedule is None):
            raise ValueError("give exactly one of 'rates' or 'schedule'")
        return self


class RoutingEntry(_Strict):
    to_link: int
    from_link: int
    value: float


class SolverModel(_Strict):
    max_iter: int = Field(default=200, gt=0)
    kkt_tol: float = Field(default=1e-6, gt=0)
    max_outer: int = Field(default=30, gt=0)
    penalty_initial: float = Field(default=1.0, gt=0)
    penalty_growth: float = Field(default=10.0, gt=1)
    feasibility_tol: float = Field(default=1e-8, gt=0)
    smoothing: bool = False


class ScenarioFile(_Strict):
    schema_version: Literal[1]
    name: str = ""
    topology: TopologyModel
    links: LinksModel
    inflow: InflowModel
    x0: Union[float, list[float]]
    sigma0: Union[float, list[float]]
    sigma_schedule: Optional[list[Union[float, list[float]]]] = None
    selfish_routing: Union[Literal["uniform"], list[RoutingEntry]] = "uniform"
    horizon: int = Field(ge=0)
    step_hours: float = Field(gt=0)
    solver: SolverModel = SolverModel()


@dataclass(frozen=True, eq=False)
class LoadedScenario:
    scenario: Scenario
    sigma0: np.ndarray
    options: SolverOptions
    config: dict
    config_hash: str


def _loc(loc) -> str:
    return ".".join(str(p) for p in loc) or "<root>"


def _anchor(path: str, exc: Exception) -> ScenarioFileError:
    return ScenarioFileError(f"{path}: {exc}")


def _link_index(key, n: int, where: str) -> int:
    try:
        i = int(key)
    except (TypeError, ValueError):
        raise ScenarioFileError(f"{where}: link id {key!r} is not an integer") from None
    if not 1 <= i <= n:
        raise ScenarioFileError(f"{where}: link id {i} outside 1..{n}")
    return i - 1


def _vector(value, n: int, where: str) -> np.ndarray:
    arr = np.asarray(value, dtype=float)
    if arr.ndim == 0:
        return np.full(n, float(arr))
    if arr.shape != (n,):
        raise ScenarioFileError(f"{where}: expected a scalar or {n} values, got {arr.size}")
    return arr


def build(model: ScenarioFile) -> tuple:
    """Turn a validated file model into a scenario, nominal trust and solver options."""
    t = model.topology
    n, h = t.num_links, model.horizon
    edges = set()
    for p, (i, j) in enumerate(t.edges):
        edges.add((_link_index(i, n, f"topology.edges.{p}.0"), _link_index(j, n, f"topology.edges.{p}.1")))
    on = frozenset(_link_index(i, n, "topology.on_ramps") for i in t.on_ramps)
    off = frozenset(_link_index(i, n, "topology.off_ramps") for i in t.off_ramps)
    topo = NetworkTopology(t.num_nodes, n, frozenset(edges), on, frozenset(range(n)) - on - off, off)
    report = validate_topology(topo)
    if not report.ok:
        raise ScenarioFileError("topology: " + "; ".join(report.violations))

    params = [model.links.default] * n
    for key, phys in model.links.overrides.items():
        params[_link_index(key, n, f"links.overrides.{key}")] = phys
    params = tuple(LinkParams(**p.model_dump()) for p in params)

    if model.inflow.schedule is not None:
        lam = np.asarray(model.inflow.schedule, dtype=float)
        if lam.shape != (h, n) and not (h == 0 and lam.size == 0):
            raise ScenarioFileError(f"inflow.schedule: expected shape ({h}, {n}), got {lam.shape}")
        lam = lam.reshape(h, n)
    else:
        lam = np.zeros((h, n))
        for key, rate in model.inflow.rates.items():
            lam[:, _link_index(key, n, f"inflow.rates.{key}")] = rate

    sigma0 = _vector(model.sigma0, n, "sigma0")
    if np.any((sigma0 < 0) | (sigma0 > 1)):
        raise ScenarioFileError("sigma0: trust levels must lie in [0, 1]")
    if model.sigma_schedule is not None:
        if len(model.sigma_schedule) != h:
            raise ScenarioFileError(f"sigma_schedule: expected {h} rows, got {len(model.sigma_schedule)}")
        sig = np.vstack([_vector(row, n, f"sigma_schedule.{k}") for k, row in enumerate(model.sigma_schedule)]) \
            if h else np.zeros((0, n))
    else:
        sig = sigma0

    try:
        if model.selfish_routing == "uniform":
            rs = build_uniform_selfish(topo)
        else:
            rs = RoutingMatrix.from_entries(
                topo, {(e.to_link - 1, e.from_link - 1): e.value for e in model.selfish_routing})
    except TrustRouteError as exc:
        raise _anchor("selfish_routing", exc) from exc

    try:
        sc = Scenario(topo, params, lam, _vector(model.x0, n, "x0"), sig, rs, model.step_hours, model.name)
    except ScenarioFileError:
        raise
    except TrustRouteError as exc:
        raise _anchor("scenario", exc) from exc
    cfl = check_cfl(sc)
    if not cfl.passed:
        worst = int(np.argmax(cfl.ratios))
        raise ScenarioFileError(
            f"links.{worst + 1}: CFL condition violated, v*T_s/L = {cfl.max_ratio:.6g} > 1")
    s = model.solver
    opts = SolverOptions(max_iter=s.max_iter, kkt_tol=s.kkt_tol, max_outer=s.max_outer,
                         penalty_initial=s.penalty_initial, penalty_growth=s.penalty_growth,
                         feasibility_tol=s.feasibility_tol, smoothing=s.smoothing)
    return sc, sigma0, opts


def canonical_json(obj) -> str:
    return json.dumps(obj, sort_keys=True, separators=(",", ":"), allow_nan=False)


def config_hash(obj) -> str:
    return hashlib.sha256(canonical_json(obj).encode()).hexdigest()


def parse_scenario(text: str) -> LoadedScenario:
    try:
        raw = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ScenarioFileError(f"line {exc.lineno}, column {exc.colno}: {exc.msg}") from None
    try:
        model = ScenarioFile.model_validate(raw)
    except ValidationError as exc:
        first = exc.errors()[0]
        more = f" (+{exc.error_count() - 1} more)" if exc.error_count() > 1 else ""
        raise ScenarioFileError(f"{_loc(first['loc'])}: {first['msg']}{more}") from None
    sc, sigma0, opts = build(model)
    config = model.model_dump(mode="json")
    return LoadedScenario(sc, sigma0, opts, config, config_hash(config))


def bundled_path(name: str) -> Path:
    return Path(str(resources.files("trustroute") / "data" / BUNDLED[name]))


def load_scenario(path) -> LoadedScenario:
    """Load a scenario file; the names in ``BUNDLED`` select packaged examples."""
    p = bundled_path(path) if str(path) in BUNDLED else Path(path)
    try:
        text = p.read_text(encoding="utf-8")
    except OSError as exc:
        raise ScenarioFileError(f"{p}: cannot read scenario file ({exc.strerror})") from None
    return parse_scenario(text)


def scenario_to_config(sc: Scenario, sigma0, options: SolverOptions = None) -> dict:
    """Inverse of :func:`build` for scenarios with constant trust schedules."""
    topo = sc.topology
    p = topo.pattern
    default = sc.params[0]
    overrides = {str(i + 1): vars(q) for i, q in enumerate(sc.params) if q != default}
    lam = sc.inflow
    const = sc.horizon > 0 and np.all(lam == lam[0])
    inflow = ({"rates": {str(i + 1): float(lam[0, i]) for i in sorted(topo.on_ramps)}} if const
              else {"schedule": lam.tolist()})
    uniform = np.array_equal(sc.rs.values, build_uniform_selfish(topo).values)
    opts = options or SolverOptions()
    sigma0 = np.asarray(sigma0, dtype=float)
    cfg = {
        "schema_version": SCHEMA_VERSION,
        "name": sc.name,
        "topology": {
            "num_nodes": topo.num_nodes,
            "num_links": topo.num_links,
            "edges": [[int(i) + 1, int(j) + 1] for i, j in zip(p.rows, p.cols)],
            "on_ramps": sorted(i + 1 for i in topo.on_ramps),
            "off_ramps": sorted(i + 1 for i in topo.off_ramps),
        },
        "links": {"default": vars(default), "overrides": overrides},
        "inflow": inflow,
        "x0": float(sc.x0[0]) if np.all(sc.x0 == sc.x0[0]) else sc.x0.tolist(),
        "sigma0": float(sigma0.flat[0]) if np.all(sigma0 == sigma0.flat[0]) else sigma0.tolist(),
        "selfish_routing": "uniform" if uniform else [
            {"to_link": int(i) + 1, "from_link": int(j) + 1, "value": float(v)}
            for i, j, v in zip(p.rows, p.cols, sc.rs.values)],
        "horizon": sc.horizon,
        "step_hours": sc.step_hours,
        "solver": {"max_iter": opts.max_iter, "kkt_tol": opts.kkt_tol, "max_outer": opts.max_outer,
                   "penalty_initial": opts.penalty_initial, "penalty_growth": opts.penalty_growth,
                   "feasibility_tol": opts.feasibility_tol, "smoothing": opts.smoothing},
    }
    if not np.allclose(sc.sigma, sc.sigma[:1]) or (sc.horizon and not np.allclose(sc.sigma[0], sigma0)):
        cfg["sigma_schedule"] = sc.sigma.tolist()
    return cfg
