"""Network topology, routing matrices and trust-weighted routing composition.

Links are indexed ``0..n-1`` internally; files and tables use ``1..n``.
An edge ``(i, j)`` means vehicles leaving link ``j`` may enter link ``i``.
Routing matrices are column-stochastic on that pattern: column ``j`` holds
the turning ratios out of link ``j``.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from functools import cached_property
from typing import Iterable

import numpy as np

from .errors import InfeasibleTopologyError, StructuralError

COLUMN_SUM_TOL = 1e-9
RENORMALIZE_TOL = 1e-6


@dataclass(frozen=True)
class ValidationReport:
    violations: tuple[str, ...] = ()

    @property
    def ok(self) -> bool:
        return not self.violations

    def __bool__(self) -> bool:
        return self.ok


@dataclass(frozen=True)
class RoutingVectorization:
    """Column-major enumeration of the structurally nonzero routing entries.

    ``rows[p], cols[p]`` is the ``p``-th active entry; ``active_indices[p]``
    is its position ``cols[p] * n + rows[p]`` in the dense vectorization.
    """

    n: int
    rows: np.ndarray
    cols: np.ndarray

    @property
    def active_indices(self) -> np.ndarray:
        return self.cols * self.n + self.rows

    @property
    def size(self) -> int:
        return int(self.rows.size)

    def column_groups(self) -> list[np.ndarray]:
        """Positions of the active entries belonging to each column."""
        return [np.flatnonzero(self.cols == j) for j in range(self.n)]


@dataclass(frozen=True)
class NetworkTopology:
    num_nodes: int
    num_links: int
    edges: frozenset
    on_ramps: frozenset
    internal: frozenset
    off_ramps: frozenset
    link_names: tuple = field(default=(), compare=False)

    @classmethod
    def from_junctions(cls, num_nodes: int, tails, heads, names=()) -> "NetworkTopology":
        """Build a topology from per-link (tail node, head node) pairs.

        ``None`` as tail marks an on-ramp, ``None`` as head an off-ramp.
        Link ``j`` feeds link ``i`` whenever ``head[j] == tail[i]``.
        """
        tails, heads = list(tails), list(heads)
        if len(tails) != len(heads):
            raise StructuralError("tails and heads must have equal length")
        n = len(tails)
        edges = {
            (i, j)
            for j in range(n)
            for i in range(n)
            if heads[j] is not None and tails[i] is not None and heads[j] == tails[i] and i != j
        }
        on = frozenset(i for i in range(n) if tails[i] is None)
        off = frozenset(i for i in range(n) if heads[i] is None)
        internal = frozenset(range(n)) - on - off
        return cls(num_nodes, n, frozenset(edges), on, internal, off, tuple(names))

    def successors(self, j: int) -> list[int]:
        return sorted(i for (i, jj) in self.edges if jj == j)

    def predecessors(self, i: int) -> list[int]:
        return sorted(j for (ii, j) in self.edges if ii == i)

    @cached_property
    def pattern(self) -> RoutingVectorization:
        ordered = sorted(self.edges, key=lambda e: (e[1], e[0]))
        rows = np.array([e[0] for e in ordered], dtype=int)
        cols = np.array([e[1] for e in ordered], dtype=int)
        return RoutingVectorization(self.num_links, rows, cols)

    @cached_property
    def column_targets(self) -> np.ndarray:
        """Required column sum b_j: 1 for every link except off-ramps."""
        b = np.ones(self.num_links)
        b[list(self.off_ramps)] = 0.0
        return b

    @cached_property
    def on_ramp_mask(self) -> np.ndarray:
        mask = np.zeros(self.num_links, dtype=bool)
        mask[list(self.on_ramps)] = True
        return mask

    @cached_property
    def off_ramp_mask(self) -> np.ndarray:
        mask = np.zeros(self.num_links, dtype=bool)
        mask[list(self.off_ramps)] = True
        return mask

    def link_id(self, i: int) -> int:
        return i + 1


def validate_topology(topology: NetworkTopology) -> ValidationReport:
    """Collect every structural violation; never raises."""
    out = []
    n = topology.num_links
    on, inn, off = topology.on_ramps, topology.internal, topology.off_ramps
    if on & inn or on & off or inn & off:
        out.append("partition overlap: link classes are not disjoint")
    union = on | inn | off
    if union != frozenset(range(n)):
        missing = sorted(set(range(n)) - union)
        extra = sorted(union - set(range(n)))
        out.append(f"partition incomplete: missing {missing}, out of range {extra}")
    for i, j in sorted(topology.edges):
        if not (0 <= i < n and 0 <= j < n):
            out.append(f"edge out of range: ({i + 1}, {j + 1})")
        elif i == j:
            out.append(f"self-loop on link {i + 1}")
    valid_edges = [(i, j) for i, j in topology.edges if 0 <= i < n and 0 <= j < n]
    senders = {j for _, j in valid_edges}
    receivers = {i for i, _ in valid_edges}
    for j in sorted(off & senders):
        out.append(f"off-ramp has successors: link {j + 1}")
    for j in sorted(set(range(n)) - off - senders):
        out.append(f"link without successors: link {j + 1} is not an off-ramp")
    for i in sorted(on & receivers):
        out.append(f"on-ramp has predecessors: link {i + 1}")
    if topology.num_nodes <= 0:
        out.append("num_nodes must be positive")
    return ValidationReport(tuple(out))


def _check_column_sums(values: np.ndarray, pattern: RoutingVectorization, targets: np.ndarray):
    sums = np.bincount(pattern.cols, weights=values, minlength=pattern.n)
    return sums - targets


@dataclass(frozen=True, eq=False)
class RoutingMatrix:
    """Turning ratios stored on the topology's active pattern.

    ``values[p]`` is the ratio of active entry ``p``; see
    :class:`RoutingVectorization` for the ordering.
    """

    topology: NetworkTopology
    values: np.ndarray

    def __post_init__(self):
        pattern = self.topology.pattern
        v = np.asarray(self.values, dtype=float).copy()
        if v.shape != (pattern.size,):
            raise StructuralError(f"expected {pattern.size} routing entries, got shape {v.shape}")
        if not np.all(np.isfinite(v)):
            raise StructuralError("routing entries must be finite")
        if np.any(v < -RENORMALIZE_TOL) or np.any(v > 1 + RENORMALIZE_TOL):
            raise StructuralError("routing entries must lie in [0, 1]")
        v = np.clip(v, 0.0, 1.0)
        dev = _check_column_sums(v, pattern, self.topology.column_targets)
        worst = float(np.max(np.abs(dev))) if dev.size else 0.0
        if worst > RENORMALIZE_TOL:
            j = int(np.argmax(np.abs(dev)))
            raise StructuralError(f"column {j + 1} sums to {dev[j] + self.topology.column_targets[j]:.9g}")
        if worst > COLUMN_SUM_TOL:
            sums = np.bincount(pattern.cols, weights=v, minlength=pattern.n)
            scale = np.where(sums > 0, self.topology.column_targets / np.where(sums > 0, sums, 1.0), 1.0)
            v = v * scale[pattern.cols]
        v.setflags(write=False)
        object.__setattr__(self, "values", v)

    @classmethod
    def from_dense(cls, topology: NetworkTopology, dense) -> "RoutingMatrix":
        dense = np.asarray(dense, dtype=float)
        n = topology.num_links
        if dense.shape != (n, n):
            raise StructuralError(f"dense routing must be {n}x{n}, got {dense.shape}")
        pattern = topology.pattern
        off_pattern = dense.copy()
        off_pattern[pattern.rows, pattern.cols] = 0.0
        if np.any(np.abs(off_pattern) > 0):
            i, j = np.argwhere(np.abs(off_pattern) > 0)[0]
            raise StructuralError(f"nonzero entry ({i + 1}, {j + 1}) outside the graph pattern")
        return cls(topology, dense[pattern.rows, pattern.cols])

    @classmethod
    def from_entries(cls, topology: NetworkTopology, entries) -> "RoutingMatrix":
        """From ``{(i, j): value}`` with 0-based link indices."""
        n = topology.num_links
        dense = np.zeros((n, n))
        for (i, j), val in dict(entries).items():
            if (i, j) not in topology.edges:
                raise StructuralError(f"entry ({i + 1}, {j + 1}) is not an edge of the graph")
            dense[i, j] = val
        return cls.from_dense(topology, dense)

    @property
    def n(self) -> int:
        return self.topology.num_links

    def dense(self) -> np.ndarray:
        out = np.zeros((self.n, self.n))
        p = self.topology.pattern
        out[p.rows, p.cols] = self.values
        return out

    def entries(self) -> dict:
        p = self.topology.pattern
        return {(int(i), int(j)): float(v) for i, j, v in zip(p.rows, p.cols, self.values)}

    def __eq__(self, other):
        if not isinstance(other, RoutingMatrix):
            return NotImplemented
        return self.topology == other.topology and np.array_equal(self.values, other.values)

    def __hash__(self):
        return hash((self.topology, self.values.tobytes()))


def _as_sigma(sigma, n: int) -> np.ndarray:
    s = np.asarray(sigma, dtype=float)
    if s.ndim == 0:
        s = np.full(n, float(s))
    if s.shape != (n,):
        raise StructuralError(f"trust vector must have length {n}, got shape {s.shape}")
    if np.any(s < 0) or np.any(s > 1) or not np.all(np.isfinite(s)):
        raise StructuralError("trust levels must lie in [0, 1]")
    return s


def trust_vector(sigma, n: int) -> np.ndarray:
    """Validate and broadcast a trust vector (scalar allowed)."""
    return _as_sigma(sigma, n)


def mix_values(sigma: np.ndarray, rc_values: np.ndarray, rs_values: np.ndarray, pattern: RoutingVectorization) -> np.ndarray:
    """Column-wise mixing on pattern values: r = sigma_j rc + (1 - sigma_j) rs."""
    s = sigma[pattern.cols]
    return s * rc_values + (1.0 - s) * rs_values


def compose_routing(sigma, rc: RoutingMatrix, rs: RoutingMatrix) -> RoutingMatrix:
    """Trust-weighted routing ``R = Rc Sigma + Rs (I - Sigma)``.

    Trust is attached to the origin link ``j`` so every column stays a convex
    combination of two stochastic columns.
    """
    if rc.topology != rs.topology:
        raise StructuralError("controlled and selfish routing live on different topologies")
    s = _as_sigma(sigma, rc.n)
    return RoutingMatrix(rc.topology, mix_values(s, rc.values, rs.values, rc.topology.pattern))


def build_uniform_selfish(topology: NetworkTopology) -> RoutingMatrix:
    """Split every non off-ramp column uniformly over its successors."""
    pattern = topology.pattern
    counts = np.bincount(pattern.cols, minlength=topology.num_links)
    for j in range(topology.num_links):
        if j not in topology.off_ramps and counts[j] == 0:
            raise InfeasibleTopologyError(f"link {j + 1} has no successor and is not an off-ramp")
    return RoutingMatrix(topology, 1.0 / counts[pattern.cols])


def vectorize(R: RoutingMatrix, dense: bool = True) -> np.ndarray:
    """Column-major vectorization; ``dense=False`` keeps only active entries."""
    if not dense:
        return R.values.copy()
    return R.dense().reshape(-1, order="F")


def devectorize(v, topology: NetworkTopology) -> RoutingMatrix:
    v = np.asarray(v, dtype=float)
    n = topology.num_links
    if v.shape == (n * n,):
        return RoutingMatrix.from_dense(topology, v.reshape(n, n, order="F"))
    if v.shape == (topology.pattern.size,):
        return RoutingMatrix(topology, v)
    raise StructuralError(f"vector of length {v.size} is neither n^2={n * n} nor n_r={topology.pattern.size}")


def kron_mixing_operator(sigma, n: int) -> np.ndarray:
    """Dense ``(Sigma^T kron I)``; maps vec(X) to vec(X Sigma). Testing aid."""
    s = _as_sigma(sigma, n)
    return np.kron(np.diag(s).T, np.eye(n))


def links_from_ids(ids: Iterable[int]) -> list[int]:
    return [int(i) - 1 for i in ids]
