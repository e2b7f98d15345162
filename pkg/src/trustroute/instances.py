"""Built-in problem instances used by the CLI, the tests and the experiments."""

from __future__ import annotations

import numpy as np

from .ctm import LinkParams, Scenario
from .network import NetworkTopology, RoutingMatrix, build_uniform_selfish

FREEWAY = dict(jam_density=200.0, length=5.25, free_speed=35.0, demand_shape=0.01)
STEP_HOURS = 0.15
RAMP_INFLOW = 600.0  # 10 veh/min

# (tail node, head node) per link; None marks the network boundary
BUNDLED_JUNCTIONS = (
    (None, 1),  # 1  on-ramp
    (None, 2),  # 2  on-ramp
    (None, 3),  # 3  on-ramp
    (1, 3),     # 4
    (1, 5),     # 5
    (1, 6),     # 6
    (2, 3),     # 7
    (2, 4),     # 8
    (2, 6),     # 9
    (2, 7),     # 10
    (3, 5),     # 11
    (4, 5),     # 12
    (4, 6),     # 13
    (5, 7),     # 14
    (6, 7),     # 15
    (7, None),  # 16 off-ramp
)


def bundled_topology() -> NetworkTopology:
    tails, heads = zip(*BUNDLED_JUNCTIONS)
    return NetworkTopology.from_junctions(7, tails, heads)


def bundled_scenario(horizon: int = 10, sigma=0.3) -> Scenario:
    """16-link, 7-node freeway mesh with three on-ramps and one off-ramp."""
    topo = bundled_topology()
    n = topo.num_links
    inflow = np.zeros((horizon, n))
    inflow[:, sorted(topo.on_ramps)] = RAMP_INFLOW
    return Scenario(
        topology=topo,
        params=tuple(LinkParams(**FREEWAY) for _ in range(n)),
        inflow=inflow,
        x0=np.full(n, 100.0),
        sigma=sigma,
        rs=build_uniform_selfish(topo),
        step_hours=STEP_HOURS,
        name="bundled-16",
    )


def merge_scenario(horizon: int = 6, sigma=1.0, x0=(150.0, 10.0, 0.0, 0.0), inflow=1200.0) -> Scenario:
    """One on-ramp splitting over two parallel links that rejoin an off-ramp.

    The only free routing parameter is the share sent onto link 2. Link 2
    starts partly loaded and link 3 empty but slower, so with the default
    state the optimal split is interior (about 0.45 onto link 2). Loading
    link 2 further (e.g. ``x0[1] = 40``) pushes the optimum to the vertex
    that sends everything onto the empty branch.
    """
    topo = NetworkTopology.from_junctions(2, (None, 0, 0, 1), (0, 1, 1, None))
    params = (
        LinkParams(200.0, 5.25, 35.0, 0.01),
        LinkParams(200.0, 5.25, 35.0, 0.1),
        LinkParams(200.0, 5.25, 25.0, 0.1),
        LinkParams(200.0, 5.25, 35.0, 0.01),
    )
    lam = np.zeros((horizon, 4))
    lam[:, 0] = inflow
    rs = RoutingMatrix.from_entries(topo, {(1, 0): 0.5, (2, 0): 0.5, (3, 1): 1.0, (3, 2): 1.0})
    return Scenario(topo, params, lam, np.asarray(x0, dtype=float), sigma, rs, STEP_HOURS, "merge-4")


def split_jam_scenario(sigma=0.2, selfish_share=0.3, horizon: int = 2) -> Scenario:
    """Three links whose jam-density failures are analytic.

    Link 1 is an on-ramp holding a large queue, so it always offers 6000 veh/h;
    it splits onto off-ramps 2 and 3, both empty with Courant number one.
    After one step link 3 holds ``300 * r31`` vehicles and jams once
    ``r31 >= 2/3``; link 2 symmetrically jams once ``r31 <= 1/3``. Travel
    time is minimized near ``r31 = 0.585``, so for small trust the controlled
    split sits at the vertex ``rc31 = 1`` and the mixed share is affine in
    ``sigma_1``.
    """
    topo = NetworkTopology.from_junctions(1, (None, 0, 0), (0, None, None))
    params = (
        LinkParams(1e6, 1000.0, 6000.0, 1.0),
        LinkParams(200.0, 3.0, 60.0, 0.01),
        LinkParams(200.0, 5.0, 100.0, 0.01),
    )
    rs = RoutingMatrix.from_entries(topo, {(1, 0): 1.0 - selfish_share, (2, 0): selfish_share})
    x0 = np.array([5000.0, 0.0, 0.0])
    return Scenario(topo, params, np.zeros((horizon, 3)), x0, sigma, rs, 0.05, "split-3")
