import numpy as np
import pytest

from trustroute.instances import bundled_scenario, merge_scenario, split_jam_scenario
from trustroute.network import RoutingMatrix
from trustroute.optimize import assemble_problem, solve
from trustroute.sensitivity import assemble_sensitivity


def random_routing(topology, rng) -> RoutingMatrix:
    """Dirichlet-distributed column-stochastic matrix on the topology's pattern."""
    p = topology.pattern
    vals = np.zeros(p.size)
    for j, grp in enumerate(p.column_groups()):
        if grp.size and j not in topology.off_ramps:
            vals[grp] = rng.dirichlet(np.ones(grp.size))
    return RoutingMatrix(topology, vals)


class Solved:
    def __init__(self, scenario, sigma0, with_sensitivity=True):
        self.scenario = scenario
        self.problem = assemble_problem(scenario, sigma0)
        self.solution = solve(self.problem)
        self.sens = assemble_sensitivity(self.solution, self.problem) if with_sensitivity else None


@pytest.fixture(scope="session")
def bundled_03():
    return Solved(bundled_scenario(sigma=0.3), 0.3)


@pytest.fixture(scope="session")
def merge_05():
    return Solved(merge_scenario(sigma=0.5), 0.5)


@pytest.fixture(scope="session")
def split_02():
    return Solved(split_jam_scenario(), 0.2)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)
