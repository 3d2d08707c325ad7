from fractions import Fraction
from pathlib import Path

import pytest

from mmp.dynamics import AgentContext, DynamicsSpec
from mmp.geometry import SQRT3, Bounds, build_partition
from mmp.ledger import RunLedger
from mmp.rocp import CostWeights, SolverConfig
from mmp.scenario import load_scenario

DATA = Path(__file__).resolve().parent.parent / "data"


@pytest.fixture
def corridor_path():
    return DATA / "corridor_scenario.yaml"


@pytest.fixture
def three_agent_path():
    return DATA / "three_agent_scenario.yaml"


@pytest.fixture
def corridor(corridor_path):
    return load_scenario(corridor_path)


@pytest.fixture
def small_bounds():
    return Bounds(-3.0, -3.0, 3.0, 3.0)


@pytest.fixture
def small_partition(small_bounds):
    return build_partition(small_bounds, 1.0)


@pytest.fixture
def free_agent(small_bounds):
    """Single integrator without neighbors"""
    spec = DynamicsSpec.create(neighbors=[], u_max=4.0)
    return AgentContext.create(1, spec, small_bounds, 1.0)


@pytest.fixture
def fast_config():
    return SolverConfig(
        starts=4,
        iterations=40,
        resolve_iterations=10,
        terminal_samples=200,
        dense_substeps=10,
    )


@pytest.fixture
def unit_weights():
    return CostWeights()


@pytest.fixture
def period():
    return Fraction(1)


@pytest.fixture
def sampling():
    return Fraction(1, 5)


@pytest.fixture
def no_ledger():
    return RunLedger(None)


@pytest.fixture
def ledger(tmp_path):
    return RunLedger(tmp_path / "ledger.db")


def cell_center(col, row, side=1.0):
    return (1.5 * side * col, SQRT3 * side * (row + 0.5 * (col % 2)))
