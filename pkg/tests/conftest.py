import numpy as np
import pytest

from lyapgrid.allocate import ExperimentConfig, run_equilibrium, run_experiment, sweep_nodes
from lyapgrid.netmodel import (Branch, Bus, BusKind, Generator, GeneratorParams, PowerNetwork,
                               bundled_case, load_case)


@pytest.fixture(scope="session")
def case9():
    return load_case(bundled_case("case9"))


@pytest.fixture(scope="session")
def case39():
    return load_case(bundled_case("case39"))


@pytest.fixture(scope="session")
def case9_run(case9):
    """case9, 2% renewable step at bus 5, h = 0.1, 30 s, with tangent maps."""
    return run_experiment(case9, 5, 2.0, ExperimentConfig())


@pytest.fixture(scope="session")
def case39_run(case39):
    return run_experiment(case39, 4, 2.0, ExperimentConfig())


@pytest.fixture(scope="session")
def case9_equilibrium(case9):
    return run_equilibrium(case9, ExperimentConfig(), variational=True)


@pytest.fixture(scope="session")
def case9_sweep(case9):
    return sweep_nodes(case9, 2.0, ExperimentConfig())


def default_params(**over):
    base = dict(H=5.0, D_pu=2.0, x_d=0.8, x_q=0.7, x_d_prime=0.3, T_d0_prime=6.0)
    base.update(over)
    return GeneratorParams.from_mapping(base)


def two_bus(load_p=0.8, load_q=0.3, r=0.01, x=0.1, b=0.02, params=None):
    """Single machine on the slack bus feeding one load bus."""
    buses = [Bus(1, BusKind.SLACK), Bus(2, BusKind.LOAD, load_p=load_p, load_q=load_q)]
    gen = Generator(1, 0.0, 1.0, params or default_params())
    return PowerNetwork(buses, [Branch(1, 2, r, x, b)], [gen])


@pytest.fixture
def rng():
    return np.random.default_rng(20261018)
