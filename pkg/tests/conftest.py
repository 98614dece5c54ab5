import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from gridincentives.cli import bundled
from gridincentives.controllers import Measurement
from gridincentives.feeder import (
    Line,
    Network,
    build_sensitivities,
    feeder_power_of,
    voltages_of,
)
from gridincentives.fileformat import (
    read_network,
    read_prosumers,
    read_scenario,
    read_tariff,
)
from gridincentives.market import Prosumer, ProsumerArrays, Tariff
from gridincentives.program import OperationalLimits, assemble_qp

settings.register_profile(
    "gridincentives",
    max_examples=40,
    deadline=None,
    suppress_health_check=[HealthCheck.too_slow],
)
settings.load_profile("gridincentives")

ONE_BUS_LINE = Line(0, 1, 0.1, 0.05)


def one_bus_limits(v_min=0.8, v_max=1.2, p0_min=-10.0, p0_max=10.0):
    return OperationalLimits.uniform(1, v_min, v_max, p0_min, p0_max)


@pytest.fixture
def one_bus():
    """
    alpha=2, beta=3, pi=1 on a single line with r=0.1, x=0.05.

    Nominal demand 1, v_hat 0.9, p0 = 1 + xi / 2, v = 0.9 - xi / 20.
    """
    network = Network(1, [ONE_BUS_LINE])
    prosumers = ProsumerArrays.from_prosumers([Prosumer(alpha=2.0, beta=3.0)])
    return network, prosumers, Tariff(pi=1.0)


def linear_plant(model, prosumers, tariff):
    """Measurements of the unclamped linear feeder, as a function of the incentive."""

    def respond(xi):
        d = prosumers.demand_response(tariff, xi)
        return Measurement(
            v=voltages_of(model, prosumers.r - d, prosumers.q),
            p0=feeder_power_of(d, prosumers.r),
            d=d,
        )

    return respond


@pytest.fixture
def one_bus_plant(one_bus):
    network, prosumers, tariff = one_bus
    return linear_plant(build_sensitivities(network), prosumers, tariff)


@pytest.fixture
def one_bus_qp(one_bus):
    def build(**limits):
        network, prosumers, tariff = one_bus
        return assemble_qp(
            build_sensitivities(network), prosumers, tariff, one_bus_limits(**limits)
        )

    return build


def random_feeder(rng: np.random.Generator, n: int, pi: float = 1.0):
    """Random radial feeder and prosumers with a strictly feasible incentive."""
    lines = [
        Line(int(rng.integers(0, bus)), bus, rng.uniform(0.002, 0.02), rng.uniform(0.002, 0.02))
        for bus in range(1, n + 1)
    ]
    network = Network(n, lines)
    alpha = rng.uniform(0.5, 5.0, n)
    d_hat = rng.uniform(0.01, 0.1, n)
    prosumers = ProsumerArrays(
        alpha=alpha,
        beta=pi + alpha * d_hat,
        r=np.where(rng.random(n) < 0.3, rng.uniform(0.0, 0.1, n), 0.0),
        q=-0.3 * d_hat,
        d_min=np.zeros(n),
        d_max=np.full(n, np.inf),
    )
    return network, prosumers, Tariff(pi=pi)


def feasible_limits(model, prosumers, tariff, rng):
    """Limits that hold with slack at a random incentive keeping demand positive."""
    xi = prosumers.alpha * prosumers.nominal_demands(tariff) * rng.uniform(-0.5, 0.5, prosumers.size)
    d = prosumers.demand_response(tariff, xi)
    v = model.R @ (prosumers.r - d) + model.X @ prosumers.q + model.omega
    p0 = float(np.sum(d - prosumers.r))
    return OperationalLimits(
        np.full(prosumers.size, np.min(v) - 0.002),
        np.full(prosumers.size, np.max(v) + 0.01),
        p0 - 0.05,
        p0 + 0.01,
    )


@pytest.fixture(scope="session")
def bundled_scenario():
    scenario_path = bundled("ieee33_scenario.csv")
    network = read_network(bundled("ieee33_network.csv"))
    prosumers = read_prosumers(bundled("ieee33_prosumers.csv"), read_tariff(scenario_path))
    return read_scenario(scenario_path, network, prosumers)
