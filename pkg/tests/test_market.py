import math
import warnings

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from gridincentives.exceptions import (
    DomainError,
    NegativeDemandError,
    NegativeDemandWarning,
    ValidationError,
)
from gridincentives.market import (
    Prosumer,
    ProsumerArrays,
    Tariff,
    incentive_payment,
    nem_charge,
    nominal_demand,
    optimal_demand,
    surplus,
    utility,
)


def test_utility_rejects_negative_demand():
    with pytest.raises(DomainError):
        utility(Prosumer(alpha=2.0, beta=3.0), -0.1)


def test_nem_charge_includes_the_surcharge():
    assert nem_charge(Tariff(pi=1.0, pi0=0.5), 2.0) == -1.5


@pytest.mark.parametrize(
    "kwargs, message",
    [
        ({"alpha": 0.0, "beta": 3.0}, "alpha must be positive"),
        ({"alpha": 1.0, "beta": 3.0, "r": -1.0}, "generation must be nonnegative"),
        ({"alpha": 1.0, "beta": 3.0, "d_min": 2.0, "d_max": 1.0}, "d_min"),
        ({"alpha": math.nan, "beta": 3.0}, "alpha must be finite"),
    ],
)
def test_invalid_prosumers(kwargs, message):
    with pytest.raises(ValidationError, match=message):
        Prosumer(**kwargs)


@pytest.mark.parametrize("pi", [0.0, -1.0, math.inf])
def test_invalid_tariffs(pi):
    with pytest.raises(ValidationError):
        Tariff(pi=pi)


def test_beta_below_retail_rate_is_rejected():
    with pytest.raises(ValidationError, match="below the retail rate"):
        Prosumer(alpha=1.0, beta=0.5).validate_against(Tariff(pi=1.0))


def test_prosumer_arrays_name_the_offending_buses():
    arrays = ProsumerArrays.from_prosumers(
        [Prosumer(alpha=1.0, beta=2.0), Prosumer(alpha=1.0, beta=0.5), Prosumer(alpha=1.0, beta=0.2)]
    )
    with pytest.raises(ValidationError, match=r"buses \[2, 3\]"):
        arrays.validate_against(Tariff(pi=1.0))


def test_prosumer_arrays_round_trip_through_prosumers():
    prosumers = [Prosumer(alpha=2.0, beta=3.0, r=0.5, q=-0.1), Prosumer(alpha=0.5, beta=1.5)]
    arrays = ProsumerArrays.from_prosumers(prosumers)
    assert arrays.to_prosumers() == prosumers
    assert arrays.nominal_demands(Tariff(pi=1.0)).tolist() == [1.0, 1.0]


def test_negative_response_warns_or_raises():
    pros, tariff = Prosumer(alpha=2.0, beta=3.0), Tariff(pi=1.0)
    with pytest.warns(NegativeDemandWarning):
        assert optimal_demand(pros, tariff, -3.0) == -0.5
    with pytest.raises(NegativeDemandError):
        optimal_demand(pros, tariff, -3.0, strict=True)


def test_clamped_response_stays_in_the_demand_box():
    pros = Prosumer(alpha=2.0, beta=3.0, d_min=0.5, d_max=1.1)
    tariff = Tariff(pi=1.0)
    assert optimal_demand(pros, tariff, 0.5, clamp=True) == 1.1
    assert optimal_demand(pros, tariff, -1.5, clamp=True) == 0.5
    assert optimal_demand(pros, tariff, 0.5) == 1.25


def test_vector_response_matches_the_scalar_one():
    prosumers = [Prosumer(alpha=2.0, beta=3.0), Prosumer(alpha=0.5, beta=1.2, d_max=0.5)]
    arrays = ProsumerArrays.from_prosumers(prosumers)
    tariff = Tariff(pi=1.0)
    xi = np.array([0.3, 0.4])
    for clamp in (False, True):
        expected = [optimal_demand(p, tariff, x, clamp=clamp) for p, x in zip(prosumers, xi)]
        np.testing.assert_allclose(arrays.demand_response(tariff, xi, clamp=clamp), expected)


def test_vector_response_does_not_guard_the_sign():
    arrays = ProsumerArrays.from_prosumers([Prosumer(alpha=2.0, beta=3.0)])
    with warnings.catch_warnings():
        warnings.simplefilter("error")
        assert arrays.demand_response(Tariff(pi=1.0), [-3.0]).tolist() == [-0.5]


prosumer_params = st.tuples(
    st.floats(0.1, 10.0),  # alpha
    st.floats(0.0, 5.0),  # beta above the retail rate
    st.floats(0.1, 2.0),  # pi
    st.floats(0.01, 3.0),  # incentive above pi - beta
    st.floats(0.0, 2.0),  # generation
)


@given(prosumer_params, st.floats(-0.99, 3.0))
def test_optimal_demand_maximizes_the_surplus(params, offset):
    alpha, excess, pi, shift, r = params
    pros = Prosumer(alpha=alpha, beta=pi + excess, r=r)
    tariff = Tariff(pi=pi, pi0=0.2)
    xi = -excess + shift
    best = optimal_demand(pros, tariff, xi)
    other = max(best * (1 + offset), 0.0)
    scale = 1.0 + abs(surplus(pros, tariff, xi, best))
    assert surplus(pros, tariff, xi, best) >= surplus(pros, tariff, xi, other) - 1e-10 * scale


@given(prosumer_params)
def test_payment_vanishes_at_nominal_demand(params):
    alpha, excess, pi, shift, r = params
    pros = Prosumer(alpha=alpha, beta=pi + excess, r=r)
    tariff = Tariff(pi=pi)
    assert incentive_payment(pros, tariff, shift, nominal_demand(pros, tariff)) == 0.0
    assert nominal_demand(pros, tariff) == pytest.approx(optimal_demand(pros, tariff, 0.0))
