import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from conftest import feasible_limits, random_feeder
from gridincentives.exceptions import ConvergenceError, InfeasibleError, ValidationError
from gridincentives.feeder import build_sensitivities, voltages_of
from gridincentives.market import Tariff, incentive_payment, nem_charge
from gridincentives.program import (
    OperationalLimits,
    active_constraints,
    assemble_qp,
    constraint_labels,
    constraint_values,
    constraint_violation,
    dual_function,
    dual_gradient,
    kkt_residual,
    oracle_solve,
    primal_from_dual,
    so_cost,
    step_size_bound,
    with_generation,
    with_limits,
)


def random_program(seed, n):
    rng = np.random.default_rng(seed)
    network, prosumers, tariff = random_feeder(rng, n)
    model = build_sensitivities(network)
    limits = feasible_limits(model, prosumers, tariff, rng)
    return model, prosumers, tariff, assemble_qp(model, prosumers, tariff, limits)


@pytest.mark.parametrize(
    "kwargs",
    [
        {"v_min": [0.9, 0.9], "v_max": [1.1]},
        {"v_min": [1.0], "v_max": [1.0]},
        {"v_min": [0.9], "v_max": [1.1], "p0_min": 2.0, "p0_max": 1.0},
        {"v_min": [0.9], "v_max": [np.inf]},
    ],
)
def test_invalid_limits(kwargs):
    kwargs = {"p0_min": -1.0, "p0_max": 1.0, **kwargs}
    with pytest.raises(ValidationError):
        OperationalLimits(**kwargs)


def test_constraint_rows_of_the_one_bus_program(one_bus_qp):
    qp = one_bus_qp()
    assert qp.v_hat.tolist() == pytest.approx([0.9])
    assert qp.c_prime == 0.0
    # v_max, v_min, p0_max, p0_min, demand at xi = 0.5
    np.testing.assert_allclose(
        constraint_values(qp, [0.5]), [0.875 - 1.2, 0.8 - 0.875, 1.25 - 10.0, -10.0 - 1.25, -2.5]
    )


@given(st.integers(0, 2**32 - 1), st.integers(1, 8))
def test_constraints_match_the_plant(seed, n):
    model, prosumers, tariff, qp = random_program(seed, n)
    xi = np.random.default_rng(seed + 1).uniform(-0.2, 0.6, n)
    d = prosumers.demand_response(tariff, xi)
    v = voltages_of(model, prosumers.r - d, prosumers.q)
    p0 = np.sum(d - prosumers.r)
    limits = qp.limits
    expected = np.concatenate(
        [v - limits.v_max, limits.v_min - v, [p0 - limits.p0_max, limits.p0_min - p0], -d]
    )
    values = constraint_values(qp, xi)
    np.testing.assert_allclose(values[: 2 * n + 2], expected[: 2 * n + 2], atol=1e-12)
    # the program writes d >= 0 as pi - beta - xi <= 0, which is -d scaled by alpha
    np.testing.assert_allclose(values[2 * n + 2 :], prosumers.alpha * expected[2 * n + 2 :], atol=1e-12)


@given(st.integers(0, 2**32 - 1), st.integers(1, 8), st.floats(0.0, 1.0))
def test_cost_is_payout_minus_metering_revenue(seed, n, pi0):
    rng = np.random.default_rng(seed)
    network, prosumers, _ = random_feeder(rng, n)
    tariff = Tariff(pi=1.0, pi0=pi0)
    model = build_sensitivities(network)
    qp = assemble_qp(model, prosumers, tariff, feasible_limits(model, prosumers, tariff, rng))
    xi = rng.uniform(0.0, 1.0, n)
    d = prosumers.demand_response(tariff, xi)
    payout = sum(
        incentive_payment(pros, tariff, x, demand)
        for pros, x, demand in zip(prosumers.to_prosumers(), xi, d)
    )
    revenue = sum(nem_charge(tariff, r - demand) for r, demand in zip(prosumers.r, d))
    assert so_cost(qp, xi) == pytest.approx(payout - revenue, rel=1e-12, abs=1e-12)


def test_labels_follow_the_dual_order():
    assert constraint_labels(2) == [
        "v_max[1]",
        "v_max[2]",
        "v_min[1]",
        "v_min[2]",
        "p0_max",
        "p0_min",
        "demand[1]",
        "demand[2]",
    ]


def test_oracle_on_binding_feeder_limit(one_bus_qp):
    qp = one_bus_qp(p0_max=1.1)
    xi, theta = oracle_solve(qp)
    assert xi.tolist() == pytest.approx([0.2], abs=1e-9)
    np.testing.assert_allclose(theta, [0.0, 0.0, 0.6, 0.0, 0.0], atol=1e-8)
    assert kkt_residual(qp, xi, theta) <= 1e-10
    assert active_constraints(qp, xi, theta) == ["p0_max"]


def test_oracle_on_binding_voltage_floor(one_bus_qp):
    qp = one_bus_qp(v_min=0.895)
    solution = oracle_solve(qp)
    assert solution.xi.tolist() == pytest.approx([0.1], abs=1e-9)
    assert solution.theta[1] == pytest.approx(8.0, abs=1e-6)
    assert active_constraints(qp, solution.xi, solution.theta) == ["v_min[1]"]


def test_slack_limits_give_half_the_retail_rate(one_bus_qp):
    qp = one_bus_qp()
    solution = oracle_solve(qp)
    assert solution.xi.tolist() == pytest.approx([0.5])
    assert solution.iterations == 0
    assert not np.any(solution.theta)


def test_contradictory_limits_are_infeasible(one_bus_qp):
    qp = one_bus_qp(p0_max=-0.5)
    with pytest.raises(InfeasibleError) as excinfo:
        oracle_solve(qp)
    assert "p0_max" in excinfo.value.violated
    assert "demand[1]" in excinfo.value.violated


def test_oracle_reports_an_exhausted_budget(one_bus_qp):
    with pytest.raises(ConvergenceError):
        oracle_solve(one_bus_qp(p0_max=-0.5), max_iterations=10)


def test_dual_at_zero_multipliers_includes_the_constant(one_bus_qp):
    qp = one_bus_qp()
    assert dual_function(qp, np.zeros(5)) == pytest.approx(-1.125)
    assert dual_function(qp, np.zeros(5)) - qp.c == pytest.approx(-0.125)


def test_zero_duality_gap_on_the_one_bus_program(one_bus_qp):
    for qp in (one_bus_qp(p0_max=1.1), one_bus_qp(v_min=0.895), one_bus_qp()):
        xi, theta = oracle_solve(qp)
        assert dual_function(qp, theta) == pytest.approx(so_cost(qp, xi), abs=1e-7)


def test_zero_duality_gap_on_the_bundled_feeder(bundled_scenario):
    qp = bundled_scenario.program(bundled_scenario.grid_at(0))
    xi, theta = oracle_solve(qp)
    assert abs(dual_function(qp, theta) - so_cost(qp, xi)) <= 1e-7
    assert constraint_violation(qp, xi) <= 1e-9
    assert "p0_max" in active_constraints(qp, xi, theta)


@given(st.integers(0, 2**32 - 1), st.sampled_from([1, 2, 5, 10, 33]))
def test_zero_duality_gap_on_random_programs(seed, n):
    _, _, _, qp = random_program(seed, n)
    xi, theta = oracle_solve(qp)
    assert abs(dual_function(qp, theta) - so_cost(qp, xi)) <= 1e-7
    assert kkt_residual(qp, xi, theta) <= 1e-6


@given(st.integers(0, 2**32 - 1), st.sampled_from([1, 2, 5, 10, 33]))
def test_oracle_does_not_depend_on_its_start(seed, n):
    _, _, _, qp = random_program(seed, n)
    start = np.abs(np.random.default_rng(seed).standard_normal(qp.phi.size))
    from_zero = oracle_solve(qp)
    from_elsewhere = oracle_solve(qp, start=start)
    assert np.max(np.abs(from_zero.xi - from_elsewhere.xi)) <= 1e-7


@given(st.integers(0, 2**32 - 1), st.integers(1, 10))
def test_step_size_bound_matches_the_spectrum(seed, n):
    _, _, _, qp = random_program(seed, n)
    curvature = qp.Phi @ np.diag(1.0 / qp.a) @ qp.Phi.T
    assert step_size_bound(qp) == pytest.approx(4.0 / np.linalg.eigvalsh(curvature)[-1], rel=1e-6)


def test_step_size_bound_of_the_bundled_feeder(bundled_scenario):
    assert step_size_bound(bundled_scenario.program()) == pytest.approx(0.1477312345, rel=1e-6)


@given(st.integers(0, 2**32 - 1), st.integers(1, 6))
def test_dual_gradient_is_the_derivative_of_the_dual(seed, n):
    _, _, _, qp = random_program(seed, n)
    theta = np.random.default_rng(seed).uniform(0.0, 2.0, qp.phi.size)
    gradient = dual_gradient(qp, theta)
    step = 1e-4
    for i in range(theta.size):
        e = np.zeros_like(theta)
        e[i] = step
        numeric = (dual_function(qp, theta + e) - dual_function(qp, theta - e)) / (2 * step)
        assert numeric == pytest.approx(gradient[i], abs=1e-5)


def test_primal_from_dual_minimizes_the_lagrangian(one_bus_qp):
    qp = one_bus_qp(p0_max=1.1)
    theta = np.array([0.0, 0.0, 0.6, 0.0, 0.0])
    xi = primal_from_dual(qp, theta)
    assert xi.tolist() == pytest.approx([0.2])
    assert 2 * qp.a * xi + qp.b + qp.Phi.T @ theta == pytest.approx([0.0])


def test_kkt_residual_flags_negative_multipliers(one_bus_qp):
    qp = one_bus_qp()
    assert kkt_residual(qp, [0.5], np.zeros(5)) == 0.0
    assert kkt_residual(qp, [0.5], [0.0, 0.0, 0.0, 0.0, -1.0]) >= 1.0


def test_generation_and_limit_updates_match_a_rebuild(one_bus, one_bus_qp):
    network, prosumers, tariff = one_bus
    model = build_sensitivities(network)
    limits = OperationalLimits.uniform(1, 0.9, 1.1, 0.0, 1.0)
    updated = with_limits(with_generation(one_bus_qp(), model, [0.3]), limits)
    rebuilt = assemble_qp(model, prosumers.with_generation([0.3]), tariff, limits)
    for field in ("phi", "v_hat", "r"):
        np.testing.assert_allclose(getattr(updated, field), getattr(rebuilt, field))
    assert updated.c == pytest.approx(rebuilt.c)
    assert updated.c_prime == pytest.approx(rebuilt.c_prime)
    assert updated.limits == limits


def test_negative_generation_is_rejected(one_bus, one_bus_qp):
    model = build_sensitivities(one_bus[0])
    with pytest.raises(ValidationError):
        with_generation(one_bus_qp(), model, [-0.1])
