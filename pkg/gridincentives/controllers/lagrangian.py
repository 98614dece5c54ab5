import typing

import numpy as np

from gridincentives.controllers.state import Measurement, MultiplierState
from gridincentives.market import Tariff
from gridincentives.program import OperationalLimits, QpData, so_cost


def _limit_terms(
    state: MultiplierState, meas: Measurement, limits: OperationalLimits
) -> float:
    return float(
        state.lambda_up @ (meas.v - limits.v_max)
        - state.lambda_lo @ (meas.v - limits.v_min)
        + state.mu_up * (meas.p0 - limits.p0_max)
        - state.mu_lo * (meas.p0 - limits.p0_min)
    )


def lagrangian_explicit(
    qp: QpData,
    state: MultiplierState,
    meas: Measurement,
    limits: typing.Optional[OperationalLimits] = None,
) -> float:
    """
    Lagrangian of the program with the demand constraint written on the incentive.

    Voltages and feeder power come from ``meas``, so the value is exact for
    whatever plant produced the measurement.
    """
    limits = qp.limits if limits is None else limits
    demand_term = state.nu @ (qp.pi - qp.beta - state.xi)
    return so_cost(qp, state.xi) + _limit_terms(state, meas, limits) + float(demand_term)


def lagrangian_implicit(
    state: MultiplierState,
    meas: Measurement,
    tariff: Tariff,
    d_hat: typing.Any,
    c_prime: float,
    limits: OperationalLimits,
) -> float:
    """
    Lagrangian built from measured demands, voltages and feeder power only.

    Examples:
        >>> state = MultiplierState.zeros(1)
        >>> meas = Measurement(v=[1.0], p0=1.0, d=[1.0])
        >>> limits = OperationalLimits.uniform(1, 0.9, 1.1, 0.0, 2.0)
        >>> lagrangian_implicit(state, meas, Tariff(pi=1.0), [1.0], 0.5, limits)
        -0.5
    """
    d_hat = np.asarray(d_hat, dtype=float)
    return float(
        state.xi @ (meas.d - d_hat)
        - tariff.pi * np.sum(meas.d)
        + c_prime
        + _limit_terms(state, meas, limits)
        - state.nu @ meas.d
    )


def explicit_gradient(
    qp: QpData, state: MultiplierState, implicit: bool = False
) -> np.ndarray:
    """
    Gradient in xi of the Lagrangian on the linear plant.

    With ``implicit`` the demand multiplier of ``state`` is read in the
    implicit form and converted before use.
    """
    theta = state.explicit_theta(qp, implicit)
    return 2 * qp.a * state.xi + qp.b + qp.Phi.T @ theta
