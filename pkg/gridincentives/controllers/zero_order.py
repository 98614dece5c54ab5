import dataclasses
import logging
import typing

import numpy as np

from gridincentives.controllers.dual_ascent import update_duals
from gridincentives.controllers.lagrangian import lagrangian_implicit
from gridincentives.controllers.registry import (
    Controller,
    Plant,
    register_controller,
)
from gridincentives.controllers.state import (
    PERTURBATION_LAWS,
    ControllerConfig,
    Measurement,
    MultiplierState,
    StepContext,
)
from gridincentives.exceptions import ValidationError
from gridincentives.market import Tariff
from gridincentives.program import QpData

logger = logging.getLogger(__name__)

DEFAULT_EPSILON = 0.05


def draw_perturbation(
    law: str, n: int, rng: np.random.Generator, iteration: int = 0
) -> np.ndarray:
    """
    Perturbation direction for one iteration.

    ``uniform`` draws every coordinate from [-1, 1]; ``coordinate`` cycles
    through the unit vectors.

    Examples:
        >>> draw_perturbation("coordinate", 3, None, iteration=4).tolist()
        [0.0, 1.0, 0.0]
    """
    if law == "uniform":
        return rng.uniform(-1.0, 1.0, n)
    if law == "coordinate":
        zeta = np.zeros(n)
        zeta[iteration % n] = 1.0
        return zeta
    raise ValidationError(
        f"unknown perturbation law {law!r}, expected one of {PERTURBATION_LAWS}"
    )


def two_point_estimate(
    function: typing.Callable[[np.ndarray], float],
    xi: typing.Any,
    zeta: typing.Any,
    sigma: float,
) -> np.ndarray:
    """
    Gradient estimate from two evaluations at ``xi + sigma zeta`` and ``xi - sigma zeta``.

    Exact along ``zeta`` for quadratic functions.

    Examples:
        >>> two_point_estimate(lambda x: float(x @ x), [1.0, 2.0], [0.0, 1.0], 0.5).tolist()
        [0.0, 4.0]
    """
    xi = np.asarray(xi, dtype=float)
    zeta = np.asarray(zeta, dtype=float)
    if not sigma > 0:
        raise ValidationError(f"sigma must be positive, got {sigma}")
    if not np.any(zeta):
        raise ValidationError("perturbation must be nonzero")
    difference = function(xi + sigma * zeta) - function(xi - sigma * zeta)
    return zeta / (2 * sigma) * difference


def zero_order_step(
    state: MultiplierState,
    plant_probe: Plant,
    config: ControllerConfig,
    qp: QpData,
    rng: np.random.Generator,
    measurement: typing.Optional[Measurement] = None,
    epsilon: typing.Optional[float] = None,
) -> MultiplierState:
    """
    One primal-dual iteration that only evaluates the plant.

    The plant is probed at the two perturbed incentives, the implicit
    Lagrangian is evaluated at both with the current multipliers, and the
    incentive moves against the two point estimate. The multipliers are
    updated from the measurement at the unperturbed incentive, or from the
    average of the two probes when ``config.dual_measurement`` is ``average``.

    Args:
        state (MultiplierState): Current incentive and multipliers.
        plant_probe (Plant): Applies an incentive and returns the measurement.
        config (ControllerConfig): Supplies sigma, the perturbation law and
            the dual measurement mode.
        qp (QpData): Supplies the tariff, nominal demand, c' and limits.
        rng (numpy.random.Generator): Source of the perturbations.
        measurement (Measurement): Measurement at ``state.xi`` if already
            taken; otherwise the plant is probed a third time.
        epsilon (float): Step size, ``config.epsilon`` or 0.05 by default.

    Returns:
        MultiplierState: The next state.
    """
    if epsilon is None:
        epsilon = DEFAULT_EPSILON if config.epsilon is None else config.epsilon
    tariff = Tariff(qp.pi, qp.pi0)
    probes: typing.List[Measurement] = []

    def lagrangian(xi: np.ndarray) -> float:
        meas = plant_probe(xi)
        probes.append(meas)
        return lagrangian_implicit(
            dataclasses.replace(state, xi=xi),
            meas,
            tariff,
            qp.d_hat,
            qp.c_prime,
            qp.limits,
        )

    zeta = draw_perturbation(config.perturbation_law, state.size, rng, state.iteration)
    estimate = two_point_estimate(lagrangian, state.xi, zeta, config.sigma)

    if config.dual_measurement == "average":
        measurement = Measurement.mean(*probes)
    elif measurement is None:
        measurement = plant_probe(state.xi)
    duals = update_duals(state, measurement, qp, epsilon)
    return duals.advanced(xi=state.xi - epsilon * estimate)


@register_controller
class ZeroOrderController(Controller):
    """
    Primal-dual steps with a two point gradient estimate from plant probes.

    Needs no model of the prosumers or the feeder beyond the measurements.
    """

    name = "zero_order"
    aliases = ("zero",)
    uses_implicit_demand_multiplier = True

    def default_epsilon(self, qp: QpData) -> float:
        return DEFAULT_EPSILON

    def step(
        self,
        state: MultiplierState,
        measurement: Measurement,
        plant: Plant,
        context: StepContext,
    ) -> MultiplierState:
        return zero_order_step(
            state,
            plant,
            context.config,
            context.qp,
            context.rng,
            measurement=measurement,
            epsilon=context.epsilon,
        )
