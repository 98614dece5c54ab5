import logging
import typing
from dataclasses import dataclass

import numpy as np

from gridincentives.controllers.dual_ascent import update_duals
from gridincentives.controllers.registry import (
    Controller,
    Plant,
    register_controller,
)
from gridincentives.controllers.state import Measurement, MultiplierState, StepContext
from gridincentives.exceptions import ValidationError
from gridincentives.feeder import readonly
from gridincentives.program import QpData

logger = logging.getLogger(__name__)

DEFAULT_EPSILON = 0.3


@dataclass(frozen=True, eq=False)
class Sensitivities:
    """
    Gradients of the plant response with respect to the incentive.

    Each matrix is the transposed Jacobian, so ``demand @ w`` is the gradient
    of ``w' d(xi)``. ``feeder`` is the gradient of the feeder power.
    """

    demand: np.ndarray
    voltage: np.ndarray
    feeder: np.ndarray

    def __post_init__(self):
        for name in ("demand", "voltage", "feeder"):
            object.__setattr__(self, name, readonly(getattr(self, name)))
        n = self.feeder.shape[0]
        if self.feeder.shape != (n,) or self.demand.shape != (n, n) or self.voltage.shape != (n, n):
            raise ValidationError(
                f"sensitivities have inconsistent shapes: demand {self.demand.shape}, "
                f"voltage {self.voltage.shape}, feeder {self.feeder.shape}"
            )

    @property
    def size(self) -> int:
        return self.feeder.shape[0]


def linear_plant_sensitivities(qp: QpData) -> Sensitivities:
    """Exact sensitivities of the linear plant behind ``qp``."""
    n = qp.size
    return Sensitivities(
        demand=qp.A,
        voltage=-qp.Phi[n : 2 * n].T,
        feeder=qp.a,
    )


def estimate_sensitivities(
    samples: typing.Sequence[typing.Tuple[typing.Any, Measurement]]
) -> Sensitivities:
    """
    Fits an affine plant response to recorded incentives and measurements.

    Args:
        samples: Pairs of applied incentive and the measurement it produced.
            At least N + 1 incentives in general position are needed.

    Returns:
        Sensitivities: Least-squares estimate of the gradients.

    Raises:
        ValidationError: If the incentives do not span the incentive space.
    """
    if not samples:
        raise ValidationError("no samples to estimate sensitivities from")
    incentives = np.array([np.asarray(xi, dtype=float) for xi, _ in samples])
    n = incentives.shape[1]
    design = np.hstack([incentives, np.ones((len(samples), 1))])
    if np.linalg.matrix_rank(design) < n + 1:
        raise ValidationError(
            f"{len(samples)} samples do not determine an affine response in {n} incentives"
        )
    targets = np.array(
        [np.concatenate([meas.d, meas.v, [meas.p0]]) for _, meas in samples]
    )
    coefficients = np.linalg.lstsq(design, targets, rcond=None)[0][:n]
    return Sensitivities(
        demand=coefficients[:, :n],
        voltage=coefficients[:, n : 2 * n],
        feeder=coefficients[:, 2 * n],
    )


def sensitivities_from_plant(
    plant: Plant, xi: typing.Any, measurement: Measurement, sigma: float
) -> Sensitivities:
    """
    Estimates sensitivities from the plant itself.

    Offers N incentives, each ``sigma`` above ``xi`` at one bus, and fits
    them together with ``measurement`` taken at ``xi``.
    """
    xi = np.asarray(xi, dtype=float)
    samples = [(xi, measurement)]
    for shift in sigma * np.eye(xi.size):
        samples.append((xi + shift, plant(xi + shift)))
    logger.info("estimated sensitivities from %d plant samples", xi.size)
    return estimate_sensitivities(samples)


def first_order_step(
    state: MultiplierState,
    meas: Measurement,
    sensitivities: Sensitivities,
    qp: QpData,
    epsilon: float,
) -> MultiplierState:
    """
    One primal-dual iteration using measured demand and plant sensitivities.

    The incentive descends the gradient of the implicit Lagrangian, evaluated
    with the measured demand; the multipliers follow the same projected
    updates as dual ascent. Both updates read the current state only.

    Examples:
        >>> from gridincentives.feeder import Line, Network, build_sensitivities
        >>> from gridincentives.market import Prosumer, ProsumerArrays, Tariff
        >>> from gridincentives.program import OperationalLimits, assemble_qp
        >>> model = build_sensitivities(Network(1, [Line(0, 1, 0.1, 0.05)]))
        >>> pros = ProsumerArrays.from_prosumers([Prosumer(alpha=2.0, beta=3.0)])
        >>> limits = OperationalLimits.uniform(1, 0.8, 1.2, -10.0, 10.0)
        >>> qp = assemble_qp(model, pros, Tariff(pi=1.0), limits)
        >>> meas = Measurement(v=qp.v_hat, p0=1.0, d=qp.d_hat)
        >>> state = MultiplierState.zeros(1)
        >>> first_order_step(state, meas, linear_plant_sensitivities(qp), qp, 0.1).xi.tolist()
        [0.05]
    """
    if sensitivities.size != state.size:
        raise ValidationError(
            f"sensitivities cover {sensitivities.size} buses, state has {state.size}"
        )
    gradient = (
        meas.d
        - qp.d_hat
        + sensitivities.demand @ state.xi
        - qp.pi * sensitivities.demand @ np.ones(state.size)
        + sensitivities.voltage @ (state.lambda_up - state.lambda_lo)
        + sensitivities.feeder * (state.mu_up - state.mu_lo)
        - sensitivities.demand @ state.nu
    )
    duals = update_duals(state, meas, qp, epsilon)
    return duals.advanced(xi=state.xi - epsilon * gradient)


@register_controller
class FirstOrderController(Controller):
    """
    Primal-dual gradient steps driven by measured demand and known sensitivities.

    The sensitivities are those of the linear plant unless the config asks
    for them to be estimated from plant samples before the first step.
    """

    name = "first_order"
    aliases = ("first",)
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
        if context.sensitivities is None:
            if context.config.sensitivities == "estimated":
                context.sensitivities = sensitivities_from_plant(
                    plant, state.xi, measurement, context.config.sigma
                )
            else:
                context.sensitivities = linear_plant_sensitivities(context.qp)
        return first_order_step(
            state, measurement, context.sensitivities, context.qp, context.epsilon
        )
