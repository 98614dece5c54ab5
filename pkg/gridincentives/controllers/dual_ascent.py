import logging
import typing

import numpy as np

from gridincentives.controllers.registry import (
    Controller,
    Plant,
    register_controller,
)
from gridincentives.controllers.state import Measurement, MultiplierState, StepContext
from gridincentives.exceptions import ValidationError
from gridincentives.program import (
    OperationalLimits,
    QpData,
    dual_gradient,
    primal_from_dual,
    step_size_bound,
)

logger = logging.getLogger(__name__)

SAFETY_FACTOR = 0.9


def update_duals(
    state: MultiplierState,
    meas: Measurement,
    qp: QpData,
    epsilon: float,
    limits: typing.Optional[OperationalLimits] = None,
) -> MultiplierState:
    """
    Projected gradient step on every multiplier from its own previous value.

    Voltage and feeder power multipliers move with the measured violation,
    the demand multipliers with ``pi - beta - xi`` at the current incentive.
    The incentive itself is left untouched.
    """
    limits = qp.limits if limits is None else limits
    return MultiplierState(
        xi=state.xi,
        lambda_up=np.maximum(state.lambda_up + epsilon * (meas.v - limits.v_max), 0.0),
        lambda_lo=np.maximum(state.lambda_lo + epsilon * (limits.v_min - meas.v), 0.0),
        mu_up=max(state.mu_up + epsilon * (meas.p0 - limits.p0_max), 0.0),
        mu_lo=max(state.mu_lo + epsilon * (limits.p0_min - meas.p0), 0.0),
        nu=np.maximum(state.nu + epsilon * (qp.pi - qp.beta - state.xi), 0.0),
        iteration=state.iteration,
    )


def dual_ascent_step(
    state: MultiplierState,
    qp: QpData,
    meas: Measurement,
    limits: typing.Optional[OperationalLimits],
    epsilon: float,
) -> MultiplierState:
    """
    One iteration of projected dual ascent.

    The multipliers are advanced with the measurement taken at ``state.xi``
    and the next incentive is the minimizer of the Lagrangian for the new
    multipliers. On the linear plant this makes the multiplier sequence
    follow ``theta <- max(theta + epsilon * grad h(theta), 0)`` exactly.

    Args:
        state (MultiplierState): Current incentive and multipliers.
        qp (QpData): The program; supplies A, b and the constraint rows.
        meas (Measurement): Plant measurement at ``state.xi``.
        limits (OperationalLimits): Limits to enforce, ``None`` for ``qp.limits``.
        epsilon (float): Step size.

    Returns:
        MultiplierState: The next state.
    """
    if not epsilon > 0:
        raise ValidationError(f"epsilon must be positive, got {epsilon}")
    duals = update_duals(state, meas, qp, epsilon, limits)
    return duals.advanced(xi=primal_from_dual(qp, duals.theta))


def _null_space_ray(qp: QpData) -> np.ndarray:
    # strictly positive w with Phi' w = 0
    n = qp.size
    R = qp.Phi[n : 2 * n] / qp.a[None, :]
    shift = np.linalg.solve(R, 1.0 / qp.a)
    upper = 1.0 + np.maximum(0.0, -shift)
    return np.concatenate([upper, upper + shift, [1.0, 1.0], np.ones(n)])


def _dual_map(qp: QpData, epsilon: float) -> typing.Callable[[np.ndarray], np.ndarray]:
    return lambda theta: np.maximum(theta + epsilon * dual_gradient(qp, theta), 0.0)


def contraction_check(
    qp: QpData, epsilon: float, trials: int = 1000, seed: int = 0
) -> bool:
    """
    Tests that the projected dual update does not expand distances.

    The first pair sits on a ray where the projection is inactive and differs
    along the top eigenvector of ``Phi A^-1 Phi'``, which is where expansion
    shows first. The remaining ``trials`` pairs are random nonnegative points.

    Args:
        qp (QpData): The program.
        epsilon (float): Step size under test.
        trials (int): Number of random pairs.
        seed (int): Seed of the pair generator.

    Returns:
        bool: ``True`` when no pair moved apart.
    """
    f = _dual_map(qp, epsilon)

    def contracts(theta: np.ndarray, other: np.ndarray) -> bool:
        before = np.linalg.norm(theta - other)
        after = np.linalg.norm(f(theta) - f(other))
        return after <= (1 + 1e-9) * before + 1e-12

    ray = _null_space_ray(qp)
    gradient = dual_gradient(qp, np.zeros_like(ray))
    theta = (2 * np.max(epsilon * np.abs(gradient) / ray) + 1) * ray
    curvature = qp.Phi @ (qp.Phi.T / qp.a[:, None])
    eigenvalues, eigenvectors = np.linalg.eigh(curvature)
    gain = max(1.0, abs(1 - epsilon * eigenvalues[-1] / 2))
    room = min(np.min(theta + epsilon * gradient), np.min(theta))
    if not contracts(theta, theta + 0.5 * room / gain * eigenvectors[:, -1]):
        logger.info("expanding pair found along the top eigenvector")
        return False

    rng = np.random.default_rng(seed)
    scale = 1.0 + np.max(np.abs(gradient)) * max(epsilon, 1.0)
    for _ in range(trials):
        theta, other = rng.uniform(0, scale, (2, ray.size)) * (
            rng.random((2, ray.size)) < 0.5
        )
        if not contracts(theta, other):
            logger.info("expanding random pair found")
            return False
    return True


@register_controller
class DualAscentController(Controller):
    """
    Projected dual ascent with closed-form incentive recovery.

    Needs the full program: utilities, feeder model and limits.
    """

    name = "dual_ascent"
    aliases = ("dual",)

    def default_epsilon(self, qp: QpData) -> float:
        return SAFETY_FACTOR * step_size_bound(qp)

    def check_epsilon(self, qp: QpData, epsilon: float) -> None:
        bound = step_size_bound(qp)
        if epsilon > bound:
            logger.warning(
                "step size %g exceeds the contraction bound %g", epsilon, bound
            )

    def step(
        self,
        state: MultiplierState,
        measurement: Measurement,
        plant: Plant,
        context: StepContext,
    ) -> MultiplierState:
        return dual_ascent_step(state, context.qp, measurement, None, context.epsilon)
