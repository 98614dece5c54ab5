import dataclasses
import math
import typing
from dataclasses import dataclass

import numpy as np

from gridincentives.exceptions import MeasurementError, ValidationError
from gridincentives.feeder import SensitivityModel, as_vector, readonly

if typing.TYPE_CHECKING:
    from gridincentives.controllers.first_order import Sensitivities
    from gridincentives.program import QpData

PERTURBATION_LAWS = ("uniform", "coordinate")
DUAL_MEASUREMENTS = ("unperturbed", "average")
SENSITIVITY_SOURCES = ("exact", "estimated")


@dataclass(frozen=True, eq=False)
class MultiplierState:
    """
    Incentive and multipliers carried from one iteration to the next.

    ``theta`` stacks the multipliers as lambda_up, lambda_lo, mu_up, mu_lo, nu,
    the row order of the program's constraints.
    """

    xi: np.ndarray
    lambda_up: np.ndarray
    lambda_lo: np.ndarray
    mu_up: float
    mu_lo: float
    nu: np.ndarray
    iteration: int = 0

    def __post_init__(self):
        n = np.atleast_1d(np.asarray(self.xi)).size
        for name in ("xi", "lambda_up", "lambda_lo", "nu"):
            object.__setattr__(self, name, readonly(as_vector(name, getattr(self, name), n)))
        object.__setattr__(self, "mu_up", float(self.mu_up))
        object.__setattr__(self, "mu_lo", float(self.mu_lo))
        if np.any(self.theta < 0):
            raise ValidationError("multipliers must be nonnegative")

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, MultiplierState):
            return NotImplemented
        return (
            self.iteration == other.iteration
            and np.array_equal(self.xi, other.xi)
            and np.array_equal(self.theta, other.theta)
        )

    @property
    def size(self) -> int:
        return self.xi.shape[0]

    @property
    def theta(self) -> np.ndarray:
        return np.concatenate(
            [self.lambda_up, self.lambda_lo, [self.mu_up, self.mu_lo], self.nu]
        )

    @classmethod
    def zeros(cls, n: int, xi: typing.Optional[typing.Any] = None) -> "MultiplierState":
        zero = np.zeros(n)
        return cls(
            xi=zero if xi is None else xi,
            lambda_up=zero,
            lambda_lo=zero,
            mu_up=0.0,
            mu_lo=0.0,
            nu=zero,
        )

    @classmethod
    def from_theta(
        cls, theta: typing.Any, xi: typing.Any, iteration: int = 0
    ) -> "MultiplierState":
        """
        Splits a stacked multiplier vector.

        Examples:
            >>> state = MultiplierState.from_theta([1, 2, 3, 4, 5], xi=[0.5])
            >>> state.lambda_lo.tolist(), state.mu_lo, state.nu.tolist()
            ([2.0], 4.0, [5.0])
        """
        theta = np.asarray(theta, dtype=float)
        n = (theta.size - 2) // 3
        if theta.size != 3 * n + 2:
            raise ValidationError(f"theta of length {theta.size} is not 3N+2")
        return cls(
            xi=xi,
            lambda_up=theta[:n],
            lambda_lo=theta[n : 2 * n],
            mu_up=theta[2 * n],
            mu_lo=theta[2 * n + 1],
            nu=theta[2 * n + 2 :],
            iteration=iteration,
        )

    def explicit_theta(self, qp: "QpData", implicit: bool) -> np.ndarray:
        """
        Multipliers of the program's constraint rows.

        Controllers that price ``-d`` rather than ``pi - beta - xi`` carry a
        demand multiplier that maps to the program's one through ``A nu``.
        """
        theta = self.theta
        if implicit:
            theta[2 * self.size + 2 :] = qp.a * self.nu
        return theta

    def advanced(self, **changes: typing.Any) -> "MultiplierState":
        return dataclasses.replace(self, iteration=self.iteration + 1, **changes)


@dataclass(frozen=True, eq=False)
class Measurement:
    """Voltages, feeder power and demands read back from the plant."""

    v: np.ndarray
    p0: float
    d: np.ndarray

    def __post_init__(self):
        v = np.atleast_1d(np.asarray(self.v, dtype=float))
        object.__setattr__(self, "v", readonly(v))
        object.__setattr__(self, "d", readonly(as_vector("d", self.d, v.size)))
        object.__setattr__(self, "p0", float(self.p0))
        if not (
            np.all(np.isfinite(self.v))
            and np.all(np.isfinite(self.d))
            and math.isfinite(self.p0)
        ):
            raise MeasurementError(f"non-finite measurement: {self!r}")

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, Measurement):
            return NotImplemented
        return (
            self.p0 == other.p0
            and np.array_equal(self.v, other.v)
            and np.array_equal(self.d, other.d)
        )

    @classmethod
    def mean(cls, first: "Measurement", second: "Measurement") -> "Measurement":
        return cls(
            v=(first.v + second.v) / 2,
            p0=(first.p0 + second.p0) / 2,
            d=(first.d + second.d) / 2,
        )


@dataclass(frozen=True)
class ControllerConfig:
    """
    Tuning of a controller run.

    ``epsilon=None`` selects the controller's own default step size. Step
    sizes and ``sigma`` are in the per-unit scale of the program.

    ``sensitivities="estimated"`` makes the first-order controller fit its
    sensitivities to N + 1 plant samples, ``sigma`` apart, before its first
    step. ``max_iterations`` bounds a closed-loop run; large feeders with a
    step near the contraction bound can need several times the default.
    """

    epsilon: typing.Optional[float] = None
    sigma: float = 0.02
    rng_seed: int = 0
    perturbation_law: str = "uniform"
    dual_measurement: str = "unperturbed"
    sensitivities: str = "exact"
    max_iterations: int = 20_000
    tolerance: float = 1e-6
    patience: int = 50
    divergence_guard: float = 1e6

    def __post_init__(self):
        if self.epsilon is not None and not (
            math.isfinite(self.epsilon) and self.epsilon > 0
        ):
            raise ValidationError(f"epsilon must be positive, got {self.epsilon}")
        if not (math.isfinite(self.sigma) and self.sigma > 0):
            raise ValidationError(f"sigma must be positive, got {self.sigma}")
        if self.perturbation_law not in PERTURBATION_LAWS:
            raise ValidationError(
                f"unknown perturbation law {self.perturbation_law!r}, "
                f"expected one of {PERTURBATION_LAWS}"
            )
        if self.dual_measurement not in DUAL_MEASUREMENTS:
            raise ValidationError(
                f"unknown dual measurement {self.dual_measurement!r}, "
                f"expected one of {DUAL_MEASUREMENTS}"
            )
        if self.sensitivities not in SENSITIVITY_SOURCES:
            raise ValidationError(
                f"unknown sensitivity source {self.sensitivities!r}, "
                f"expected one of {SENSITIVITY_SOURCES}"
            )
        if self.max_iterations < 1 or self.patience < 1:
            raise ValidationError("max_iterations and patience must be positive")
        if not self.tolerance > 0 or not self.divergence_guard > 0:
            raise ValidationError("tolerance and divergence_guard must be positive")


@dataclass
class StepContext:
    """What a controller may consult besides the state and the plant."""

    qp: "QpData"
    model: SensitivityModel
    config: ControllerConfig
    epsilon: float
    rng: np.random.Generator
    sensitivities: typing.Optional["Sensitivities"] = None
