import dataclasses
import logging
import math
import typing
import warnings
from dataclasses import dataclass

import numpy as np

from gridincentives.exceptions import (
    DomainError,
    NegativeDemandError,
    NegativeDemandWarning,
    ValidationError,
)
from gridincentives.feeder import as_vector, readonly

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class Tariff:
    """Net energy metering tariff: retail rate ``pi`` and fixed surcharge ``pi0``."""

    pi: float
    pi0: float = 0.0

    def __post_init__(self):
        if not (math.isfinite(self.pi) and self.pi > 0):
            raise ValidationError(f"retail rate must be positive, got {self.pi}")
        if not math.isfinite(self.pi0):
            raise ValidationError(f"surcharge must be finite, got {self.pi0}")


@dataclass(frozen=True)
class Prosumer:
    alpha: float
    beta: float
    r: float = 0.0
    q: float = 0.0
    d_min: float = 0.0
    d_max: float = math.inf

    def __post_init__(self):
        for name in ("alpha", "beta", "r", "q"):
            if not math.isfinite(getattr(self, name)):
                raise ValidationError(f"{name} must be finite, got {getattr(self, name)}")
        if self.alpha <= 0:
            raise ValidationError(f"alpha must be positive, got {self.alpha}")
        if self.r < 0:
            raise ValidationError(f"generation must be nonnegative, got {self.r}")
        if self.d_min > self.d_max:
            raise ValidationError(
                f"d_min ({self.d_min}) must not exceed d_max ({self.d_max})"
            )

    def validate_against(self, tariff: Tariff) -> None:
        if self.beta < tariff.pi:
            raise ValidationError(
                f"beta ({self.beta}) is below the retail rate ({tariff.pi}); "
                "nominal demand would be negative"
            )


def utility(pros: Prosumer, d: float) -> float:
    """
    Quadratic utility of consuming ``d``.

    Examples:
        >>> utility(Prosumer(alpha=2.0, beta=3.0), 1.0)
        2.0
    """
    if d < 0:
        raise DomainError(f"demand must be nonnegative, got {d}")
    return -(pros.alpha / 2) * d**2 + pros.beta * d


def nem_charge(tariff: Tariff, p: float) -> float:
    """
    Bill for a net injection ``p``; negative values are a remuneration.

    Examples:
        >>> nem_charge(Tariff(pi=1.0), -1.0)
        1.0
    """
    return -tariff.pi * p + tariff.pi0


def nominal_demand(pros: Prosumer, tariff: Tariff) -> float:
    """
    Demand that maximizes the surplus when no incentive is offered.

    Examples:
        >>> nominal_demand(Prosumer(alpha=0.5, beta=2.0), Tariff(pi=1.0))
        2.0
    """
    return (pros.beta - tariff.pi) / pros.alpha


def optimal_demand(
    pros: Prosumer,
    tariff: Tariff,
    xi: float,
    clamp: bool = False,
    strict: bool = False,
) -> float:
    """
    Rational response of a prosumer to the incentive ``xi``.

    The shaped surplus is maximized at ``nominal_demand + xi / alpha``. The
    demand box ``[d_min, d_max]`` is ignored unless ``clamp`` is set.

    Args:
        pros (Prosumer): The responding prosumer.
        tariff (Tariff): Tariff in force.
        xi (float): Incentive offered to the prosumer.
        clamp (bool): Project the response onto ``[d_min, d_max]``.
        strict (bool): Raise instead of warning when ``xi < pi - beta``.

    Returns:
        float: The demand the prosumer settles on.

    Raises:
        NegativeDemandError: If ``strict`` and the response would be negative.

    Examples:
        >>> pros, tariff = Prosumer(alpha=2.0, beta=3.0), Tariff(pi=1.0)
        >>> optimal_demand(pros, tariff, 0.5)
        1.25
        >>> optimal_demand(pros, tariff, -2.0)
        0.0
    """
    if xi < tariff.pi - pros.beta:
        message = (
            f"incentive {xi} is below pi - beta = {tariff.pi - pros.beta}; "
            "the response is a negative demand"
        )
        if strict:
            raise NegativeDemandError(message)
        warnings.warn(message, NegativeDemandWarning, stacklevel=2)
    demand = nominal_demand(pros, tariff) + xi / pros.alpha
    if clamp:
        demand = min(max(demand, pros.d_min), pros.d_max)
    return demand


def incentive_payment(pros: Prosumer, tariff: Tariff, xi: float, d: float) -> float:
    """
    Payout for moving demand away from the nominal one.

    Negative when the prosumer moves against the incentive.

    Examples:
        >>> incentive_payment(Prosumer(alpha=2.0, beta=3.0), Tariff(pi=1.0), 0.5, 1.25)
        0.125
    """
    return xi * (d - nominal_demand(pros, tariff))


def surplus(pros: Prosumer, tariff: Tariff, xi: float, d: float) -> float:
    """
    Net benefit of the prosumer: utility minus the bill plus the incentive.

    Examples:
        >>> surplus(Prosumer(alpha=2.0, beta=3.0), Tariff(pi=1.0), 0.0, 1.0)
        1.0
    """
    return (
        utility(pros, d)
        - nem_charge(tariff, pros.r - d)
        + incentive_payment(pros, tariff, xi, d)
    )


@dataclass(frozen=True, eq=False)
class ProsumerArrays:
    """Column view of the prosumers at buses 1..N, used by the program and the plant."""

    alpha: np.ndarray
    beta: np.ndarray
    r: np.ndarray
    q: np.ndarray
    d_min: np.ndarray
    d_max: np.ndarray

    def __post_init__(self):
        n = np.asarray(self.alpha).size
        for field in dataclasses.fields(self):
            value = as_vector(field.name, getattr(self, field.name), n)
            object.__setattr__(self, field.name, readonly(value))
        if np.any(self.alpha <= 0):
            raise ValidationError(
                f"alpha must be positive at buses {self._buses(self.alpha <= 0)}"
            )
        if np.any(self.r < 0):
            raise ValidationError(
                f"generation must be nonnegative at buses {self._buses(self.r < 0)}"
            )

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, ProsumerArrays):
            return NotImplemented
        return all(
            np.array_equal(getattr(self, f.name), getattr(other, f.name))
            for f in dataclasses.fields(self)
        )

    @staticmethod
    def _buses(mask: np.ndarray) -> typing.List[int]:
        return [int(i) + 1 for i in np.flatnonzero(mask)]

    @classmethod
    def from_prosumers(cls, prosumers: typing.Sequence[Prosumer]) -> "ProsumerArrays":
        if not prosumers:
            raise ValidationError("at least one prosumer is required")
        return cls(
            **{
                f.name: [getattr(p, f.name) for p in prosumers]
                for f in dataclasses.fields(cls)
            }
        )

    def to_prosumers(self) -> typing.List[Prosumer]:
        return [
            Prosumer(*(float(getattr(self, f.name)[i]) for f in dataclasses.fields(self)))
            for i in range(self.size)
        ]

    @property
    def size(self) -> int:
        return self.alpha.shape[0]

    def validate_against(self, tariff: Tariff) -> None:
        low = self.beta < tariff.pi
        if np.any(low):
            raise ValidationError(
                f"beta is below the retail rate {tariff.pi} at buses "
                f"{self._buses(low)}; nominal demand would be negative"
            )

    def with_generation(self, r: typing.Any) -> "ProsumerArrays":
        return dataclasses.replace(self, r=as_vector("r", r, self.size))

    def nominal_demands(self, tariff: Tariff) -> np.ndarray:
        return (self.beta - tariff.pi) / self.alpha

    def demand_response(
        self, tariff: Tariff, xi: typing.Any, clamp: bool = False
    ) -> np.ndarray:
        """
        Vector form of :func:`optimal_demand` without the sign guard.

        The plant reports whatever the prosumers do, so a negative response is
        returned as is and left for the demand constraints to police.
        """
        xi = as_vector("xi", xi, self.size)
        demand = self.nominal_demands(tariff) + xi / self.alpha
        if clamp:
            demand = np.clip(demand, self.d_min, self.d_max)
        return demand
