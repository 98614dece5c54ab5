import typing
from abc import ABC, abstractmethod
from typing import Callable, Dict, Tuple, Type

from docstring_parser import parse

from gridincentives.controllers.state import Measurement, MultiplierState, StepContext
from gridincentives.exceptions import ValidationError

if typing.TYPE_CHECKING:
    from gridincentives.program import QpData

Plant = Callable[[typing.Any], Measurement]


class Controller(ABC):
    name: str
    aliases: Tuple[str, ...] = ()
    uses_implicit_demand_multiplier: bool = False

    @abstractmethod
    def default_epsilon(self, qp: "QpData") -> float:
        ...

    def check_epsilon(self, qp: "QpData", epsilon: float) -> None:
        ...

    @abstractmethod
    def step(
        self,
        state: MultiplierState,
        measurement: Measurement,
        plant: Plant,
        context: StepContext,
    ) -> MultiplierState:
        ...


controller_registry: Dict[str, Controller] = {}


def register_controller(controller_class: Type[Controller]):
    controller = controller_class()
    for key in (controller.name, *controller.aliases):
        controller_registry[key] = controller
    return controller_class


def resolve_controller(name: str) -> Controller:
    """
    Looks up a registered controller by its name or one of its aliases.

    Args:
        name (str): ``dual_ascent``, ``first_order``, ``zero_order`` or the
            short forms ``dual``, ``first``, ``zero``.

    Returns:
        Controller: The shared controller instance.

    Raises:
        ValidationError: If no controller is registered under ``name``.

    Examples:
        >>> resolve_controller("dual").name
        'dual_ascent'
    """
    try:
        return controller_registry[name]
    except KeyError:
        known = ", ".join(sorted(controller_registry))
        raise ValidationError(f"unknown controller {name!r}, expected one of {known}")


def registered_controllers() -> typing.List[Controller]:
    unique = {id(c): c for c in controller_registry.values()}
    return list(unique.values())


def describe_controllers() -> Dict[str, str]:
    """
    One-line descriptions of the registered controllers, keyed by name.

    Examples:
        >>> sorted(describe_controllers())
        ['dual_ascent', 'first_order', 'zero_order']
    """
    return {
        controller.name: parse(type(controller).__doc__ or "").short_description or ""
        for controller in registered_controllers()
    }
