from .dual_ascent import DualAscentController, contraction_check, dual_ascent_step
from .first_order import (
    FirstOrderController,
    Sensitivities,
    estimate_sensitivities,
    first_order_step,
    linear_plant_sensitivities,
    sensitivities_from_plant,
)
from .lagrangian import explicit_gradient, lagrangian_explicit, lagrangian_implicit
from .registry import (
    Controller,
    describe_controllers,
    register_controller,
    registered_controllers,
    resolve_controller,
)
from .state import (
    SENSITIVITY_SOURCES,
    ControllerConfig,
    Measurement,
    MultiplierState,
    StepContext,
)
from .zero_order import ZeroOrderController, two_point_estimate, zero_order_step

__all__ = [
    "SENSITIVITY_SOURCES",
    "Controller",
    "ControllerConfig",
    "DualAscentController",
    "FirstOrderController",
    "Measurement",
    "MultiplierState",
    "Sensitivities",
    "StepContext",
    "ZeroOrderController",
    "contraction_check",
    "describe_controllers",
    "dual_ascent_step",
    "estimate_sensitivities",
    "explicit_gradient",
    "first_order_step",
    "lagrangian_explicit",
    "lagrangian_implicit",
    "linear_plant_sensitivities",
    "register_controller",
    "registered_controllers",
    "resolve_controller",
    "sensitivities_from_plant",
    "two_point_estimate",
    "zero_order_step",
]
