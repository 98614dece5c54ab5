import functools
import logging
import math
import typing
from dataclasses import dataclass, field

import numpy as np

from gridincentives.controllers import (
    ControllerConfig,
    Measurement,
    MultiplierState,
    StepContext,
    resolve_controller,
)
from gridincentives.exceptions import DivergenceError, ValidationError
from gridincentives.feeder import (
    Network,
    SensitivityModel,
    as_vector,
    build_sensitivities,
    feeder_power_of,
    readonly,
    voltages_of,
)
from gridincentives.market import ProsumerArrays, Tariff
from gridincentives.program import (
    OperationalLimits,
    QpData,
    assemble_qp,
    kkt_residual,
    so_cost,
    with_generation,
    with_limits,
)

logger = logging.getLogger(__name__)

FEASIBILITY_WINDOW = 50


class GridState(typing.NamedTuple):
    r: np.ndarray
    limits: OperationalLimits


@dataclass(frozen=True)
class GeneratorOff:
    bus: int
    capacity: float
    kind: typing.ClassVar[str] = "generator_off"

    def apply(self, grid: GridState) -> GridState:
        r = np.array(grid.r)
        remaining = r[self.bus - 1] - self.capacity
        if remaining < -1e-12 * max(1.0, self.capacity):
            raise ValidationError(
                f"bus {self.bus} generates {r[self.bus - 1]}, cannot switch off "
                f"{self.capacity}"
            )
        r[self.bus - 1] = max(remaining, 0.0)
        return grid._replace(r=r)


@dataclass(frozen=True)
class GeneratorOn:
    bus: int
    capacity: float
    kind: typing.ClassVar[str] = "generator_on"

    def apply(self, grid: GridState) -> GridState:
        r = np.array(grid.r)
        r[self.bus - 1] += self.capacity
        return grid._replace(r=r)


@dataclass(frozen=True)
class SetLimits:
    limits: OperationalLimits
    kind: typing.ClassVar[str] = "set_limits"

    def apply(self, grid: GridState) -> GridState:
        return grid._replace(limits=self.limits)


Event = typing.Union[GeneratorOff, GeneratorOn, SetLimits]


class ScheduledEvent(typing.NamedTuple):
    iteration: int
    event: Event


@dataclass(frozen=True)
class Scenario:
    """
    Everything a closed-loop run needs.

    ``events`` are applied before the plant is measured at their iteration,
    so an event at iteration 0 shapes the very first measurement. The
    controller state carries over every event unchanged.
    """

    network: Network
    prosumers: ProsumerArrays
    tariff: Tariff
    limits: OperationalLimits
    controller: str = "dual_ascent"
    config: ControllerConfig = field(default_factory=ControllerConfig)
    events: typing.Tuple[ScheduledEvent, ...] = ()
    clamp_demand: bool = False

    def __post_init__(self):
        n = self.network.bus_count
        if self.prosumers.size != n or self.limits.size != n:
            raise ValidationError(
                f"network has {n} buses but {self.prosumers.size} prosumers and "
                f"{self.limits.size} voltage limits were given"
            )
        self.prosumers.validate_against(self.tariff)
        object.__setattr__(self, "controller", resolve_controller(self.controller).name)
        events = tuple(ScheduledEvent(int(it), event) for it, event in self.events)
        object.__setattr__(self, "events", events)
        iterations = [scheduled.iteration for scheduled in events]
        if any(it < 0 for it in iterations) or iterations != sorted(iterations):
            raise ValidationError(
                f"event iterations must be nonnegative and non-decreasing, got {iterations}"
            )
        for scheduled in events:
            event = scheduled.event
            if isinstance(event, (GeneratorOff, GeneratorOn)):
                if not 1 <= event.bus <= n:
                    raise ValidationError(f"event references unknown bus {event.bus}")
                if not (math.isfinite(event.capacity) and event.capacity > 0):
                    raise ValidationError(
                        f"generator capacity must be positive, got {event.capacity}"
                    )
            elif event.limits.size != n:
                raise ValidationError(
                    f"limits event covers {event.limits.size} buses, expected {n}"
                )

    @functools.cached_property
    def model(self) -> SensitivityModel:
        return build_sensitivities(self.network)

    @property
    def size(self) -> int:
        return self.network.bus_count

    def initial_grid(self) -> GridState:
        return GridState(np.array(self.prosumers.r), self.limits)

    def grid_at(self, iteration: int) -> GridState:
        """Generation and limits in force at ``iteration``."""
        grid = self.initial_grid()
        for scheduled in self.events:
            if scheduled.iteration <= iteration:
                grid = scheduled.event.apply(grid)
        return grid

    def program(self, grid: typing.Optional[GridState] = None) -> QpData:
        grid = self.initial_grid() if grid is None else grid
        prosumers = self.prosumers.with_generation(grid.r)
        return assemble_qp(self.model, prosumers, self.tariff, grid.limits)


@dataclass(frozen=True, eq=False)
class TraceRecord:
    iteration: int
    xi: np.ndarray
    d: np.ndarray
    v: np.ndarray
    p0: float
    total_incentive: float
    min_voltage: float
    so_cost_value: float
    constraint_violation: float

    def __post_init__(self):
        for name in ("xi", "d", "v"):
            object.__setattr__(self, name, readonly(getattr(self, name)))

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, TraceRecord):
            return NotImplemented
        return all(
            np.array_equal(getattr(self, name), getattr(other, name))
            for name in self.__dataclass_fields__
        )


@dataclass(frozen=True)
class Summary:
    iterations_to_feasible: typing.Optional[int]
    final_cost: float
    final_min_voltage: float
    final_p0: float
    final_total_incentive: float
    iterations: int
    diverged: bool = False
    final_kkt_residual: typing.Optional[float] = None


@dataclass(frozen=True, eq=False)
class RunResult:
    trace: typing.List[TraceRecord]
    summary: Summary
    diverged: bool
    seed: int
    epsilon: float
    final_state: MultiplierState
    program: QpData


def plant_respond(
    scenario: Scenario,
    xi: typing.Any,
    grid: typing.Optional[GridState] = None,
    iteration: int = 0,
) -> Measurement:
    """
    Response of the linear plant to the incentive ``xi``.

    Args:
        scenario (Scenario): Supplies the feeder, prosumers and tariff.
        xi: Incentive applied at every bus.
        grid (GridState): Generation in force. When omitted, the generation
            the scheduled events leave in force at ``iteration``.
        iteration (int): Iteration whose events apply when ``grid`` is omitted.

    Returns:
        Measurement: Demands, voltages and feeder power.
    """
    prosumers = scenario.prosumers
    xi = as_vector("xi", xi, scenario.size)
    r = (scenario.grid_at(iteration) if grid is None else grid).r
    d = prosumers.demand_response(scenario.tariff, xi, clamp=scenario.clamp_demand)
    return Measurement(
        v=voltages_of(scenario.model, r - d, prosumers.q),
        p0=feeder_power_of(d, r),
        d=d,
    )


def measured_violation(qp: QpData, xi: np.ndarray, meas: Measurement) -> float:
    """Largest positive constraint violation seen in a measurement."""
    limits = qp.limits
    violations = np.concatenate(
        [
            meas.v - limits.v_max,
            limits.v_min - meas.v,
            [meas.p0 - limits.p0_max, limits.p0_min - meas.p0],
            qp.pi - qp.beta - xi,
        ]
    )
    return float(max(np.max(violations), 0.0))


def _record(iteration: int, xi: np.ndarray, meas: Measurement, qp: QpData) -> TraceRecord:
    return TraceRecord(
        iteration=iteration,
        xi=xi,
        d=meas.d,
        v=meas.v,
        p0=meas.p0,
        total_incentive=float(xi @ (meas.d - qp.d_hat)),
        min_voltage=float(np.min(meas.v)),
        so_cost_value=so_cost(qp, xi),
        constraint_violation=measured_violation(qp, xi, meas),
    )


def iterations_to_feasible(
    trace: typing.Sequence[TraceRecord],
    tolerance: float = 1e-6,
    window: int = FEASIBILITY_WINDOW,
) -> typing.Optional[int]:
    """
    First iteration from which the next ``window`` records stay feasible.

    Near the end of the trace the remaining records have to be feasible.
    """
    streak = 0
    first = None
    for index in range(len(trace) - 1, -1, -1):
        streak = streak + 1 if trace[index].constraint_violation <= tolerance else 0
        if streak >= min(window, len(trace) - index):
            first = trace[index].iteration
    return first


def summarize(
    trace: typing.Sequence[TraceRecord],
    tolerance: float = 1e-6,
    window: int = FEASIBILITY_WINDOW,
    diverged: bool = False,
    qp: typing.Optional[QpData] = None,
    theta: typing.Optional[typing.Any] = None,
    xi: typing.Optional[typing.Any] = None,
) -> Summary:
    """
    Condenses a trace into the figures reported for a run.

    ``final_kkt_residual`` is filled in when both the program and the final
    multipliers, in the program's form, are given. The residual is taken at
    ``xi``, or at the last recorded incentive when ``xi`` is omitted.
    """
    if not trace:
        raise ValidationError("cannot summarize an empty trace")
    last = trace[-1]
    residual = None
    if qp is not None and theta is not None:
        residual = kkt_residual(qp, last.xi if xi is None else xi, theta)
    return Summary(
        iterations_to_feasible=iterations_to_feasible(trace, tolerance, window),
        final_cost=last.so_cost_value,
        final_min_voltage=last.min_voltage,
        final_p0=last.p0,
        final_total_incentive=last.total_incentive,
        iterations=len(trace),
        diverged=diverged,
        final_kkt_residual=residual,
    )


def run(
    scenario: Scenario,
    *,
    progress: typing.Optional[typing.Callable[[TraceRecord], None]] = None,
    raise_on_divergence: bool = True,
) -> RunResult:
    """
    Closes the loop between the scenario's controller and the linear plant.

    Each iteration applies the events due, measures the plant at the current
    incentive, records the measurement and lets the controller take one step.
    The run stops once the incentive change and the constraint violation have
    both stayed within ``config.tolerance`` for ``config.patience`` iterations,
    or after ``config.max_iterations``.

    Args:
        scenario (Scenario): What to simulate.
        progress: Called with every new trace record.
        raise_on_divergence (bool): Raise when the incentive leaves the
            divergence guard; otherwise return a result flagged as diverged.

    Returns:
        RunResult: Trace, summary and the final controller state.

    Raises:
        DivergenceError: If the incentive exceeds ``config.divergence_guard``
            in magnitude. The trace so far is attached.
    """
    config = scenario.config
    controller = resolve_controller(scenario.controller)
    grid = scenario.initial_grid()
    qp = scenario.program(grid)
    epsilon = config.epsilon if config.epsilon is not None else controller.default_epsilon(qp)
    controller.check_epsilon(qp, epsilon)
    context = StepContext(
        qp=qp,
        model=scenario.model,
        config=config,
        epsilon=epsilon,
        rng=np.random.default_rng(config.rng_seed),
    )
    logger.info(
        "running %s on %d buses, epsilon=%g, seed=%d",
        controller.name,
        scenario.size,
        epsilon,
        config.rng_seed,
    )

    state = MultiplierState.zeros(scenario.size)
    trace: typing.List[TraceRecord] = []
    pending = list(scenario.events)
    calm = 0
    diverged = False
    for iteration in range(config.max_iterations):
        while pending and pending[0].iteration <= iteration:
            event = pending.pop(0).event
            grid = event.apply(grid)
            qp = with_limits(with_generation(qp, scenario.model, grid.r), grid.limits)
            context.qp = qp
            logger.info("iteration %d: applied %s", iteration, event)

        plant = functools.partial(plant_respond, scenario, grid=grid)
        measurement = plant(state.xi)
        record = _record(iteration, state.xi, measurement, qp)
        trace.append(record)
        if progress is not None:
            progress(record)

        following = controller.step(state, measurement, plant, context)
        size = float(np.max(np.abs(following.xi)))
        if not size <= config.divergence_guard:
            diverged = True
            logger.warning(
                "incentive magnitude %g left the guard %g at iteration %d",
                size,
                config.divergence_guard,
                iteration,
            )
            break
        change = float(np.max(np.abs(following.xi - state.xi)))
        logger.debug(
            "iteration %d: violation=%.3e change=%.3e",
            iteration,
            record.constraint_violation,
            change,
        )
        state = following
        calm = calm + 1 if max(change, record.constraint_violation) <= config.tolerance else 0
        if calm >= config.patience:
            break

    if diverged and raise_on_divergence:
        raise DivergenceError(
            f"{controller.name} diverged after {len(trace)} iterations", trace
        )
    theta = state.explicit_theta(qp, controller.uses_implicit_demand_multiplier)
    summary = summarize(
        trace,
        config.tolerance,
        diverged=diverged,
        qp=None if diverged else qp,
        theta=theta,
        xi=state.xi,
    )
    logger.info(
        "%s stopped after %d iterations, feasible from %s",
        controller.name,
        len(trace),
        summary.iterations_to_feasible,
    )
    return RunResult(
        trace=trace,
        summary=summary,
        diverged=diverged,
        seed=config.rng_seed,
        epsilon=epsilon,
        final_state=state,
        program=qp,
    )
