import dataclasses
import functools
import importlib.resources
import logging
import sys
import typing
from dataclasses import dataclass
from pathlib import Path

import click
import numpy as np
from rich.console import Console
from rich.logging import RichHandler
from rich.markup import escape
from rich.panel import Panel
from rich.table import Table

from gridincentives.controllers import (
    SENSITIVITY_SOURCES,
    describe_controllers,
    registered_controllers,
    resolve_controller,
)
from gridincentives.exceptions import (
    ConvergenceError,
    DivergenceError,
    InfeasibleError,
    ValidationError,
)
from gridincentives.fileformat import (
    read_network,
    read_prosumers,
    read_scenario,
    read_tariff,
    write_comparison,
    write_solution,
    write_summary,
    write_trace,
)
from gridincentives.program import active_constraints, oracle_solve, so_cost
from gridincentives.simulation import RunResult, Scenario, plant_respond, run

console = Console(soft_wrap=True)
err_console = Console(stderr=True, soft_wrap=True)
logger = logging.getLogger(__name__)

EXIT_INPUT = 2
EXIT_INFEASIBLE = 3
EXIT_DIVERGED = 4

ALGORITHMS = ("dual", "first", "zero", "dual_ascent", "first_order", "zero_order")


def bundled(name: str) -> Path:
    return Path(str(importlib.resources.files("gridincentives") / "data" / name))


@dataclass(frozen=True)
class RunConfig:
    network: Path
    prosumers: Path
    scenario: Path
    out: Path
    algorithm: typing.Optional[str] = None
    epsilon: typing.Optional[float] = None
    sigma: typing.Optional[float] = None
    seed: typing.Optional[int] = None
    tolerance: typing.Optional[float] = None
    max_iterations: typing.Optional[int] = None
    sensitivities: typing.Optional[str] = None

    def load(self) -> Scenario:
        """Parses the three input files and applies the command line overrides."""
        network = read_network(self.network)
        tariff = read_tariff(self.scenario)
        prosumers = read_prosumers(self.prosumers, tariff)
        scenario = read_scenario(self.scenario, network, prosumers)
        overrides = {
            field_name: value
            for field_name, value in (
                ("epsilon", self.epsilon),
                ("sigma", self.sigma),
                ("rng_seed", self.seed),
                ("tolerance", self.tolerance),
                ("max_iterations", self.max_iterations),
                ("sensitivities", self.sensitivities),
            )
            if value is not None
        }
        changes: typing.Dict[str, typing.Any] = {
            "config": dataclasses.replace(scenario.config, **overrides)
        }
        if self.algorithm is not None:
            changes["controller"] = self.algorithm
        return dataclasses.replace(scenario, **changes)


def exit_codes(command: typing.Callable) -> typing.Callable:
    @functools.wraps(command)
    def wrapper(*args, **kwargs):
        try:
            return command(*args, **kwargs)
        except InfeasibleError as exc:
            err_console.print(f"[bold red]Infeasible:[/bold red] {escape(str(exc))}")
            sys.exit(EXIT_INFEASIBLE)
        except DivergenceError as exc:
            err_console.print(f"[bold red]Diverged:[/bold red] {escape(str(exc))}")
            sys.exit(EXIT_DIVERGED)
        except (ValidationError, ConvergenceError) as exc:
            err_console.print(f"[bold red]Error:[/bold red] {escape(str(exc))}")
            sys.exit(EXIT_INPUT)

    return wrapper


def input_options(command: typing.Callable) -> typing.Callable:
    options = [
        click.option(
            "--network",
            type=click.Path(dir_okay=False, path_type=Path),
            default=lambda: bundled("ieee33_network.csv"),
            show_default="bundled 33-bus feeder",
            help="Feeder lines and base values.",
        ),
        click.option(
            "--prosumers",
            type=click.Path(dir_okay=False, path_type=Path),
            default=lambda: bundled("ieee33_prosumers.csv"),
            show_default="bundled 33-bus prosumers",
            help="One prosumer per bus.",
        ),
        click.option(
            "--scenario",
            type=click.Path(dir_okay=False, path_type=Path),
            default=lambda: bundled("ieee33_scenario.csv"),
            show_default="bundled generator trip",
            help="Tariff, limits, controller settings and events.",
        ),
        click.option(
            "--out",
            type=click.Path(file_okay=False, path_type=Path),
            envvar="GRIDINCENTIVES_OUT",
            default=Path("out"),
            show_default=True,
            help="Output directory, also read from GRIDINCENTIVES_OUT.",
        ),
    ]
    for option in reversed(options):
        command = option(command)
    return command


def tuning_options(command: typing.Callable) -> typing.Callable:
    options = [
        click.option("--sigma", type=click.FloatRange(min=0, min_open=True), help="Zero-order perturbation size."),
        click.option("--seed", type=int, help="Seed of the perturbation generator."),
        click.option("--tol", type=click.FloatRange(min=0, min_open=True), help="Stopping tolerance."),
        click.option("--max-iters", type=click.IntRange(min=1), help="Iteration budget."),
        click.option(
            "--sensitivities",
            type=click.Choice(SENSITIVITY_SOURCES),
            help="First-order sensitivities: exact, or estimated from plant samples.",
        ),
    ]
    for option in reversed(options):
        command = option(command)
    return command


@click.group()
@click.option("-v", "--verbose", count=True, help="-v for progress, -vv for every iteration.")
def main(verbose: int):
    """Optimal prosumer incentives for distribution grid services."""
    level = (logging.WARNING, logging.INFO, logging.DEBUG)[min(verbose, 2)]
    logging.basicConfig(
        level=level,
        format="%(message)s",
        datefmt="[%X]",
        handlers=[RichHandler(console=err_console)],
        force=True,
    )


@main.command()
@input_options
@exit_codes
def solve(network, prosumers, scenario, out):
    """Solve the incentive program directly and report the optimum."""
    config = RunConfig(network, prosumers, scenario, out)
    loaded = config.load()
    grid = loaded.grid_at(0)
    qp = loaded.program(grid)
    with console.status("[bold green]Solving the incentive program...", spinner="dots"):
        solution = oracle_solve(qp)
    measurement = plant_respond(loaded, solution.xi, grid)
    path = write_solution(out / "solution.csv", qp, solution, measurement, loaded.network.base_mva)

    table = Table(title="Optimal incentives")
    table.add_column("Quantity", style="cyan")
    table.add_column("Value", style="green")
    table.add_row("SO cost", f"{so_cost(qp, solution.xi):.6g}")
    table.add_row("Minimum voltage", f"{np.min(measurement.v):.6f} p.u.")
    table.add_row("Feeder power", f"{loaded.network.to_mw(measurement.p0):.6f} MW")
    table.add_row("Total incentive", f"{float(solution.xi @ (measurement.d - qp.d_hat)):.6g}")
    table.add_row("Active constraints", escape(", ".join(active_constraints(qp, solution.xi, solution.theta)) or "none"))
    table.add_row("Written to", str(path))
    console.print(Panel(table, expand=False))


def _short_name(name: str) -> str:
    return resolve_controller(name).aliases[0]


def _write_run(out: Path, result: RunResult, name: str) -> None:
    short = _short_name(name)
    write_trace(out / f"trace_{short}.csv", result, name)
    write_summary(out / f"summary_{short}.csv", result.summary, name, result.seed)


@main.command(name="run")
@input_options
@click.option("--algo", type=click.Choice(ALGORITHMS), help="Controller, the scenario's by default.")
@click.option("--epsilon", type=click.FloatRange(min=0, min_open=True), help="Step size.")
@tuning_options
@exit_codes
def run_command(
    network, prosumers, scenario, out, algo, epsilon, sigma, seed, tol, max_iters, sensitivities
):
    """Run one controller in closed loop with the linear plant."""
    config = RunConfig(
        network, prosumers, scenario, out, algo, epsilon, sigma, seed, tol, max_iters, sensitivities
    )
    loaded = config.load()
    console.print(f"Running [bold]{loaded.controller}[/bold] with seed {loaded.config.rng_seed}")
    with console.status("[bold green]Iterating...", spinner="dots"):
        result = run(loaded, raise_on_divergence=False)
    _write_run(out, result, loaded.controller)

    summary = result.summary
    if result.diverged:
        err_console.print(
            f"[bold red]Diverged:[/bold red] {loaded.controller} left the divergence "
            f"guard after {summary.iterations} iterations"
        )
        sys.exit(EXIT_DIVERGED)
    console.print(f"Iterations to feasible: {summary.iterations_to_feasible}")
    console.print(f"Final cost: {summary.final_cost:.6g}")
    console.print(f"Effective seed: {result.seed}")


def _parse_epsilons(values: typing.Sequence[str]) -> typing.Dict[str, float]:
    epsilons = {}
    for value in values:
        name, sep, number = value.partition("=")
        if not sep:
            raise click.BadParameter(f"expected ALGO=VALUE, got {value!r}", param_hint="--epsilon")
        try:
            epsilons[resolve_controller(name).name] = float(number)
        except (ValidationError, ValueError) as exc:
            raise click.BadParameter(str(exc), param_hint="--epsilon")
    return epsilons


@main.command()
@input_options
@click.option(
    "--epsilon",
    multiple=True,
    metavar="ALGO=VALUE",
    help="Step size of one controller, e.g. dual=0.5. Repeatable.",
)
@tuning_options
@exit_codes
def compare(network, prosumers, scenario, out, epsilon, sigma, seed, tol, max_iters, sensitivities):
    """Run every controller on the same scenario and seed."""
    epsilons = _parse_epsilons(epsilon)
    base = RunConfig(
        network, prosumers, scenario, out, None, None, sigma, seed, tol, max_iters, sensitivities
    )
    loaded = base.load()

    results: typing.Dict[str, RunResult] = {}
    table = Table(title=f"Comparison, seed {loaded.config.rng_seed}")
    for column in ("Controller", "Step size", "Iterations", "Feasible from", "Final cost", "Min voltage", "Feeder power (MW)"):
        table.add_column(column)
    for controller in registered_controllers():
        name = controller.name
        config = dataclasses.replace(loaded.config, epsilon=epsilons.get(name))
        scenario_for = dataclasses.replace(loaded, controller=name, config=config)
        with console.status(f"[bold green]Running {name}...", spinner="dots"):
            result = run(scenario_for, raise_on_divergence=False)
        _write_run(out, result, name)
        results[_short_name(name)] = result
        summary = result.summary
        table.add_row(
            name,
            f"{result.epsilon:.4g}",
            str(summary.iterations),
            "diverged" if result.diverged else str(summary.iterations_to_feasible),
            f"{summary.final_cost:.6g}",
            f"{summary.final_min_voltage:.5f}",
            f"{loaded.network.to_mw(summary.final_p0):.5f}",
        )
    write_comparison(out / "compare.csv", results)
    console.print(Panel(table, expand=False))

    diverged = [name for name, result in results.items() if result.diverged]
    if diverged:
        err_console.print(f"[bold red]Diverged:[/bold red] {', '.join(diverged)}")
        sys.exit(EXIT_DIVERGED)


@main.command()
def algorithms():
    """List the available controllers."""
    table = Table(title="Controllers")
    table.add_column("Name", style="cyan")
    table.add_column("Aliases")
    table.add_column("Description", style="green")
    descriptions = describe_controllers()
    for controller in registered_controllers():
        table.add_row(
            controller.name, ", ".join(controller.aliases), descriptions[controller.name]
        )
    console.print(table)


if __name__ == "__main__":
    main()
