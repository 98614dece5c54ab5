"""
Reading and writing the line-oriented text files used by the command line.

Every file starts with a tag line naming its kind and format version::

    #! gridincentives network 1

followed by optional ``#@ key = value`` metadata lines, ``#`` comments, one
comma-separated header row and the records. Blank lines are ignored. Floats
are written with ``repr`` so that reading a file back reproduces the values
exactly. Past the metadata the files are plain CSV, readable with
``pandas.read_csv(path, comment="#")``.
"""
import dataclasses
import io
import logging
import os
import tempfile
import typing
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import pandas as pd

from gridincentives.controllers import ControllerConfig, Measurement
from gridincentives.exceptions import ParseError, ValidationError
from gridincentives.feeder import Line, Network, ohm_to_pu
from gridincentives.market import ProsumerArrays, Tariff
from gridincentives.program import (
    OperationalLimits,
    OracleSolution,
    QpData,
    active_constraints,
    kkt_residual,
    so_cost,
)
from gridincentives.simulation import (
    GeneratorOff,
    GeneratorOn,
    RunResult,
    Scenario,
    ScheduledEvent,
    SetLimits,
    Summary,
    TraceRecord,
)

logger = logging.getLogger(__name__)

FORMAT_VERSION = 1
TAG = "#! gridincentives"

PathLike = typing.Union[str, os.PathLike]


@dataclass
class Table:
    """Metadata and records of one file; ``row_lines`` maps records to file lines."""

    path: str
    kind: str
    metadata: typing.Dict[str, str] = field(default_factory=dict)
    metadata_lines: typing.Dict[str, int] = field(default_factory=dict)
    header_line: int = 0
    frame: pd.DataFrame = field(default_factory=pd.DataFrame)
    row_lines: typing.List[int] = field(default_factory=list)

    @property
    def header(self) -> typing.List[str]:
        return [str(column) for column in self.frame.columns]

    @property
    def rows(self) -> typing.List[typing.Tuple[int, typing.Dict[str, str]]]:
        return list(zip(self.row_lines, self.frame.to_dict("records")))

    def error(self, line: int, message: str) -> ParseError:
        return ParseError(self.path, line, message)

    def meta(self, key: str, parse: typing.Callable[[str], typing.Any], default: typing.Any = None) -> typing.Any:
        if key not in self.metadata:
            if default is None:
                raise self.error(self.header_line, f"missing metadata key {key!r}")
            return default
        try:
            return parse(self.metadata[key])
        except ValueError as exc:
            raise self.error(self.metadata_lines[key], f"{key}: {exc}") from exc

    def cell(
        self,
        line: int,
        row: typing.Dict[str, str],
        column: str,
        parse: typing.Callable[[str], typing.Any],
    ) -> typing.Any:
        text = row.get(column, "")
        if text == "":
            raise self.error(line, f"missing value for {column!r}")
        try:
            return parse(text)
        except ValueError as exc:
            raise self.error(line, f"{column}: {exc}") from exc

    def require_columns(self, *columns: str) -> None:
        missing = [c for c in columns if c not in self.header]
        if missing:
            raise self.error(self.header_line, f"missing columns {missing}")


def parse_float(text: str) -> float:
    try:
        return float(text)
    except ValueError:
        raise ValueError(f"{text!r} is not a number") from None


def parse_int(text: str) -> int:
    try:
        return int(text)
    except ValueError:
        raise ValueError(f"{text!r} is not an integer") from None


def parse_bool(text: str) -> bool:
    lowered = text.lower()
    if lowered in ("true", "yes", "1"):
        return True
    if lowered in ("false", "no", "0"):
        return False
    raise ValueError(f"{text!r} is not a boolean")


def parse_floats(text: str) -> typing.Union[float, typing.List[float]]:
    parts = [part.strip() for part in text.split(";")]
    values = [parse_float(part) for part in parts]
    return values[0] if len(values) == 1 else values


def format_value(value: typing.Any) -> str:
    """
    Renders a cell or metadata value.

    Examples:
        >>> format_value(0.1), format_value(3), format_value(None), format_value(True)
        ('0.1', '3', '', 'true')
        >>> format_value([0.95, 1.0])
        '0.95;1.0'
    """
    if value is None:
        return ""
    if isinstance(value, (bool, np.bool_)):
        return "true" if value else "false"
    if isinstance(value, (int, np.integer)):
        return str(int(value))
    if isinstance(value, (float, np.floating)):
        return repr(float(value))
    if isinstance(value, (list, tuple, np.ndarray)):
        return ";".join(format_value(v) for v in value)
    return str(value)


def read_table(path: PathLike, kind: str) -> Table:
    """
    Splits a file into metadata, header and records.

    The tag and ``#@`` lines are parsed here; the header and records are
    read with pandas, every cell kept as text.

    Raises:
        ParseError: If the tag line, metadata or row shapes are malformed.
    """
    path = str(path)
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise ParseError(path, 0, f"cannot read file: {exc.strerror}") from exc
    lines = text.splitlines()

    table = Table(path=path, kind=kind)
    expected = f"{TAG} {kind} "
    if not lines or not lines[0].startswith(expected):
        raise table.error(1, f"expected first line '{expected}{FORMAT_VERSION}'")
    version = lines[0][len(expected):].strip()
    if version != str(FORMAT_VERSION):
        raise table.error(1, f"unsupported {kind} format version {version!r}")

    records = []
    for number, raw in enumerate(lines[1:], start=2):
        stripped = raw.strip()
        if stripped.startswith("#@"):
            key, sep, value = stripped[2:].partition("=")
            key = key.strip()
            if not sep or not key:
                raise table.error(number, "metadata must read '#@ key = value'")
            if key in table.metadata:
                raise table.error(number, f"duplicate metadata key {key!r}")
            table.metadata[key] = value.strip()
            table.metadata_lines[key] = number
        elif stripped and not stripped.startswith("#"):
            records.append(number)
    if not records:
        raise table.error(len(lines), "missing header row")
    table.header_line, table.row_lines = records[0], records[1:]

    # pandas pads short rows and may take a long first row as an index
    width = lines[table.header_line - 1].count(",") + 1
    for number in table.row_lines:
        fields = lines[number - 1].count(",") + 1
        if fields != width:
            raise table.error(number, f"expected {width} fields, got {fields}")

    kept = set(records)
    try:
        frame = pd.read_csv(
            io.StringIO(text),
            skiprows=[index for index in range(len(lines)) if index + 1 not in kept],
            dtype=str,
            na_filter=False,
            skipinitialspace=True,
            skip_blank_lines=False,
        )
    except pd.errors.ParserError as exc:
        raise table.error(table.header_line, f"unreadable table: {exc}") from exc
    frame.columns = [str(column).strip() for column in frame.columns]
    for column in frame.columns:
        frame[column] = frame[column].str.strip()
    table.frame = frame
    return table


def write_table(
    path: PathLike,
    kind: str,
    header: typing.Sequence[str],
    rows: typing.Iterable[typing.Sequence[typing.Any]],
    metadata: typing.Optional[typing.Mapping[str, typing.Any]] = None,
    comments: typing.Sequence[str] = (),
) -> Path:
    """Writes a table through a temporary file renamed into place."""
    preamble = [f"{TAG} {kind} {FORMAT_VERSION}"]
    preamble += [f"# {comment}" for comment in comments]
    preamble += [f"#@ {key} = {format_value(value)}" for key, value in (metadata or {}).items()]
    frame = pd.DataFrame(
        [[format_value(cell) for cell in row] for row in rows], columns=list(header)
    )

    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    handle, temporary = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.")
    try:
        with os.fdopen(handle, "w", newline="") as stream:
            stream.write("".join(f"{line}\n" for line in preamble))
            frame.to_csv(stream, index=False, lineterminator="\n")
        os.replace(temporary, path)
    except BaseException:
        os.unlink(temporary)
        raise
    logger.debug("wrote %s (%d rows)", path, len(frame))
    return path


def read_network(path: PathLike) -> Network:
    """
    Reads a feeder. Impedances are given either in per-unit (``r_pu,x_pu``)
    or in ohms (``r_ohm,x_ohm``), the latter converted with the declared base.
    """
    table = read_table(path, "network")
    base_mva = table.meta("base_mva", parse_float)
    base_kv = table.meta("base_kv", parse_float)
    table.require_columns("parent", "child")
    if {"r_pu", "x_pu"} <= set(table.header):
        columns, scale = ("r_pu", "x_pu"), 1.0
    elif {"r_ohm", "x_ohm"} <= set(table.header):
        columns, scale = ("r_ohm", "x_ohm"), ohm_to_pu(1.0, base_kv, base_mva)
    else:
        raise table.error(table.header_line, "expected columns r_pu,x_pu or r_ohm,x_ohm")

    lines = [
        Line(
            table.cell(number, row, "parent", parse_int),
            table.cell(number, row, "child", parse_int),
            table.cell(number, row, columns[0], parse_float) * scale,
            table.cell(number, row, columns[1], parse_float) * scale,
        )
        for number, row in table.rows
    ]
    try:
        return Network(len(lines), lines, base_mva=base_mva, base_kv=base_kv)
    except ValidationError as exc:
        raise table.error(table.header_line, str(exc)) from exc


def write_network(path: PathLike, network: Network) -> Path:
    return write_table(
        path,
        "network",
        ["parent", "child", "r_pu", "x_pu"],
        [tuple(line) for line in network.lines],
        metadata={"base_mva": network.base_mva, "base_kv": network.base_kv},
    )


PROSUMER_COLUMNS = ["bus", "alpha", "beta", "r_pu", "q_pu", "d_min_pu", "d_max_pu"]


def read_prosumers(
    path: PathLike, tariff: typing.Optional[Tariff] = None
) -> ProsumerArrays:
    """
    Reads one prosumer per bus, buses numbered 1..N in any order.

    ``q_pu`` is the reactive injection, negative when the bus absorbs. With a
    ``tariff`` every row is checked for ``beta >= pi``.
    """
    table = read_table(path, "prosumers")
    table.require_columns(*PROSUMER_COLUMNS)
    records = {}
    for number, row in table.rows:
        bus = table.cell(number, row, "bus", parse_int)
        if bus in records:
            raise table.error(number, f"bus {bus} listed twice")
        values = [table.cell(number, row, c, parse_float) for c in PROSUMER_COLUMNS[1:]]
        if tariff is not None and values[1] < tariff.pi:
            raise table.error(
                number,
                f"bus {bus}: beta {values[1]} is below the retail rate {tariff.pi}",
            )
        records[bus] = (number, values)

    if sorted(records) != list(range(1, len(records) + 1)):
        raise table.error(table.header_line, "buses must be numbered 1..N without gaps")
    columns = list(zip(*(records[bus][1] for bus in sorted(records))))
    try:
        return ProsumerArrays(*columns)
    except ValidationError as exc:
        raise table.error(table.header_line, str(exc)) from exc


def write_prosumers(path: PathLike, prosumers: ProsumerArrays) -> Path:
    rows = [
        (bus, *values)
        for bus, values in enumerate(
            zip(
                prosumers.alpha,
                prosumers.beta,
                prosumers.r,
                prosumers.q,
                prosumers.d_min,
                prosumers.d_max,
            ),
            start=1,
        )
    ]
    return write_table(path, "prosumers", PROSUMER_COLUMNS, rows)


CONFIG_KEYS = {
    "epsilon": ("epsilon", parse_float),
    "sigma": ("sigma", parse_float),
    "seed": ("rng_seed", parse_int),
    "perturbation_law": ("perturbation_law", str),
    "dual_measurement": ("dual_measurement", str),
    "sensitivities": ("sensitivities", str),
    "max_iterations": ("max_iterations", parse_int),
    "tolerance": ("tolerance", parse_float),
    "patience": ("patience", parse_int),
    "divergence_guard": ("divergence_guard", parse_float),
}
SCENARIO_KEYS = {
    "name",
    "pi",
    "pi0",
    "v_min",
    "v_max",
    "p0_min_pu",
    "p0_max_pu",
    "p0_min_mw",
    "p0_max_mw",
    "controller",
    "clamp_demand",
    *CONFIG_KEYS,
}


def _power(
    table: Table,
    read: typing.Callable[[str, typing.Callable[[str], typing.Any]], typing.Any],
    name: str,
    base_mva: float,
    where: int,
) -> typing.Optional[float]:
    """Reads ``<name>_pu`` or ``<name>_mw``; at most one may be present."""
    pu = read(f"{name}_pu", parse_float)
    mw = read(f"{name}_mw", parse_float)
    if pu is not None and mw is not None:
        raise table.error(where, f"give either {name}_pu or {name}_mw, not both")
    return mw / base_mva if mw is not None else pu


def _per_bus(
    table: Table, key: str, value: typing.Any, default: float, n: int
) -> np.ndarray:
    if value is None:
        return np.full(n, default)
    if isinstance(value, list):
        if len(value) != n:
            raise table.error(
                table.metadata_lines[key], f"{key} lists {len(value)} values for {n} buses"
            )
        return np.array(value)
    return np.full(n, value)


def read_tariff(path: PathLike) -> Tariff:
    table = read_table(path, "scenario")
    try:
        return Tariff(table.meta("pi", parse_float), table.meta("pi0", parse_float, 0.0))
    except ValidationError as exc:
        raise table.error(table.metadata_lines.get("pi", 1), str(exc)) from exc


def read_scenario(path: PathLike, network: Network, prosumers: ProsumerArrays) -> Scenario:
    """
    Reads tariff, limits, controller settings and events of a scenario.

    Power limits and capacities may be given in per-unit (``_pu``) or in MW
    (``_mw``); MW values are converted with the network's base power.
    """
    table = read_table(path, "scenario")
    unknown = sorted(set(table.metadata) - SCENARIO_KEYS)
    if unknown:
        raise table.error(table.metadata_lines[unknown[0]], f"unknown metadata key {unknown[0]!r}")
    n = network.bus_count

    def meta(key, parse):
        return table.meta(key, parse, default=None) if key in table.metadata else None

    try:
        tariff = Tariff(table.meta("pi", parse_float), table.meta("pi0", parse_float, 0.0))
        p0_min = _power(table, meta, "p0_min", network.base_mva, table.header_line)
        p0_max = _power(table, meta, "p0_max", network.base_mva, table.header_line)
        if p0_min is None or p0_max is None:
            raise table.error(table.header_line, "feeder power limits p0_min and p0_max are required")
        limits = OperationalLimits(
            _per_bus(table, "v_min", meta("v_min", parse_floats), 0.95, n),
            _per_bus(table, "v_max", meta("v_max", parse_floats), 1.05, n),
            p0_min,
            p0_max,
        )
        config = ControllerConfig(
            **{
                field_name: table.meta(key, parse)
                for key, (field_name, parse) in CONFIG_KEYS.items()
                if key in table.metadata
            }
        )
        events = tuple(_read_event(table, number, row, network, limits) for number, row in table.rows)
        return Scenario(
            network=network,
            prosumers=prosumers,
            tariff=tariff,
            limits=limits,
            controller=table.metadata.get("controller", "dual_ascent"),
            config=config,
            events=events,
            clamp_demand=table.meta("clamp_demand", parse_bool, False),
        )
    except ParseError:
        raise
    except ValidationError as exc:
        raise table.error(table.header_line, str(exc)) from exc


def _read_event(
    table: Table,
    number: int,
    row: typing.Dict[str, str],
    network: Network,
    limits: OperationalLimits,
) -> ScheduledEvent:
    iteration = table.cell(number, row, "iteration", parse_int)
    kind = table.cell(number, row, "event", str)

    def optional(column: str, parse: typing.Callable[[str], typing.Any]) -> typing.Any:
        return table.cell(number, row, column, parse) if row.get(column, "") else None

    if kind in (GeneratorOff.kind, GeneratorOn.kind):
        capacity = _power(table, optional, "capacity", network.base_mva, number)
        if capacity is None:
            raise table.error(number, f"{kind} needs capacity_pu or capacity_mw")
        bus = table.cell(number, row, "bus", parse_int)
        event_class = GeneratorOff if kind == GeneratorOff.kind else GeneratorOn
        return ScheduledEvent(iteration, event_class(bus, capacity))
    if kind == SetLimits.kind:
        v_min = optional("v_min", parse_float)
        v_max = optional("v_max", parse_float)
        p0_min = _power(table, optional, "p0_min", network.base_mva, number)
        p0_max = _power(table, optional, "p0_max", network.base_mva, number)
        try:
            new_limits = OperationalLimits(
                limits.v_min if v_min is None else np.full(limits.size, v_min),
                limits.v_max if v_max is None else np.full(limits.size, v_max),
                limits.p0_min if p0_min is None else p0_min,
                limits.p0_max if p0_max is None else p0_max,
            )
        except ValidationError as exc:
            raise table.error(number, str(exc)) from exc
        return ScheduledEvent(iteration, SetLimits(new_limits))
    raise table.error(number, f"unknown event {kind!r}")


def _band(values: np.ndarray) -> typing.Union[float, typing.List[float]]:
    return float(values[0]) if np.all(values == values[0]) else values.tolist()


EVENT_COLUMNS = ["iteration", "event", "bus", "capacity_pu", "v_min", "v_max", "p0_min_pu", "p0_max_pu"]


def write_scenario(path: PathLike, scenario: Scenario) -> Path:
    limits = scenario.limits
    metadata = {
        "pi": scenario.tariff.pi,
        "pi0": scenario.tariff.pi0,
        "v_min": _band(limits.v_min),
        "v_max": _band(limits.v_max),
        "p0_min_pu": limits.p0_min,
        "p0_max_pu": limits.p0_max,
        "controller": scenario.controller,
        "clamp_demand": scenario.clamp_demand,
    }
    config = scenario.config
    for key, (field_name, _) in CONFIG_KEYS.items():
        value = getattr(config, field_name)
        if value is not None:
            metadata[key] = value

    rows = []
    for iteration, event in scenario.events:
        if isinstance(event, SetLimits):
            new = event.limits
            for band in (new.v_min, new.v_max):
                if not np.all(band == band[0]):
                    raise ValidationError("limits events must use one voltage band for every bus")
            rows.append(
                (iteration, event.kind, None, None, new.v_min[0], new.v_max[0], new.p0_min, new.p0_max)
            )
        else:
            rows.append((iteration, event.kind, event.bus, event.capacity, None, None, None, None))
    return write_table(path, "scenario", EVENT_COLUMNS, rows, metadata=metadata)


def trace_columns(n: int) -> typing.List[str]:
    scalars = ["iteration", "total_incentive", "min_voltage", "p0", "so_cost", "constraint_violation"]
    return scalars + [f"{name}_{bus}" for name in ("xi", "d", "v") for bus in range(1, n + 1)]


def write_trace(path: PathLike, result: RunResult, algorithm: str) -> Path:
    n = result.final_state.size
    rows = [
        (
            record.iteration,
            record.total_incentive,
            record.min_voltage,
            record.p0,
            record.so_cost_value,
            record.constraint_violation,
            *record.xi,
            *record.d,
            *record.v,
        )
        for record in result.trace
    ]
    metadata = {
        "algorithm": algorithm,
        "seed": result.seed,
        "epsilon": result.epsilon,
        "diverged": result.diverged,
    }
    return write_table(path, "trace", trace_columns(n), rows, metadata=metadata)


def read_trace(path: PathLike) -> typing.List[TraceRecord]:
    table = read_table(path, "trace")
    n = sum(1 for column in table.header if column.startswith("xi_"))
    table.require_columns(*trace_columns(n))

    def vector(number, row, name):
        return [table.cell(number, row, f"{name}_{bus}", parse_float) for bus in range(1, n + 1)]

    return [
        TraceRecord(
            iteration=table.cell(number, row, "iteration", parse_int),
            xi=vector(number, row, "xi"),
            d=vector(number, row, "d"),
            v=vector(number, row, "v"),
            p0=table.cell(number, row, "p0", parse_float),
            total_incentive=table.cell(number, row, "total_incentive", parse_float),
            min_voltage=table.cell(number, row, "min_voltage", parse_float),
            so_cost_value=table.cell(number, row, "so_cost", parse_float),
            constraint_violation=table.cell(number, row, "constraint_violation", parse_float),
        )
        for number, row in table.rows
    ]


def write_summary(path: PathLike, summary: Summary, algorithm: str, seed: int) -> Path:
    values = dataclasses.asdict(summary)
    return write_table(
        path,
        "summary",
        list(values),
        [list(values.values())],
        metadata={"algorithm": algorithm, "seed": seed},
    )


def write_solution(
    path: PathLike,
    qp: QpData,
    solution: OracleSolution,
    measurement: Measurement,
    base_mva: float,
) -> Path:
    """Writes the optimal incentives with the grid state they produce."""
    n = qp.size
    theta = solution.theta
    rows = zip(
        range(1, n + 1),
        solution.xi,
        measurement.d,
        measurement.v,
        theta[:n],
        theta[n : 2 * n],
        theta[2 * n + 2 :],
    )
    metadata = {
        "cost": so_cost(qp, solution.xi),
        "p0_pu": measurement.p0,
        "p0_mw": measurement.p0 * base_mva,
        "min_voltage": float(np.min(measurement.v)),
        "mu_up": theta[2 * n],
        "mu_lo": theta[2 * n + 1],
        "kkt_residual": kkt_residual(qp, solution.xi, theta),
        "iterations": solution.iterations,
        "active": " ".join(active_constraints(qp, solution.xi, theta)) or "none",
    }
    return write_table(
        path,
        "solution",
        ["bus", "xi", "d_pu", "v_pu", "lambda_up", "lambda_lo", "nu"],
        rows,
        metadata=metadata,
    )


def write_comparison(path: PathLike, results: typing.Mapping[str, RunResult]) -> Path:
    """
    Aligns the traces of several runs by iteration.

    Runs that stopped early leave their cells empty for later iterations.
    """
    header = ["iteration"]
    for name in results:
        header += [f"{name}_total_incentive", f"{name}_min_voltage", f"{name}_p0"]
    length = max((len(result.trace) for result in results.values()), default=0)
    rows = []
    for iteration in range(length):
        row: typing.List[typing.Any] = [iteration]
        for result in results.values():
            if iteration < len(result.trace):
                record = result.trace[iteration]
                row += [record.total_incentive, record.min_voltage, record.p0]
            else:
                row += [None, None, None]
        rows.append(row)
    return write_table(path, "compare", header, rows)
