import functools
import logging
import typing
from dataclasses import dataclass

import networkx as nx
import numpy as np

from gridincentives.exceptions import TopologyError, ValidationError

logger = logging.getLogger(__name__)

SUBSTATION = 0


class Line(typing.NamedTuple):
    parent: int
    child: int
    r: float
    x: float


def ohm_to_pu(ohm: float, base_kv: float, base_mva: float) -> float:
    """
    Converts a series impedance from ohms to per-unit on the given base.

    Examples:
        >>> ohm_to_pu(16.0, base_kv=4.0, base_mva=1.0)
        1.0
    """
    return ohm * base_mva / base_kv**2


def as_vector(name: str, value: typing.Any, size: int) -> np.ndarray:
    vector = np.asarray(value, dtype=float)
    if vector.ndim == 0:
        vector = vector.reshape(1)
    if vector.shape != (size,):
        raise ValidationError(
            f"{name} must have shape ({size},), got {vector.shape}"
        )
    return vector


def readonly(value: typing.Any) -> np.ndarray:
    array = np.array(value, dtype=float)
    array.flags.writeable = False
    return array


@dataclass(frozen=True)
class Network:
    """
    Radial feeder: bus 0 is the substation, buses 1..bus_count are prosumers.

    Each line joins a parent bus to a child bus and carries its series
    resistance and reactance in per-unit on ``base_mva``/``base_kv``.
    """

    bus_count: int
    lines: typing.Tuple[Line, ...]
    base_mva: float = 1.0
    base_kv: float = 12.66

    def __post_init__(self):
        object.__setattr__(
            self,
            "lines",
            tuple(
                Line(int(line[0]), int(line[1]), float(line[2]), float(line[3]))
                for line in self.lines
            ),
        )
        if self.bus_count < 1:
            raise ValidationError(
                f"bus_count must be a positive integer, got {self.bus_count}"
            )
        if self.base_mva <= 0 or self.base_kv <= 0:
            raise ValidationError("base_mva and base_kv must be positive")
        for line in self.lines:
            if not (line.r > 0 and line.x > 0):
                raise ValidationError(
                    f"line {line.parent}-{line.child} must have positive "
                    f"impedance, got r={line.r}, x={line.x}"
                )
        self._check_tree()

    def _check_tree(self) -> None:
        buses = set(range(self.bus_count + 1))
        named = {bus for line in self.lines for bus in line[:2]}
        if not named <= buses:
            raise TopologyError(
                f"lines reference unknown buses: {sorted(named - buses)}"
            )
        if len(self.lines) != self.bus_count:
            raise TopologyError(
                f"a radial feeder with {self.bus_count} buses needs "
                f"{self.bus_count} lines, got {len(self.lines)}"
            )
        graph = self.graph
        if graph.number_of_edges() != len(self.lines):
            raise TopologyError("parallel lines are not allowed")
        if not nx.is_tree(graph):
            unreached = buses - nx.node_connected_component(graph, SUBSTATION)
            raise TopologyError(
                "lines do not form a tree rooted at bus 0"
                + (f"; unreachable buses: {sorted(unreached)}" if unreached else "")
            )

    @functools.cached_property
    def graph(self) -> nx.Graph:
        graph = nx.Graph()
        graph.add_nodes_from(range(self.bus_count + 1))
        for line in self.lines:
            graph.add_edge(line.parent, line.child, r=line.r, x=line.x)
        return graph

    @functools.cached_property
    def _paths(self) -> typing.Dict[int, typing.List[int]]:
        return nx.single_source_shortest_path(self.graph, SUBSTATION)

    def path_to_root(self, bus: int) -> typing.List[Line]:
        """Lines crossed going from the substation to ``bus``, in order."""
        nodes = self._paths[bus]
        return [
            Line(u, v, self.graph.edges[u, v]["r"], self.graph.edges[u, v]["x"])
            for u, v in zip(nodes, nodes[1:])
        ]

    def to_pu(self, mw: float) -> float:
        return mw / self.base_mva

    def to_mw(self, pu: float) -> float:
        return pu * self.base_mva


@dataclass(frozen=True, eq=False)
class SensitivityModel:
    R: np.ndarray
    X: np.ndarray
    omega: np.ndarray

    def __post_init__(self):
        for name in ("R", "X", "omega"):
            object.__setattr__(self, name, readonly(getattr(self, name)))
        n = self.omega.shape[0]
        if self.R.shape != (n, n) or self.X.shape != (n, n):
            raise ValidationError(
                f"R and X must be {n}x{n}, got {self.R.shape} and {self.X.shape}"
            )

    @property
    def size(self) -> int:
        return self.omega.shape[0]

    def check_positive_definite(self) -> None:
        for name, matrix in (("R", self.R), ("X", self.X)):
            if not np.array_equal(matrix, matrix.T):
                raise ValidationError(f"{name} is not symmetric")
            if np.any(matrix < 0):
                raise ValidationError(f"{name} has negative entries")
            try:
                np.linalg.cholesky(matrix)
            except np.linalg.LinAlgError as exc:
                raise ValidationError(f"{name} is not positive definite") from exc
        if np.any(self.omega <= 0):
            raise ValidationError("omega must be positive")


def _common_path(network: Network, values: np.ndarray) -> np.ndarray:
    # membership[e, n] is 1 when the line ending at bus e+1 lies on the path to bus n+1
    n = network.bus_count
    membership = np.zeros((n, n))
    for bus in range(1, n + 1):
        for line in network.path_to_root(bus):
            membership[line.child - 1, bus - 1] = 1.0
    matrix = membership.T @ (values[:, None] * membership)
    upper = np.triu(matrix)
    return upper + np.triu(matrix, 1).T


def build_sensitivities(network: Network) -> SensitivityModel:
    """
    Builds the linearized voltage model v = Rp + Xq + omega of a radial feeder.

    R[n, m] is the total resistance of the lines shared by the paths from the
    substation to buses n and m; X is the same with reactances. The substation
    imposes 1 p.u., so omega is a vector of ones.

    Args:
        network (Network): A validated radial feeder.

    Returns:
        SensitivityModel: R, X and omega in per-unit.

    Raises:
        ValidationError: If R or X fails the positive definiteness check.

    Examples:
        >>> net = Network(1, [Line(0, 1, 0.1, 0.05)])
        >>> model = build_sensitivities(net)
        >>> model.R.tolist(), model.X.tolist(), model.omega.tolist()
        ([[0.1]], [[0.05]], [1.0])
    """
    n = network.bus_count
    resistance = np.zeros(n)
    reactance = np.zeros(n)
    for bus in range(1, n + 1):
        line = network.path_to_root(bus)[-1]
        resistance[bus - 1] = line.r
        reactance[bus - 1] = line.x

    model = SensitivityModel(
        R=_common_path(network, resistance),
        X=_common_path(network, reactance),
        omega=np.ones(n),
    )
    model.check_positive_definite()
    logger.debug("built %dx%d sensitivity model", n, n)
    return model


def voltages_of(model: SensitivityModel, p: typing.Any, q: typing.Any) -> np.ndarray:
    """
    Evaluates bus voltage magnitudes for the given net injections.

    Examples:
        >>> model = build_sensitivities(Network(1, [Line(0, 1, 0.1, 0.05)]))
        >>> voltages_of(model, [0.5], [0.0]).tolist()
        [1.05]
    """
    p = as_vector("p", p, model.size)
    q = as_vector("q", q, model.size)
    return model.R @ p + model.X @ q + model.omega


def feeder_power_of(d: typing.Any, r: typing.Any) -> float:
    """
    Power delivered through the substation, positive when the feeder imports.

    Examples:
        >>> feeder_power_of([1.0, 2.0], [0.5, 0.0])
        2.5
    """
    d = np.asarray(d, dtype=float)
    r = as_vector("r", r, d.size)
    return float(np.sum(d - r))
