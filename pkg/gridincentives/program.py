"""
The system operator's quadratic program over incentives.

Decision variable is the incentive vector xi. Demands, voltages and feeder
power are eliminated through the linear response of the prosumers and the
linear feeder model, which leaves

    minimize    xi' A xi + b' xi + c
    subject to  Phi xi + phi <= 0

with one constraint row per voltage bound, per feeder power bound and per
demand nonnegativity condition. The dual variable theta is ordered the same
way: lambda_up, lambda_lo, mu_up, mu_lo, nu.
"""
import dataclasses
import logging
import typing
from dataclasses import dataclass

import numpy as np

from gridincentives.exceptions import (
    ConvergenceError,
    InfeasibleError,
    ValidationError,
)
from gridincentives.feeder import SensitivityModel, as_vector, readonly
from gridincentives.market import ProsumerArrays, Tariff

logger = logging.getLogger(__name__)


@dataclass(frozen=True, eq=False)
class OperationalLimits:
    v_min: np.ndarray
    v_max: np.ndarray
    p0_min: float
    p0_max: float

    def __post_init__(self):
        v_min = np.atleast_1d(np.asarray(self.v_min, dtype=float))
        v_max = as_vector("v_max", self.v_max, v_min.size)
        object.__setattr__(self, "v_min", readonly(v_min))
        object.__setattr__(self, "v_max", readonly(v_max))
        object.__setattr__(self, "p0_min", float(self.p0_min))
        object.__setattr__(self, "p0_max", float(self.p0_max))
        values = np.concatenate([v_min, v_max, [self.p0_min, self.p0_max]])
        if not np.all(np.isfinite(values)):
            raise ValidationError("operational limits must be finite")
        bad = np.flatnonzero(v_min >= v_max)
        if bad.size:
            raise ValidationError(
                f"v_min must be below v_max, violated at buses {(bad + 1).tolist()}"
            )
        if self.p0_min > self.p0_max:
            raise ValidationError(
                f"p0_min ({self.p0_min}) must not exceed p0_max ({self.p0_max})"
            )

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, OperationalLimits):
            return NotImplemented
        return (
            np.array_equal(self.v_min, other.v_min)
            and np.array_equal(self.v_max, other.v_max)
            and self.p0_min == other.p0_min
            and self.p0_max == other.p0_max
        )

    @property
    def size(self) -> int:
        return self.v_min.shape[0]

    @classmethod
    def uniform(
        cls, n: int, v_min: float, v_max: float, p0_min: float, p0_max: float
    ) -> "OperationalLimits":
        """
        Same voltage band at every bus.

        Examples:
            >>> OperationalLimits.uniform(2, 0.95, 1.05, -1.0, 1.0).v_max.tolist()
            [1.05, 1.05]
        """
        return cls(np.full(n, v_min), np.full(n, v_max), p0_min, p0_max)


@dataclass(frozen=True, eq=False)
class QpData:
    A: np.ndarray
    b: np.ndarray
    c: float
    Phi: np.ndarray
    phi: np.ndarray
    d_hat: np.ndarray
    v_hat: np.ndarray
    c_prime: float
    r: np.ndarray
    q: np.ndarray
    beta: np.ndarray
    pi: float
    pi0: float
    limits: OperationalLimits

    def __post_init__(self):
        for field in ("A", "b", "Phi", "phi", "d_hat", "v_hat", "r", "q", "beta"):
            object.__setattr__(self, field, readonly(getattr(self, field)))
        n = self.b.shape[0]
        if self.A.shape != (n, n) or not np.array_equal(self.A, np.diag(np.diag(self.A))):
            raise ValidationError("A must be a square diagonal matrix")
        if np.any(np.diag(self.A) <= 0):
            raise ValidationError("A must have a positive diagonal")
        if self.Phi.shape != (3 * n + 2, n) or self.phi.shape != (3 * n + 2,):
            raise ValidationError(
                f"Phi and phi must have {3 * n + 2} rows, got "
                f"{self.Phi.shape} and {self.phi.shape}"
            )

    @property
    def size(self) -> int:
        return self.b.shape[0]

    @property
    def a(self) -> np.ndarray:
        return np.diag(self.A)


def constraint_labels(n: int) -> typing.List[str]:
    """
    Names of the constraint rows, buses numbered from 1.

    Examples:
        >>> constraint_labels(1)
        ['v_max[1]', 'v_min[1]', 'p0_max', 'p0_min', 'demand[1]']
    """
    buses = range(1, n + 1)
    return (
        [f"v_max[{i}]" for i in buses]
        + [f"v_min[{i}]" for i in buses]
        + ["p0_max", "p0_min"]
        + [f"demand[{i}]" for i in buses]
    )


def _constraint_offsets(
    v_hat: np.ndarray,
    d_hat: np.ndarray,
    r: np.ndarray,
    beta: np.ndarray,
    pi: float,
    limits: OperationalLimits,
) -> np.ndarray:
    nominal_p0 = np.sum(d_hat - r)
    return np.concatenate(
        [
            v_hat - limits.v_max,
            limits.v_min - v_hat,
            [nominal_p0 - limits.p0_max, limits.p0_min - nominal_p0],
            pi - beta,
        ]
    )


def _generation_terms(
    model: SensitivityModel,
    d_hat: np.ndarray,
    r: np.ndarray,
    q: np.ndarray,
    pi: float,
    pi0: float,
) -> typing.Tuple[np.ndarray, float, float]:
    v_hat = model.R @ (r - d_hat) + model.X @ q + model.omega
    # c = -sum of the nominal bills, c' = sum of pi r_n - pi0
    c = float(pi * np.sum(r - d_hat) - r.size * pi0)
    c_prime = float(np.sum(pi * r - pi0))
    return v_hat, c, c_prime


def assemble_qp(
    model: SensitivityModel,
    prosumers: ProsumerArrays,
    tariff: Tariff,
    limits: OperationalLimits,
) -> QpData:
    """
    Builds the incentive program of a feeder and its prosumers.

    Args:
        model (SensitivityModel): Linear voltage model of the feeder.
        prosumers (ProsumerArrays): Prosumers at buses 1..N.
        tariff (Tariff): Tariff shared by every prosumer.
        limits (OperationalLimits): Voltage and feeder power limits.

    Returns:
        QpData: Cost and constraint data of the program.

    Raises:
        ValidationError: If the sizes disagree or a prosumer has ``beta < pi``.

    Examples:
        >>> from gridincentives.feeder import Line, Network, build_sensitivities
        >>> from gridincentives.market import Prosumer
        >>> model = build_sensitivities(Network(1, [Line(0, 1, 0.1, 0.05)]))
        >>> pros = ProsumerArrays.from_prosumers([Prosumer(alpha=2.0, beta=3.0)])
        >>> limits = OperationalLimits.uniform(1, 0.8, 1.2, -10.0, 10.0)
        >>> qp = assemble_qp(model, pros, Tariff(pi=1.0), limits)
        >>> qp.d_hat.tolist(), qp.A.tolist(), qp.b.tolist(), qp.c
        ([1.0], [[0.5]], [-0.5], -1.0)
        >>> qp.Phi.ravel().tolist()
        [-0.05, 0.05, 0.5, -0.5, -1.0]
    """
    n = model.size
    if prosumers.size != n or limits.size != n:
        raise ValidationError(
            f"feeder has {n} buses but {prosumers.size} prosumers and "
            f"{limits.size} voltage limits were given"
        )
    prosumers.validate_against(tariff)

    a = 1.0 / prosumers.alpha
    d_hat = prosumers.nominal_demands(tariff)
    r = np.array(prosumers.r)
    v_hat, c, c_prime = _generation_terms(
        model, d_hat, r, prosumers.q, tariff.pi, tariff.pi0
    )
    ra = model.R * a[None, :]
    Phi = np.vstack([-ra, ra, a[None, :], -a[None, :], -np.eye(n)])
    phi = _constraint_offsets(v_hat, d_hat, r, prosumers.beta, tariff.pi, limits)

    logger.debug("assembled program with %d buses, %d constraints", n, Phi.shape[0])
    return QpData(
        A=np.diag(a),
        b=-tariff.pi * a,
        c=c,
        Phi=Phi,
        phi=phi,
        d_hat=d_hat,
        v_hat=v_hat,
        c_prime=c_prime,
        r=r,
        q=prosumers.q,
        beta=prosumers.beta,
        pi=tariff.pi,
        pi0=tariff.pi0,
        limits=limits,
    )


def with_generation(qp: QpData, model: SensitivityModel, r: typing.Any) -> QpData:
    """Rebuilds the generation dependent terms after a generator changes state."""
    r = as_vector("r", r, qp.size)
    if np.any(r < 0):
        raise ValidationError("generation must be nonnegative")
    v_hat, c, c_prime = _generation_terms(model, qp.d_hat, r, qp.q, qp.pi, qp.pi0)
    phi = _constraint_offsets(v_hat, qp.d_hat, r, qp.beta, qp.pi, qp.limits)
    return dataclasses.replace(
        qp, r=r, v_hat=v_hat, c=c, c_prime=c_prime, phi=phi
    )


def with_limits(qp: QpData, limits: OperationalLimits) -> QpData:
    if limits.size != qp.size:
        raise ValidationError(f"limits cover {limits.size} buses, expected {qp.size}")
    phi = _constraint_offsets(qp.v_hat, qp.d_hat, qp.r, qp.beta, qp.pi, limits)
    return dataclasses.replace(qp, phi=phi, limits=limits)


def so_cost(qp: QpData, xi: typing.Any) -> float:
    """
    Total incentive payout minus net metering revenue at ``xi``.

    Examples:
        >>> from gridincentives.feeder import Line, Network, build_sensitivities
        >>> from gridincentives.market import Prosumer
        >>> model = build_sensitivities(Network(1, [Line(0, 1, 0.1, 0.05)]))
        >>> pros = ProsumerArrays.from_prosumers([Prosumer(alpha=2.0, beta=3.0)])
        >>> limits = OperationalLimits.uniform(1, 0.8, 1.2, -10.0, 10.0)
        >>> so_cost(assemble_qp(model, pros, Tariff(pi=1.0), limits), [1.0])
        -1.0
    """
    xi = as_vector("xi", xi, qp.size)
    return float(xi @ qp.A @ xi + qp.b @ xi + qp.c)


def constraint_values(qp: QpData, xi: typing.Any) -> np.ndarray:
    xi = as_vector("xi", xi, qp.size)
    return qp.Phi @ xi + qp.phi


def constraint_violation(qp: QpData, xi: typing.Any) -> float:
    return float(np.max(np.maximum(constraint_values(qp, xi), 0.0)))


def active_constraints(
    qp: QpData,
    xi: typing.Any,
    theta: typing.Optional[typing.Any] = None,
    tol: float = 1e-8,
) -> typing.List[str]:
    values = constraint_values(qp, xi)
    mask = np.abs(values) <= tol
    if theta is not None:
        mask |= as_vector("theta", theta, values.size) > 0
    labels = constraint_labels(qp.size)
    return [labels[i] for i in np.flatnonzero(mask)]


def primal_from_dual(qp: QpData, theta: typing.Any) -> np.ndarray:
    """Minimizer of the Lagrangian over xi for fixed multipliers."""
    theta = as_vector("theta", theta, qp.phi.size)
    return -(qp.b + qp.Phi.T @ theta) / (2 * qp.a)


def dual_gradient(qp: QpData, theta: typing.Any) -> np.ndarray:
    return qp.Phi @ primal_from_dual(qp, theta) + qp.phi


def dual_function(qp: QpData, theta: typing.Any) -> float:
    """
    Concave dual of the program, including the constant ``c``.

    With ``c`` included the dual equals ``so_cost`` at the optimum.
    Without it the value at ``theta = 0`` would be ``-b' A^-1 b / 4``; the
    single-bus program below has ``c = -1``, so -0.125 becomes -1.125.

    Examples:
        >>> from gridincentives.feeder import Line, Network, build_sensitivities
        >>> from gridincentives.market import Prosumer
        >>> model = build_sensitivities(Network(1, [Line(0, 1, 0.1, 0.05)]))
        >>> pros = ProsumerArrays.from_prosumers([Prosumer(alpha=2.0, beta=3.0)])
        >>> limits = OperationalLimits.uniform(1, 0.8, 1.2, -10.0, 10.0)
        >>> qp = assemble_qp(model, pros, Tariff(pi=1.0), limits)
        >>> dual_function(qp, [0.0] * 5)
        -1.125
    """
    theta = as_vector("theta", theta, qp.phi.size)
    inv_a = 1.0 / qp.a
    w = qp.Phi.T @ theta
    return float(
        theta @ (qp.phi - qp.Phi @ (inv_a * qp.b) / 2)
        - w @ (inv_a * w) / 4
        - qp.b @ (inv_a * qp.b) / 4
        + qp.c
    )


def kkt_residual(qp: QpData, xi: typing.Any, theta: typing.Any) -> float:
    """
    Largest violation among the optimality conditions of the program.

    Covers stationarity of the Lagrangian, primal feasibility, dual
    feasibility and complementary slackness, all in the infinity norm.
    """
    xi = as_vector("xi", xi, qp.size)
    theta = as_vector("theta", theta, qp.phi.size)
    values = constraint_values(qp, xi)
    stationarity = 2 * qp.A @ xi + qp.b + qp.Phi.T @ theta
    return float(
        max(
            np.max(np.abs(stationarity)),
            np.max(np.maximum(values, 0.0)),
            np.max(np.maximum(-theta, 0.0)),
            np.max(np.abs(theta * values)),
        )
    )


def _power_iteration(
    matrix: np.ndarray, tol: float = 1e-10, max_iterations: int = 10_000
) -> float:
    n = matrix.shape[0]
    x = np.full(n, 1.0 / np.sqrt(n))
    for _ in range(max_iterations):
        y = matrix @ x
        rho = float(x @ y)
        if np.linalg.norm(y - rho * x) <= tol * abs(rho):
            return rho
        x = y / np.linalg.norm(y)
    logger.warning(
        "power iteration did not settle after %d iterations, using eigvalsh",
        max_iterations,
    )
    return float(np.linalg.eigvalsh(matrix)[-1])


def dual_curvature(qp: QpData) -> float:
    """
    Largest eigenvalue of Phi A^-1 Phi'.

    The eigenvalue is taken from the N x N matrix A^-1/2 Phi' Phi A^-1/2, which
    shares the nonzero spectrum and has nonnegative entries.
    """
    scaled = qp.Phi / np.sqrt(qp.a)[None, :]
    return _power_iteration(scaled.T @ scaled)


def step_size_bound(qp: QpData) -> float:
    """
    Largest dual ascent step size for which the dual update is a contraction.

    Examples:
        >>> from gridincentives.feeder import Line, Network, build_sensitivities
        >>> from gridincentives.market import Prosumer
        >>> model = build_sensitivities(Network(1, [Line(0, 1, 0.1, 0.05)]))
        >>> pros = ProsumerArrays.from_prosumers([Prosumer(alpha=2.0, beta=3.0)])
        >>> limits = OperationalLimits.uniform(1, 0.8, 1.2, -10.0, 10.0)
        >>> round(step_size_bound(assemble_qp(model, pros, Tariff(pi=1.0), limits)), 4)
        1.3289
    """
    return 4.0 / dual_curvature(qp)


@dataclass(frozen=True, eq=False)
class OracleSolution:
    xi: np.ndarray
    theta: np.ndarray
    iterations: int

    def __iter__(self):
        return iter((self.xi, self.theta))


def _polish(qp: QpData, theta: np.ndarray, tol: float) -> typing.Optional[np.ndarray]:
    """
    Solves the equality constrained program on the current active set guess.

    Returns the exact multipliers when they certify optimality within ``tol``.
    """
    gradient = dual_gradient(qp, theta)
    support = list(np.flatnonzero((theta > 0) | (gradient >= -1e-9)))
    inv_a = 1.0 / qp.a
    while support:
        rows = qp.Phi[support]
        lhs = rows @ (inv_a[:, None] * rows.T) / 2
        rhs = qp.phi[support] - rows @ (inv_a * qp.b) / 2
        solution = np.linalg.lstsq(lhs, rhs, rcond=None)[0]
        if np.all(solution >= 0):
            candidate = np.zeros_like(theta)
            candidate[support] = solution
            if kkt_residual(qp, primal_from_dual(qp, candidate), candidate) <= tol:
                return candidate
            return None
        del support[int(np.argmin(solution))]
    return None


def oracle_solve(
    qp: QpData,
    start: typing.Optional[typing.Any] = None,
    tol: float = 1e-10,
    max_iterations: int = 200_000,
    polish_every: int = 25,
    window: int = 500,
) -> OracleSolution:
    """
    Solves the incentive program to a KKT certificate.

    Runs projected gradient ascent on the dual function with step
    ``2 / lambda_max(Phi A^-1 Phi')`` and recovers the incentive in closed form.
    Every ``polish_every`` iterations the support of the multipliers is used
    to solve the equality constrained problem exactly.

    Args:
        qp (QpData): The program.
        start: Initial multipliers, zero by default.
        tol (float): Required KKT residual.
        max_iterations (int): Iteration budget.
        polish_every (int): Iterations between active set solves.
        window (int): Iterations between infeasibility tests.

    Returns:
        OracleSolution: Optimal incentive and multipliers. Unpacks as
        ``xi, theta``.

    Raises:
        InfeasibleError: If the multipliers grow along a ray certifying that
            the constraints cannot hold together.
        ConvergenceError: If the budget runs out first.
    """
    m = qp.phi.size
    theta = np.zeros(m) if start is None else np.maximum(as_vector("start", start, m), 0.0)
    step = 2.0 / dual_curvature(qp)
    labels = constraint_labels(qp.size)
    anchor = theta.copy()

    for iteration in range(max_iterations + 1):
        if iteration % polish_every == 0:
            xi = primal_from_dual(qp, theta)
            if kkt_residual(qp, xi, theta) <= tol:
                return OracleSolution(xi, theta, iteration)
            polished = _polish(qp, theta, tol)
            if polished is not None:
                logger.debug("oracle certified by active set solve at %d", iteration)
                return OracleSolution(primal_from_dual(qp, polished), polished, iteration)

        if iteration and iteration % window == 0:
            ray = theta - anchor
            length = np.linalg.norm(ray)
            if (
                length > 1e-8 * (1.0 + np.linalg.norm(theta))
                and np.linalg.norm(qp.Phi.T @ ray) <= 1e-6 * length
                and qp.phi @ ray > 0
                and np.linalg.norm(theta) > np.linalg.norm(anchor)
            ):
                support = np.flatnonzero(ray > 1e-9 * np.max(ray))
                violated = [labels[i] for i in support]
                raise InfeasibleError(
                    "operational limits cannot be met together: " + ", ".join(violated),
                    violated,
                )
            anchor = theta.copy()

        theta = np.maximum(theta + step * dual_gradient(qp, theta), 0.0)

    raise ConvergenceError(
        f"oracle did not reach a KKT residual of {tol} in {max_iterations} iterations"
    )
