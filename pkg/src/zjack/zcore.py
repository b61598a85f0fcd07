"""Z-model abstraction and a damped Newton solver for empirical moment equations.

A Z-model supplies a per-record moment function ``h(z, theta)`` with its
analytic Jacobian, plus a scalar target functional.  The estimate solves
``mean_i h(z_i, theta) = 0``.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .data import Dataset
from .errors import NumericDomainError, SolverError

__all__ = [
    "Functional",
    "QuadraticFunctional",
    "LinearFunctional",
    "ZModel",
    "SolverConfig",
    "SolveResult",
    "empirical_moment",
    "empirical_jacobian",
    "finite_difference_jacobian",
    "solve_z",
    "loo_solve",
]


# --------------------------------------------------------------------------
# target functionals


class Functional:
    """Scalar target ``tau(theta)`` with gradient and Hessian."""

    def value(self, theta: np.ndarray) -> float:
        raise NotImplementedError

    def gradient(self, theta: np.ndarray) -> np.ndarray:
        raise NotImplementedError

    def hessian(self, theta: np.ndarray) -> np.ndarray:
        raise NotImplementedError


class QuadraticFunctional(Functional):
    """``tau(theta) = scale * theta' Q theta``.

    ``half=False`` gives ``theta' Q theta`` (so ``||theta||^2`` for ``Q = I``),
    the convention of the simulation studies.  ``half=True`` gives
    ``theta' Q theta / 2``.
    """

    def __init__(self, Q, half: bool = False):
        Q = np.atleast_2d(np.asarray(Q, dtype=float))
        if Q.shape[0] != Q.shape[1]:
            raise ValueError(f"Q must be square, got shape {Q.shape}")
        if not np.allclose(Q, Q.T):
            raise ValueError("Q must be symmetric")
        self.Q = Q
        self.half = half
        self.scale = 0.5 if half else 1.0

    @property
    def dim(self) -> int:
        return self.Q.shape[0]

    def value(self, theta):
        theta = np.asarray(theta, dtype=float)
        return float(self.scale * theta @ self.Q @ theta)

    def gradient(self, theta):
        return 2.0 * self.scale * (self.Q @ np.asarray(theta, dtype=float))

    def hessian(self, theta):
        return 2.0 * self.scale * self.Q


class LinearFunctional(Functional):
    """``tau(theta) = <c, theta>``."""

    def __init__(self, c):
        self.c = np.asarray(c, dtype=float).reshape(-1)

    @classmethod
    def coordinate(cls, dim: int, index: int) -> "LinearFunctional":
        c = np.zeros(dim)
        c[index] = 1.0
        return cls(c)

    @property
    def dim(self) -> int:
        return self.c.shape[0]

    def value(self, theta):
        return float(self.c @ np.asarray(theta, dtype=float))

    def gradient(self, theta):
        return self.c.copy()

    def hessian(self, theta):
        d = self.c.shape[0]
        return np.zeros((d, d))


class CallableFunctional(Functional):
    """Functional assembled from plain callables; the Hessian is optional."""

    def __init__(self, value, gradient, hessian=None):
        self._value = value
        self._gradient = gradient
        self._hessian = hessian

    def value(self, theta):
        return float(self._value(np.asarray(theta, dtype=float)))

    def gradient(self, theta):
        return np.asarray(self._gradient(np.asarray(theta, dtype=float)), dtype=float)

    def hessian(self, theta):
        if self._hessian is None:
            raise NotImplementedError("this functional has no Hessian")
        return np.asarray(self._hessian(np.asarray(theta, dtype=float)), dtype=float)


# --------------------------------------------------------------------------
# models


class ZModel:
    """Base class for estimators defined by ``mean_i h(z_i, theta) = 0``.

    Subclasses implement the vectorised ``moments`` and ``record_jacobians``
    (or the cheaper ``jacobian`` directly).  ``jvp`` and ``curvature`` are
    only needed by the oracle module.
    """

    dim: int
    target: Functional

    # -- per-dataset, vectorised -----------------------------------------

    def validate(self, data: Dataset) -> None:
        """Raise ``RecordValidationError`` if ``data`` does not fit the model."""

    def moments(self, data: Dataset, theta: np.ndarray) -> np.ndarray:
        """Per-record moments, shape ``(n, dim)``."""
        raise NotImplementedError

    def mean_moment(self, data: Dataset, theta: np.ndarray) -> np.ndarray:
        return self.moments(data, theta).mean(axis=0)

    def record_jacobians(self, data: Dataset, theta: np.ndarray) -> np.ndarray:
        """Per-record Jacobians ``d h / d theta``, shape ``(n, dim, dim)``."""
        raise NotImplementedError

    def jacobian(self, data: Dataset, theta: np.ndarray) -> np.ndarray:
        """Average Jacobian over the records of ``data``."""
        return self.record_jacobians(data, theta).mean(axis=0)

    def jvp(self, data: Dataset, theta: np.ndarray, v: np.ndarray) -> np.ndarray:
        """Per-record products ``grad h(z_i, theta) @ v``, shape ``(n, dim)``."""
        return self.record_jacobians(data, theta) @ np.asarray(v, dtype=float)

    def curvature(self, data: Dataset, theta: np.ndarray, v: np.ndarray) -> np.ndarray:
        """Average over records of ``sum_k v_k * hess h_k(z_i, theta)``."""
        raise NotImplementedError(f"{type(self).__name__} does not expose second derivatives")

    def initial_theta(self, data: Dataset) -> np.ndarray:
        return np.zeros(self.dim)

    # -- per-record convenience --------------------------------------------

    def _single(self, record) -> Dataset:
        if isinstance(record, Dataset):
            if record.n != 1:
                raise ValueError("expected a single record")
            return record
        if isinstance(record, tuple) and hasattr(record, "_fields"):
            return Dataset.from_records([record])
        if isinstance(record, dict):
            return Dataset({k: np.asarray(v, dtype=float)[None, ...] for k, v in record.items()})
        raise TypeError(f"cannot interpret {type(record).__name__} as a record")

    def moment(self, record, theta) -> np.ndarray:
        return self.moments(self._single(record), np.asarray(theta, dtype=float))[0]

    def moment_jacobian(self, record, theta) -> np.ndarray:
        return self.record_jacobians(self._single(record), np.asarray(theta, dtype=float))[0]

    # -- target -------------------------------------------------------------

    def functional(self, theta) -> float:
        return self.target.value(theta)

    def functional_gradient(self, theta) -> np.ndarray:
        return self.target.gradient(theta)

    def functional_hessian(self, theta) -> np.ndarray:
        return self.target.hessian(theta)


# --------------------------------------------------------------------------
# solver


@dataclass(frozen=True)
class SolverConfig:
    """Damped Newton settings.

    ``box_radius`` optionally caps ``||theta||_2``; iterates outside the ball
    are projected back radially.
    """

    residual_tolerance: float = 1e-10
    max_iterations: int = 100
    min_step: float = 2.0 ** -30
    jacobian_regularization: float = 0.0
    ridge_escalation: float = 1e-10
    box_radius: float | None = None

    def __post_init__(self):
        if not self.residual_tolerance > 0:
            raise ValueError("residual_tolerance must be positive")
        if self.max_iterations < 1:
            raise ValueError("max_iterations must be at least 1")
        if not 0 < self.min_step <= 1:
            raise ValueError("min_step must lie in (0, 1]")
        if self.box_radius is not None and not self.box_radius > 0:
            raise ValueError("box_radius must be positive")


@dataclass(frozen=True)
class SolveResult:
    theta: np.ndarray
    residual_norm: float
    iterations: int
    converged: bool
    ridge_used: bool = field(default=False, compare=False)


def _check_finite(model, data, theta, values, what):
    if np.all(np.isfinite(values)):
        return
    per_record = model.moments(data, theta)
    bad = np.flatnonzero(~np.all(np.isfinite(per_record.reshape(data.n, -1)), axis=1))
    idx = int(bad[0]) if bad.size else None
    raise NumericDomainError(f"non-finite {what} at record {idx}", index=idx)


def empirical_moment(model: ZModel, data: Dataset, theta) -> np.ndarray:
    """Sample average of ``model.moment`` over all records."""
    theta = np.asarray(theta, dtype=float)
    if theta.shape != (model.dim,):
        raise ValueError(f"theta has shape {theta.shape}, model expects ({model.dim},)")
    g = model.mean_moment(data, theta)
    _check_finite(model, data, theta, g, "moment")
    return g


def empirical_jacobian(model: ZModel, data: Dataset, theta) -> np.ndarray:
    """Sample average of the per-record Jacobians."""
    theta = np.asarray(theta, dtype=float)
    if theta.shape != (model.dim,):
        raise ValueError(f"theta has shape {theta.shape}, model expects ({model.dim},)")
    J = model.jacobian(data, theta)
    _check_finite(model, data, theta, J, "Jacobian")
    return J


def finite_difference_jacobian(model: ZModel, record, theta, step: float = 1e-6) -> np.ndarray:
    """Central-difference Jacobian of ``model.moment`` at one record.

    ``step`` is relative: coordinate j is perturbed by ``step * max(1, |theta_j|)``.
    """
    if not step > 0:
        raise ValueError("step must be positive")
    theta = np.asarray(theta, dtype=float)
    d = theta.shape[0]
    out = np.empty((d, d))
    for j in range(d):
        hj = step * max(1.0, abs(theta[j]))
        tp = theta.copy()
        tm = theta.copy()
        tp[j] += hj
        tm[j] -= hj
        fp = model.moment(record, tp)
        fm = model.moment(record, tm)
        if not (np.all(np.isfinite(fp)) and np.all(np.isfinite(fm))):
            raise NumericDomainError(f"non-finite probe evaluation along coordinate {j}")
        out[:, j] = (fp - fm) / (2.0 * hj)
    return out


def _newton_direction(J, g, config: SolverConfig):
    d = J.shape[0]
    base = J + config.jacobian_regularization * np.eye(d) if config.jacobian_regularization else J
    try:
        step = np.linalg.solve(base, -g)
        if np.all(np.isfinite(step)):
            return step, False
    except np.linalg.LinAlgError:
        pass
    try:
        step = np.linalg.solve(base + config.ridge_escalation * np.eye(d), -g)
        if np.all(np.isfinite(step)):
            return step, True
    except np.linalg.LinAlgError:
        pass
    with np.errstate(all="ignore"):
        cond = float(np.linalg.cond(J)) if np.all(np.isfinite(J)) else float("inf")
    raise SolverError(f"Newton system singular after ridge escalation (cond={cond:.3g})",
                      condition_number=cond)


def _project(theta, radius):
    if radius is None:
        return theta
    norm = np.linalg.norm(theta)
    if norm > radius:
        return theta * (radius / norm)
    return theta


def solve_z(model: ZModel, data: Dataset, init=None, config: SolverConfig | None = None) -> SolveResult:
    """Solve the empirical moment equations by damped Newton iteration.

    Each iteration solves ``J(theta) step = -g(theta)`` and halves the step
    until the residual norm decreases, down to ``config.min_step``.  A stalled
    line search or an exhausted iteration budget returns a result with
    ``converged=False``; a Newton system that stays singular after one ridge
    escalation raises ``SolverError``.
    """
    config = config or SolverConfig()
    if data.n < 2:
        raise ValueError("need at least two records")
    model.validate(data)
    theta = model.initial_theta(data) if init is None else np.array(init, dtype=float)
    if theta.shape != (model.dim,):
        raise ValueError(f"init has shape {theta.shape}, model expects ({model.dim},)")
    if not np.all(np.isfinite(theta)):
        raise ValueError("init must be finite")
    theta = _project(theta, config.box_radius)

    g = empirical_moment(model, data, theta)
    r = float(np.linalg.norm(g))
    iterations = 0
    ridge_used = False
    tol = config.residual_tolerance
    while r > tol and iterations < config.max_iterations:
        J = model.jacobian(data, theta)
        if not np.all(np.isfinite(J)):
            _check_finite(model, data, theta, J, "Jacobian")
        step, ridged = _newton_direction(J, g, config)
        ridge_used |= ridged
        t = 1.0
        while True:
            cand = _project(theta + t * step, config.box_radius)
            try:
                gc = empirical_moment(model, data, cand)
                rc = float(np.linalg.norm(gc))
            except NumericDomainError:
                rc = np.inf
            if rc < r:
                break
            t *= 0.5
            if t < config.min_step:
                return SolveResult(theta, r, iterations, False, ridge_used)
        theta, g, r = cand, gc, rc
        iterations += 1
    return SolveResult(theta, r, iterations, r <= tol, ridge_used)


def loo_solve(model: ZModel, data: Dataset, leave_out: int, warm_start=None,
              config: SolverConfig | None = None) -> SolveResult:
    """Solve the moment equations with record ``leave_out`` deleted."""
    if not 0 <= leave_out < data.n:
        raise IndexError(f"leave_out={leave_out} out of range for n={data.n}")
    reduced = data.drop(leave_out)
    if reduced.n < 2:
        # a single remaining record: its own root, solved without the n >= 2 guard
        return _solve_single(model, reduced, warm_start, config or SolverConfig(), leave_out)
    try:
        return solve_z(model, reduced, warm_start, config)
    except SolverError as exc:
        raise SolverError(f"leave-out {leave_out}: {exc}", exc.condition_number, index=leave_out) from exc
    except NumericDomainError as exc:
        raise NumericDomainError(f"leave-out {leave_out}: {exc}", index=leave_out) from exc


def _solve_single(model, data, init, config, leave_out):
    # duplicate the lone record: same moment equations, passes the n >= 2 guard
    doubled = data.take(np.array([0, 0]))
    try:
        return solve_z(model, doubled, init, config)
    except SolverError as exc:
        raise SolverError(f"leave-out {leave_out}: {exc}", exc.condition_number, index=leave_out) from exc
