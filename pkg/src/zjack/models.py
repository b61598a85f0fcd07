"""Concrete Z-models: location, linear regression, logistic, IPW and TSLS."""

from __future__ import annotations

import numpy as np
from scipy.special import expit

from .data import Dataset
from .errors import OverlapError, RankDeficiencyError, RecordValidationError
from .zcore import (
    Functional,
    LinearFunctional,
    QuadraticFunctional,
    SolverConfig,
    ZModel,
    solve_z,
)

__all__ = [
    "LocationModel",
    "LinearModel",
    "LogisticModel",
    "IpwModel",
    "TslsModel",
    "linear_model",
    "logistic_model",
    "ipw_model",
    "tsls_model",
]


def _require(data: Dataset, *names: str):
    missing = [k for k in names if k not in data.columns]
    if missing:
        raise RecordValidationError(f"dataset is missing columns {missing}")


def _require_finite(data: Dataset, *names: str):
    for k in names:
        v = data[k]
        if not np.all(np.isfinite(v)):
            bad = np.flatnonzero(~np.all(np.isfinite(v.reshape(v.shape[0], -1)), axis=1))
            raise RecordValidationError(f"non-finite entry in column {k!r} at record {int(bad[0])}")


class LocationModel(ZModel):
    """``h(z, theta) = z - theta``; the root is the sample mean."""

    def __init__(self, dim: int = 1, functional: Functional | None = None):
        self.dim = dim
        self.target = functional or LinearFunctional(np.ones(dim) if dim == 1 else np.eye(dim)[0])

    def validate(self, data):
        _require(data, "z")
        if data["z"].shape[1] != self.dim:
            raise RecordValidationError(f"records have width {data['z'].shape[1]}, expected {self.dim}")
        _require_finite(data, "z")

    def moments(self, data, theta):
        return data["z"] - theta

    def mean_moment(self, data, theta):
        return data["z"].mean(axis=0) - theta

    def record_jacobians(self, data, theta):
        return np.broadcast_to(-np.eye(self.dim), (data.n, self.dim, self.dim)).copy()

    def jacobian(self, data, theta):
        return -np.eye(self.dim)

    def jvp(self, data, theta, v):
        return np.broadcast_to(-np.asarray(v, dtype=float), (data.n, self.dim)).copy()

    def curvature(self, data, theta, v):
        return np.zeros((self.dim, self.dim))


# --------------------------------------------------------------------------
# linear regression with a smooth score f


def _identity(t):
    return t, np.ones_like(t), np.zeros_like(t)


def _pseudo_huber(delta):
    def f(t):
        u = 1.0 + (t / delta) ** 2
        s = np.sqrt(u)
        return t / s, 1.0 / (u * s), -3.0 * t / (delta ** 2 * u * u * s)
    return f


class LinearModel(ZModel):
    """``h(z, theta) = x f(y - <x, theta>)`` with ``f`` identity or pseudo-Huber.

    The pseudo-Huber score is ``f(t) = t / sqrt(1 + t^2/delta^2)``.
    """

    def __init__(self, dim: int, f: str = "identity", delta: float = 1.0,
                 functional: Functional | None = None):
        if f == "identity":
            self._f = _identity
        elif f == "pseudo_huber":
            if not delta > 0:
                raise ValueError("pseudo-Huber delta must be positive")
            self._f = _pseudo_huber(float(delta))
        else:
            raise ValueError(f"unknown score {f!r}; expected 'identity' or 'pseudo_huber'")
        self.f_name = f
        self.delta = float(delta)
        self.dim = int(dim)
        if functional is None:
            functional = QuadraticFunctional(np.eye(self.dim))
        fdim = getattr(functional, "dim", self.dim)
        if fdim != self.dim:
            raise ValueError(f"functional has dimension {fdim}, model has {self.dim}")
        self.target = functional

    @property
    def is_ols(self) -> bool:
        return self.f_name == "identity"

    def validate(self, data):
        _require(data, "X", "y")
        if data["X"].ndim != 2 or data["X"].shape[1] != self.dim:
            raise RecordValidationError(f"covariates have shape {data['X'].shape}, expected (n, {self.dim})")
        _require_finite(data, "X", "y")

    def _resid(self, data, theta):
        return data["y"] - data["X"] @ theta

    def moments(self, data, theta):
        f, _, _ = self._f(self._resid(data, theta))
        return data["X"] * f[:, None]

    def mean_moment(self, data, theta):
        f, _, _ = self._f(self._resid(data, theta))
        return data["X"].T @ f / data.n

    def record_jacobians(self, data, theta):
        X = data["X"]
        _, fp, _ = self._f(self._resid(data, theta))
        return -fp[:, None, None] * X[:, :, None] * X[:, None, :]

    def jacobian(self, data, theta):
        X = data["X"]
        if self.is_ols:
            return -(X.T @ X) / data.n
        _, fp, _ = self._f(self._resid(data, theta))
        return -(X.T * fp) @ X / data.n

    def jvp(self, data, theta, v):
        X = data["X"]
        _, fp, _ = self._f(self._resid(data, theta))
        return -X * (fp * (X @ v))[:, None]

    def curvature(self, data, theta, v):
        X = data["X"]
        _, _, fpp = self._f(self._resid(data, theta))
        w = fpp * (X @ v)
        return (X.T * w) @ X / data.n

    def initial_theta(self, data):
        return np.zeros(self.dim)


def linear_model(dim: int, f_choice: str = "identity", functional: Functional | None = None,
                 delta: float = 1.0) -> LinearModel:
    return LinearModel(dim, f=f_choice, delta=delta, functional=functional)


# --------------------------------------------------------------------------
# logistic regression


def _dlogistic(t):
    p = expit(t)
    return p, p * (1.0 - p)


class LogisticModel(ZModel):
    """Logistic MLE score ``h(z, theta) = x (y - phi(<theta, x>))``.

    With ``with_intercept`` the records must carry a leading column of ones;
    the intercept is then ``theta[0]``.  The default target is ``theta[0]``.
    """

    def __init__(self, dim: int, with_intercept: bool = True, functional: Functional | None = None):
        self.dim = int(dim)
        self.with_intercept = with_intercept
        self.target = functional or LinearFunctional.coordinate(self.dim, 0)

    def validate(self, data):
        _require(data, "X", "y")
        X, y = data["X"], data["y"]
        if X.ndim != 2 or X.shape[1] != self.dim:
            raise RecordValidationError(f"covariates have shape {X.shape}, expected (n, {self.dim})")
        _require_finite(data, "X", "y")
        bad = np.flatnonzero((y != 0) & (y != 1))
        if bad.size:
            raise RecordValidationError(f"response must be 0 or 1; record {int(bad[0])} has y={y[bad[0]]}")
        if self.with_intercept and not np.all(X[:, 0] == 1.0):
            raise RecordValidationError("intercept column (leading ones) missing")

    def moments(self, data, theta):
        X = data["X"]
        return X * (data["y"] - expit(X @ theta))[:, None]

    def mean_moment(self, data, theta):
        X = data["X"]
        return X.T @ (data["y"] - expit(X @ theta)) / data.n

    def record_jacobians(self, data, theta):
        X = data["X"]
        _, w = _dlogistic(X @ theta)
        return -w[:, None, None] * X[:, :, None] * X[:, None, :]

    def jacobian(self, data, theta):
        X = data["X"]
        _, w = _dlogistic(X @ theta)
        return -(X.T * w) @ X / data.n

    def jvp(self, data, theta, v):
        X = data["X"]
        _, w = _dlogistic(X @ theta)
        return -X * (w * (X @ v))[:, None]

    def curvature(self, data, theta, v):
        X = data["X"]
        p, w = _dlogistic(X @ theta)
        wpp = w * (1.0 - 2.0 * p)
        return -(X.T * (wpp * (X @ v))) @ X / data.n


def logistic_model(dim: int, with_intercept: bool = True,
                   functional: Functional | None = None) -> LogisticModel:
    return LogisticModel(dim, with_intercept=with_intercept, functional=functional)


# --------------------------------------------------------------------------
# inverse propensity weighting


class IpwModel(ZModel):
    """Stacked logistic propensity score and IPW mean equation.

    ``theta = (beta, tau)`` with ``beta`` of length ``d - 1``.  The target is
    the last coordinate.  Inverse propensities are evaluated as
    ``1 + exp(-t)`` and ``1 + exp(t)`` so they stay exact far into the tails.
    """

    def __init__(self, dim: int):
        if dim < 2:
            raise ValueError("IPW model needs at least one covariate (dim >= 2)")
        self.dim = int(dim)
        self.target = LinearFunctional.coordinate(self.dim, self.dim - 1)

    def validate(self, data):
        _require(data, "X", "a", "y")
        X = data["X"]
        if X.ndim != 2 or X.shape[1] != self.dim - 1:
            raise RecordValidationError(f"covariates have shape {X.shape}, expected (n, {self.dim - 1})")
        _require_finite(data, "X", "a", "y")
        bad = np.flatnonzero((data["a"] != 0) & (data["a"] != 1))
        if bad.size:
            raise RecordValidationError(f"treatment must be 0 or 1; record {int(bad[0])} has a={data['a'][bad[0]]}")

    def _parts(self, data, theta):
        X, a, y = data["X"], data["a"], data["y"]
        t = X @ theta[:-1]
        with np.errstate(over="ignore"):
            inv_p = 1.0 + np.exp(-t)       # 1 / phi(t)
            inv_q = 1.0 + np.exp(t)        # 1 / (1 - phi(t))
        # only the arm that was observed contributes
        ipw = np.where(a == 1, y * inv_p, 0.0) - np.where(a == 0, y * inv_q, 0.0)
        return X, a, y, t, inv_p, inv_q, ipw

    def moments(self, data, theta):
        X, a, y, t, _, _, ipw = self._parts(data, theta)
        out = np.empty((data.n, self.dim))
        out[:, :-1] = X * (a - expit(t))[:, None]
        out[:, -1] = ipw - theta[-1]
        return out

    def mean_moment(self, data, theta):
        X, a, y, t, _, _, ipw = self._parts(data, theta)
        out = np.empty(self.dim)
        out[:-1] = X.T @ (a - expit(t)) / data.n
        out[-1] = ipw.mean() - theta[-1]
        return out

    def _ipw_slope(self, a, y, inv_p, inv_q):
        # d/dt of the IPW summand: -a y e^{-t} - (1 - a) y e^{t}
        return -np.where(a == 1, y * (inv_p - 1.0), 0.0) - np.where(a == 0, y * (inv_q - 1.0), 0.0)

    def record_jacobians(self, data, theta):
        X, a, y, t, inv_p, inv_q, _ = self._parts(data, theta)
        _, w = _dlogistic(t)
        n, d = data.n, self.dim
        out = np.zeros((n, d, d))
        out[:, :-1, :-1] = -w[:, None, None] * X[:, :, None] * X[:, None, :]
        out[:, -1, :-1] = self._ipw_slope(a, y, inv_p, inv_q)[:, None] * X
        out[:, -1, -1] = -1.0
        return out

    def jacobian(self, data, theta):
        X, a, y, t, inv_p, inv_q, _ = self._parts(data, theta)
        _, w = _dlogistic(t)
        d = self.dim
        out = np.zeros((d, d))
        out[:-1, :-1] = -(X.T * w) @ X / data.n
        out[-1, :-1] = X.T @ self._ipw_slope(a, y, inv_p, inv_q) / data.n
        out[-1, -1] = -1.0
        return out

    def curvature(self, data, theta, v):
        X, a, y, t, inv_p, inv_q, _ = self._parts(data, theta)
        p, w = _dlogistic(t)
        wpp = w * (1.0 - 2.0 * p)
        # second t-derivative of the IPW summand: a y e^{-t} - (1 - a) y e^{t}
        ipw_curv = np.where(a == 1, y * (inv_p - 1.0), 0.0) - np.where(a == 0, y * (inv_q - 1.0), 0.0)
        coef = -(X @ v[:-1]) * wpp + v[-1] * ipw_curv
        d = self.dim
        out = np.zeros((d, d))
        out[:-1, :-1] = (X.T * coef) @ X / data.n
        return out

    def check_overlap(self, data, theta) -> None:
        """Raise ``OverlapError`` if a fitted propensity is exactly 0 or 1 where it is inverted."""
        p = expit(data["X"] @ np.asarray(theta, dtype=float)[:-1])
        a = data["a"]
        bad = np.flatnonzero(((a == 1) & (p == 0.0)) | ((a == 0) & (p == 1.0)))
        if bad.size:
            raise OverlapError(f"fitted propensity is degenerate at record {int(bad[0])} "
                               f"(a={int(a[bad[0]])}, p={p[bad[0]]})")

    def solve_exact(self, data, config: SolverConfig | None = None, init=None) -> np.ndarray:
        """Two-stage solution: logistic MLE for beta, then the IPW average for tau."""
        self.validate(data)
        prop = LogisticModel(self.dim - 1, with_intercept=False)
        beta0 = None if init is None else np.asarray(init, dtype=float)[:-1]
        res = solve_z(prop, Dataset({"X": data["X"], "y": data["a"]}), beta0, config)
        if not res.converged:
            raise RuntimeError(f"propensity fit did not converge (residual {res.residual_norm:.3g})")
        theta = np.append(res.theta, 0.0)
        self.check_overlap(data, theta)
        theta[-1] = self._parts(data, theta)[-1].mean()
        return theta


def ipw_model(dim: int) -> IpwModel:
    return IpwModel(dim)


# --------------------------------------------------------------------------
# two-stage least squares


class TslsModel(ZModel):
    """TSLS as a stacked Z-estimator with ``theta = (alpha, beta, pi)``.

    Moment rows, ordered to line up with ``theta``: the intercept equation
    ``y - x beta - alpha``, the instrumented normal equation
    ``(w' pi)(y - x beta - alpha)`` and the first stage ``w x - w w' pi``
    (length k).  The target is ``beta``.
    """

    def __init__(self, k: int):
        if k < 2:
            raise ValueError("need at least two instruments")
        self.k = int(k)
        self.dim = self.k + 2
        self.target = LinearFunctional.coordinate(self.dim, 1)

    def validate(self, data):
        _require(data, "W", "x", "y")
        if data["W"].ndim != 2 or data["W"].shape[1] != self.k:
            raise RecordValidationError(f"instruments have shape {data['W'].shape}, expected (n, {self.k})")
        _require_finite(data, "W", "x", "y")

    def _parts(self, data, theta):
        W, x, y = data["W"], data["x"], data["y"]
        s = W @ theta[2:]
        e = y - x * theta[1] - theta[0]
        return W, x, s, e

    def moments(self, data, theta):
        W, x, s, e = self._parts(data, theta)
        out = np.empty((data.n, self.dim))
        out[:, 0] = e
        out[:, 1] = s * e
        out[:, 2:] = W * (x - s)[:, None]
        return out

    def mean_moment(self, data, theta):
        W, x, s, e = self._parts(data, theta)
        out = np.empty(self.dim)
        out[0] = e.mean()
        out[1] = s @ e / data.n
        out[2:] = W.T @ (x - s) / data.n
        return out

    def record_jacobians(self, data, theta):
        W, x, s, e = self._parts(data, theta)
        out = np.zeros((data.n, self.dim, self.dim))
        out[:, 0, 0] = -1.0
        out[:, 0, 1] = -x
        out[:, 1, 0] = -s
        out[:, 1, 1] = -s * x
        out[:, 1, 2:] = W * e[:, None]
        out[:, 2:, 2:] = -W[:, :, None] * W[:, None, :]
        return out

    def jacobian(self, data, theta):
        W, x, s, e = self._parts(data, theta)
        n = data.n
        out = np.zeros((self.dim, self.dim))
        out[0, 0] = -1.0
        out[0, 1] = -x.mean()
        out[1, 0] = -s.mean()
        out[1, 1] = -(s @ x) / n
        out[1, 2:] = W.T @ e / n
        out[2:, 2:] = -(W.T @ W) / n
        return out

    def curvature(self, data, theta, v):
        # only the instrumented row is non-affine: d2/(d alpha d pi) = -w, d2/(d beta d pi) = -w x
        W, x = data["W"], data["x"]
        c = float(v[1])
        out = np.zeros((self.dim, self.dim))
        ga = -c * W.mean(axis=0)
        gb = -c * (W.T @ x) / data.n
        out[0, 2:] = out[2:, 0] = ga
        out[1, 2:] = out[2:, 1] = gb
        return out

    def initial_theta(self, data):
        W, x, y = data["W"], data["x"], data["y"]
        pi = np.linalg.lstsq(W, x, rcond=None)[0]
        return np.concatenate([_second_stage(W @ pi, x, y), pi])

    def solve_exact(self, data) -> np.ndarray:
        """First stage for ``pi``, then the instrumented regression for ``(alpha, beta)``.

        Raises ``RankDeficiencyError`` when the instrument Gram matrix is singular.
        """
        self.validate(data)
        W, x, y = data["W"], data["x"], data["y"]
        G = W.T @ W
        cond = np.linalg.cond(G)
        if not np.isfinite(cond) or cond > 1e12:
            raise RankDeficiencyError(f"instrument Gram matrix is singular (cond={cond:.3g})", cond)
        pi = np.linalg.solve(G, W.T @ x)
        return np.concatenate([_second_stage(W @ pi, x, y), pi])


def _second_stage(xhat, x, y):
    """Solve ``sum (1, xhat)' (y - alpha - x beta) = 0`` for ``(alpha, beta)``."""
    n = x.shape[0]
    A = np.array([[n, x.sum()], [xhat.sum(), xhat @ x]])
    b = np.array([y.sum(), xhat @ y])
    try:
        return np.linalg.solve(A, b)
    except np.linalg.LinAlgError as exc:
        raise RankDeficiencyError("second-stage system is singular", float("inf")) from exc


def tsls_model(k: int) -> TslsModel:
    return TslsModel(k)
