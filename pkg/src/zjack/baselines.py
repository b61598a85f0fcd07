"""Problem-specific comparison estimators.

These exploit the structure of one model family, unlike the black-box
jackknife: the leave-one-out unbiased quadratic estimator for OLS, the
Firth/Jeffreys-penalised logistic MLE, JIVE1/JIVE2 for instrumental
variables, and a record-level bootstrap variance.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np
from scipy.linalg import cho_factor, cho_solve
from scipy.special import expit

from .data import Dataset
from .errors import (
    DegenerateLeverageError,
    RankDeficiencyError,
    SolverError,
    UnreliableVarianceError,
    ZJackError,
)
from .jackknife import EstimateReport, LooSet
from .rng import stream
from .zcore import LinearFunctional, SolverConfig

__all__ = [
    "BootstrapConfig",
    "kline_estimate",
    "jeffreys_logistic",
    "jive_fitted_values",
    "jive_point",
    "jive_estimates",
    "tsls_point",
    "bootstrap_replicates",
    "bootstrap_variance",
]


def _chol(G, what="Gram matrix"):
    """Cholesky factor of an SPD matrix, or ``RankDeficiencyError`` with a condition number."""
    try:
        c = cho_factor(G)
    except np.linalg.LinAlgError:
        c = None
    if c is not None:
        diag = np.abs(np.diag(c[0]))
        if diag.min() > 0 and (diag.max() / diag.min()) ** 2 < 1e12:
            return c
    cond = float(np.linalg.cond(G))
    raise RankDeficiencyError(f"{what} is singular (cond={cond:.3g})", cond)


# --------------------------------------------------------------------------
# quadratic functional in OLS


def kline_estimate(data: Dataset, Q, loo: LooSet) -> EstimateReport:
    """Leave-one-out unbiased estimate of ``theta' Q theta`` under OLS.

    ``loo`` must hold OLS leave-one-out fits (``loo.full`` is the full fit).
    The per-record noise proxies ``y_i (y_i - x_i' theta_(-i))`` may be
    negative; they are used as-is in the point estimate and the variance is
    floored at zero.
    """
    loo.require_complete()
    X, y = data["X"], data["y"]
    n = data.n
    Q = np.atleast_2d(np.asarray(Q, dtype=float))
    theta = loo.full
    S = _chol(X.T @ X / n, "covariate second-moment matrix")
    sig2 = y * (y - np.einsum("ij,ij->i", X, loo.estimates))
    SiX = cho_solve(S, X.T)                           # S^{-1} x_i as columns
    quad = np.einsum("ji,jk,ki->i", SiX, Q, SiX)      # x_i' S^{-1} Q S^{-1} x_i
    point = float(theta @ Q @ theta - (quad @ sig2) / n ** 2)
    grad = 2.0 * Q @ theta
    lin = grad @ SiX
    var = max(float(np.mean(lin ** 2 * sig2)), 0.0) / n
    return EstimateReport.build(point, var, "kline", negative_noise=int(np.sum(sig2 < 0)))


# --------------------------------------------------------------------------
# Firth / Jeffreys logistic regression


def _firth_parts(X, y, theta):
    p = expit(X @ theta)
    w = p * (1.0 - p)
    info = (X.T * w) @ X
    c = cho_factor(info)
    A = X @ cho_solve(c, X.T)                         # X (X'WX)^{-1} X'
    a = np.diag(A)
    h = w * a                                         # leverages of the weighted hat matrix
    score = X.T @ (y - p + h * (0.5 - p))
    logdet = 2.0 * np.sum(np.log(np.diag(c[0])))
    with np.errstate(divide="ignore"):
        loglik = float(np.sum(y * np.log(p) + (1 - y) * np.log1p(-p)))
    # Hessian of loglik + logdet(X'WX)/2; dw/dt = w(1-2p) = v, dv/dt = w(1-6w)
    v = w * (1.0 - 2.0 * p)
    pen = 0.5 * (X.T * (a * w * (1.0 - 6.0 * w))) @ X - 0.5 * (X * v[:, None]).T @ (A ** 2) @ (X * v[:, None])
    hess = pen - info
    return score, c, loglik + 0.5 * logdet, hess


def _ascent_direction(score, c, hess):
    """Newton direction on the penalised log-likelihood, or the Fisher step if it is not concave."""
    try:
        return cho_solve(cho_factor(-hess), score)
    except np.linalg.LinAlgError:
        return cho_solve(c, score)


def jeffreys_logistic(data: Dataset, config: SolverConfig | None = None, functional=None,
                      init=None) -> EstimateReport:
    """Firth-penalised logistic regression.

    Maximises ``loglik + log det(X'WX) / 2``, whose gradient is the adjusted
    score ``sum_i x_i (y_i - p_i + h_i (1/2 - p_i))``, by Newton's method with
    step halving (falling back to a Fisher-scoring step where the penalised
    log-likelihood is not locally concave).  The variance is the target's
    entry of the inverse information ``(X'WX)^{-1}`` at the solution, already
    on the point scale.  ``data`` uses the logistic layout (``X`` with any
    intercept column included, ``y`` in {0, 1}); the default target is
    ``theta[0]``.
    """
    config = config or SolverConfig()
    X, y = data["X"], data["y"]
    n, d = X.shape
    if np.any((y != 0) & (y != 1)):
        raise ValueError("responses must be 0 or 1")
    target = functional or LinearFunctional.coordinate(d, 0)
    theta = np.zeros(d) if init is None else np.array(init, dtype=float)
    try:
        score, c, pll, hess = _firth_parts(X, y, theta)
    except np.linalg.LinAlgError as exc:
        raise RankDeficiencyError("design matrix is not of full rank") from exc
    iterations = 0
    while np.linalg.norm(score) / n > config.residual_tolerance:
        if iterations == config.max_iterations:
            raise SolverError(f"Firth iteration did not converge in {config.max_iterations} iterations")
        step = _ascent_direction(score, c, hess)
        t = 1.0
        while True:
            cand = theta + t * step
            try:
                parts = _firth_parts(X, y, cand)
                ok = np.isfinite(parts[2]) and (parts[2] >= pll - 1e-12 * abs(pll)
                                                or np.linalg.norm(parts[0]) < np.linalg.norm(score))
            except np.linalg.LinAlgError:
                ok = False
            if ok:
                break
            t *= 0.5
            if t < config.min_step:
                raise SolverError("Firth iteration stalled in line search")
        theta = cand
        score, c, pll, hess = parts
        iterations += 1
    g = target.gradient(theta)
    var = float(g @ cho_solve(c, g))
    return EstimateReport.build(target.value(theta), var, "jeffreys",
                                theta=theta, iterations=iterations)


# --------------------------------------------------------------------------
# instrumental variables


def _first_stage(W, x, leverage: bool = False):
    """Projection of ``x`` onto the column span of ``W``, plus leverages if asked.

    Uses a Cholesky solve when ``W'W`` is well conditioned and the
    Moore-Penrose inverse otherwise (e.g. an instrument level absent from a
    resample), where fitted values and leverages are still unique.
    """
    G = W.T @ W
    try:
        c = _chol(G)
        Wx = cho_solve(c, W.T @ x)
        GiW = cho_solve(c, W.T) if leverage else None
    except RankDeficiencyError:
        Gp = np.linalg.pinv(G, hermitian=True)
        Wx = Gp @ (W.T @ x)
        GiW = Gp @ W.T if leverage else None
    fitted = W @ Wx
    h = np.einsum("ij,ji->i", W, GiW) if leverage else None
    return fitted, h


def tsls_point(data: Dataset) -> float:
    """TSLS slope: first stage on ``W``, then ``y`` on ``(1, x)`` instrumented by ``(1, xhat)``."""
    fitted, _ = _first_stage(data["W"], data["x"])
    return _iv_slope(fitted, data["x"], data["y"])


def _iv_slope(xhat, x, y):
    n = x.shape[0]
    A = np.array([[n, x.sum()], [xhat.sum(), xhat @ x]])
    b = np.array([y.sum(), xhat @ y])
    try:
        sol = np.linalg.solve(A, b)
    except np.linalg.LinAlgError as exc:
        raise RankDeficiencyError("second-stage system is singular", float("inf")) from exc
    return float(sol[1])


def jive_fitted_values(data: Dataset, variant: str, method: str = "closed") -> np.ndarray:
    """Leave-one-out first-stage fitted values.

    ``jive1``: ``w_i' pi_(-i)`` with ``pi_(-i) = (W'W - w_i w_i')^{-1}(W'x - w_i x_i)``,
    i.e. ``(w_i' pi - h_i x_i) / (1 - h_i)``.
    ``jive2``: ``(w_i' pi - h_i x_i) / (1 - 1/n)``, the same deletion with the
    full-sample Gram matrix scaled by ``n / (n - 1)``.

    ``method="closed"`` uses the leverage identity; ``method="refit"`` redoes
    the first stage n times and exists as an independent check.
    """
    if variant not in ("jive1", "jive2"):
        raise ValueError(f"variant must be 'jive1' or 'jive2', got {variant!r}")
    W, x = data["W"], data["x"]
    n = data.n
    if method == "closed":
        fitted, h = _first_stage(W, x, leverage=True)
        if variant == "jive1":
            bad = np.flatnonzero(h >= 1.0 - 1e-10)
            if bad.size:
                raise DegenerateLeverageError(f"leverage is 1 at record {int(bad[0])}; JIVE1 undefined")
            return (fitted - h * x) / (1.0 - h)
        return (fitted - h * x) / (1.0 - 1.0 / n)
    if method == "refit":
        G = W.T @ W
        c = _chol(G, "instrument Gram matrix")
        out = np.empty(n)
        Wx = W.T @ x
        for i in range(n):
            wi = W[i]
            if variant == "jive1":
                Gi = G - np.outer(wi, wi)
                try:
                    ci = cho_factor(Gi)
                except np.linalg.LinAlgError as exc:
                    raise DegenerateLeverageError(f"leverage is 1 at record {i}; JIVE1 undefined") from exc
                pi = cho_solve(ci, Wx - wi * x[i])
            else:
                pi = cho_solve(c, Wx - wi * x[i]) * n / (n - 1)
            out[i] = wi @ pi
        return out
    raise ValueError(f"method must be 'closed' or 'refit', got {method!r}")


def jive_point(data: Dataset, variant: str) -> float:
    return _iv_slope(jive_fitted_values(data, variant), data["x"], data["y"])


def jive_estimates(data: Dataset, variant: str, bootstrap: "BootstrapConfig | None" = None) -> EstimateReport:
    """JIVE1/JIVE2 slope, with a bootstrap variance when ``bootstrap`` is given."""
    point = jive_point(data, variant)
    if bootstrap is None:
        return EstimateReport(point, float("nan"), float("nan"), float("nan"), variant)
    var = bootstrap_variance(lambda d: jive_point(d, variant), data, bootstrap)
    return EstimateReport.build(point, var, variant)


# --------------------------------------------------------------------------
# bootstrap


@dataclass(frozen=True)
class BootstrapConfig:
    replicates: int = 500
    seed: int = 0
    max_failure_rate: float = 0.10

    def __post_init__(self):
        if self.replicates < 2:
            raise ValueError("need at least two bootstrap replicates")


def bootstrap_replicates(estimator: Callable[[Dataset], float], data: Dataset,
                         config: BootstrapConfig) -> tuple[np.ndarray, int]:
    """Estimator values on record-level resamples; returns ``(values, failures)``.

    Replicate b resamples with the stream keyed by ``(seed, b)``.
    """
    n = data.n
    values = []
    failures = 0
    for b in range(config.replicates):
        idx = stream(config.seed, b).integers(0, n, size=n)
        try:
            v = float(estimator(data.take(idx)))
        except (ZJackError, np.linalg.LinAlgError):
            failures += 1
            continue
        if np.isfinite(v):
            values.append(v)
        else:
            failures += 1
    return np.array(values), failures


def bootstrap_variance(estimator: Callable[[Dataset], float], data: Dataset,
                       config: BootstrapConfig | None = None) -> float:
    """Sample variance (denominator T-1) of the bootstrap replicates."""
    config = config or BootstrapConfig()
    values, failures = bootstrap_replicates(estimator, data, config)
    if failures > config.max_failure_rate * config.replicates or values.size < 2:
        raise UnreliableVarianceError(
            f"{failures} of {config.replicates} bootstrap replicates failed", failures, config.replicates)
    return float(np.var(values, ddof=1))
