"""Plug-in and jackknife-corrected functional estimates with variance and CIs.

Every variance in this module is on the scale of the point estimate, i.e. it
already carries the ``1/n`` factor.
"""

from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Any

import numpy as np

from .data import Dataset
from .errors import (
    JackknifeUndefinedError,
    NumericDomainError,
    RankDeficiencyError,
    SolverError,
)
from .zcore import SolveResult, SolverConfig, ZModel, empirical_jacobian, loo_solve, solve_z

Z_CRIT = 1.96

METHODS = ("plugin", "jackknife", "kline", "jeffreys", "jive1", "jive2", "tsls")


@dataclass(frozen=True)
class EstimateReport:
    """Point estimate of the target functional with its variance and 95% interval.

    ``variance`` is the raw (un-rescaled) variance of ``point``.
    ``bias_estimate`` is the correction subtracted by the jackknife; zero
    for every other method.
    """

    point: float
    variance: float
    ci_low: float
    ci_high: float
    method: str
    bias_estimate: float = 0.0
    diagnostics: dict[str, Any] = field(default_factory=dict, compare=False)

    @property
    def sigma(self) -> float:
        return float(np.sqrt(self.variance))

    @classmethod
    def build(cls, point, variance, method, bias_estimate=0.0, **diagnostics) -> "EstimateReport":
        if method not in METHODS:
            raise ValueError(f"unknown method tag {method!r}")
        lo, hi = confidence_interval(point, variance)
        return cls(float(point), float(variance), lo, hi, method, float(bias_estimate), diagnostics)


@dataclass(frozen=True)
class LooSet:
    """Leave-one-out solutions; row i is NaN when solve i failed."""

    estimates: np.ndarray
    full: np.ndarray
    failures: list[int]

    @property
    def n(self) -> int:
        return self.estimates.shape[0]

    def functionals(self, model: ZModel) -> np.ndarray:
        self.require_complete()
        return np.array([model.functional(t) for t in self.estimates])

    def require_complete(self) -> None:
        if self.failures:
            raise JackknifeUndefinedError(self.failures)


def _loo_one(model, data, i, warm, config):
    try:
        res = loo_solve(model, data, i, warm, config)
    except (SolverError, NumericDomainError):
        return None
    return res.theta if res.converged else None


def compute_loo_set(model: ZModel, data: Dataset, full_solve: SolveResult,
                    config: SolverConfig | None = None, workers: int | None = None) -> LooSet:
    """Solve all n leave-one-out problems, each warm-started at the full estimate.

    With ``workers > 1`` the sub-problems run on a thread pool; results are
    merged in index order, so the output does not depend on scheduling.
    """
    if not full_solve.converged:
        raise ValueError("full-sample solve did not converge")
    config = config or SolverConfig()
    warm = full_solve.theta
    n = data.n
    if workers and workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            thetas = list(pool.map(lambda i: _loo_one(model, data, i, warm, config), range(n)))
    else:
        thetas = [_loo_one(model, data, i, warm, config) for i in range(n)]
    est = np.full((n, model.dim), np.nan)
    failures = []
    for i, t in enumerate(thetas):
        if t is None:
            failures.append(i)
        else:
            est[i] = t
    return LooSet(est, np.array(warm, dtype=float), failures)


def plugin_estimate(model: ZModel, full_solve: SolveResult) -> float:
    """``tau(theta_hat)``."""
    if not full_solve.converged:
        raise ValueError("full-sample solve did not converge")
    return model.functional(full_solve.theta)


def jackknife_estimate(model: ZModel, full_solve: SolveResult, loo: LooSet) -> EstimateReport:
    """Jackknife-corrected estimate ``tau(theta_hat) - (n-1)/n * sum_i (tau_i - tau(theta_hat))``.

    The returned report carries the point and the subtracted correction; its
    variance is left at NaN (see ``jackknife_report`` for the full report).
    """
    loo.require_complete()
    n = loo.n
    plug = plugin_estimate(model, full_solve)
    taus = loo.functionals(model)
    correction = (n - 1) / n * float(np.sum(taus - plug))
    point = plug - correction
    return EstimateReport(point, float("nan"), float("nan"), float("nan"), "jackknife", correction,
                          {"loo_failures": 0, "plugin": plug})


def jackknife_variance(model: ZModel, loo: LooSet) -> float:
    """``(n-1)/n * sum_i (tau_i - mean_j tau_j)^2``."""
    loo.require_complete()
    taus = loo.functionals(model)
    n = taus.shape[0]
    dev = taus - taus.mean()
    return float((n - 1) / n * (dev @ dev))


def sandwich_variance(model: ZModel, data: Dataset, full_solve: SolveResult) -> float:
    """Plug-in sandwich ``g' J^{-T} C J^{-1} g / n`` at ``theta_hat``.

    ``C`` is the uncentred average of moment outer products.
    """
    theta = full_solve.theta
    J = empirical_jacobian(model, data, theta)
    g = model.functional_gradient(theta)
    try:
        u = np.linalg.solve(J.T, g)
    except np.linalg.LinAlgError:
        u = None
    if u is None or not np.all(np.isfinite(u)):
        cond = float(np.linalg.cond(J))
        raise RankDeficiencyError(f"empirical Jacobian is singular (cond={cond:.3g})", cond)
    # u' C u with C = H'H / n, computed as ||H u||^2 / n
    Hu = model.moments(data, theta) @ u
    return float(Hu @ Hu / data.n) / data.n


def confidence_interval(point: float, variance: float) -> tuple[float, float]:
    """Symmetric normal interval ``point -/+ 1.96 sqrt(variance)``."""
    if variance < 0 or np.isnan(variance):
        raise ValueError(f"variance must be non-negative, got {variance}")
    half = Z_CRIT * float(np.sqrt(variance))
    return float(point - half), float(point + half)


# --------------------------------------------------------------------------
# one-call reports


def plugin_report(model: ZModel, data: Dataset, full_solve: SolveResult) -> EstimateReport:
    """Plug-in point with the sandwich variance."""
    return EstimateReport.build(plugin_estimate(model, full_solve),
                                sandwich_variance(model, data, full_solve), "plugin")


def jackknife_report(model: ZModel, full_solve: SolveResult, loo: LooSet) -> EstimateReport:
    """Jackknife point with the jackknife variance."""
    est = jackknife_estimate(model, full_solve, loo)
    var = jackknife_variance(model, loo)
    return EstimateReport.build(est.point, var, "jackknife", est.bias_estimate,
                                loo_failures=0, plugin=est.diagnostics["plugin"],
                                degenerate_variance=var == 0.0)


def estimate(model: ZModel, data: Dataset, method: str = "jackknife", init=None,
             config: SolverConfig | None = None, workers: int | None = None) -> EstimateReport:
    """Solve, then report either the plug-in or the jackknife estimate."""
    full = solve_z(model, data, init, config)
    if not full.converged:
        raise SolverError(f"full-sample solve did not converge (residual {full.residual_norm:.3g})")
    if method == "plugin":
        return plugin_report(model, data, full)
    if method == "jackknife":
        return jackknife_report(model, full, compute_loo_set(model, data, full, config, workers))
    raise ValueError(f"method must be 'plugin' or 'jackknife', got {method!r}")
