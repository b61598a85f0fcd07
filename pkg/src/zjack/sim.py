"""Monte Carlo experiments: data generators, the trial runner and metrics.

Families
--------
quad          OLS with X ~ N(0, I_d), eps ~ N(0, 1), theta* = 1/sqrt(d); target ||theta||^2.
quad_misspec  Same design with eps = (||X||^2 - d)/sqrt(2d) + N(0, 1): E[eps X] = 0 but
              E[eps | X] != 0.
logistic      Intercept 1 plus d-1 N(0, 1) covariates with slopes 1/sqrt(d); target the intercept.
iv            One-hot instruments over k = d - 2 levels, first stage pi*_j = 2j/k,
              (eps, eta) Gaussian with variances 0.25 and covariance 0.2; target beta* = 1.
"""

from __future__ import annotations

import csv
import math
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace
from typing import Sequence

import numpy as np

from .baselines import (
    BootstrapConfig,
    bootstrap_variance,
    jeffreys_logistic,
    jive_point,
    kline_estimate,
    tsls_point,
)
from .data import Dataset
from .errors import ConfigError, ZJackError
from .jackknife import (
    EstimateReport,
    compute_loo_set,
    jackknife_report,
    plugin_report,
)
from .models import LinearModel, LogisticModel, TslsModel
from .oracle import estimate_theory, gaussian_ols_theory
from .rng import stream
from .zcore import QuadraticFunctional, SolverConfig, solve_z

FAMILIES = ("quad", "quad_misspec", "logistic", "iv")
FAMILY_ESTIMATORS = {
    "quad": ("plugin", "jackknife", "kline"),
    "quad_misspec": ("plugin", "jackknife", "kline"),
    "logistic": ("plugin", "jackknife", "jeffreys"),
    "iv": ("tsls", "jackknife", "jive1", "jive2"),
}
UNRELIABLE_EXCLUSION_RATE = 0.20

CSV_HEADER = ["family", "n", "d", "estimator", "scale", "bias", "bias_sd", "mse", "mse_sd",
              "coverage", "coverage_sd", "ci_length", "ci_length_sd", "excluded_trials"]
HIST_HEADER = ["trial", "rescaled_error", "standardized_error", "point", "sigma_hat"]


@dataclass(frozen=True)
class Truth:
    theta_star: np.ndarray
    tau_star: float


# --------------------------------------------------------------------------
# generators


def generate_quad(n: int, d: int, rng: np.random.Generator) -> tuple[Dataset, Truth]:
    if d < 1:
        raise ConfigError("quad family needs d >= 1")
    theta = np.ones(d) / np.sqrt(d)
    X = rng.standard_normal((n, d))
    eps = rng.standard_normal(n)
    return Dataset({"X": X, "y": X @ theta + eps}), Truth(theta, 1.0)


def misspec_noise(X: np.ndarray, rng: np.random.Generator, c: float = 1.0) -> np.ndarray:
    d = X.shape[1]
    return c * (np.einsum("ij,ij->i", X, X) - d) / np.sqrt(2 * d) + rng.standard_normal(X.shape[0])


def generate_quad_misspec(n: int, d: int, rng: np.random.Generator) -> tuple[Dataset, Truth]:
    if d < 1:
        raise ConfigError("quad_misspec family needs d >= 1")
    theta = np.ones(d) / np.sqrt(d)
    X = rng.standard_normal((n, d))
    eps = misspec_noise(X, rng)
    return Dataset({"X": X, "y": X @ theta + eps}), Truth(theta, float(theta @ theta))


def generate_logistic(n: int, d: int, rng: np.random.Generator) -> tuple[Dataset, Truth]:
    if d < 1:
        raise ConfigError("logistic family needs d >= 1")
    theta = np.concatenate([[1.0], np.full(d - 1, 1.0 / np.sqrt(d))])
    X = np.empty((n, d))
    X[:, 0] = 1.0
    X[:, 1:] = rng.standard_normal((n, d - 1))
    p = 1.0 / (1.0 + np.exp(-(X @ theta)))
    y = (rng.random(n) < p).astype(float)
    return Dataset({"X": X, "y": y}), Truth(theta, 1.0)


IV_NOISE_COV = np.array([[0.25, 0.2], [0.2, 0.25]])


def generate_iv(n: int, k: int, rng: np.random.Generator) -> tuple[Dataset, Truth]:
    if k < 2:
        raise ConfigError("iv family needs k >= 2 instruments (d >= 4)")
    pi = 2.0 * np.arange(k) / k
    level = rng.integers(0, k, size=n)
    W = np.zeros((n, k))
    W[np.arange(n), level] = 1.0
    noise = rng.multivariate_normal(np.zeros(2), IV_NOISE_COV, size=n, method="cholesky")
    eps, eta = noise[:, 0], noise[:, 1]
    x = W @ pi + eta
    y = 0.0 + 1.0 * x + eps
    return Dataset({"W": W, "x": x, "y": y}), Truth(np.concatenate([[0.0, 1.0], pi]), 1.0)


def generate(family: str, n: int, d: int, rng: np.random.Generator) -> tuple[Dataset, Truth]:
    if family == "quad":
        return generate_quad(n, d, rng)
    if family == "quad_misspec":
        return generate_quad_misspec(n, d, rng)
    if family == "logistic":
        return generate_logistic(n, d, rng)
    if family == "iv":
        return generate_iv(n, d - 2, rng)
    raise ConfigError(f"unknown family {family!r}")


def family_model(family: str, d: int):
    if family in ("quad", "quad_misspec"):
        return LinearModel(d, functional=QuadraticFunctional(np.eye(d)))
    if family == "logistic":
        return LogisticModel(d, with_intercept=True)
    if family == "iv":
        return TslsModel(d - 2)
    raise ConfigError(f"unknown family {family!r}")


def family_nu(family: str, n: int, d: int, draws: int = 200_000, seed: int = 0) -> float:
    """Asymptotic standard deviation ``nu`` of the sqrt(n)-rescaled plug-in error."""
    rng0 = stream(seed, 0)
    _, truth = generate(family, 2, d, rng0)
    if family == "quad":
        return float(np.sqrt(gaussian_ols_theory(truth.theta_star, np.eye(d), 1.0).nu_sq))
    model = family_model(family, d)
    theory = estimate_theory(model, lambda m, rng: generate(family, m, d, rng)[0],
                             truth.theta_star, draws=draws, seed=seed)
    return float(np.sqrt(theory.nu_sq))


# --------------------------------------------------------------------------
# configuration


def dim_from_exponent(n: int, r: float) -> int:
    """``floor(n^r)``, robust to round-off at exact powers."""
    return int(math.floor(n ** r + 1e-9))


@dataclass(frozen=True)
class ExperimentConfig:
    family: str
    n: int
    dim: int | None = None
    dim_exponent: float | None = None
    trials: int = 1000
    seed: int = 0
    estimators: tuple[str, ...] | None = None
    solver: SolverConfig = field(default_factory=SolverConfig)
    bootstrap_replicates: int = 500
    workers: int | None = None

    def __post_init__(self):
        if self.family not in FAMILIES:
            raise ConfigError(f"family must be one of {FAMILIES}, got {self.family!r}")
        if (self.dim is None) == (self.dim_exponent is None):
            raise ConfigError("give exactly one of dim or dim_exponent")
        if self.trials < 1:
            raise ConfigError("trials must be at least 1")
        if self.n < 2:
            raise ConfigError("n must be at least 2")
        d = self.d
        if d < 1 or d >= self.n:
            raise ConfigError(f"need 1 <= d < n, got d={d}, n={self.n}")
        if self.family == "iv" and d < 4:
            raise ConfigError(f"iv family needs d = k + 2 >= 4, got d={d}")
        if self.family == "logistic" and d < 1:
            raise ConfigError("logistic family needs d >= 1")
        allowed = set(FAMILY_ESTIMATORS[self.family]) | ({"plugin"} if self.family == "iv" else set())
        est = self.estimator_list
        bad = [e for e in est if e not in allowed]
        if bad:
            raise ConfigError(f"estimators {bad} not available for family {self.family!r}; "
                              f"choose from {sorted(allowed)}")
        if len(set(est)) != len(est):
            raise ConfigError("duplicate estimators")

    @property
    def d(self) -> int:
        return self.dim if self.dim is not None else dim_from_exponent(self.n, self.dim_exponent)

    @property
    def estimator_list(self) -> tuple[str, ...]:
        if self.estimators is None:
            return FAMILY_ESTIMATORS[self.family]
        if self.family == "iv":
            return tuple("tsls" if e == "plugin" else e for e in self.estimators)
        return tuple(self.estimators)


# --------------------------------------------------------------------------
# a single trial


@dataclass
class TrialResult:
    trial: int
    fingerprint: str
    points: dict[str, float]
    sigmas: dict[str, float]
    excluded: dict[str, str]


def _solver_for(config: ExperimentConfig, truth: Truth) -> SolverConfig:
    if config.solver.box_radius is not None:
        return config.solver
    return replace(config.solver, box_radius=10.0 * float(np.linalg.norm(truth.theta_star)))


def run_trial(config: ExperimentConfig, trial: int) -> TrialResult:
    """Generate dataset ``trial`` and evaluate every requested estimator on it."""
    family, n, d = config.family, config.n, config.d
    data, truth = generate(family, n, d, stream(config.seed, trial, 0))
    ests = config.estimator_list
    points: dict[str, float] = {}
    sigmas: dict[str, float] = {}
    excluded: dict[str, str] = {}

    def record(name, fn):
        try:
            rep: EstimateReport = fn()
        except (ZJackError, np.linalg.LinAlgError) as exc:
            excluded[name] = f"{type(exc).__name__}: {exc}"
            return
        if not (np.isfinite(rep.point) and np.isfinite(rep.variance)):
            excluded[name] = "non-finite estimate"
            return
        points[name] = rep.point
        sigmas[name] = rep.sigma

    model = family_model(family, d)
    solver = _solver_for(config, truth)
    needs_z = [e for e in ests if e in ("plugin", "jackknife", "kline")]
    full = loo = None
    if needs_z:
        try:
            init = model.initial_theta(data)
            full = solve_z(model, data, init, solver)
            if not full.converged:
                raise ZJackError(f"full-sample solve did not converge (residual {full.residual_norm:.3g})")
        except (ZJackError, np.linalg.LinAlgError) as exc:
            for e in needs_z:
                excluded[e] = f"{type(exc).__name__}: {exc}"
            full = None
        if full is not None and ("jackknife" in ests or "kline" in ests):
            loo = compute_loo_set(model, data, full, solver)

    boot = BootstrapConfig(replicates=config.bootstrap_replicates,
                           seed=int(stream(config.seed, trial, 1).integers(0, 2 ** 63)))

    for e in ests:
        if e in excluded:
            continue
        if e == "plugin":
            record(e, lambda: plugin_report(model, data, full))
        elif e == "jackknife":
            record(e, lambda: jackknife_report(model, full, loo))
        elif e == "kline":
            record(e, lambda: kline_estimate(data, model.target.Q, loo))
        elif e == "jeffreys":
            record(e, lambda: jeffreys_logistic(data, solver))
        elif e == "tsls":
            def tsls_report():
                point = tsls_point(data)
                return EstimateReport.build(point, bootstrap_variance(tsls_point, data, boot), "tsls")
            record(e, tsls_report)
        elif e in ("jive1", "jive2"):
            def jive_report(variant=e):
                def point_fn(ds):
                    return jive_point(ds, variant)
                point = point_fn(data)
                return EstimateReport.build(point, bootstrap_variance(point_fn, data, boot), variant)
            record(e, jive_report)
    return TrialResult(trial, data.fingerprint(), points, sigmas, excluded)


# --------------------------------------------------------------------------
# metrics and reports


@dataclass(frozen=True)
class MetricRow:
    family: str
    n: int
    d: int
    estimator: str
    scale: str
    bias: float
    bias_sd: float
    mse: float
    mse_sd: float
    coverage: float
    coverage_sd: float
    ci_length: float
    ci_length_sd: float
    excluded_trials: int

    def as_list(self):
        return [getattr(self, k) for k in CSV_HEADER]


def _se(v):
    # Monte Carlo standard error of the average of v
    return float(np.std(v, ddof=1) / np.sqrt(v.size)) if v.size > 1 else 0.0


def compute_metrics(points, sigmas, tau_star: float) -> dict[str, float]:
    """Bias, MSE, coverage and CI length over trials, with Monte Carlo standard errors.

    Bias is ``|mean(point) - tau*|``; coverage counts ``|point - tau*| <= 1.96 sigma``;
    length is the mean of ``3.92 sigma``.
    """
    points = np.asarray(points, dtype=float)
    sigmas = np.asarray(sigmas, dtype=float)
    if points.size == 0:
        return {k: float("nan") for k in ("bias", "bias_sd", "mse", "mse_sd", "coverage",
                                          "coverage_sd", "ci_length", "ci_length_sd")}
    err = points - tau_star
    sq = err ** 2
    cover = (np.abs(err) <= 1.96 * sigmas).astype(float)
    length = 3.92 * sigmas
    return {
        "bias": float(abs(err.mean())), "bias_sd": _se(err),
        "mse": float(sq.mean()), "mse_sd": _se(sq),
        "coverage": float(cover.mean()), "coverage_sd": _se(cover),
        "ci_length": float(length.mean()), "ci_length_sd": _se(length),
    }


@dataclass
class ExperimentReport:
    config: ExperimentConfig
    tau_star: float
    trials: list[TrialResult]
    rows: list[MetricRow]
    excluded: dict[str, int]

    @property
    def unreliable(self) -> list[str]:
        """Estimators with more than 20% excluded trials."""
        T = self.config.trials
        return [e for e, c in self.excluded.items() if c > UNRELIABLE_EXCLUSION_RATE * T]

    def row(self, estimator: str, scale: str = "raw") -> MetricRow:
        for r in self.rows:
            if r.estimator == estimator and r.scale == scale:
                return r
        raise KeyError((estimator, scale))

    def values(self, estimator: str) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        """``(trial indices, points, sigmas)`` over the trials that kept ``estimator``."""
        kept = [t for t in self.trials if estimator in t.points]
        return (np.array([t.trial for t in kept], dtype=int),
                np.array([t.points[estimator] for t in kept]),
                np.array([t.sigmas[estimator] for t in kept]))

    def write_csv(self, path, append: bool = False) -> None:
        write_rows(path, self.rows, append=append)


def build_rows(config: ExperimentConfig, tau_star: float, trials: list[TrialResult]) -> tuple[list[MetricRow], dict[str, int]]:
    n, d = config.n, config.d
    rows = []
    excluded = {}
    for e in config.estimator_list:
        kept = [t for t in trials if e in t.points]
        excluded[e] = len(trials) - len(kept)
        m = compute_metrics([t.points[e] for t in kept], [t.sigmas[e] for t in kept], tau_star)
        rows.append(MetricRow(config.family, n, d, e, "raw", **m, excluded_trials=excluded[e]))
        rn, nn = math.sqrt(n), float(n)
        rows.append(MetricRow(config.family, n, d, e, "rescaled",
                              bias=m["bias"] * rn, bias_sd=m["bias_sd"] * rn,
                              mse=m["mse"] * nn, mse_sd=m["mse_sd"] * nn,
                              coverage=m["coverage"], coverage_sd=m["coverage_sd"],
                              ci_length=m["ci_length"] * rn, ci_length_sd=m["ci_length_sd"] * rn,
                              excluded_trials=excluded[e]))
    return rows, excluded


def _run_chunk(args):
    config, trial_ids = args
    return [run_trial(config, t) for t in trial_ids]


def resolve_workers(workers: int | None) -> int:
    if workers is not None:
        return max(1, int(workers))
    env = os.environ.get("ZJACK_WORKERS")
    if env:
        return max(1, int(env))
    return os.cpu_count() or 1


def run_experiment(config: ExperimentConfig) -> ExperimentReport:
    """Run ``config.trials`` independent trials and aggregate metrics.

    Trial t draws its data from the stream keyed ``(seed, t)``; workers only
    change the schedule, never the results.
    """
    workers = resolve_workers(config.workers)
    ids = list(range(config.trials))
    if workers <= 1 or config.trials == 1:
        trials = [run_trial(config, t) for t in ids]
    else:
        chunks = [ids[i::workers] for i in range(workers)]
        with ProcessPoolExecutor(max_workers=workers) as pool:
            parts = list(pool.map(_run_chunk, [(config, c) for c in chunks if c]))
        trials = sorted((t for p in parts for t in p), key=lambda t: t.trial)
    _, truth = generate(config.family, 2, config.d, stream(config.seed, 0, 0))
    rows, excluded = build_rows(config, truth.tau_star, trials)
    return ExperimentReport(config, truth.tau_star, trials, rows, excluded)


def write_rows(path, rows: Sequence[MetricRow], append: bool = False) -> None:
    exists = append and os.path.exists(path) and os.path.getsize(path) > 0
    with open(path, "a" if append else "w", newline="") as fh:
        w = csv.writer(fh)
        if not exists:
            w.writerow(CSV_HEADER)
        for r in rows:
            w.writerow([repr(v) if isinstance(v, float) else v for v in r.as_list()])


# --------------------------------------------------------------------------
# histograms


def histogram_rows(report: ExperimentReport, estimator: str, nu: float) -> list[dict[str, float]]:
    """Per-trial rescaled errors ``sqrt(n)(point - tau*)`` and their ``nu``-standardised form."""
    ids, points, sigmas = report.values(estimator)
    rn = math.sqrt(report.config.n)
    out = []
    for t, p, s in zip(ids, points, sigmas):
        r = rn * (p - report.tau_star)
        out.append({"trial": int(t), "rescaled_error": r, "standardized_error": r / nu,
                    "point": float(p), "sigma_hat": float(s)})
    return out


def dump_histogram(config: ExperimentConfig, estimator: str, nu: float | None = None,
                   report: ExperimentReport | None = None) -> list[dict[str, float]]:
    """Run (or reuse) an experiment and return its histogram stream for one estimator."""
    if config.family == "iv" and estimator == "plugin":
        estimator = "tsls"
    if report is None:
        config = replace(config, estimators=(estimator,))
        report = run_experiment(config)
    if nu is None:
        nu = family_nu(config.family, config.n, config.d)
    return histogram_rows(report, estimator, nu)


def write_histogram(path, rows: list[dict[str, float]]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(HIST_HEADER)
        for r in rows:
            w.writerow([r["trial"]] + [repr(float(r[k])) for k in HIST_HEADER[1:]])


# --------------------------------------------------------------------------
# sweep presets


FIXED_N_EXPONENTS = tuple(round(0.1 * i, 1) for i in range(1, 10))
VARY_N_SIZES = tuple(320 * 2 ** s for s in range(6))
VARY_N_EXPONENT = 2.0 / 3.0


def preset_grid(preset: str, family: str) -> list[tuple[int, float]]:
    """``(n, r)`` pairs for a sweep preset; grid points with invalid d are dropped."""
    if preset == "fixed-n":
        n = 200 if family == "iv" else 400
        grid = [(n, r) for r in FIXED_N_EXPONENTS]
    elif preset == "vary-n":
        grid = [(n, VARY_N_EXPONENT) for n in VARY_N_SIZES]
    else:
        raise ConfigError(f"unknown preset {preset!r}; expected 'fixed-n' or 'vary-n'")
    min_d = 4 if family == "iv" else 1
    return [(n, r) for n, r in grid if dim_from_exponent(n, r) >= min_d]
