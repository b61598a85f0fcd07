"""Reference quantities from the first-order theory of Z-estimators.

For a model with true parameter ``theta*`` the plug-in error behaves like
``W_n + B / sqrt(n)`` on the ``sqrt(n)`` scale, where ``W_n`` has variance
``nu^2`` and ``B`` is a deterministic bias:

    J    = E[grad h(Z, theta*)]
    eta  = -J^{-1} grad tau(theta*)
    M    = hess tau(theta*) - E[sum_k eta_k hess h_k(Z, theta*)]
    phi  = -(J - grad h(Z, theta*)) eta
    psi  = J^{-1} h(Z, theta*)
    B    = E[<phi, psi> + psi' M psi / 2]
    nu^2 = eta' Cov(h(Z, theta*)) eta

Gaussian OLS with a quadratic target has closed forms; everything else is
estimated by Monte Carlo.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

from .data import Dataset
from .errors import NumericDomainError
from .rng import stream
from .zcore import QuadraticFunctional, ZModel

Sampler = Callable[[int, np.random.Generator], Dataset]


@dataclass(frozen=True)
class TheoryContext:
    theta_star: np.ndarray
    J: np.ndarray
    eta: np.ndarray
    M: np.ndarray
    nu_sq: float
    B: float
    estimated: bool = False

    def phi(self, model: ZModel, data: Dataset) -> np.ndarray:
        """``phi(Z_i)`` for every record, shape ``(n, d)``."""
        return -(self.J @ self.eta)[None, :] + model.jvp(data, self.theta_star, self.eta)

    def psi(self, model: ZModel, data: Dataset) -> np.ndarray:
        """``psi(Z_i) = J^{-1} h(Z_i, theta*)`` for every record, shape ``(n, d)``."""
        return np.linalg.solve(self.J, model.moments(data, self.theta_star).T).T


def gaussian_ols_theory(theta_star, Q, noise_sd: float, half: bool = False) -> TheoryContext:
    """Closed-form theory for OLS with ``X ~ N(0, I)`` and Gaussian noise.

    The target is ``theta' Q theta`` (``half=True``: ``theta' Q theta / 2``).
    With ``h = x (y - x' theta)`` the Jacobian is ``J = -I``, so
    ``eta = grad tau``, ``M = hess tau``, ``B = sigma^2 tr(hess tau) / 2`` and
    ``nu^2 = sigma^2 ||grad tau||^2``.
    """
    theta_star = np.asarray(theta_star, dtype=float)
    d = theta_star.shape[0]
    Q = np.zeros((d, d)) if np.isscalar(Q) and Q == 0 else np.atleast_2d(np.asarray(Q, dtype=float))
    tau = QuadraticFunctional(Q, half=half)
    grad = tau.gradient(theta_star)
    hess = tau.hessian(theta_star)
    s2 = float(noise_sd) ** 2
    J = -np.eye(d)
    return TheoryContext(
        theta_star=theta_star,
        J=J,
        eta=grad.copy(),
        M=hess.copy(),
        nu_sq=float(s2 * grad @ grad),
        B=float(0.5 * s2 * np.trace(hess)),
    )


def _chunks(draws, chunk):
    start = 0
    while start < draws:
        yield start, min(chunk, draws - start)
        start += chunk


def monte_carlo_bias_term(model: ZModel, sampler: Sampler, theory: TheoryContext, draws: int,
                          seed: int = 0, chunk: int = 100_000) -> tuple[float, float]:
    """Monte Carlo estimate of ``B`` with its standard error.

    Chunk c of the draws comes from the stream keyed ``(seed, c)``.
    """
    total = 0.0
    total_sq = 0.0
    for c, (_, m) in enumerate(_chunks(draws, chunk)):
        data = sampler(m, stream(seed, c))
        phi = theory.phi(model, data)
        psi = theory.psi(model, data)
        vals = np.einsum("ij,ij->i", phi, psi) + 0.5 * np.einsum("ij,jk,ik->i", psi, theory.M, psi)
        if not np.all(np.isfinite(vals)):
            raise NumericDomainError("non-finite bias-term draw")
        total += vals.sum()
        total_sq += vals @ vals
    mean = total / draws
    var = max(total_sq / draws - mean ** 2, 0.0) * draws / max(draws - 1, 1)
    return float(mean), float(np.sqrt(var / draws))


def monte_carlo_means(model: ZModel, sampler: Sampler, theory: TheoryContext, draws: int,
                      seed: int = 0, chunk: int = 100_000):
    """Monte Carlo means and standard errors of ``phi``, ``psi`` and ``<eta, h>^2``.

    Returns ``(phi_mean, phi_se, psi_mean, psi_se, nu_sq, nu_sq_se)``.
    """
    d = theory.eta.shape[0]
    acc = {k: np.zeros(d) for k in ("phi", "phi2", "psi", "psi2")}
    w_sum = w_sq = 0.0
    for c, (_, m) in enumerate(_chunks(draws, chunk)):
        data = sampler(m, stream(seed, c))
        phi = theory.phi(model, data)
        psi = theory.psi(model, data)
        acc["phi"] += phi.sum(0)
        acc["phi2"] += (phi ** 2).sum(0)
        acc["psi"] += psi.sum(0)
        acc["psi2"] += (psi ** 2).sum(0)
        w = (model.moments(data, theory.theta_star) @ theory.eta) ** 2
        w_sum += w.sum()
        w_sq += w @ w

    def mean_se(s, s2):
        mu = s / draws
        return mu, np.sqrt(np.maximum(s2 / draws - mu ** 2, 0.0) / draws)

    pm, ps = mean_se(acc["phi"], acc["phi2"])
    qm, qs = mean_se(acc["psi"], acc["psi2"])
    nm, ns = mean_se(w_sum, w_sq)
    return pm, ps, qm, qs, float(nm), float(ns)


def estimate_theory(model: ZModel, sampler: Sampler, theta_star, draws: int = 1_000_000,
                    seed: int = 0, chunk: int = 100_000) -> TheoryContext:
    """Theory context with ``J``, ``eta``, ``M`` and ``nu^2`` estimated by Monte Carlo.

    Used for models without closed forms (logistic, IPW, IV, misspecified
    designs).  ``B`` is then estimated with an independent set of draws.
    """
    theta_star = np.asarray(theta_star, dtype=float)
    d = model.dim
    J = np.zeros((d, d))
    for c, (_, m) in enumerate(_chunks(draws, chunk)):
        data = sampler(m, stream(seed, 0, c))
        J += model.jacobian(data, theta_star) * m
    J /= draws
    eta = -np.linalg.solve(J, model.functional_gradient(theta_star))
    curv = np.zeros((d, d))
    s = s2 = 0.0
    for c, (_, m) in enumerate(_chunks(draws, chunk)):
        data = sampler(m, stream(seed, 1, c))
        curv += model.curvature(data, theta_star, eta) * m
        w = model.moments(data, theta_star) @ eta
        s += w.sum()
        s2 += w @ w
    curv /= draws
    M = model.functional_hessian(theta_star) - curv
    nu_sq = s2 / draws - (s / draws) ** 2
    partial = TheoryContext(theta_star, J, eta, M, float(nu_sq), float("nan"), estimated=True)
    B, _ = monte_carlo_bias_term(model, sampler, partial, draws, seed=int(seed) + 1, chunk=chunk)
    return TheoryContext(theta_star, J, eta, M, float(nu_sq), B, estimated=True)


def exact_plugin_bias_gaussian(n: int, d: int, sigma: float, Q, theta_star=None, half: bool = False) -> float:
    """Exact finite-sample bias of ``theta_hat' Q theta_hat`` for OLS with ``X ~ N(0, I_d)``.

    ``E[(X'X)^{-1}] = I / (n - d - 1)`` gives ``sigma^2 tr(Q) / (n - d - 1)``.
    """
    if d == 0:
        return 0.0
    if n <= d + 1:
        raise ValueError(f"need n > d + 1 for a finite bias, got n={n}, d={d}")
    Q = np.atleast_2d(np.asarray(Q, dtype=float))
    scale = 0.5 if half else 1.0
    return float(scale * sigma ** 2 * np.trace(Q) / (n - d - 1))
