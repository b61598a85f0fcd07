import numpy as np
import pytest
from numpy.testing import assert_allclose

from zjack import Dataset, LinearModel, QuadraticFunctional, solve_z
from zjack.oracle import (
    TheoryContext,
    estimate_theory,
    exact_plugin_bias_gaussian,
    gaussian_ols_theory,
    monte_carlo_bias_term,
    monte_carlo_means,
)
from zjack.rng import stream
from zjack.sim import generate_quad, generate_quad_misspec


def quad_setup(d, sigma=1.0, misspec=False):
    theta = np.ones(d) / np.sqrt(d)
    model = LinearModel(d, functional=QuadraticFunctional(np.eye(d)))

    def sampler(m, rng):
        if misspec:
            return generate_quad_misspec(m, d, rng)[0]
        X = rng.standard_normal((m, d))
        return Dataset.linear(X, X @ theta + sigma * rng.standard_normal(m))

    return theta, model, sampler


# -- closed forms -------------------------------------------------------------------------


def test_gaussian_theory_reference_values():
    d = 20
    th = gaussian_ols_theory(np.ones(d) / np.sqrt(d), np.eye(d), 1.0)
    assert th.B == pytest.approx(20.0, abs=1e-12)
    assert th.nu_sq == pytest.approx(4.0, abs=1e-12)
    assert_allclose(th.eta, -np.linalg.solve(th.J, 2 * th.theta_star), atol=1e-10)


def test_gaussian_theory_degenerate_cases():
    th = gaussian_ols_theory(np.ones(3), 0, 1.0)
    assert th.B == 0.0 and th.nu_sq == 0.0
    th = gaussian_ols_theory(np.zeros(4), np.eye(4), 1.5)
    assert th.B == pytest.approx(1.5 ** 2 * 4)
    assert th.nu_sq == 0.0


def test_half_convention():
    full = gaussian_ols_theory(np.ones(5), np.eye(5), 2.0)
    half = gaussian_ols_theory(np.ones(5), np.eye(5), 2.0, half=True)
    assert half.B == pytest.approx(full.B / 2)
    assert half.nu_sq == pytest.approx(full.nu_sq / 4)


@pytest.mark.parametrize("n, d, expected", [(400, 20, 20 / 379), (4, 1, 0.5), (10, 0, 0.0)])
def test_exact_plugin_bias(n, d, expected):
    assert exact_plugin_bias_gaussian(n, d, 1.0, np.eye(max(d, 1))) == pytest.approx(expected, rel=1e-14)


def test_exact_plugin_bias_domain():
    with pytest.raises(ValueError):
        exact_plugin_bias_gaussian(5, 4, 1.0, np.eye(4))


def test_exact_bias_brute_force_small():
    # 20000 replications at n=12, d=3: bias 3 / 8
    n, d, reps = 12, 3, 20_000
    rng = stream(17, 0)
    theta = np.ones(d) / np.sqrt(d)
    X = rng.standard_normal((reps, n, d))
    y = X @ theta + rng.standard_normal((reps, n))
    th = np.linalg.solve(np.einsum("rni,rnj->rij", X, X), np.einsum("rni,rn->ri", X, y)[..., None])[..., 0]
    err = np.einsum("ri,ri->r", th, th) - 1.0
    se = err.std(ddof=1) / np.sqrt(reps)
    assert abs(err.mean() - exact_plugin_bias_gaussian(n, d, 1.0, np.eye(d))) < 3 * se


# -- Monte Carlo -----------------------------------------------------------------------------


@pytest.mark.parametrize("d", [1, 5])
def test_bias_term_monte_carlo_brackets_closed_form(d):
    theta, model, sampler = quad_setup(d)
    th = gaussian_ols_theory(theta, np.eye(d), 1.0)
    mean, se = monte_carlo_bias_term(model, sampler, th, draws=200_000, seed=3)
    assert abs(mean - th.B) < 3 * se


def test_bias_term_zero_for_point_mass_without_noise():
    d = 2
    theta = np.array([0.3, -0.4])
    model = LinearModel(d, functional=QuadraticFunctional(np.eye(d)))
    x0 = np.array([1.0, 2.0])

    def sampler(m, rng):
        X = np.tile(x0, (m, 1))
        return Dataset.linear(X, X @ theta)

    J = -np.outer(x0, x0) - np.eye(d) * 1e-3  # any invertible J
    th = TheoryContext(theta, J, -np.linalg.solve(J, 2 * theta), 2 * np.eye(d), 0.0, 0.0)
    mean, se = monte_carlo_bias_term(model, sampler, th, draws=1000)
    assert mean == 0.0 and se == 0.0


def test_bias_term_misspecified_shifts():
    d = 5
    theta, model, sampler = quad_setup(d, misspec=True)
    th = estimate_theory(model, sampler, theta, draws=200_000, seed=4)
    B_well = d * 1.0
    # var(eps) = 2 doubles the well-specified term to 10 and E[eps | X] != 0 adds a cross term
    print(f"misspecified B(d={d}) = {th.B:.3f} vs well-specified {B_well}")
    assert th.B > 2 * B_well + 1.0


def test_phi_psi_mean_zero_and_nu_identity():
    d = 5
    theta, model, sampler = quad_setup(d)
    th = gaussian_ols_theory(theta, np.eye(d), 1.0)
    pm, ps, qm, qs, nu2, nu2_se = monte_carlo_means(model, sampler, th, draws=200_000, seed=8)
    assert np.all(np.abs(pm) < 3 * ps + 1e-12)
    assert np.all(np.abs(qm) < 3 * qs)
    assert abs(nu2 - th.nu_sq) < 3 * nu2_se


def test_estimate_theory_recovers_closed_form():
    d = 3
    theta, model, sampler = quad_setup(d)
    est = estimate_theory(model, sampler, theta, draws=200_000, seed=2)
    ref = gaussian_ols_theory(theta, np.eye(d), 1.0)
    assert est.estimated
    assert_allclose(est.J, ref.J, atol=0.02)
    assert_allclose(est.eta, ref.eta, atol=0.03)
    assert_allclose(est.M, ref.M, atol=1e-12)
    assert est.nu_sq == pytest.approx(ref.nu_sq, rel=0.03)
    assert est.B == pytest.approx(ref.B, rel=0.05)


def test_plugin_bias_matches_theory_at_scale():
    # n E[tau_hat - tau*] -> B; at n=400, d=5 the exact value is 400 * 5 / 394
    n, d = 400, 5
    theta, model, _ = quad_setup(d)
    errs = []
    for t in range(400):
        data, _ = generate_quad(n, d, stream(99, t))
        errs.append(model.functional(solve_z(model, data).theta) - 1.0)
    errs = np.array(errs) * n
    se = errs.std(ddof=1) / np.sqrt(errs.size)
    assert abs(errs.mean() - n * exact_plugin_bias_gaussian(n, d, 1.0, np.eye(d))) < 3 * se
