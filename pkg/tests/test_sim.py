import math
from dataclasses import replace

import numpy as np
import pytest
from numpy.testing import assert_allclose, assert_array_equal
from scipy.special import expit

from zjack.errors import ConfigError
from zjack.rng import stream
from zjack.sim import (
    CSV_HEADER,
    ExperimentConfig,
    compute_metrics,
    dim_from_exponent,
    dump_histogram,
    generate,
    generate_iv,
    generate_logistic,
    generate_quad,
    generate_quad_misspec,
    preset_grid,
    run_experiment,
    run_trial,
    write_rows,
)

# -- generators --------------------------------------------------------------------------


@pytest.mark.parametrize("d", [1, 4, 17])
def test_quad_truth(d):
    _, truth = generate_quad(10, d, stream(0, 0))
    assert np.linalg.norm(truth.theta_star) == pytest.approx(1.0, abs=1e-15)
    assert truth.tau_star == 1.0


@pytest.mark.parametrize("family, d", [("quad", 3), ("quad_misspec", 3), ("logistic", 3), ("iv", 5)])
def test_generators_deterministic(family, d):
    a, _ = generate(family, 50, d, stream(5, 2, 0))
    b, _ = generate(family, 50, d, stream(5, 2, 0))
    c, _ = generate(family, 50, d, stream(5, 3, 0))
    assert a.fingerprint() == b.fingerprint()
    assert a.fingerprint() != c.fingerprint()


def test_quad_column_means():
    n = 100_000
    data, _ = generate_quad(n, 4, stream(1, 0))
    assert np.all(np.abs(data["X"].mean(0)) < 3 / math.sqrt(n))


def test_misspec_orthogonal_but_misspecified():
    n, d = 100_000, 4
    data, truth = generate_quad_misspec(n, d, stream(2, 0))
    X, y = data["X"], data["y"]
    eps = y - X @ truth.theta_star
    ex = X * eps[:, None]
    assert np.all(np.abs(ex.mean(0)) < 3 * ex.std(0, ddof=1) / math.sqrt(n))
    r2 = np.einsum("ij,ij->i", X, X)
    hi = r2 > np.quantile(r2, 0.9)
    assert eps[hi].mean() > 5 * eps[hi].std(ddof=1) / math.sqrt(hi.sum())
    assert truth.tau_star == pytest.approx(1.0)


def test_logistic_marginal_rate():
    n, d = 100_000, 3
    data, truth = generate_logistic(n, d, stream(3, 0))
    assert_array_equal(data["X"][:, 0], 1.0)
    assert truth.tau_star == 1.0
    # quadrature oracle: E[phi(1 + <beta, X>)] with <beta, X> ~ N(0, (d-1)/d)
    z = stream(4, 0).standard_normal(1_000_000)
    p_ref = expit(1.0 + math.sqrt((d - 1) / d) * z).mean()
    y = data["y"]
    assert abs(y.mean() - p_ref) < 3 * y.std(ddof=1) / math.sqrt(n) + 3 * 0.2 / 1000


def test_logistic_regression_value_d1():
    # d=1 is intercept only: P(y=1) = phi(1)
    data, _ = generate_logistic(100_000, 1, stream(6, 0))
    assert abs(data["y"].mean() - expit(1.0)) < 3 * math.sqrt(0.2 / 100_000)


def test_iv_noise_and_instruments():
    n, k = 100_000, 4
    data, truth = generate_iv(n, k, stream(7, 0))
    W, x, y = data["W"], data["x"], data["y"]
    assert_array_equal(W.sum(1), 1.0)
    pi = truth.theta_star[2:]
    assert_allclose(pi, [0.0, 0.5, 1.0, 1.5])
    eta = x - W @ pi
    eps = y - x
    for v, target in ((eps * eps, 0.25), (eta * eta, 0.25), (eps * eta, 0.2)):
        assert abs(v.mean() - target) < 3 * v.std(ddof=1) / math.sqrt(n)
    assert truth.tau_star == 1.0


def test_dim_from_exponent():
    assert dim_from_exponent(400, 0.45) == 14
    assert dim_from_exponent(400, 0.62) == 41  # 400^0.62 = 41.05
    assert dim_from_exponent(400, 0.5) == 20
    assert dim_from_exponent(200, 0.4) == 8
    assert dim_from_exponent(200, 0.65) == 31


# -- metrics ------------------------------------------------------------------------------


def test_metric_examples():
    m = compute_metrics([1.0, 1.0, 3.0], [0.1, 0.1, 0.1], 1.0)
    assert m["bias"] == pytest.approx(2 / 3)
    assert m["mse"] == pytest.approx(4 / 3)
    assert m["coverage"] == pytest.approx(2 / 3)
    m = compute_metrics([1.0], [0.1], 1.0)
    assert m["coverage"] == 1.0
    assert m["ci_length"] == pytest.approx(0.392)


def test_metric_invariants():
    rng = np.random.default_rng(0)
    for _ in range(20):
        p = rng.standard_normal(30) + 1
        s = rng.uniform(0.1, 2, 30)
        m = compute_metrics(p, s, 1.0)
        assert 0 <= m["coverage"] <= 1
        assert m["mse"] >= m["bias"] ** 2 - 1e-15
        assert m["bias_sd"] == pytest.approx(p.std(ddof=1) / math.sqrt(30))


# -- config -----------------------------------------------------------------------------------


@pytest.mark.parametrize("kw", [
    dict(family="quad", n=100, dim=5, trials=0),
    dict(family="quad", n=10, dim=10),
    dict(family="quad", n=100),
    dict(family="quad", n=100, dim=5, dim_exponent=0.5),
    dict(family="quad", n=100, dim=5, estimators=("jeffreys",)),
    dict(family="logistic", n=100, dim=5, estimators=("kline",)),
    dict(family="iv", n=100, dim=3),
    dict(family="probit", n=100, dim=3),
    dict(family="quad", n=100, dim=5, estimators=("plugin", "plugin")),
])
def test_config_errors(kw):
    with pytest.raises(ConfigError):
        ExperimentConfig(**kw)


def test_iv_plugin_alias():
    cfg = ExperimentConfig("iv", 60, dim=4, estimators=("plugin", "jackknife"))
    assert cfg.estimator_list == ("tsls", "jackknife")


# -- trials and experiments ---------------------------------------------------------------


def test_paired_design_fingerprints():
    cfg = ExperimentConfig("quad", 60, dim=3, trials=4, seed=11, workers=1)
    rep = run_experiment(cfg)
    solo = run_experiment(replace(cfg, estimators=("plugin",)))
    assert [t.fingerprint for t in rep.trials] == [t.fingerprint for t in solo.trials]
    for t in rep.trials:
        assert {"plugin", "jackknife", "kline"} <= set(t.points)
    assert len({t.fingerprint for t in rep.trials}) == 4


def test_report_rows_and_scales():
    cfg = ExperimentConfig("quad", 100, dim=4, trials=6, seed=1, workers=1)
    rep = run_experiment(cfg)
    raw, res = rep.row("jackknife", "raw"), rep.row("jackknife", "rescaled")
    assert res.bias == pytest.approx(raw.bias * 10)
    assert res.mse == pytest.approx(raw.mse * 100)
    assert res.ci_length == pytest.approx(raw.ci_length * 10)
    assert res.coverage == raw.coverage
    assert len(rep.rows) == 2 * len(cfg.estimator_list)
    assert rep.unreliable == []


def test_reports_bitwise_identical_across_workers():
    cfg = ExperimentConfig("logistic", 80, dim=3, trials=6, seed=4, workers=1)
    a = run_experiment(cfg)
    b = run_experiment(replace(cfg, workers=3))
    assert a.rows == b.rows
    assert [t.points for t in a.trials] == [t.points for t in b.trials]


def test_rerun_identical():
    cfg = ExperimentConfig("iv", 60, dim=4, trials=2, seed=3, bootstrap_replicates=30, workers=1)
    assert run_experiment(cfg).rows == run_experiment(cfg).rows


def test_histogram_reproduces_metrics():
    cfg = ExperimentConfig("quad", 80, dim=4, trials=8, seed=2, workers=1)
    rep = run_experiment(cfg)
    rows = dump_histogram(cfg, "jackknife", nu=2.0, report=rep)
    assert len(rows) == 8
    pts = np.array([r["point"] for r in rows])
    sig = np.array([r["sigma_hat"] for r in rows])
    m = compute_metrics(pts, sig, rep.tau_star)
    row = rep.row("jackknife")
    for k, v in m.items():
        assert getattr(row, k) == v
    assert_allclose([r["rescaled_error"] for r in rows], math.sqrt(80) * (pts - 1.0))
    assert_allclose([r["standardized_error"] for r in rows], math.sqrt(80) * (pts - 1.0) / 2.0)


def test_exclusions_are_counted_and_flagged():
    # d = n - 1 leaves one residual degree of freedom; logistic MLEs mostly fail inside the box
    cfg = ExperimentConfig("logistic", 12, dim=8, trials=6, seed=0, workers=1,
                           estimators=("plugin", "jackknife"))
    rep = run_experiment(cfg)
    assert rep.excluded["plugin"] > 0
    assert rep.row("plugin").excluded_trials == rep.excluded["plugin"]
    assert "plugin" in rep.unreliable
    kept = [t for t in rep.trials if "plugin" in t.points]
    assert rep.row("plugin").excluded_trials == cfg.trials - len(kept)


def test_write_rows_header_and_repr(tmp_path):
    cfg = ExperimentConfig("quad", 50, dim=2, trials=3, seed=0, workers=1, estimators=("plugin",))
    rep = run_experiment(cfg)
    path = tmp_path / "out.csv"
    write_rows(path, rep.rows)
    write_rows(path, rep.rows, append=True)
    lines = path.read_text().splitlines()
    assert lines[0] == ",".join(CSV_HEADER)
    assert len(lines) == 1 + 2 * len(rep.rows)
    vals = lines[1].split(",")
    assert float(vals[5]) == rep.rows[0].bias


def test_run_trial_matches_experiment():
    cfg = ExperimentConfig("quad", 60, dim=3, trials=3, seed=8, workers=1)
    rep = run_experiment(cfg)
    assert run_trial(cfg, 2).points == rep.trials[2].points


# -- presets -------------------------------------------------------------------------------


def test_presets():
    grid = preset_grid("fixed-n", "quad")
    assert [r for _, r in grid] == [0.1, 0.2, 0.3, 0.4, 0.5, 0.6, 0.7, 0.8, 0.9]
    assert {n for n, _ in grid} == {400}
    iv = preset_grid("fixed-n", "iv")
    assert {n for n, _ in iv} == {200}
    assert all(dim_from_exponent(n, r) >= 4 for n, r in iv)
    vary = preset_grid("vary-n", "logistic")
    assert [n for n, _ in vary] == [320, 640, 1280, 2560, 5120, 10240]
    assert {r for _, r in vary} == {2 / 3}
    with pytest.raises(ConfigError):
        preset_grid("fixed-d", "quad")
