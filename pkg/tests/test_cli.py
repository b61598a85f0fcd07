import csv
import subprocess
import sys

import pytest

from zjack.cli import main

HEADER = "family,n,d,estimator,scale,bias,bias_sd,mse,mse_sd,coverage,coverage_sd,ci_length,ci_length_sd,excluded_trials"


def read(path):
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


def test_simulate_writes_bit_exact_header(tmp_path):
    out = tmp_path / "q.csv"
    code = main(["simulate", "--family", "quad", "--n", "60", "--dim", "3", "--trials", "4",
                 "--seed", "1", "--workers", "1", "--out", str(out)])
    assert code == 0
    assert out.read_text().splitlines()[0] == HEADER
    rows = read(out)
    assert {r["estimator"] for r in rows} == {"plugin", "jackknife", "kline"}
    assert {r["scale"] for r in rows} == {"raw", "rescaled"}
    assert all(r["family"] == "quad" and r["n"] == "60" and r["d"] == "3" for r in rows)


def test_simulate_family_alias_and_exponent(tmp_path):
    out = tmp_path / "m.csv"
    code = main(["simulate", "--family", "quad-misspec", "--n", "100", "--dim-exponent", "0.5",
                 "--trials", "2", "--workers", "1", "--estimators", "plugin,jackknife", "--out", str(out)])
    assert code == 0
    rows = read(out)
    assert rows[0]["family"] == "quad_misspec" and rows[0]["d"] == "10"
    assert {r["estimator"] for r in rows} == {"plugin", "jackknife"}


@pytest.mark.parametrize("argv", [
    ["simulate", "--family", "quad", "--n", "10", "--dim", "10", "--trials", "2"],
    ["simulate", "--family", "quad", "--n", "50", "--dim", "3", "--trials", "0"],
    ["simulate", "--family", "logistic", "--n", "50", "--dim", "3", "--estimators", "kline"],
    ["hist", "--family", "quad", "--n", "50", "--dim", "3", "--estimator", "jive1"],
])
def test_config_errors_exit_2(argv, tmp_path, capsys):
    assert main(argv + ["--out", str(tmp_path / "x.csv")]) == 2
    assert "config error" in capsys.readouterr().err


@pytest.mark.parametrize("argv", [
    ["simulate", "--family", "probit", "--n", "50", "--dim", "3"],
    ["simulate", "--family", "quad", "--n", "50"],
    ["simulate", "--family", "quad", "--n", "50", "--dim", "3", "--dim-exponent", "0.5"],
    ["sweep", "--family", "quad", "--preset", "fixed-d"],
])
def test_usage_errors_exit_2(argv, tmp_path):
    with pytest.raises(SystemExit) as info:
        main(argv + ["--out", str(tmp_path / "x.csv")])
    assert info.value.code == 2


def test_unreliable_exit_3(tmp_path, capsys):
    # logistic MLE rarely exists at d = 8, n = 12
    out = tmp_path / "l.csv"
    code = main(["simulate", "--family", "logistic", "--n", "12", "--dim", "8", "--trials", "6",
                 "--workers", "1", "--estimators", "plugin,jackknife", "--out", str(out)])
    assert code == 3
    assert "unreliable" in capsys.readouterr().err
    rows = read(out)
    assert int(rows[0]["excluded_trials"]) > 0


def test_hist_schema(tmp_path):
    out = tmp_path / "h.csv"
    code = main(["hist", "--family", "quad", "--n", "50", "--dim", "3", "--trials", "5",
                 "--workers", "1", "--estimator", "jackknife", "--out", str(out)])
    assert code == 0
    lines = out.read_text().splitlines()
    assert lines[0] == "trial,rescaled_error,standardized_error,point,sigma_hat"
    assert [int(r["trial"]) for r in read(out)] == list(range(5))


def test_hist_iv_plugin_means_tsls(tmp_path):
    out = tmp_path / "iv.csv"
    code = main(["hist", "--family", "iv", "--n", "60", "--dim", "4", "--trials", "2",
                 "--bootstrap-replicates", "20", "--workers", "1", "--estimator", "plugin", "--out", str(out)])
    assert code == 0
    assert len(read(out)) == 2


def test_output_independent_of_workers(tmp_path):
    outs = []
    for w in ("1", "2"):
        out = tmp_path / f"w{w}.csv"
        main(["simulate", "--family", "quad", "--n", "60", "--dim", "3", "--trials", "5",
              "--seed", "9", "--workers", w, "--out", str(out)])
        outs.append(out.read_bytes())
    assert outs[0] == outs[1]


def test_module_entry_point(tmp_path):
    out = tmp_path / "e.csv"
    proc = subprocess.run([sys.executable, "-m", "zjack", "simulate", "--family", "quad", "--n", "40",
                           "--dim", "2", "--trials", "2", "--out", str(out)],
                          capture_output=True, text=True, env={"ZJACK_WORKERS": "1", "PATH": ""})
    assert proc.returncode == 0, proc.stderr
    assert out.read_text().startswith(HEADER)


def test_sweep_appends_one_block_per_grid_point(tmp_path):
    out = tmp_path / "s.csv"
    code = main(["sweep", "--family", "quad", "--preset", "fixed-n", "--trials", "1",
                 "--workers", "1", "--estimators", "plugin", "--out", str(out)])
    assert code == 0
    lines = out.read_text().splitlines()
    assert lines.count(HEADER) == 1
    rows = read(out)
    assert len(rows) == 9 * 2
    assert [int(r["d"]) for r in rows[::2]] == [int(400 ** (k / 10)) for k in range(1, 10)]
