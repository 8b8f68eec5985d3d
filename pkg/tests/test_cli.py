from pathlib import Path

import numpy as np
import pytest

from rmiso import checks
from rmiso.cli import (SUMMARY_HEADER, build_problem, load_config, main, parse_config)
from rmiso.datasets import write_dense_csv
from rmiso.exceptions import ConfigurationError
from rmiso.solver import CSV_HEADER

CONFIGS = Path(__file__).resolve().parents[1] / "configs"

QUAD = """
[problem]
kind = quadratic
components = 6
dim = 3

[sampler]
kind = iid

[solver]
variant = rmiso_dpr
rho = 1
iters = 150
record_every = 1

[run]
seeds = 0, 3
"""


def _write(tmp_path, text, name="run.ini"):
    path = tmp_path / name
    path.write_text(text)
    return path


def _summary(out):
    lines = (out / "summary.csv").read_text().splitlines()
    cols = lines[0].split(",")
    return [dict(zip(cols, row.split(","))) for row in lines[1:]]


# -- run ----------------------------------------------------------------------------

def test_quadratic_run_passes_checks(tmp_path):
    cfg = _write(tmp_path, QUAD)
    assert main(["run", "--config", str(cfg), "--out", str(tmp_path / "out")]) == 0
    out = tmp_path / "out"
    assert (out / "summary.csv").read_text().splitlines()[0] == SUMMARY_HEADER
    rows = _summary(out)
    assert [r["seed"] for r in rows] == ["0", "3"]
    assert all(r["checks_passed"] == "true" and r["failed_checks"] == "" for r in rows)
    for seed in (0, 3):
        lines = (out / f"seed_{seed}.csv").read_text().splitlines()
        assert lines[0] == CSV_HEADER
        assert len(lines) == 151


def test_runs_are_byte_identical(tmp_path, monkeypatch):
    cfg = _write(tmp_path, QUAD)
    assert main(["run", "--config", str(cfg), "--out", str(tmp_path / "a")]) == 0
    monkeypatch.setenv("RMISO_THREADS", "2")
    assert main(["run", "--config", str(cfg), "--out", str(tmp_path / "b")]) == 0
    for name in ("seed_0.csv", "seed_3.csv", "summary.csv"):
        assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()


def test_seed_and_rho_overrides(tmp_path):
    cfg = _write(tmp_path, QUAD)
    out = tmp_path / "out"
    assert main(["run", "--config", str(cfg), "--out", str(out), "--seed", "7",
                 "--rho", "auto"]) == 0
    rows = _summary(out)
    assert [r["seed"] for r in rows] == ["7"]
    # iid over 6 indices: t_target = 6, so rho = 6 L
    L = build_problem(load_config(cfg)).smoothness()
    assert float(rows[0]["rho"]) == pytest.approx(6 * L)


def test_bad_rho_flag(tmp_path):
    with pytest.raises(SystemExit):
        main(["run", "--config", str(_write(tmp_path, QUAD)), "--rho", "-1"])


def test_nmf_run_from_csv_shards(tmp_path):
    rng = np.random.default_rng(0)
    for i in range(3):
        write_dense_csv(tmp_path / f"x{i}.csv", rng.random((5, 4)))
    text = ("[problem]\nkind = nmf\nrank = 2\ndata = x0.csv, x1.csv,\n  x2.csv\n"
            "[sampler]\nkind = random_walk\n[solver]\nrho = 50\niters = 30\n")
    cfg = _write(tmp_path, text)
    assert main(["run", "--config", str(cfg), "--out", str(tmp_path / "o")]) == 0
    assert _summary(tmp_path / "o")[0]["checks_passed"] == "true"


def test_logistic_run_from_svmlight(tmp_path):
    rows = ["+1 1:1 3:1", "+1 2:1 3:1", "-1 1:1 4:1", "-1 2:1 4:1"] * 5
    (tmp_path / "a.txt").write_text("\n".join(rows) + "\n")
    text = ("[problem]\nkind = logistic\ndata = a.txt\nbatch = 5\n"
            "[sampler]\nkind = cyclic\n[solver]\nvariant = RMISO_DR\niters = 40\n")
    cfg = _write(tmp_path, text)
    assert main(["run", "--config", str(cfg), "--out", str(tmp_path / "o")]) == 0
    assert build_problem(load_config(cfg)).n_components == 4


@pytest.mark.parametrize("name", ["quadratic", "nmf_cyclic", "nmf_walk", "logistic"])
def test_shipped_configs_run(tmp_path, name):
    cfg = load_config(CONFIGS / f"{name}.ini",
                      {("solver", "iters"): "20", ("run", "seeds"): "0",
                       ("output", "dir"): str(tmp_path)})
    from rmiso.cli import cmd_run
    assert cmd_run(cfg) == 0


# -- config ----------------------------------------------------------------------------

def test_config_round_trip_is_idempotent(tmp_path):
    for text in (QUAD, (CONFIGS / "nmf_walk.ini").read_text(), ""):
        first = parse_config(text, tmp_path)
        again = parse_config(first.to_text(), tmp_path)
        assert again.sections == first.sections
        assert again.to_text() == first.to_text()


def test_config_normalises_values(tmp_path):
    cfg = parse_config(QUAD, tmp_path)
    assert cfg.sections["solver"]["variant"] == "RMISO_DPR"
    assert cfg.sections["solver"]["rho"] == "1.0"
    assert cfg.seeds == [0, 3]


@pytest.mark.parametrize("text", [
    "[problem]\nkind = nmf\ndata = missing.csv\n",
    "[bogus]\nx = 1\n",
    "[problem]\nkind = svm\n",
    "[problem]\nkind = quadratic\nrank = 3\n",
    "[solver]\nvariant = SGD\n",
    "[solver]\nrho = -2\n",
    "[solver]\niters = 0\n",
    "[run]\nseeds =\n",
    "[sampler]\nkind = random_walk\ngraph = nowhere.txt\n",
    "not a config",
])
def test_config_errors(tmp_path, text):
    with pytest.raises(ConfigurationError):
        parse_config(text, tmp_path)


def test_missing_config_file_exits_2(tmp_path, capsys):
    assert main(["run", "--config", str(tmp_path / "nope.ini")]) == 2
    assert "not found" in capsys.readouterr().err


# -- estimate ---------------------------------------------------------------------------

def test_estimate_cyclic(capsys):
    assert main(["estimate", "--sampler", "cyclic", "--size", "10", "--header"]) == 0
    header, row = capsys.readouterr().out.splitlines()
    assert header == ("t_hit,t_target,t_cov,stderr_hit,stderr_target,stderr_cov,"
                      "method,replicas,horizon")
    assert row.startswith("10,4.5,10,0,0,0,analytic,")


def test_estimate_iid(capsys):
    assert main(["estimate", "--sampler", "iid", "--size", "5"]) == 0
    assert capsys.readouterr().out.split(",")[1] == "5"


def test_estimate_walk_from_config(tmp_path, capsys):
    cfg = _write(tmp_path, "[problem]\ncomponents = 8\n[sampler]\nkind = random_walk\n")
    assert main(["estimate", "--config", str(cfg), "--replicas", "2000", "--seed", "1"]) == 0
    fields = capsys.readouterr().out.strip().split(",")
    hit, se = float(fields[0]), float(fields[3])
    assert abs(hit - 16.0) <= 3 * se and fields[6] == "monte_carlo"


def test_estimate_censoring_exits_2(capsys):
    code = main(["estimate", "--sampler", "random_walk", "--graph", "lonely", "--size", "12",
                 "--replicas", "100", "--horizon", "12"])
    assert code == 2
    assert "censor" in capsys.readouterr().err


def test_estimate_needs_sampler():
    assert main(["estimate", "--size", "4"]) == 2


# -- check --------------------------------------------------------------------------

def test_check_only_runs_selected(capsys):
    assert main(["check", "--only", "prox_linear", "--seed", "0"]) == 0
    out = capsys.readouterr().out.splitlines()
    assert len([ln for ln in out if ln.startswith("[")]) == 1
    assert out[0].startswith("[PASS]  8 prox_linear")


def test_check_rejects_unknown_name():
    with pytest.raises(SystemExit):
        main(["check", "--only", "everything"])


def test_dpr_mutation_is_caught(monkeypatch, capsys):
    monkeypatch.setenv("RMISO_MUTATION", "dpr_rho")
    assert main(["check", "--only", "energy", "--seed", "0"]) == 1
    out = capsys.readouterr().out
    assert "[FAIL]  2 energy" in out and "failing criteria: energy" in out
    monkeypatch.delenv("RMISO_MUTATION")
    key = ((0,), checks.MATRIX_ITERS, tuple(checks.Variant), "dpr_rho")
    checks._MATRIX_CACHE.pop(key, None)
