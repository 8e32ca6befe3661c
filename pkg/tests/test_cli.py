import json
import subprocess
import sys

import pytest

from coarsened_slm.cli import main


def run(*argv):
    return main([str(a) for a in argv])


@pytest.fixture(scope="module")
def simulated(tmp_path_factory):
    out = tmp_path_factory.mktemp("sim")
    assert run("simulate", "--scenario", "A", "--seed", 7, "--out", out) == 0
    return out


def test_simulate_outputs(simulated):
    for name in ("points.csv", "true_points.csv", "dataset.csv", "flags.csv", "intensity.csv",
                 "partition.json", "scenario.json"):
        assert (simulated / name).exists()
    for name in ("points.csv", "dataset.csv", "flags.csv"):
        assert len((simulated / name).read_text().splitlines()) == 251


def test_simulate_byte_identical(simulated, tmp_path):
    assert run("simulate", "--scenario", "A", "--seed", 7, "--out", tmp_path) == 0
    for f in simulated.iterdir():
        assert (tmp_path / f.name).read_bytes() == f.read_bytes(), f.name


def test_simulate_no_coarsening(tmp_path):
    cfg = tmp_path / "c.json"
    cfg.write_text(json.dumps({"overrides": {"n": 40, "coarsening": {"prob": 0.0}}}))
    assert run("simulate", "--config", cfg, "--seed", 1, "--out", tmp_path / "o") == 0
    rows = (tmp_path / "o" / "flags.csv").read_text().splitlines()[1:]
    assert all(r.split(",")[1] == "1" for r in rows)


def test_fit_rows_share_schema(simulated, tmp_path):
    cfg = tmp_path / "c.json"
    cfg.write_text(json.dumps({"dme": {"draws": 4, "population": 20, "max_iters": 10},
                               "impacts": {"draws": 4}}))
    assert run("fit", "--data", simulated, "--methods", "DME,SREM", "--config", cfg, "--seed", 3,
               "--out", tmp_path / "f") == 0
    lines = (tmp_path / "f" / "estimates.csv").read_text().splitlines()
    assert len(lines) == 3
    assert [l.split(",")[0] for l in lines[1:]] == ["DME", "SREM"]
    assert len({len(l.split(",")) for l in lines}) == 1
    assert lines[0].startswith("method,rho,beta0,beta1,beta2,sigma2,T0,D0,M0")
    first = (tmp_path / "f" / "estimates.csv").read_bytes()
    assert run("fit", "--data", simulated, "--methods", "DME,SREM", "--config", cfg, "--seed", 3,
               "--out", tmp_path / "f") == 0
    assert (tmp_path / "f" / "estimates.csv").read_bytes() == first


def test_fit_ncm_on_uncoarsened(tmp_path):
    cfg = tmp_path / "c.json"
    cfg.write_text(json.dumps({"overrides": {"n": 60, "coarsening": {"prob": 0.0}}}))
    assert run("simulate", "--config", cfg, "--out", tmp_path / "d") == 0
    assert run("fit", "--data", tmp_path / "d", "--methods", "NCM", "--out", tmp_path / "f") == 0
    lines = (tmp_path / "f" / "estimates.csv").read_text().splitlines()
    assert lines[1].startswith("NCM,")


def test_fit_unknown_method(simulated, tmp_path, capsys):
    assert run("fit", "--data", simulated, "--methods", "OLS", "--out", tmp_path) == 2
    assert "unknown method" in capsys.readouterr().err


def test_fit_malformed_csv(simulated, tmp_path, capsys):
    bad = tmp_path / "bad"
    bad.mkdir()
    for f in simulated.iterdir():
        (bad / f.name).write_bytes(f.read_bytes())
    lines = (bad / "dataset.csv").read_text().splitlines()
    lines[5] = "1.0,oops,2,3"
    (bad / "dataset.csv").write_text("\n".join(lines) + "\n")
    assert run("fit", "--data", bad, "--methods", "SREM", "--out", tmp_path / "f") == 2
    err = capsys.readouterr().err
    assert "dataset.csv:6:" in err


def test_impacts_command(simulated, tmp_path):
    assert run("impacts", "--data", simulated, "--rho", 0.5, "--beta", 1, 1, -1,
               "--out", tmp_path, "--seed", 2) == 0
    lines = (tmp_path / "impacts.csv").read_text().splitlines()
    assert lines[0] == "regressor,total,direct,indirect" and len(lines) == 4
    assert run("impacts", "--data", simulated, "--rho", 0.5, "--beta", 1, "--out", tmp_path) == 2


def test_benchmark_and_report(tmp_path):
    cfg = tmp_path / "c.json"
    cfg.write_text(json.dumps({"replications": 2, "overrides": {"n": 80},
                               "dme": {"draws": 4, "population": 20, "max_iters": 10},
                               "impacts": {"draws": 2}}))
    out = tmp_path / "b"
    assert run("benchmark", "--scenario", "A", "--config", cfg, "--seed", 1, "--workers", 1,
               "--out", out) == 0
    lines = (out / "table_A.csv").read_text().splitlines()
    assert len(lines) == 6
    assert len(lines[0].split(",")) == 3 + 2 * 8
    first = (out / "table_A.csv").read_bytes()
    assert run("benchmark", "--scenario", "A", "--config", cfg, "--seed", 1, "--workers", 1,
               "--out", out) == 0
    assert (out / "table_A.csv").read_bytes() == first
    assert run("report", "--out", out) == 0
    assert "Scenario A" in (out / "report.md").read_text()


def test_benchmark_skip_exit_code(tmp_path):
    cfg = tmp_path / "c.json"
    cfg.write_text(json.dumps({"replications": 2, "overrides": {"n": 40, "coarsening": {"prob": 1.0}}}))
    assert run("benchmark", "--scenario", "A", "--methods", "SREM", "--config", cfg,
               "--workers", 1, "--out", tmp_path) == 3
    assert (tmp_path / "table_A.csv").exists()


def test_usage_errors(tmp_path, capsys):
    assert run("benchmark", "--scenario", "Q", "--out", tmp_path) == 2
    cfg = tmp_path / "c.json"
    cfg.write_text(json.dumps({"nonsense": 1}))
    assert run("benchmark", "--config", cfg, "--out", tmp_path) == 2
    assert "invalid config" in capsys.readouterr().err
    cfg.write_text(json.dumps({"dme": {"elite_fraction": 2}}))
    assert run("benchmark", "--config", cfg, "--out", tmp_path) == 2
    assert run("frobnicate") == 2
    assert run("report", "--out", tmp_path / "empty") == 2


def test_console_script_help():
    res = subprocess.run([sys.executable, "-m", "coarsened_slm.cli", "--help"],
                         capture_output=True, text=True)
    assert res.returncode == 0
    for cmd in ("simulate", "fit", "impacts", "benchmark", "report"):
        assert cmd in res.stdout
