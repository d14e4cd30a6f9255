import csv
import json
import subprocess
import sys

import pytest

from greenprocure import cli

TINY = ["--set", "grid.n_a=3", "--set", "grid.n_r=3", "--set", "grid.n_chi=3", "--set", "solver.m_sg=40",
        "--set", "solver.n_init_samples=128", "--set", "solver.ell_max=2", "--set", "solver.max_iter=2",
        "--set", "solver.n_lmbm_iter=2", "--set", "policy_steps=32"]


def test_dotted_override_builds_nested_dict():
    cfg = {}
    cli.apply_override(cfg, "scenario.model.w=0.99")
    cli.apply_override(cfg, "grid.n_a=5")
    cli.apply_override(cfg, "scenario.name=demo")
    assert cfg == {"scenario": {"model": {"w": 0.99}, "name": "demo"}, "grid": {"n_a": 5}}
    with pytest.raises(cli.ConfigError):
        cli.apply_override(cfg, "no_equals_sign")
    with pytest.raises(cli.ConfigError):
        cli.apply_override(cfg, "grid.n_a.deeper=1")


def test_config_file_merged_with_flags(tmp_path):
    path = tmp_path / "cfg.json"
    path.write_text(json.dumps({"seed": 4, "scenario": {"preset": "scenario_c"}}))
    args = cli.make_parser().parse_args(["solve", "--config", str(path), "--seed", "9", "--with-references"])
    cfg = cli.build_config(args)
    assert cfg.seed == 9 and cfg.scenario["preset"] == "scenario_c" and cfg.with_references


def test_provenance_depends_on_config_and_seed():
    a = cli.RunConfig()
    b = cli.RunConfig(seed=1)
    assert cli.provenance(a) != cli.provenance(b)
    assert cli.provenance(a).startswith("greenprocure ")
    assert cli.provenance(cli.RunConfig(output_dir="x")) == cli.provenance(a)


@pytest.mark.parametrize("argv", [
    ["simulate", "--set", "bogus=1"],
    ["simulate", "--preset", "scenario_z"],
    ["simulate", "--set", "scenario.model.w=3"],
    ["simulate", "--config", "/nonexistent/config.json"],
    ["solve", "--set", "grid.n_a=0"],
    ["solve", "--set", "solver.step_rule=\"heavy\""],
    ["sweep", "--n-runs", "0"],
])
def test_bad_input_exit_code(tmp_path, argv, capsys):
    code = cli.main(argv + ["--out", str(tmp_path)])
    assert code == cli.EXIT_INPUT
    assert "input error" in capsys.readouterr().err


def test_infeasible_reference_exit_code(tmp_path):
    code = cli.main(["references", "--set", "scenario.model.p_tx_max=1.0", "--out", str(tmp_path)] + TINY)
    assert code == cli.EXIT_INFEASIBLE


def test_simulate_reruns_are_byte_identical(tmp_path):
    small = ["--set", "simulate.n_paths=50", "--set", "simulate.n_steps=48", "--seed", "3"]
    assert cli.main(["simulate", "--out", str(tmp_path / "a")] + small) == 0
    assert cli.main(["simulate", "--out", str(tmp_path / "b")] + small) == 0
    for name in ("fading.csv", "renewable.csv"):
        first = (tmp_path / "a" / name).read_bytes()
        assert first == (tmp_path / "b" / name).read_bytes()
        assert first.startswith(b"# greenprocure ")
    rows = list(csv.reader((tmp_path / "a" / "renewable.csv").read_text().splitlines()[1:]))
    assert rows[0] == ["time", "mean", "std", "q025", "q975", "forecast"]


def test_small_solve_writes_all_artifacts(tmp_path):
    code = cli.main(["solve", "--out", str(tmp_path), "--with-references"] + TINY)
    assert code in (cli.EXIT_OK, cli.EXIT_TOLERANCE)
    for name in ("dual_trace.csv", "multiplier.json", "violation.csv", "policy.csv", "summary.json",
                 "references.csv"):
        assert (tmp_path / name).exists(), name
    summary = json.loads((tmp_path / "summary.json").read_text())
    assert summary["level"] == 2 and summary["tolerance"] == pytest.approx(0.01)
    assert (code == cli.EXIT_OK) == summary["converged"]
    assert set(summary["energy_balance_wh"]) >= {"consumed", "battery", "bought", "sold"}
    mult = json.loads((tmp_path / "multiplier.json").read_text())
    assert len(mult["amplitudes"]) == 2
    header = (tmp_path / "policy.csv").read_text().splitlines()[1]
    assert header.startswith("time,net_consumption_mean")


def test_single_run_sweep(tmp_path):
    code = cli.main(["sweep", "--n-runs", "1", "--out", str(tmp_path)] + TINY)
    rows = list(csv.DictReader((tmp_path / "sweep.csv").read_text().splitlines()[1:]))
    assert len(rows) == 1
    assert rows[0]["status"] in ("ok", "tolerance_not_reached")
    assert (code == cli.EXIT_OK) == (rows[0]["status"] == "ok")
    assert (tmp_path / "run_000" / "summary.json").exists()


def test_module_entry_point_help():
    out = subprocess.run([sys.executable, "-m", "greenprocure.cli", "--help"], capture_output=True, text=True)
    assert out.returncode == 0 and "simulate" in out.stdout


def test_solve_reruns_are_byte_identical(tmp_path):
    for sub in ("a", "b"):
        cli.main(["solve", "--out", str(tmp_path / sub)] + TINY)
    for name in ("dual_trace.csv", "multiplier.json", "violation.csv", "policy.csv", "summary.json"):
        assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes(), name
