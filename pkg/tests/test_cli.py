import json
import math

import pytest
from click.testing import CliRunner

from dtnforward import cli
from dtnforward.utils import read_csv


def invoke(*args):
    runner = CliRunner()
    return runner.invoke(cli.cli, [str(a) for a in args])


def test_no_command_prints_help():
    result = invoke()
    assert result.exit_code == 0
    assert "simulate" in result.output
    assert "optimize-stopping" in result.output


def test_simulate_writes_trajectory_and_summary(write_config, tmp_path):
    config = write_config(policy={"kind": "zero"})
    out = tmp_path / "sim"
    result = invoke("simulate", "--config", config, "--out", out)
    assert result.exit_code == 0, result.output
    header = (out / "trajectory.csv").read_text().splitlines()[0]
    assert header == "t,S0,S1,S2,I0,I1,I2,E,u_1,u_2"
    summary = json.loads((out / "summary.json").read_text())
    assert summary["policy"] == {"kind": "zero"}
    assert summary["delivery"] == pytest.approx(1 - math.exp(-1))
    assert summary["feasible"] is False
    assert summary["unbiased_cost"] == pytest.approx(0, abs=1e-12)
    assert summary["end_time"] == pytest.approx(5.0)


def test_simulate_needs_a_policy(write_config, tmp_path):
    result = invoke("simulate", "--config", write_config(), "--out", tmp_path)
    assert result.exit_code == 2
    assert "policy section" in result.output


def test_unknown_key_is_a_config_error(write_config, tmp_path):
    config = write_config(policy={"kind": "zero"}, extras={"a": 1})
    result = invoke("simulate", "--config", config, "--out", tmp_path)
    assert result.exit_code == 2
    assert "Unknown key config.extras" in result.output


def test_infeasible_heuristic_exits_3(write_config, tmp_path):
    result = invoke("heuristic", "zero", "--config", write_config(), "--out", tmp_path)
    assert result.exit_code == 3
    # The report is still written for inspection
    summary = json.loads((tmp_path / "summary.json").read_text())
    assert summary["feasible"] is False
    assert summary["family"] == "zero"


def test_verify_rejects_non_threshold_policy(write_config, tmp_path):
    config = write_config(policy={"kind": "one"})
    result = invoke("verify", "--config", config, "--out", tmp_path)
    assert result.exit_code == 2


def test_verify_writes_report(write_config, tmp_path):
    config = write_config(policy={"kind": "threshold", "times": [1.0, 2.0]})
    result = invoke("verify", "--config", config, "--out", tmp_path)
    assert result.exit_code == 0, result.output
    summary = json.loads((tmp_path / "summary.json").read_text())
    assert summary["type"] == "VerificationReport"
    assert summary["status"] in ("pass", "fail", "constraint-inactive")


def test_optimize_with_verification(write_config, tmp_path):
    config = write_config()
    result = invoke("optimize", "--verify", "--config", config, "--out", tmp_path)
    assert result.exit_code == 0, result.output
    summary = json.loads((tmp_path / "summary.json").read_text())
    assert summary["policy"]["kind"] == "threshold"
    assert summary["feasible"] is True
    assert summary["delivery"] >= 0.7 - 1e-9
    assert summary["verification"]["type"] == "VerificationReport"
    assert (tmp_path / "trajectory.csv").exists()


def test_montecarlo_writes_mean_curves(write_config, tmp_path):
    config = write_config(policy={"kind": "threshold", "times": [1.0, 2.0]})
    result = invoke("montecarlo", "--config", config, "--out", tmp_path, "--seed", 5)
    assert result.exit_code == 0, result.output
    rows = read_csv(tmp_path / "curves.csv")
    assert len(rows) == 11
    assert rows[0][0] == 0
    assert rows[-1][0] == pytest.approx(5.0)
    for row in rows:
        assert sum(row[1:]) == pytest.approx(1.0)
    summary = json.loads((tmp_path / "summary.json").read_text())
    assert summary["runs"] == 4
    assert "curve_mean" not in summary


def test_experiment_needs_values(write_config, tmp_path):
    result = invoke(
        "experiment", "validation", "--config", write_config(), "--out", tmp_path
    )
    assert result.exit_code == 2
    assert "experiment.values" in result.output


def test_unknown_experiment_is_a_usage_error(write_config, tmp_path):
    result = invoke("experiment", "bogus", "--config", write_config())
    assert result.exit_code == 2


def test_summary_agrees_with_written_trajectory(write_config, tmp_path):
    config = write_config(policy={"kind": "threshold", "times": [1.0, 2.0]})
    result = invoke("simulate", "--config", config, "--out", tmp_path)
    assert result.exit_code == 0, result.output
    rows = read_csv(tmp_path / "trajectory.csv")
    summary = json.loads((tmp_path / "summary.json").read_text())
    a = (4, 1, 0)

    def cost(row):
        S, I = row[1:4], row[4:7]  # noqa: E741
        return sum(ai * (s + i) for ai, s, i in zip(a, S, I))

    delivery = 1 - math.exp(-2 * rows[-1][7])
    assert summary["delivery"] == pytest.approx(delivery, abs=1e-9)
    assert summary["unbiased_cost"] == pytest.approx(
        cost(rows[-1]) - cost(rows[0]), abs=1e-9
    )
