import json
import socket

import pytest

from uavreward.cli import main
from uavreward.environment import propulsion_power
from uavreward.reward import PAPER_FIXTURE_RESPONSE

SMALL = """\
n_terminals = 3
horizon = 30

[agent]
hidden_sizes = 8, 8
batch_size = 8
warmup_steps = 20

[experiment]
episodes = 2
seeds = 0, 1
"""


@pytest.fixture
def cfg(tmp_path):
    path = tmp_path / "small.cfg"
    path.write_text(SMALL)
    return str(path)


@pytest.fixture
def no_network(monkeypatch):
    def refuse(*a, **k):
        raise AssertionError("network access attempted")
    monkeypatch.setattr(socket.socket, "connect", refuse)


def test_simulate_hover(tmp_path, cfg, capsys):
    out = tmp_path / "sim"
    assert main(["simulate", "--config", cfg, "--policy", "hover", "--seed", "2", "--out", str(out)]) == 0
    summary = json.loads((out / "simulate_summary.json").read_text())
    assert summary["propulsion"] == pytest.approx(propulsion_power(0.0) * 0.5 * summary["slots"], rel=1e-12)
    lines = (out / "trace.csv").read_text().splitlines()
    assert len(lines) == summary["slots"] + 1
    assert "propulsion" in capsys.readouterr().out


def test_simulate_is_byte_identical(tmp_path, cfg):
    for name in ("a", "b"):
        assert main(["simulate", "--config", cfg, "--policy", "random", "--seed", "4", "--out",
                     str(tmp_path / name)]) == 0
    assert (tmp_path / "a" / "trace.csv").read_bytes() == (tmp_path / "b" / "trace.csv").read_bytes()


def test_unknown_policy_is_usage_error(tmp_path):
    with pytest.raises(SystemExit) as err:
        main(["simulate", "--policy", "spiral", "--out", str(tmp_path)])
    assert err.value.code == 2


def test_missing_config_file(tmp_path):
    assert main(["simulate", "--config", str(tmp_path / "nope.cfg"), "--out", str(tmp_path / "o")]) == 2


def test_bad_config_value(tmp_path):
    path = tmp_path / "bad.cfg"
    path.write_text("bandwidth = -3\n")
    assert main(["simulate", "--config", str(path), "--out", str(tmp_path / "o")]) == 2


def test_design_reward_scripted_paper_formula(tmp_path, no_network):
    script = tmp_path / "script.json"
    script.write_text(json.dumps([PAPER_FIXTURE_RESPONSE]))
    out = tmp_path / "design"
    assert main(["design-reward", "--provider", "scripted", "--script", str(script), "--out", str(out)]) == 0
    program = json.loads((out / "program.json").read_text())
    assert program["expression"] == "(0.6 * energy + 0.4 * position) * penalty"
    assert json.loads((out / "trail.json").read_text())["accepted"] is True


def test_design_reward_exhaustion(tmp_path, no_network):
    script = tmp_path / "script.json"
    script.write_text(json.dumps(["the reward is energy"]))
    out = tmp_path / "design"
    code = main(["design-reward", "--provider", "scripted", "--script", str(script), "--out", str(out),
                 "-k", "1", "--max-reflections", "2"])
    assert code == 4
    trail = json.loads((out / "trail.json").read_text())
    assert trail["rounds"] == 3 and not trail["accepted"]
    assert not (out / "program.json").exists()


def test_design_reward_missing_fixture(tmp_path, no_network):
    code = main(["design-reward", "--provider", "fixture", "--fixtures", str(tmp_path / "fx"),
                 "--out", str(tmp_path / "d"), "-k", "1", "--max-reflections", "0"])
    assert code == 5


def test_design_reward_live_without_key(tmp_path, monkeypatch):
    monkeypatch.delenv("UAVREWARD_API_KEY", raising=False)
    assert main(["design-reward", "--provider", "live", "--out", str(tmp_path / "d")]) == 2


def test_train_writes_runs(tmp_path, cfg, no_network):
    out = tmp_path / "train"
    assert main(["train", "--config", cfg, "--algorithm", "ddpg", "--reward", "paper_fixture", "--seed", "3",
                 "--out", str(out), "--no-figures"]) == 0
    assert [p.name for p in (out / "runs").iterdir()] == ["ddpg-paper_fixture__seed3.csv"]


def test_compare_offline_and_deterministic(tmp_path, cfg, no_network, capsys):
    args = ["compare", "--config", cfg, "--arms", "td3-manual,td3-paper_fixture"]
    assert main(args + ["--out", str(tmp_path / "a")]) == 0
    assert main(args + ["--out", str(tmp_path / "b")]) == 0
    assert "improvement td3:paper_fixture" in capsys.readouterr().out
    for name in ("summary.json", "curves.csv", "runs/td3-manual__seed0.csv"):
        assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()


def test_compare_with_designed_program(tmp_path, cfg, no_network):
    program = tmp_path / "program.json"
    program.write_text(json.dumps({"expression": "energy * penalty"}))
    out = tmp_path / "c"
    assert main(["compare", "--config", cfg, "--episodes", "1", "--no-figures", "--out", str(out),
                 "--arms", f"td3-manual,td3-llm_program:{program}"]) == 0
    assert "td3:llm_program" in json.loads((out / "summary.json").read_text())["improvements"]


def test_invalid_algorithm_writes_nothing(tmp_path, cfg):
    out = tmp_path / "never"
    assert main(["compare", "--config", cfg, "--arms", "ppo-manual", "--out", str(out)]) == 2
    assert not out.exists()


def test_sweep_default_sizes(tmp_path, cfg, no_network):
    out = tmp_path / "sweep"
    assert main(["sweep", "--config", cfg, "--episodes", "1", "--seed", "0", "--arms", "td3-manual",
                 "--out", str(out)]) == 0
    sizes = {row.split(",")[0] for row in (out / "packet_table.csv").read_text().splitlines()[1:]}
    assert sizes == {"2000000.0", "2200000.0", "2400000.0", "2600000.0", "2800000.0"}


def test_runtime_abort_exit_code(tmp_path, cfg, monkeypatch):
    from uavreward import bench
    monkeypatch.setattr(bench, "reward_function", lambda c: (lambda f: float("inf")))
    assert main(["train", "--config", cfg, "--out", str(tmp_path / "t"), "--episodes", "1"]) == 3
