import csv
import json
from pathlib import Path

import pytest

from agentsea.cli import main
from agentsea.runner import ConfigError, load_config, parse_config, read_report, replay_file, run_scenario

SCENARIOS = Path(__file__).resolve().parent.parent / "scenarios"
MINIMAL = '[scenario]\nexperiments = ["diagnostics"]\nseeds = [0]\n'


def test_parse_minimal_defaults():
    cfg = parse_config(MINIMAL)
    assert cfg.seed == 0 and cfg.backend == "template" and cfg.experiments == ("diagnostics",)
    assert cfg.acceptance["min_accuracy_pct"] == 100


@pytest.mark.parametrize("text,where", [
    ('[scenario]\nexperiments = ["nope"]\nseeds = [0]\n', "scenario.experiments"),
    ('[scenario]\nexperiments = ["planner"]\nseeds = []\n', "scenario.seeds"),
    (MINIMAL + 'backend = "psychic"\n', "scenario.backend"),
    (MINIMAL + 'colour = "red"\n', "scenario.colour"),
    (MINIMAL + '[sensors]\nmiss_prob = 1.5\n', "sensors.miss_prob"),
    (MINIMAL + '[weather]\nrain = 1\n', "weather"),
    (MINIMAL + 'backend = "playback"\n', "scenario.transcript"),
    ('[world]\nresolution = 1\n', "scenario"),
])
def test_field_errors_name_the_field(text, where):
    with pytest.raises(ConfigError, match=f"^{where}: "):
        parse_config(text)


def test_missing_map_names_world_map(tmp_path):
    with pytest.raises(ConfigError, match=r"^world\.map: file not found"):
        parse_config(MINIMAL + '[world]\nmap = "nowhere.txt"\n', tmp_path)


def test_goal_inside_obstacle(tmp_path):
    (tmp_path / "m.txt").write_text("...\n.#.\n...\n")
    text = MINIMAL + '[world]\nmap = "m.txt"\nresolution = 1.0\n[world.goals]\nbad = [1.5, 1.5, 2.0]\n'
    with pytest.raises(ConfigError, match=r"world\.goals\.bad"):
        parse_config(text, tmp_path)


def test_toml_syntax_error_reports_line(tmp_path):
    p = tmp_path / "bad.toml"
    p.write_text('[scenario]\nname = "x\n')
    with pytest.raises(ConfigError, match=r"bad\.toml: .*line 2"):
        load_config(p)


def test_remote_backend_needs_env(monkeypatch, tmp_path):
    monkeypatch.delenv("AGENTSEA_REMOTE_URL", raising=False)
    with pytest.raises(ConfigError, match="AGENTSEA_REMOTE_URL"):
        run_scenario(parse_config(MINIMAL), tmp_path, backend="remote")


def test_diagnostics_bundle(tmp_path):
    bundle = run_scenario(SCENARIOS / "diagnostics.toml", tmp_path / "a")
    assert bundle.passed and bundle.exit_code() == 0
    rows = list(csv.DictReader((tmp_path / "a" / "diagnostics.csv").open()))
    assert list(rows[0]) == ["case", "simulated_fault", "trials", "correct", "accuracy_pct"]
    assert len(rows) == 5 and all(r["accuracy_pct"] == "100.0" for r in rows)
    assert set(bundle.artifacts) >= {"diagnostics.csv", "traces/diagnostics.jsonl", "traces/diagnostics.inbox.json"}
    again = run_scenario(SCENARIOS / "diagnostics.toml", tmp_path / "b")
    assert again.digest == bundle.digest
    for rel in bundle.artifacts:
        assert (tmp_path / "a" / rel).read_bytes() == (tmp_path / "b" / rel).read_bytes()
    bus, expected = replay_file(tmp_path / "a" / "traces" / "diagnostics.jsonl")
    assert bus.inbox_digests() == expected


def test_tick_budget_check_fails(tmp_path):
    bundle = run_scenario(SCENARIOS / "diagnostics.toml", tmp_path, ticks=5)
    assert not bundle.passed and bundle.exit_code() == 1
    checks = bundle.summary["experiments"]["diagnostics"]
    assert any(c["check"] == "tick budget" and not c["passed"] for c in checks)


def test_cli_run_report_replay(tmp_path, capsys):
    out = tmp_path / "run"
    assert main(["run", "--scenario", str(SCENARIOS / "diagnostics.toml"), "--out", str(out)]) == 0
    text = capsys.readouterr().out
    assert "PASS" in text and "report digest" in text
    assert main(["report", "--in", str(out)]) == 0
    assert main(["replay", "--trace", str(out / "traces" / "diagnostics.jsonl")]) == 0
    assert "inbox digests match" in capsys.readouterr().out
    side = out / "traces" / "diagnostics.inbox.json"
    digests = json.loads(side.read_text())
    digests[next(iter(digests))] = "0" * 64
    side.write_text(json.dumps(digests))
    assert main(["replay", "--trace", str(out / "traces" / "diagnostics.jsonl")]) == 1


def test_cli_config_errors_exit_2(tmp_path, capsys):
    bad = tmp_path / "bad.toml"
    bad.write_text(MINIMAL + '[world]\nmap = "gone.txt"\n')
    assert main(["run", "--scenario", str(bad), "--out", str(tmp_path / "o")]) == 2
    assert "world.map" in capsys.readouterr().err
    assert main(["report", "--in", str(tmp_path)]) == 2
    assert main(["replay", "--trace", str(tmp_path / "missing.jsonl")]) == 2


def test_cli_diagnose(tmp_path, capsys):

    out = tmp_path / "run"
    run_scenario(SCENARIOS / "diagnostics.toml", out)
    assert main(["diagnose", "--status-log", str(out / "traces" / "diagnostics.jsonl")]) == 0
    text = capsys.readouterr().out
    assert "STATUS:" in text
    short = tmp_path / "short.jsonl"
    short.write_text("\n".join(json.dumps({"t": 0.1 * k, "armed": True, "mode": "x", "thrusters": [
        {"id": i, "pwm_cmd": 1500.0, "pwm_obs": 1500.0} for i in range(8)]}) for k in range(3)))
    assert main(["diagnose", "--status-log", str(short)]) == 1


def test_cli_synth(tmp_path, capsys):
    req = {"kind": "stateful averaging filter", "inputs": [{"topic": "sensors/value", "schema_id": "scalar"}],
           "output": {"topic": "filters/value", "schema_id": "scalar"}, "params": {"window": 10}}
    p = tmp_path / "req.json"
    p.write_text(json.dumps(req))
    assert main(["synth", "--request", str(p), "--out", str(tmp_path / "nodes")]) == 0
    assert list((tmp_path / "nodes").glob("*.json"))
    req["kind"] = "teleport vehicle"
    p.write_text(json.dumps(req))
    assert main(["synth", "--request", str(p)]) == 1
    p.write_text("{}")
    assert main(["synth", "--request", str(p)]) == 2


def test_read_report_roundtrip(tmp_path):
    bundle = run_scenario(SCENARIOS / "diagnostics.toml", tmp_path)
    assert read_report(tmp_path)["artifacts"] == bundle.artifacts
