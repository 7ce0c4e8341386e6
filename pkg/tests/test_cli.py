import json

import pytest

from platoonlab.cli import EXIT_BAD_INPUT, EXIT_COLLISION, EXIT_INFEASIBLE, EXIT_OK, main
from platoonlab.dynamics import default_scenario

SHORT = ["--duration", "27", "--format", "csv"]


def _last_json(capsys):
    return json.loads(capsys.readouterr().out.strip().splitlines()[-1])


def test_run_acc_writes_outputs(tmp_path, capsys):
    out = tmp_path / "acc"
    assert main(["run", "--controller", "acc", "--out", str(out), *SHORT]) == EXIT_OK
    summary = _last_json(capsys)
    assert summary["controller"] == "acc" and not summary["collision"]
    for name in ("trajectory.csv", "telemetry.csv", "metrics.json", "run.json", "data/X0.csv"):
        assert (out / name).exists(), name


def test_run_then_synth_then_metrics(tmp_path, capsys):
    out = tmp_path / "dual"
    assert main(["run", "--out", str(out), *SHORT]) == EXIT_OK
    run_summary = _last_json(capsys)
    assert main(["synth", "--data", str(out / "data"), "--out", str(tmp_path / "syn")]) == EXIT_OK
    gains = json.loads((tmp_path / "syn" / "gains.json").read_text())
    assert len(gains["K"][0]) == 15 and gains["gamma"] > 0
    run = json.loads((out / "run.json").read_text())
    assert gains["K"][0] == pytest.approx(run["synthesis"]["K"], rel=1e-6, abs=1e-9)
    capsys.readouterr()
    assert main(["metrics", "--log", str(out / "trajectory.csv")]) == EXIT_OK
    again = json.loads(capsys.readouterr().out)
    assert again["rms_spacing_error"] == pytest.approx(run_summary["rms_spacing_error"], rel=1e-12)


def test_batch_gets_one_directory_per_run(tmp_path, capsys):
    code = main(["run", "--controller", "acc", "--seed", "1", "2", "--jobs", "2",
                 "--out", str(tmp_path), *SHORT])
    assert code == EXIT_OK
    assert (tmp_path / "acc_seed1" / "trajectory.csv").exists()
    assert (tmp_path / "acc_seed2" / "trajectory.csv").exists()


def test_infeasible_bound_exits_2(tmp_path, capsys):
    out = tmp_path / "bad"
    cfg = tmp_path / "cfg.json"
    cfg.write_text(json.dumps({"bisect_on_infeasible": False}))
    argv = ["run", "--delta", "1.0", "--config", str(cfg), "--out", str(out), *SHORT]
    assert main(argv) == EXIT_INFEASIBLE
    failure = json.loads((out / "synthesis_failure.json").read_text())
    assert failure["diagnostics"]["delta"] == 1.0


def test_collision_exits_3(tmp_path, capsys):
    d = default_scenario().to_dict()
    d["initial_states"][-1] = [39.0, 35.0, 0.0]  # 1 m behind vehicle 4 and closing fast
    path = tmp_path / "scenario.json"
    path.write_text(json.dumps(d))
    code = main(["run", "--controller", "acc", "--scenario", str(path), "--out", str(tmp_path / "c"), *SHORT])
    assert code == EXIT_COLLISION
    assert _last_json(capsys)["collision_detail"]["vehicle"] == 5


@pytest.mark.parametrize("argv", [
    ["run", "--cycle", "missing.csv"],
    ["run", "--controller", "pid"],
    ["run", "--horizon", "0"],
    ["synth", "--data", "nowhere"],
    ["metrics", "--log", "nowhere.csv"],
])
def test_bad_input_exits_4(tmp_path, argv, capsys):
    argv = list(argv)
    if argv[0] != "metrics":
        argv += ["--out", str(tmp_path / "o")]
    if argv[0] == "run":
        argv += SHORT
    assert main(argv) == EXIT_BAD_INPUT


def test_bad_config_file_exits_4(tmp_path):
    cfg = tmp_path / "cfg.json"
    cfg.write_text(json.dumps({"T": 300, "not_a_field": 1}))
    assert main(["run", "--config", str(cfg), "--out", str(tmp_path / "o"), *SHORT]) == EXIT_BAD_INPUT
    cfg.write_text("{broken")
    assert main(["run", "--config", str(cfg), "--out", str(tmp_path / "o"), *SHORT]) == EXIT_BAD_INPUT


def test_cli_flags_override_config_file(tmp_path, capsys):
    cfg = tmp_path / "cfg.json"
    cfg.write_text(json.dumps({"T": 400, "excitation": 0.05}))
    out = tmp_path / "o"
    assert main(["run", "--controller", "acc", "--config", str(cfg), "--T", "450",
                 "--out", str(out), *SHORT]) == EXIT_OK
    meta = json.loads((out / "run.json").read_text())["meta"]
    assert meta["config"]["T"] == 450 and meta["config"]["excitation"] == 0.05
