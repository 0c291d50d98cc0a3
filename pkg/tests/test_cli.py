import json
import re
import sys
from pathlib import Path

import pytest

from accel_eval import cli
from accel_eval.behavior_models import ThreatModel
from accel_eval.data_ingest import LogProfile, generate_synthetic_log, write_log_csv
from accel_eval.fixtures import always_crash_cut_in, enumerable_car_following, inflated_car_following

PLUGIN = Path(__file__).parent / "plugins" / "echo_policy.py"


def write_config(tmp_path, name="run.json", **overrides):
    cfg = {
        "run_id": name.removesuffix(".json"),
        "scenario": "car_following",
        "policy": {"kind": "idm"},
        "threat_model": {"inline": enumerable_car_following().to_dict()},
        "method": "crude",
        "n": 2000,
        "master_seed": 5,
        "sim": {"horizon": 20.0},
        "output_dir": name.removesuffix(".json"),
    }
    cfg.update(overrides)
    for key in [k for k, v in cfg.items() if v is None]:
        del cfg[key]
    path = tmp_path / name
    path.write_text(json.dumps(cfg))
    return path


def strip_timing(text: str) -> str:
    return re.sub(r'"wall_s": [^\n]*', '"wall_s": _', text)


def report_of(tmp_path, name):
    return json.loads((tmp_path / name / "report.json").read_text())


class TestHelp:
    @pytest.mark.parametrize("command, flags", [
        ("fit", ["--logs", "--scenario", "--families", "--out"]),
        ("run", ["--config", "--workers", "--dump-trajectories"]),
        ("compare", ["--report-a", "--report-b"]),
        ("report", ["--report", "--out"]),
    ])
    def test_flags_documented(self, capsys, command, flags):
        assert cli.main([command, "--help"]) == 0
        out = capsys.readouterr().out
        for flag in flags:
            assert flag in out

    def test_top_level_lists_subcommands_and_exit_codes(self, capsys):
        assert cli.main(["--help"]) == 0
        out = capsys.readouterr().out
        for word in ("fit", "run", "compare", "report", "ACCEL_EVAL_WORKERS", "ACCEL_EVAL_OUT"):
            assert word in out

    def test_usage_error_is_config_code(self):
        assert cli.main(["run"]) == 2


class TestFit:
    def test_empty_dir(self, tmp_path, capsys):
        (tmp_path / "logs").mkdir()
        assert cli.main(["fit", "--logs", str(tmp_path / "logs"), "--scenario", "car_following",
                         "--out", str(tmp_path / "m.json")]) == 3
        assert "no events extracted" in capsys.readouterr().err

    def test_valid_logs(self, tmp_path, capsys):
        logs = tmp_path / "logs"
        logs.mkdir()
        for seed in range(2):
            write_log_csv(generate_synthetic_log(LogProfile(duration=1800), seed).log, logs / f"d{seed}.csv")
        out = tmp_path / "model.json"
        assert cli.main(["fit", "--logs", str(logs), "--scenario", "car_following", "--families",
                         "tau=exponential", "--out", str(out), "--events-out", str(tmp_path / "ev.json")]) == 0
        m = ThreatModel.from_json(out.read_text())
        assert m == ThreatModel.from_json(m.to_json()) and m.variables["tau"].family == "exponential"
        assert "v0:" in capsys.readouterr().out
        assert json.loads((tmp_path / "ev.json").read_text())

    def test_unknown_family(self, tmp_path):
        (tmp_path / "logs").mkdir()
        assert cli.main(["fit", "--logs", str(tmp_path / "logs"), "--scenario", "car_following",
                         "--families", "d=gamma", "--out", str(tmp_path / "m.json")]) == 2

    def test_bad_log(self, tmp_path, capsys):
        (tmp_path / "logs").mkdir()
        (tmp_path / "logs" / "x.csv").write_text("t,lead_speed,gap\n0,1,1\n0.1,oops,1\n")
        assert cli.main(["fit", "--logs", str(tmp_path / "logs"), "--scenario", "cut_in",
                         "--out", str(tmp_path / "m.json")]) == 3
        assert "x.csv:3" in capsys.readouterr().err


class TestRun:
    def test_always_crash(self, tmp_path):
        cfg = write_config(tmp_path, scenario="cut_in", threat_model={"inline": always_crash_cut_in().to_dict()},
                           n=100)
        assert cli.main(["run", "--config", str(cfg)]) == 0
        rep = report_of(tmp_path, "run")
        assert rep["estimates"][0]["p_hat"] == 1.0 and rep["non_converged"] is False
        for f in ("report.json", "summary.txt", "convergence.csv", "weights.csv"):
            assert (tmp_path / "run" / f).is_file()

    def test_workers_byte_identical(self, tmp_path):
        cfg = write_config(tmp_path, method="is_ce", n=3000, metrics=["crash", "injury"],
                           ce={"iterations": 3, "samples_per_iter": 1000})
        texts = []
        for w in (1, 2, 8, 8):
            assert cli.main(["run", "--config", str(cfg), "--workers", str(w)]) == 0
            texts.append(strip_timing((tmp_path / "run" / "report.json").read_text()))
        assert len(set(texts)) == 1
        assert "workers" not in texts[0]

    def test_tiny_cap_non_converged(self, tmp_path):
        cfg = write_config(tmp_path, n=None, threat_model={"inline": inflated_car_following().to_dict()},
                           stopping_rule={"batch_size": 50, "max_episodes": 100})
        assert cli.main(["run", "--config", str(cfg)]) == 4
        rep = report_of(tmp_path, "run")
        assert rep["non_converged"] is True and rep["estimates"][0]["converged"] is False

    def test_stopping_rule_converges(self, tmp_path):
        cfg = write_config(tmp_path, n=None, method="is_ce",
                           threat_model={"inline": inflated_car_following().to_dict()},
                           stopping_rule={"batch_size": 1000, "max_episodes": 100_000})
        assert cli.main(["run", "--config", str(cfg)]) == 0
        rep = report_of(tmp_path, "run")
        est = rep["estimates"][0]
        assert est["converged"] is True
        assert (est["ci"][1] - est["ci"][0]) / 2 <= 0.2 * est["p_hat"]
        assert len(rep["convergence"]) == est["n"] // 1000

    def test_is_needs_proposal(self, tmp_path):
        assert cli.main(["run", "--config", str(write_config(tmp_path, method="is"))]) == 2

    def test_is_with_proposal_file(self, tmp_path):
        prop = enumerable_car_following().tilted({"d": 0.3})
        (tmp_path / "prop.json").write_text(prop.to_json())
        cfg = write_config(tmp_path, method="is", proposal={"file": "prop.json"})
        assert cli.main(["run", "--config", str(cfg)]) == 0
        assert report_of(tmp_path, "run")["acceleration_factor"] > 0

    @pytest.mark.parametrize("overrides", [
        {"stopping_rule": {"batch_size": 10}},
        {"method": "magic"},
        {"threat_model": {"file": "missing.json"}},
        {"policy": {"kind": "teleport"}},
        {"extra_key": 1},
        {"scenario": "cut_in"},
        {"metrics": ["fatality"]},
        {"sim": {"dt": -1}},
    ])
    def test_config_errors(self, tmp_path, overrides):
        assert cli.main(["run", "--config", str(write_config(tmp_path, **overrides))]) == 2

    def test_bad_json(self, tmp_path):
        (tmp_path / "x.json").write_text("{not json")
        assert cli.main(["run", "--config", str(tmp_path / "x.json")]) == 2
        assert cli.main(["run", "--config", str(tmp_path / "nope.json")]) == 2

    def test_policy_fault(self, tmp_path, capsys):
        cfg = write_config(tmp_path, scenario="cut_in", n=5,
                           threat_model={"inline": always_crash_cut_in().to_dict()},
                           policy={"kind": "external", "command": [sys.executable, str(PLUGIN), "stall"],
                                   "policy_id": "vendor-x", "timeout": 0.05})
        assert cli.main(["run", "--config", str(cfg)]) == 5
        assert "vendor-x" in capsys.readouterr().err

    def test_external_policy_flagged(self, tmp_path):
        cfg = write_config(tmp_path, scenario="cut_in", n=3,
                           threat_model={"inline": always_crash_cut_in().to_dict()},
                           policy={"kind": "external", "command": [sys.executable, str(PLUGIN)],
                                   "policy_id": "vendor-y", "timeout": 5.0})
        assert cli.main(["run", "--config", str(cfg)]) == 0
        rep = report_of(tmp_path, "run")
        assert rep["deterministic"] is False and rep["policy_id"] == "vendor-y"
        assert "not bit-reproducible" in (tmp_path / "run" / "summary.txt").read_text()

    def test_env_overrides(self, tmp_path, monkeypatch):
        monkeypatch.setenv("ACCEL_EVAL_OUT", str(tmp_path / "elsewhere"))
        monkeypatch.setenv("ACCEL_EVAL_WORKERS", "2")
        assert cli.main(["run", "--config", str(write_config(tmp_path))]) == 0
        assert (tmp_path / "elsewhere" / "report.json").is_file()
        monkeypatch.setenv("ACCEL_EVAL_WORKERS", "zero")
        assert cli.main(["run", "--config", str(write_config(tmp_path))]) == 2

    def test_dump_trajectories(self, tmp_path):
        cfg = write_config(tmp_path, n=500)
        assert cli.main(["run", "--config", str(cfg), "--dump-trajectories"]) == 0
        files = sorted((tmp_path / "run" / "trajectories").glob("*.csv"))
        assert 1 <= len(files) <= cli.DUMP_LIMIT
        assert files[0].read_text().startswith("t,ego_pos,ego_v,ego_a,lead_pos,lead_v,lead_a,gap,ttc")


class TestCompare:
    def _run(self, tmp_path, name, **kw):
        cfg = write_config(tmp_path, name=name, **kw)
        assert cli.main(["run", "--config", str(cfg)]) in (0, 4)
        return str(tmp_path / name.removesuffix(".json") / "report.json")

    def test_self(self, tmp_path, capsys):
        a = self._run(tmp_path, "a.json")
        out = tmp_path / "cmp.json"
        assert cli.main(["compare", "--report-a", a, "--report-b", a, "--out", str(out)]) == 0
        cmp = json.loads(out.read_text())
        assert cmp["z"] == 0 and cmp["acceleration_factor"] == 1 and cmp["agree"]

    def test_crude_vs_is(self, tmp_path):
        model = {"inline": inflated_car_following().to_dict()}
        a = self._run(tmp_path, "crude.json", threat_model=model, n=40_000)
        b = self._run(tmp_path, "is.json", threat_model=model, n=4_000, method="is_ce",
                      ce={"samples_per_iter": 1000})
        out = tmp_path / "cmp.json"
        assert cli.main(["compare", "--report-a", a, "--report-b", b, "--out", str(out)]) == 0
        cmp = json.loads(out.read_text())
        assert abs(cmp["z"]) <= 3 and cmp["acceleration_factor"] > 1

    def test_scenario_mismatch(self, tmp_path):
        a = self._run(tmp_path, "a.json")
        b = self._run(tmp_path, "b.json", scenario="cut_in", n=10,
                      threat_model={"inline": always_crash_cut_in().to_dict()})
        assert cli.main(["compare", "--report-a", a, "--report-b", b, "--out", str(tmp_path / "c.json")]) == 2

    def test_metric_mismatch(self, tmp_path):
        a = self._run(tmp_path, "a.json")
        b = self._run(tmp_path, "b.json", metrics=["conflict"])
        assert cli.main(["compare", "--report-a", a, "--report-b", b, "--out", str(tmp_path / "c.json")]) == 2

    def test_disagreement(self, tmp_path):
        a = self._run(tmp_path, "a.json")
        rep = json.loads(Path(a).read_text())
        rep["estimates"][0]["p_hat"] += 0.5
        b = tmp_path / "shifted.json"
        b.write_text(json.dumps(rep))
        assert cli.main(["compare", "--report-a", a, "--report-b", str(b), "--out", str(tmp_path / "c.json")]) == 6

    def test_missing_report(self, tmp_path):
        assert cli.main(["compare", "--report-a", str(tmp_path / "x"), "--report-b", str(tmp_path / "y")]) == 3


def test_report_rerender(tmp_path, capsys):
    assert cli.main(["run", "--config", str(write_config(tmp_path))]) == 0
    out = tmp_path / "again"
    assert cli.main(["report", "--report", str(tmp_path / "run" / "report.json"), "--out", str(out)]) == 0
    assert (out / "summary.txt").read_text() == (tmp_path / "run" / "summary.txt").read_text()
    assert (out / "convergence.csv").read_text() == (tmp_path / "run" / "convergence.csv").read_text()
