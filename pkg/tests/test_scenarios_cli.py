"""Config loading, override plumbing, and the command-line entry points."""

import json
import os

import pytest
import yaml

from hetvnet import (apply_overrides, build, bundled_config_path, cli,
                     load_config, report_from_trace, validate_world)
from hetvnet.engine import EngineInvariantError
from hetvnet.scenarios import ConfigError

BUNDLED = ("freeflow-small", "syncflow-reference", "intersection-small",
           "overtake-regression")


def freeflow_cfg():
    return load_config(bundled_config_path("freeflow-small"))


def write_yaml(tmp_path, name, payload):
    path = tmp_path / name
    with open(path, "w") as fh:
        yaml.safe_dump(payload, fh)
    return str(path)


def overlap_cfg(tmp_path):
    return write_yaml(tmp_path, "bad-overlap.yaml", {
        "schema_version": 1, "name": "bad-overlap", "scenario": "freeflow",
        "seed": 1, "duration_s": 5.0,
        "road": {"segments": [{"id": 0, "length_m": 1000.0, "lanes": 2,
                               "speed_limit_mps": 30.0}]},
        "traffic": {"density_veh_per_km": 2.0, "vehicles": [
            {"id": 0, "kind": "Adv", "lane": 0, "s_m": 100.0,
             "speed_mps": 10.0, "desired_mps": 20.0},
            {"id": 1, "kind": "Adv", "lane": 0, "s_m": 102.0,
             "speed_mps": 10.0, "desired_mps": 20.0}]},
    })


class TestBundledConfigs:

    @pytest.mark.parametrize("name", BUNDLED)
    def test_builds_into_a_valid_world(self, name):
        bundle = build(load_config(bundled_config_path(name)))
        assert bundle.name == name
        states = {v: rt.state for v, rt in bundle.world.runtimes.items()}
        kinds = {v: rt.kind for v, rt in bundle.world.runtimes.items()}
        problems = validate_world(bundle.world.network, states, kinds,
                                  bundle.world.platoons)
        assert problems == []

    def test_seed_override(self):
        bundle = build(freeflow_cfg(), seed=123)
        assert bundle.seed == 123


class TestConfigDiagnostics:

    def test_unknown_top_level_key(self):
        with pytest.raises(ConfigError, match="unknown key"):
            build(apply_overrides(freeflow_cfg(), {"bogus": 1}))

    def test_unknown_nested_key(self):
        with pytest.raises(ConfigError, match="traffic: unknown key"):
            build(apply_overrides(freeflow_cfg(), {"traffic.nope": 1}))

    def test_subband_widths_must_be_ordered(self):
        bad = {"radio.subband_widths": [600, 360, 240]}
        with pytest.raises(ConfigError, match="M1 <= M2 <= M3"):
            build(apply_overrides(freeflow_cfg(), bad))

    def test_freeflow_density_upper_bound(self):
        cfg = apply_overrides(freeflow_cfg(),
                              {"traffic.density_veh_per_km": 16.0})
        cfg["traffic"]["vehicles"] = []
        cfg["traffic"]["scripts"] = []
        with pytest.raises(ConfigError, match="free flow requires density"):
            build(cfg)

    def test_syncflow_density_lower_bound(self):
        cfg = load_config(bundled_config_path("syncflow-reference"))
        with pytest.raises(ConfigError, match="requires density >= 15.0"):
            build(apply_overrides(cfg, {"traffic.density_veh_per_km": 3.0}))

    def test_psm_period_must_align_with_dt(self):
        with pytest.raises(ConfigError, match="integer.*multiple of dt"):
            build(apply_overrides(freeflow_cfg(), {"psm_period_s": 0.25}))

    def test_per_bounds(self):
        with pytest.raises(ConfigError, match="must be >= 0.0"):
            build(apply_overrides(freeflow_cfg(), {"links.v2v.per": -0.5}))

    def test_missing_file(self):
        with pytest.raises(ConfigError, match="No such file"):
            load_config("/nonexistent/config.yaml")

    def test_malformed_yaml(self, tmp_path):
        path = tmp_path / "broken.yaml"
        path.write_text("a: [unclosed\n")
        with pytest.raises(ConfigError, match="not valid YAML"):
            load_config(str(path))

    def test_non_mapping_document(self, tmp_path):
        path = tmp_path / "list.yaml"
        path.write_text("- 1\n- 2\n")
        with pytest.raises(ConfigError, match="top level must be a mapping"):
            load_config(str(path))


class TestOverrides:

    def test_dotted_path_sets_nested_value(self):
        cfg = freeflow_cfg()
        out = apply_overrides(cfg, {"links.v2v.per": 0.25,
                                    "duration_s": 5.0})
        assert out["links"]["v2v"]["per"] == 0.25
        assert out["duration_s"] == 5.0

    def test_original_is_untouched(self):
        cfg = freeflow_cfg()
        before = json.dumps(cfg, sort_keys=True, default=str)
        apply_overrides(cfg, {"duration_s": 1.0, "links.v2v.per": 0.9})
        assert json.dumps(cfg, sort_keys=True, default=str) == before


class TestCliValidate:

    def test_valid_config(self, capsys):
        code = cli.main(["validate", bundled_config_path("freeflow-small")])
        assert code == 0
        out = capsys.readouterr().out
        assert "ok" in out and "freeflow-small" in out

    def test_invalid_world(self, tmp_path, capsys):
        code = cli.main(["validate", overlap_cfg(tmp_path)])
        assert code == 2
        assert "invalid" in capsys.readouterr().err

    def test_missing_config(self, capsys):
        code = cli.main(["validate", "/nonexistent/config.yaml"])
        assert code == 2
        assert "config error" in capsys.readouterr().err


class TestCliRun:

    def test_run_writes_trace_and_report(self, tmp_path, capsys):
        out_dir = str(tmp_path)
        code = cli.main(["run", bundled_config_path("freeflow-small"),
                         "--seed", "11", "--out", out_dir])
        assert code == 0
        trace = tmp_path / "freeflow-small-seed11.trace.jsonl"
        report = tmp_path / "freeflow-small-seed11.report.json"
        assert trace.exists() and report.exists()
        with open(report) as fh:
            written = json.load(fh)
        assert written == report_from_trace(str(trace))
        out = capsys.readouterr().out
        assert "freeflow-small" in out and "Atm" in out

    def test_out_dir_from_environment(self, tmp_path, capsys, monkeypatch):
        monkeypatch.setenv(cli.OUT_DIR_ENV, str(tmp_path / "envdir"))
        code = cli.main(["run", bundled_config_path("overtake-regression")])
        assert code == 0
        files = sorted(p.name for p in (tmp_path / "envdir").iterdir())
        assert files == ["overtake-regression-seed5.report.json",
                         "overtake-regression-seed5.trace.jsonl"]

    def test_runtime_failure_cleans_up_and_exits_3(self, tmp_path, capsys,
                                                   monkeypatch):
        def boom(*args, **kwargs):
            raise EngineInvariantError("vehicle 0 teleported")
        monkeypatch.setattr(cli, "run_simulation", boom)
        code = cli.main(["run", bundled_config_path("freeflow-small"),
                         "--out", str(tmp_path)])
        assert code == 3
        assert "runtime invariant failure" in capsys.readouterr().err
        assert list(tmp_path.iterdir()) == []

    def test_unwritable_out_dir_exits_3(self, tmp_path, capsys):
        blocker = tmp_path / "occupied"
        blocker.write_text("a file, not a directory\n")
        code = cli.main(["run", bundled_config_path("overtake-regression"),
                         "--out", str(blocker)])
        assert code == 3
        assert "i/o error" in capsys.readouterr().err


class TestCliSweep:

    def test_radio_axis(self, tmp_path, capsys):
        code = cli.main(["sweep", bundled_config_path("freeflow-small"),
                         "--axis", "K", "--values", "1", "2",
                         "--seeds", "1", "2", "--out", str(tmp_path)])
        assert code == 0
        out = capsys.readouterr().out
        assert "collision_prob" in out and "analytic" in out
        with open(tmp_path / "sweep-K-freeflow-small.json") as fh:
            doc = json.load(fh)
        assert doc["axis"] == "K"
        assert doc["slots_per_cell"] == cli.SWEEP_SLOTS
        assert [c["value"] for c in doc["cells"]] == [1.0, 2.0]
        lone = doc["cells"][0]["metrics"]
        assert lone["collision_prob"]["mean"] == 0.0  # K=1 never collides
        assert lone["analytic"] == 0.0
        two = doc["cells"][1]["metrics"]
        assert two["analytic"] == pytest.approx(0.125)
        assert two["collision_prob"]["n"] == 2

    def test_config_axis_runs_the_scenario(self, tmp_path, capsys):
        code = cli.main(["sweep", bundled_config_path("freeflow-small"),
                         "--axis", "duration", "--values", "5",
                         "--seeds", "11", "--out", str(tmp_path)])
        assert code == 0
        with open(tmp_path / "sweep-duration-freeflow-small.json") as fh:
            doc = json.load(fh)
        assert doc["slots_per_cell"] is None
        cell = doc["cells"][0]["metrics"]
        assert cell["mean_speed"]["n"] == 1
        assert cell["mean_speed"]["mean"] > 0
        assert cell["pdr_v2v"]["mean"] == pytest.approx(1.0)

    def test_unknown_axis(self, capsys):
        code = cli.main(["sweep", bundled_config_path("freeflow-small"),
                         "--axis", "nope", "--values", "1"])
        assert code == 2
        err = capsys.readouterr().err
        assert "C, K, density, duration, per" in err

    def test_no_values(self, capsys):
        code = cli.main(["sweep", bundled_config_path("freeflow-small"),
                         "--axis", "K"])
        assert code == 2

    def test_radio_axis_rejects_fractional_values(self, capsys):
        code = cli.main(["sweep", bundled_config_path("freeflow-small"),
                         "--axis", "K", "--values", "1.5"])
        assert code == 2
        assert "positive integers" in capsys.readouterr().err


class TestCliReport:

    def test_report_replays_a_trace(self, tmp_path, capsys):
        cli.main(["run", bundled_config_path("overtake-regression"),
                  "--out", str(tmp_path)])
        capsys.readouterr()
        trace = tmp_path / "overtake-regression-seed5.trace.jsonl"
        code = cli.main(["report", str(trace)])
        assert code == 0
        printed = json.loads(capsys.readouterr().out)
        with open(tmp_path / "overtake-regression-seed5.report.json") as fh:
            assert printed == json.load(fh)

    def test_missing_trace(self, capsys):
        code = cli.main(["report", "/nonexistent/run.trace.jsonl"])
        assert code == 2
        assert "config error" in capsys.readouterr().err

    def test_garbage_trace(self, tmp_path, capsys):
        path = tmp_path / "garbage.trace.jsonl"
        path.write_text("this is not json\n")
        code = cli.main(["report", str(path)])
        assert code == 2
        assert "unreadable trace" in capsys.readouterr().err
