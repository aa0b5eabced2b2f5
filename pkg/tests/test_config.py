import hashlib
import json

import pytest

from cfpg.config import ConfigError, RunDir, apply_overrides, build_backends, config_from_dict, load_config, new_run
from cfpg.fixtures import write_cli_fixtures


def test_defaults():
    cfg = config_from_dict({})
    assert (cfg.mode, cfg.tolerance, cfg.window, cfg.min_gap, cfg.k, cfg.fscr_window, cfg.parallelism) == ("scripted", 3, 3, 2, 3, 8, 1)


@pytest.mark.parametrize("data", [
    {"tolerance": -1},
    {"parallelism": 0},
    {"window": 0},
    {"mode": "dreaming"},
    {"colour": "blue"},
    {"tolerance": "3"},
    {"backends": {"generator": {"endpoint": "http://x", "model": "m"}}},  # scripted mode forbids endpoints
    {"mode": "live", "backends": {"generator": {"model": "m"}}},
    {"mode": "live"},
    {"backends": {"narrator": {}}},
    {"backends": {"generator": {"temprature": 0.1}}},
])
def test_invalid_configs(data):
    with pytest.raises(ConfigError):
        config_from_dict(data)


def test_yaml_and_relative_paths(tmp_path):
    fx = write_cli_fixtures(tmp_path / "fx")
    (tmp_path / "run.yaml").write_text("fixtures: fx/shared.json\ntolerance: 2\nbackends:\n  verifier_b:\n    fixtures: fx/verifier_b.json\n")
    cfg = load_config(tmp_path / "run.yaml")
    assert cfg.fixtures == str(fx["shared"].resolve())
    assert cfg.tolerance == 2
    backends = build_backends(cfg)
    assert backends.verifiers[1].identity != backends.verifiers[0].identity


def test_json_config(tmp_path):
    (tmp_path / "c.json").write_text(json.dumps({"k": 5}))
    assert load_config(tmp_path / "c.json").k == 5
    (tmp_path / "bad.json").write_text("{")
    with pytest.raises(ConfigError):
        load_config(tmp_path / "bad.json")


def test_overrides():
    cfg = apply_overrides(config_from_dict({"tolerance": 2}), tolerance=None, window=5)
    assert cfg.tolerance == 2 and cfg.window == 5
    with pytest.raises(ConfigError):
        apply_overrides(cfg, tolerance=-1)


def test_scripted_needs_fixtures(tmp_path):
    with pytest.raises(ConfigError):
        build_backends(config_from_dict({}))
    with pytest.raises(ConfigError):
        build_backends(config_from_dict({"fixtures": str(tmp_path / "missing.json")}))


def test_live_verifiers_must_differ():
    same = {"endpoint": "http://localhost:1/v1", "model": "m"}
    cfg = config_from_dict({"mode": "live", "backends": {"generator": same}})
    with pytest.raises(ConfigError):
        build_backends(cfg)
    cfg = config_from_dict({"mode": "live", "backends": {"generator": same, "verifier_b": {**same, "temperature": 0.7}}})
    assert len(build_backends(cfg).verifiers) == 2


def test_new_run_dirs(tmp_path):
    cfg = config_from_dict({"output_root": str(tmp_path)})
    a = new_run(cfg, "stats")
    b = new_run(cfg, "stats")
    assert a.path != b.path
    assert a.manifest["status"] == "incomplete"
    assert json.loads((a.path / "config.json").read_text())["tolerance"] == 3
    a.finish("complete")
    reopened = RunDir.open(a.path)
    assert reopened.manifest["status"] == "complete"
    assert reopened.manifest["segmenter_version"] and reopened.manifest["template_versions"]["codify"] == "1"


def test_unwritable_output_root(tmp_path):
    blocker = tmp_path / "file"
    blocker.write_text("x")
    with pytest.raises(ConfigError):
        new_run(config_from_dict({"output_root": str(blocker / "sub")}), "stats")


def test_identical_configs_give_identical_snapshots(tmp_path):
    fx = write_cli_fixtures(tmp_path / "fx")
    cfg = config_from_dict({"output_root": str(tmp_path / "runs"), "fixtures": str(fx["shared"])})
    a, b = new_run(cfg, "eval-tracking"), new_run(cfg, "eval-tracking")
    assert (a.path / "config.json").read_bytes() == (b.path / "config.json").read_bytes()
    assert a.manifest["fixture_hashes"][str(fx["shared"])] == hashlib.sha256(fx["shared"].read_bytes()).hexdigest()
