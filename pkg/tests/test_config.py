import json

import pytest

from facefactors.config import (RunConfig, StageConfig, load_run_config,
                                write_resolved_config)
from facefactors.errors import ConfigError


class TestLoad:
    def test_defaults(self):
        cfg = load_run_config(None)
        assert cfg.stage.stage == "1"
        assert cfg.stage.k_win == 13
        assert cfg.stage.bank_capacity == 512

    def test_file_plus_overrides(self, tmp_path):
        p = tmp_path / "c.json"
        p.write_text(json.dumps({"stage": {"steps": 50}}))
        cfg = load_run_config(p, ["stage.batch_size=3", "world.n_identities=2"])
        assert cfg.stage.steps == 50
        assert cfg.stage.batch_size == 3
        assert cfg.world.n_identities == 2

    def test_nested_dynamics_override(self):
        cfg = load_run_config(None, ["world.dynamics.lip_rate=0.2"])
        assert cfg.world.dynamics.lip_rate == 0.2

    def test_unknown_key_rejected(self):
        with pytest.raises(ConfigError):
            load_run_config(None, ["stage.nope=1"])
        with pytest.raises(ConfigError):
            load_run_config(None, ["bogus.steps=1"])

    def test_missing_file(self, tmp_path):
        with pytest.raises(ConfigError):
            load_run_config(tmp_path / "absent.json")

    def test_invalid_json(self, tmp_path):
        p = tmp_path / "bad.json"
        p.write_text("{not json")
        with pytest.raises(ConfigError):
            load_run_config(p)

    def test_string_stage_coercion(self):
        cfg = load_run_config(None, ["stage.stage=1"])
        assert cfg.stage.stage == "1"


class TestValidation:
    def test_bad_stage(self):
        with pytest.raises(ConfigError):
            StageConfig(stage="9").validate()

    def test_even_window_rejected(self):
        with pytest.raises(ConfigError):
            StageConfig(k_win=4).validate()

    def test_decay_interval_default(self):
        cfg = StageConfig(steps=300, decay_every=0)
        assert cfg.decay_interval == 100
        assert StageConfig(steps=300, decay_every=7).decay_interval == 7


class TestResolvedSnapshot:
    def test_written_and_loadable(self, tmp_path):
        cfg = load_run_config(None, ["stage.steps=5"])
        write_resolved_config(cfg, tmp_path)
        snap = json.loads((tmp_path / "resolved_config.json").read_text())
        assert snap["stage"]["steps"] == 5
        assert "net" in snap and "world" in snap
