#!/usr/bin/env python
# -*- coding: utf-8 -*-
"""Test suite for config.py"""

import os

import pytest

from feederdispatch import config
from feederdispatch.errors import DataError


@pytest.fixture
def clean_env(tmp_path, monkeypatch):
    """Empty working directory without FD_ environment variables"""
    monkeypatch.chdir(tmp_path)
    for key in list(os.environ.keys()):
        if key.startswith('FD_'):
            monkeypatch.delenv(key, raising=False)
    return tmp_path


class TestLoadYamlConfig:
    """Test the _load_yaml_config function"""

    def test_explicit_config_file(self, tmp_path):
        """Test loading an explicitly specified config file"""
        config_file = tmp_path / "custom_config.yaml"
        config_file.write_text("mode: centralized\nscenarios: 4\n")

        result = config._load_yaml_config(str(config_file))

        assert result['mode'] == 'centralized'
        assert result['scenarios'] == 4

    def test_explicit_config_file_not_found(self, tmp_path):
        """Test loading a non-existent explicit config file returns empty dict"""
        result = config._load_yaml_config(str(tmp_path / "nonexistent.yaml"))

        assert result == {}

    def test_search_package_named_file_first(self, tmp_path, monkeypatch):
        """Test that feederdispatch.yaml wins over config.yaml"""
        (tmp_path / "feederdispatch.yaml").write_text("output_dir: from_named\n")
        (tmp_path / "config.yaml").write_text("output_dir: from_generic\n")

        monkeypatch.chdir(tmp_path)
        result = config._load_yaml_config()

        assert result['output_dir'] == 'from_named'

    def test_search_config_in_config_subdir(self, tmp_path, monkeypatch):
        """Test finding config.yaml in config/ subdirectory"""
        config_dir = tmp_path / "config"
        config_dir.mkdir()
        (config_dir / "config.yaml").write_text("output_dir: found_in_config_subdir\n")

        monkeypatch.chdir(tmp_path)
        result = config._load_yaml_config()

        assert result['output_dir'] == 'found_in_config_subdir'

    def test_config_with_only_comments(self, tmp_path, monkeypatch):
        """Test loading a config file with only comments returns empty dict"""
        (tmp_path / "config.yaml").write_text("# This is a comment\n")

        monkeypatch.chdir(tmp_path)

        assert config._load_yaml_config() == {}

    def test_config_must_be_mapping(self, tmp_path):
        """Test that a top-level list is rejected"""
        config_file = tmp_path / "config.yaml"
        config_file.write_text("- mode\n")

        with pytest.raises(DataError, match='mapping'):
            config._load_yaml_config(str(config_file))


class TestExpandPath:
    """Test the _expand_path function"""

    def test_expand_user_home(self):
        """Test expanding ~ to user home directory"""
        result = config._expand_path("~/test/path")

        assert result.startswith(os.path.expanduser("~"))
        assert "~" not in result

    def test_expand_env_variable(self, monkeypatch):
        """Test expanding environment variables in path"""
        monkeypatch.setenv("TEST_VAR", "/test/value")

        assert config._expand_path("$TEST_VAR/subdir") == "/test/value/subdir"

    def test_non_string_unchanged(self):
        """Test that numbers and None pass through"""
        assert config._expand_path(None) is None
        assert config._expand_path(7) == 7


class TestNormalizeList:
    """Test the _normalize_list function"""

    def test_comma_separated(self):
        assert config._normalize_list("1, 2,4", cast=int) == [1, 2, 4]

    def test_invalid_item(self):
        with pytest.raises(DataError):
            config._normalize_list("1,two", cast=int)


class TestConfigClass:
    """Test the Config class"""

    def test_default_values(self, clean_env):
        """Test that Config uses sensible defaults"""
        cfg = config.Config()

        assert cfg.mode == 'distributed'
        assert cfg.scenarios == 10
        assert cfg.horizon_steps == 60
        assert cfg.max_steps is None
        assert cfg.plan_file == os.path.join('output', 'plan.tsv')
        assert cfg.network_file == config.bundled_data_path('cigre_lv_feeder.yaml')
        assert cfg.bess_counts == [1, 2, 4]

    def test_config_from_yaml(self, clean_env):
        """Test that Config loads values from feederdispatch.yaml"""
        (clean_env / "feederdispatch.yaml").write_text(
            "mode: centralized\n"
            "output_dir: runs\n"
            "lambda:\n"
            "  BESS: 0.001\n"
            "admm:\n"
            "  max_iter: 80\n"
        )

        cfg = config.Config()

        assert cfg.mode == 'centralized'
        assert cfg.plan_file == os.path.join('runs', 'plan.tsv')
        assert cfg.lambda_for('BESS') == 0.001
        assert cfg.admm['max_iter'] == 80
        assert cfg.admm['mu'] == 10.0

    def test_env_variable_override(self, clean_env, monkeypatch):
        """Test that environment variables override config file values"""
        (clean_env / "config.yaml").write_text("mode: centralized\nmax_steps: 5\n")
        monkeypatch.setenv("FD_MODE", "distributed")
        monkeypatch.setenv("FD_MAX_STEPS", "12")

        cfg = config.Config()

        assert cfg.mode == 'distributed'
        assert cfg.max_steps == 12

    def test_runtime_override(self, clean_env, monkeypatch):
        """Test that runtime values beat environment variables"""
        monkeypatch.setenv("FD_SCENARIOS", "6")
        cfg = config.Config()

        cfg.load_config(scenarios=3, lambda_=0.2)

        assert cfg.scenarios == 3
        assert cfg.lambda_for('anything') == 0.2

    def test_invalid_mode(self, clean_env):
        cfg = config.Config()
        cfg.load_config(mode='hybrid')

        with pytest.raises(DataError, match='mode must be one of centralized, distributed'):
            cfg.mode

    def test_invalid_number(self, clean_env):
        cfg = config.Config()
        cfg.load_config(seed='seven')

        with pytest.raises(DataError, match='seed'):
            cfg.seed

    def test_lambda_default_key(self, clean_env):
        """A 'default' entry covers resources without their own weight"""
        cfg = config.Config()
        cfg.load_config(lambda_={'default': 0.01, 'BESS': 0.5})

        assert cfg.lambda_for('BESS') == 0.5
        assert cfg.lambda_for('B2') == 0.01

    def test_negative_lambda(self, clean_env):
        cfg = config.Config()
        cfg.load_config(lambda_=-1.0)

        with pytest.raises(DataError, match='non-negative'):
            cfg.lambda_for('BESS')

    def test_typed_settings(self, clean_env, benchmark_network):
        """Typed settings carry the configured values"""
        cfg = config.Config()
        cfg.load_config(admm={'rho': 2.0, 'max_iter': 7}, v_min=0.9)

        assert cfg.admm_config().max_iter == 7
        assert cfg.admm_config().policy.rho_initial == 2.0
        assert cfg.grid_limits(benchmark_network).v_min == 0.9
        assert cfg.pf_limit().cos_theta_min == 0.95
        assert cfg.solver_config().max_iter == 20000


class TestLoadConfig:
    """Test the Config.load_config method"""

    def test_load_config_file_resets_runtime_overrides(self, clean_env):
        """Loading a new config file should not keep stale runtime overrides"""
        config_file = clean_env / "custom.yaml"
        config_file.write_text("horizon_steps: 30\n")
        cfg = config.Config()
        cfg.load_config(horizon_steps=90)

        cfg.load_config(config_file=str(config_file))

        assert cfg.horizon_steps == 30
        assert cfg.config_file == str(config_file)

    def test_missing_config_file(self, clean_env):
        cfg = config.Config()

        with pytest.raises(DataError, match='Config file not found'):
            cfg.load_config(config_file=str(clean_env / "absent.yaml"))

    def test_snapshot_restore(self, clean_env):
        cfg = config.Config()
        snapshot = cfg.snapshot_state()
        cfg.load_config(mode='centralized')

        cfg.restore_state(snapshot)

        assert cfg.mode == 'distributed'

    def test_to_dict_lists_every_key(self, clean_env):
        values = config.Config().to_dict()

        assert values['lambda'] == config.DEFAULT_LAMBDA
        assert values['solver'] == config.DEFAULT_SOLVER
        assert 'bess_buses' in values


class TestBundledData:
    """Test the shipped data files"""

    def test_bundled_files_exist(self):
        for name in ('cigre_lv_feeder.yaml', 'resources.yaml', 'config.example.yaml'):
            assert os.path.exists(config.bundled_data_path(name))
