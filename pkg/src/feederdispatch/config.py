#!/usr/bin/env python
# -*- coding: utf-8 -*-
"""
Configuration management for Feeder Dispatch.

Provides centralized configuration with sensible defaults.

Configuration priority (highest to lowest):
1. Runtime arguments passed to load_config()
2. Environment variables (FD_*)
3. feederdispatch.yaml / config.yaml file in current working directory
4. Default values (relative to current working directory)

Example feederdispatch.yaml:
    network_file: data/cigre_lv_feeder.yaml
    resources_file: data/resources.yaml
    history_dir: benchmark/history
    realization_file: benchmark/realization/2024-06-14.tsv
    output_dir: output
    mode: distributed
    seed: 7
    scenarios: 10
    cos_theta_min: 0.95
    nu: 0.001
    lambda:
      BESS: 0.00005
    deviation: complex
    v_min: 0.95
    v_max: 1.05
    horizon_steps: 60
    admm:
      rho: 1.0
      abs_tol: 0.0001
      rel_tol: 0.001
      max_iter: 50
    solver:
      eps: 1.0e-7
      max_iter: 20000
    soft_tracking_weight: 1000.0
    lambda_values: [0.000005, 0.00005, 0.005, 0.05, 0.5]
    bess_counts: [1, 2, 4]
    bess_buses: [B05, B06, B07, B08]
"""

import os

import yaml

from feederdispatch.errors import DataError


# Default config file names to search for
CONFIG_FILE_NAMES = ['feederdispatch.yaml', 'feederdispatch.yml', 'config.yaml', 'config.yml']

# Subdirectories to search for config files
CONFIG_SEARCH_DIRS = ['.', 'config']

MODES = ('centralized', 'distributed')
DEVIATIONS = ('complex', 'real')

DEFAULT_ADMM = {
    'rho': 1.0,
    'abs_tol': 1e-4,
    'rel_tol': 1e-3,
    'max_iter': 50,
    'mu': 10.0,
    'tau_incr': 2.0,
    'tau_decr': 2.0,
    'rho_min': 1e-4,
    'rho_max': 1e4,
}
DEFAULT_SOLVER = {
    'eps': 1e-7,
    'max_iter': 20000,
}
DEFAULT_LAMBDA = 0.5e-4
DEFAULT_LAMBDA_VALUES = [0.5e-5, 0.5e-4, 0.5e-2, 0.5e-1, 0.5]
DEFAULT_BESS_COUNTS = [1, 2, 4]
DEFAULT_BESS_BUSES = ['B05', 'B06', 'B07', 'B08']


def _expand_path(path):
    """Expand environment variables and user home in path"""
    if path and isinstance(path, str):
        return os.path.expandvars(os.path.expanduser(path))
    return path


def _normalize_list(value, cast=str):
    """Normalize list-like config values (lists or comma-separated strings)."""
    if value is None:
        return []
    if isinstance(value, str):
        raw_values = [item for item in value.split(',') if item.strip()]
    elif isinstance(value, (list, tuple)):
        raw_values = value
    else:
        raw_values = [value]
    try:
        return [cast(str(item).strip()) if cast is not str else str(item).strip() for item in raw_values]
    except ValueError as exc:
        raise DataError("Invalid list value {0!r}: {1}".format(value, exc))


def _load_yaml_config(config_file=None):
    """Load configuration from a YAML file.

    Args:
        config_file: Path to config file. If None, searches for default names in CWD.

    Returns:
        dict: Configuration values from YAML, or empty dict if not found.
    """
    if config_file:
        config_path = _expand_path(config_file)
        if os.path.exists(config_path):
            with open(config_path, 'r') as f:
                return _parse_yaml(f, config_path)
        return {}

    cwd = os.getcwd()
    for search_dir in CONFIG_SEARCH_DIRS:
        for name in CONFIG_FILE_NAMES:
            config_path = os.path.join(cwd, search_dir, name)
            if os.path.exists(config_path):
                with open(config_path, 'r') as f:
                    return _parse_yaml(f, config_path)

    return {}


def _parse_yaml(handle, config_path):
    try:
        values = yaml.safe_load(handle) or {}
    except yaml.YAMLError as exc:
        raise DataError("Cannot parse config file {0}: {1}".format(config_path, exc))
    if not isinstance(values, dict):
        raise DataError("Config file {0} must contain a mapping".format(config_path))
    return values


class Config:
    """Configuration settings for Feeder Dispatch.

    All paths default to being relative to the current working directory.

    Configuration priority (highest to lowest):
    1. Values set via load_config()
    2. Environment variables (FD_*)
    3. YAML config file
    4. Default values

    Environment variables:
        - FD_CONFIG_FILE: Path to the YAML config file
        - FD_NETWORK_FILE: Path to the feeder description
        - FD_RESOURCES_FILE: Path to the resource description
        - FD_HISTORY_DIR: Directory of historical day files
        - FD_REALIZATION_FILE: Day file replayed by the closed loop
        - FD_PLAN_FILE: Dispatch plan file
        - FD_OUTPUT_DIR: Default output directory
        - FD_MODE: centralized or distributed
        - FD_SEED: Seed for synthetic data
        - FD_SCENARIOS: Number of day-ahead scenarios
        - FD_MAX_STEPS: Limit on closed-loop steps
    """

    def __init__(self):
        self._yaml_config = {}
        self._runtime_config = {}
        self._config_file = None
        self._load_yaml()

    def _load_yaml(self, config_file=None):
        """Load YAML configuration file."""
        if config_file is None:
            config_file = os.environ.get('FD_CONFIG_FILE')

        self._config_file = config_file
        self._yaml_config = _load_yaml_config(config_file)

    def load_config(self, config_file=None, **kwargs):
        """Load configuration from file and/or runtime arguments.

        Args:
            config_file: Path to YAML config file (optional)
            **kwargs: Runtime configuration overrides, named like the YAML keys.
                ``lambda`` is passed as ``lambda_``.

        Example:
            config.load_config(
                config_file='benchmark/feederdispatch.yaml',
                mode='centralized',
                max_steps=10,
            )
        """
        if config_file:
            if not os.path.exists(_expand_path(config_file)):
                raise DataError("Config file not found: {0}".format(config_file))
            self._load_yaml(config_file)
            self._runtime_config = {}

        for key, value in kwargs.items():
            if value is not None:
                self._runtime_config[key.rstrip('_')] = value

    def snapshot_state(self):
        """Capture internal config state for temporary override workflows."""
        return {
            'yaml_config': dict(self._yaml_config),
            'runtime_config': dict(self._runtime_config),
            'config_file': self._config_file,
        }

    def restore_state(self, snapshot):
        """Restore a snapshot created by snapshot_state()."""
        self._yaml_config = dict(snapshot['yaml_config'])
        self._runtime_config = dict(snapshot['runtime_config'])
        self._config_file = snapshot['config_file']

    def _get_value(self, key, env_var, default):
        """Get configuration value with priority: runtime > env > yaml > default."""
        if key in self._runtime_config:
            return _expand_path(self._runtime_config[key])

        if env_var:
            env_value = os.environ.get(env_var)
            if env_value:
                return _expand_path(env_value)

        if key in self._yaml_config:
            return _expand_path(self._yaml_config[key])

        return _expand_path(default)

    def _get_number(self, key, env_var, default, cast=float):
        value = self._get_value(key, env_var, default)
        if value is None:
            return None
        try:
            return cast(value)
        except (TypeError, ValueError):
            raise DataError("Config key {0} must be numeric, got {1!r}".format(key, value))

    def _get_mapping(self, key, defaults):
        values = dict(defaults)
        for layer in (self._yaml_config, self._runtime_config):
            layer_value = layer.get(key)
            if layer_value is None:
                continue
            if not isinstance(layer_value, dict):
                raise DataError("Config key {0} must be a mapping".format(key))
            values.update(layer_value)
        return values

    @property
    def config_file(self):
        """Path to the loaded config file, if any"""
        return self._config_file

    @property
    def network_file(self):
        """Feeder description; defaults to the bundled benchmark feeder."""
        return self._get_value('network_file', 'FD_NETWORK_FILE', bundled_data_path('cigre_lv_feeder.yaml'))

    @property
    def resources_file(self):
        """Resource description; defaults to the bundled benchmark resources."""
        return self._get_value('resources_file', 'FD_RESOURCES_FILE', bundled_data_path('resources.yaml'))

    @property
    def history_dir(self):
        """Directory of historical day files"""
        return self._get_value('history_dir', 'FD_HISTORY_DIR', 'history')

    @property
    def realization_file(self):
        """Day file replayed by the closed loop"""
        return self._get_value('realization_file', 'FD_REALIZATION_FILE', '')

    @property
    def output_dir(self):
        """Default output directory"""
        return self._get_value('output_dir', 'FD_OUTPUT_DIR', 'output')

    @property
    def plan_file(self):
        """Dispatch plan file; defaults to plan.tsv in the output directory."""
        default = os.path.join(self.output_dir, 'plan.tsv')
        return self._get_value('plan_file', 'FD_PLAN_FILE', default)

    @property
    def mode(self):
        """Real-time controller form: centralized or distributed"""
        value = str(self._get_value('mode', 'FD_MODE', 'distributed')).strip().lower()
        if value not in MODES:
            raise DataError("mode must be one of {0}, got {1!r}".format(', '.join(MODES), value))
        return value

    @property
    def seed(self):
        """Seed for synthetic data generation"""
        return self._get_number('seed', 'FD_SEED', 7, cast=int)

    @property
    def scenarios(self):
        """Number of day-ahead scenarios s"""
        value = self._get_number('scenarios', 'FD_SCENARIOS', 10, cast=int)
        if value < 1:
            raise DataError("scenarios must be at least 1, got {0}".format(value))
        return value

    @property
    def cos_theta_min(self):
        """Minimum power factor at the grid connection point"""
        return self._get_number('cos_theta_min', None, 0.95)

    @property
    def nu(self):
        """Weight of the mutual-exclusivity penalty on the import/export split"""
        return self._get_number('nu', None, 1e-3)

    @property
    def deviation(self):
        """Day-ahead deviation measure: complex (p and q) or real (p only)"""
        value = str(self._get_value('deviation', None, 'complex')).strip().lower()
        if value not in DEVIATIONS:
            raise DataError("deviation must be one of {0}, got {1!r}".format(', '.join(DEVIATIONS), value))
        return value

    @property
    def v_min(self):
        """Lower voltage limit in per unit"""
        return self._get_number('v_min', None, 0.95)

    @property
    def v_max(self):
        """Upper voltage limit in per unit"""
        return self._get_number('v_max', None, 1.05)

    @property
    def horizon_steps(self):
        """Length of the real-time rolling horizon in 30 s steps"""
        return self._get_number('horizon_steps', None, 60, cast=int)

    @property
    def max_steps(self):
        """Optional limit on closed-loop steps (None runs the full day)."""
        return self._get_number('max_steps', 'FD_MAX_STEPS', None, cast=int)

    @property
    def soft_tracking_weight(self):
        """Exact-penalty weight of the dispatch slack; None keeps tracking hard."""
        return self._get_number('soft_tracking_weight', None, 1000.0)

    @property
    def admm(self):
        """ADMM penalty and stopping settings"""
        return self._get_mapping('admm', DEFAULT_ADMM)

    @property
    def solver(self):
        """Inner convex solver settings"""
        return self._get_mapping('solver', DEFAULT_SOLVER)

    @property
    def lambda_weights(self):
        """Scalar λ or mapping resource name → λ_r."""
        return self._get_value('lambda', None, DEFAULT_LAMBDA)

    @property
    def lambda_values(self):
        """λ values of the plan-quality sweep"""
        return _normalize_list(self._get_value('lambda_values', None, DEFAULT_LAMBDA_VALUES), cast=float)

    @property
    def bess_counts(self):
        """Battery unit counts of the distributed-battery sweep"""
        return _normalize_list(self._get_value('bess_counts', None, DEFAULT_BESS_COUNTS), cast=int)

    @property
    def bess_buses(self):
        """Buses receiving the battery units of the sweep, in order"""
        return _normalize_list(self._get_value('bess_buses', None, DEFAULT_BESS_BUSES))

    def lambda_for(self, resource_name):
        """Return λ_r for one resource."""
        weights = self.lambda_weights
        if isinstance(weights, dict):
            value = weights.get(resource_name, weights.get('default', DEFAULT_LAMBDA))
        else:
            value = weights
        try:
            value = float(value)
        except (TypeError, ValueError):
            raise DataError("lambda for {0} must be numeric, got {1!r}".format(resource_name, value))
        if value < 0:
            raise DataError("lambda for {0} must be non-negative".format(resource_name))
        return value

    def solver_config(self):
        """Typed settings for convex_core.solve."""
        from feederdispatch.convex_core import SolverConfig

        values = self.solver
        return SolverConfig(eps=float(values['eps']), max_iter=int(values['max_iter']))

    def admm_config(self):
        """Typed settings for realtime_mpc.run_admm."""
        from feederdispatch.realtime_mpc import AdmmConfig, PenaltyPolicy

        values = self.admm
        policy = PenaltyPolicy(
            mu=float(values['mu']),
            tau_incr=float(values['tau_incr']),
            tau_decr=float(values['tau_decr']),
            rho_initial=float(values['rho']),
            rho_min=float(values['rho_min']),
            rho_max=float(values['rho_max']),
        )
        return AdmmConfig(
            abs_tol=float(values['abs_tol']),
            rel_tol=float(values['rel_tol']),
            max_iter=int(values['max_iter']),
            policy=policy,
        )

    def pf_limit(self):
        """Typed power-factor settings for both control layers."""
        from feederdispatch.day_ahead import PfLimit

        return PfLimit(cos_theta_min=self.cos_theta_min, nu=self.nu)

    def grid_limits(self, network):
        """Voltage and ampacity limits for a network."""
        from feederdispatch.grid_model import GridLimits

        return GridLimits.from_network(network, v_min=self.v_min, v_max=self.v_max)

    def to_dict(self):
        """Return all configuration values as a dictionary."""
        return {
            'config_file': self.config_file,
            'network_file': self.network_file,
            'resources_file': self.resources_file,
            'history_dir': self.history_dir,
            'realization_file': self.realization_file,
            'plan_file': self.plan_file,
            'output_dir': self.output_dir,
            'mode': self.mode,
            'seed': self.seed,
            'scenarios': self.scenarios,
            'cos_theta_min': self.cos_theta_min,
            'nu': self.nu,
            'lambda': self.lambda_weights,
            'deviation': self.deviation,
            'v_min': self.v_min,
            'v_max': self.v_max,
            'horizon_steps': self.horizon_steps,
            'max_steps': self.max_steps,
            'soft_tracking_weight': self.soft_tracking_weight,
            'admm': self.admm,
            'solver': self.solver,
            'lambda_values': self.lambda_values,
            'bess_counts': self.bess_counts,
            'bess_buses': self.bess_buses,
        }

    def __repr__(self):
        return "Config({})".format(self.to_dict())


def bundled_data_path(name):
    """Path of a file shipped in the package data directory."""
    return os.path.join(os.path.dirname(os.path.abspath(__file__)), 'data', name)


# Global config instance
config = Config()
