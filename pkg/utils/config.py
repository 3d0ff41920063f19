import copy
import json
import os
try:
    import tomllib
except ImportError:  # Python < 3.11
    import tomli as tomllib
from pathlib import Path
from typing import Any, Dict, Optional

import psutil

from utils.errors import ConfigError, MissingInputError

ALIASES = {
    "schedule.steps": "sampler.steps",
}


class ConfigManager:
    """Manages experiment configuration"""

    def __init__(self, config_file: str = "config.json"):
        self.config_file = Path(config_file)
        self.default_config = {
            "run": {
                "seed": 0,
                "workers": 0,
                "out_dir": "runs/default",
                "progress": True
            },
            "schedule": {
                "kind": "variance-exploding",
                "sigma_min": 0.02,
                "sigma_max": 100.0,
                "beta_min": 0.1,
                "beta_max": 20.0,
                "warping": "log-sigma",
                "rho": 7.0
            },
            "dynamics": {
                "system": "lorenz96",
                "dim": 40,
                "forcing": 8.0,
                "dt": 0.01,
                "cycle_length": 10,
                "spin_up": True,
                "spin_up_steps": 1000,
                "model_noise_std": 0.0,
                "lg_decay": 0.9,
                "lg_coupling": 0.0,
                "lg_noise_var": 0.1,
                "x0_value": 1.0
            },
            "observation": {
                "stride": 4,
                "offset": 0,
                "noise_std": 0.1
            },
            "experiment": {
                "steps": 60
            },
            "train": {
                "epochs": 200,
                "batch_size": 256,
                "learning_rate": 1e-3,
                "hidden": [128, 128],
                "n_pairs": 20000,
                "heldout_fraction": 0.1,
                "beta1": 0.9,
                "beta2": 0.999,
                "seed": 1
            },
            "sampler": {
                "steps": 40,
                "eta": 1.0,
                "corrections": 2,
                "correction_scale": 0.5
            },
            "guidance": {
                "solver": "bicgstab",
                "max_iters": 2,
                "tol": 1e-8,
                "variance_model": "tweedie-vjp"
            },
            "filter": {
                "particles": 256,
                "n_thr_min": 60,
                "n_thr_max": 70,
                "alpha_min": 1e-4,
                "max_adapt_iters": 60,
                "resampling": "multinomial",
                "mean_draws": 1,
                "snapshot_every": 0
            },
            "metrics": {
                "ppc_step": -1,
                "ppc_coordinate": 0,
                "ppc_samples": 64,
                "trajectory_coordinate": 0,
                "spin_up_cycles": 20,
                "calibration": False
            },
            "database": {
                "enabled": True,
                "path": "assimilation_runs.db"
            },
            "logging": {
                "level": "INFO",
                "file": ""
            }
        }

    def load_config(self, path: Optional[str] = None) -> Dict[str, Any]:
        """Load configuration from a JSON or TOML file merged over the defaults"""
        config_file = Path(path) if path else self.config_file

        if not config_file.exists():
            if path:
                raise MissingInputError(f"Config file not found: {config_file}")
            return copy.deepcopy(self.default_config)

        try:
            if config_file.suffix == ".toml":
                with open(config_file, "rb") as f:
                    user = tomllib.load(f)
            else:
                with open(config_file, "r") as f:
                    user = json.load(f)
        except (json.JSONDecodeError, tomllib.TOMLDecodeError) as e:
            raise ConfigError(f"Cannot parse {config_file}: {e}")

        if not isinstance(user, dict):
            raise ConfigError(f"{config_file} must hold a table of sections")

        return self.validate(self._merge_config(self.default_config, _resolve_aliases(user)))

    def save_config(self, config: Dict[str, Any], path: Optional[str] = None) -> Path:
        """Save configuration to a JSON file"""
        target = Path(path) if path else self.config_file
        target.parent.mkdir(parents=True, exist_ok=True)
        with open(target, "w") as f:
            json.dump(config, f, indent=2, sort_keys=True)
        return target

    def _merge_config(self, default: Dict, user: Dict) -> Dict:
        """Recursively merge user config with defaults"""
        merged = copy.deepcopy(default)

        for key, value in user.items():
            if key in merged and isinstance(merged[key], dict) and isinstance(value, dict):
                merged[key] = self._merge_config(merged[key], value)
            else:
                merged[key] = value

        return merged

    def validate(self, config: Dict[str, Any]) -> Dict[str, Any]:
        """Reject unknown keys and coerce values to the type of their default"""
        validated = {}
        for section, values in config.items():
            if section not in self.default_config:
                raise ConfigError(f"Unknown config section '{section}'", key=section)
            if not isinstance(values, dict):
                raise ConfigError(f"Config section '{section}' must be a table", key=section)

            validated[section] = {}
            for key, value in values.items():
                dotted = f"{section}.{key}"
                if key not in self.default_config[section]:
                    raise ConfigError(f"Unknown config key '{dotted}'", key=dotted)
                validated[section][key] = _coerce(dotted, value, self.default_config[section][key])

        return validated

    def get_env_config(self) -> Dict[str, Any]:
        """Get configuration overrides from environment variables"""
        env_config: Dict[str, Any] = {}

        level = os.getenv("FAAPF_LOG_LEVEL")
        if level:
            env_config.setdefault("logging", {})["level"] = level

        db_path = os.getenv("FAAPF_DATABASE_PATH")
        if db_path:
            env_config.setdefault("database", {})["path"] = db_path

        workers = os.getenv("FAAPF_WORKERS")
        if workers:
            env_config.setdefault("run", {})["workers"] = workers

        seed = os.getenv("FAAPF_SEED")
        if seed:
            env_config.setdefault("run", {})["seed"] = seed

        return env_config


# Global config manager instance
config_manager = ConfigManager()


def load_config(path: Optional[str] = None, overrides: Optional[Dict[str, Any]] = None) -> Dict[str, Any]:
    """Load the resolved configuration: defaults, file, environment, then overrides"""
    config = config_manager.load_config(path)

    env_config = config_manager.get_env_config()
    if env_config:
        config = config_manager._merge_config(config, env_config)

    for key_path, value in (overrides or {}).items():
        if value is not None:
            config = set_config_value(config, key_path, value)

    return config_manager.validate(config)


def get_config_value(config: Dict[str, Any], key_path: str, default: Any = None) -> Any:
    """Get a configuration value using dot notation (e.g., 'sampler.eta')"""
    keys = ALIASES.get(key_path, key_path).split('.')

    current = config
    for key in keys:
        if isinstance(current, dict) and key in current:
            current = current[key]
        else:
            return default

    return current


def set_config_value(config: Dict[str, Any], key_path: str, value: Any) -> Dict[str, Any]:
    """Return a copy of config with one dotted key replaced"""
    keys = ALIASES.get(key_path, key_path).split('.')
    updates: Dict[str, Any] = {}

    # Build nested dictionary structure
    current = updates
    for key in keys[:-1]:
        current[key] = {}
        current = current[key]

    current[keys[-1]] = value

    return config_manager.validate(config_manager._merge_config(config, updates))


def default_workers() -> int:
    """Physical core count, falling back to logical cores, then 1"""
    return psutil.cpu_count(logical=False) or psutil.cpu_count() or 1


def resolve_workers(config: Dict[str, Any]) -> int:
    """Worker count from run.workers, where 0 means one per core"""
    workers = get_config_value(config, "run.workers", 0)
    return workers if workers > 0 else default_workers()


def _resolve_aliases(user: Dict[str, Any]) -> Dict[str, Any]:
    resolved = copy.deepcopy(user)
    for alias, target in ALIASES.items():
        section, key = alias.split('.')
        if isinstance(resolved.get(section), dict) and key in resolved[section]:
            value = resolved[section].pop(key)
            target_section, target_key = target.split('.')
            resolved.setdefault(target_section, {})[target_key] = value
    return resolved


def _coerce(key: str, value: Any, default: Any) -> Any:
    try:
        if isinstance(default, bool):
            if isinstance(value, str):
                if value.lower() in ("true", "1", "yes"):
                    return True
                if value.lower() in ("false", "0", "no"):
                    return False
                raise ValueError(value)
            if isinstance(value, (bool, int)):
                return bool(value)
            raise ValueError(value)
        if isinstance(default, int):
            if isinstance(value, float) and not value.is_integer():
                raise ValueError(value)
            return int(value)
        if isinstance(default, float):
            return float(value)
        if isinstance(default, list):
            if not isinstance(value, (list, tuple)):
                raise ValueError(value)
            return [type(default[0])(v) for v in value] if default else list(value)
        return str(value)
    except (TypeError, ValueError):
        raise ConfigError(f"Invalid value {value!r} for config key '{key}'", key=key)
