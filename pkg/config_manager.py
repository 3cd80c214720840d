#!/usr/bin/env python3
"""
Configuration Manager for the Smart Meter Network Simulator

Loads the layered simulator defaults (waveform, link, transport, detectors,
controller policy, experiment) from a base directory, deep-merges an optional
override directory on top, validates the result and keeps file metadata.
"""

import copy
import hashlib
import json
import logging
from dataclasses import dataclass
from enum import Enum
from pathlib import Path
from typing import Any, Dict, List, Optional

import yaml

logger = logging.getLogger(__name__)

DEFAULTS_DIR = Path(__file__).resolve().parent / "defaults"


class ConfigFormat(Enum):
    JSON = "json"
    YAML = "yaml"
    YML = "yml"


class ConfigError(ValueError):
    """Raised when a configuration file cannot be parsed or fails validation"""


@dataclass
class ConfigFile:
    """Represents a configuration file with metadata"""
    path: Path
    format: ConfigFormat
    last_modified: float
    content: Dict[str, Any]
    checksum: str = ""


# Fallback for sections with no file in the defaults directory.
BUILTIN_DEFAULTS: Dict[str, Dict[str, Any]] = {
    "waveform": {
        "line_voltage_rms": 208.0,
        "frequency": 60.0,
        "sampling_period": 0.000125,
        "noise_stddev": 0.01,
        "seed": 1,
        "load_profiles": [
            {"current_amplitude": 12.0, "phase_offset": -0.35},
            {"current_amplitude": 11.0, "phase_offset": -0.30},
            {"current_amplitude": 13.0, "phase_offset": -0.40},
        ],
    },
    "link": {
        "bandwidth": 100_000_000,
        "propagation_delay": 0.00005,
        "queue_capacity": 150_000,
        "mtu": 65_535,
        "per_frame_overhead": 58,
    },
    "transport": {
        "mss": 1460,
        "initial_window_segments": 10,
        "cubic_c": 0.4,
        "cubic_beta": 0.7,
        "rto_initial": 1.0,
        "rto_min": 0.2,
        "rto_max": 60.0,
        "dupack_threshold": 3,
    },
    "detectors": {
        "window_size": 20,
        "ewma": {"alpha": 0.125, "kappa": 3.0, "warmup": 10, "min_sigma": 1e-9},
        "pca": {"variance_target": 0.95, "q_percentile": 99.0, "q_floor": 1e-12,
                "training_windows": 20},
        "koad": {"sigma": 1.0, "nu1": 0.05, "nu2": 0.3, "sparsify": 0.01,
                 "max_dictionary": 50,
                 "feature_scale": [0.001, 0.001, 0.01, 1_000_000.0]},
    },
    "policy": {
        "mode": "verdict",
        "step_down_levels": 1,
        "hold_windows": 10,
        "min_level": 1,
        "max_level": 32,
        "delay_budget": 0.05,
        "margin": 0.8,
        "delay_slack": 0.1,
        "probe_gain": 2.5,
        "switch_interval": False,
        "slow_interval": 0.1,
    },
    "experiment": {
        "duration": 30.0,
        "seed": 42,
        "drain": 2.0,
        "trace": True,
        "output": "results",
    },
}

REQUIRED_KEYS: Dict[str, List[str]] = {
    "waveform": ["line_voltage_rms", "frequency", "sampling_period"],
    "link": ["bandwidth", "propagation_delay", "queue_capacity", "mtu", "per_frame_overhead"],
    "transport": ["mss", "initial_window_segments", "cubic_c", "cubic_beta", "rto_min"],
    "detectors": ["window_size", "ewma", "pca", "koad"],
    "policy": ["mode", "hold_windows", "min_level", "max_level"],
    "experiment": ["duration", "seed"],
}


class ConfigManager:
    """Layered defaults for the simulator"""

    def __init__(self, config_dir: Optional[str] = None, custom_dir: Optional[str] = None):
        self.config_dir = Path(config_dir) if config_dir else DEFAULTS_DIR
        self.custom_dir = Path(custom_dir) if custom_dir else None
        self.loaded_configs: Dict[str, ConfigFile] = {}
        self._effective: Optional[Dict[str, Any]] = None

    def load_all_configs(self) -> Dict[str, Any]:
        """Load base and override files, merge and validate them"""
        if self._effective is not None:
            return copy.deepcopy(self._effective)

        merged = copy.deepcopy(BUILTIN_DEFAULTS)

        base_configs = self._load_directory_configs(self.config_dir)
        for section in BUILTIN_DEFAULTS:
            if section not in base_configs:
                logger.warning("No %s defaults under %s, using built-in values",
                               section, self.config_dir)
        self._merge_configs(merged, base_configs)

        if self.custom_dir is not None:
            custom_configs = self._load_directory_configs(self.custom_dir)
            self._merge_configs(merged, custom_configs)

        self._validate_configs(merged)
        self._effective = merged
        return copy.deepcopy(merged)

    def _load_directory_configs(self, directory: Path) -> Dict[str, Any]:
        """Load every JSON/YAML file of a directory keyed by file stem"""
        configs: Dict[str, Any] = {}

        if not directory.exists():
            return configs

        for file_path in sorted(directory.glob("*")):
            if file_path.is_file() and file_path.suffix.lower() in ['.json', '.yaml', '.yml']:
                content = self._load_config_file(file_path)
                if file_path.parent == self.custom_dir:
                    # Override files may touch several sections at once.
                    self._merge_configs(configs, content)
                else:
                    configs[file_path.stem] = content

        return configs

    def _load_config_file(self, file_path: Path) -> Dict[str, Any]:
        """Load a single configuration file"""
        format_type = ConfigFormat(file_path.suffix.lower().lstrip('.'))
        raw = file_path.read_bytes()

        try:
            if format_type == ConfigFormat.JSON:
                content = json.loads(raw.decode('utf-8'))
            else:
                content = yaml.safe_load(raw.decode('utf-8'))
        except (json.JSONDecodeError, yaml.YAMLError, UnicodeDecodeError) as e:
            raise ConfigError(f"{file_path}: {e}") from e

        if content is None:
            content = {}
        if not isinstance(content, dict):
            raise ConfigError(f"{file_path}: top level must be a mapping")

        self.loaded_configs[str(file_path)] = ConfigFile(
            path=file_path,
            format=format_type,
            last_modified=file_path.stat().st_mtime,
            content=content,
            checksum=hashlib.sha256(raw).hexdigest(),
        )
        logger.debug("Loaded %s (%s)", file_path, format_type.value)
        return content

    def _merge_configs(self, base: Dict[str, Any], custom: Dict[str, Any]) -> None:
        """Merge custom sections into base, custom taking precedence"""
        for key, value in custom.items():
            if key in base and isinstance(base[key], dict) and isinstance(value, dict):
                self._deep_merge_dicts(base[key], value)
            else:
                base[key] = copy.deepcopy(value)

    def _deep_merge_dicts(self, base_dict: Dict[str, Any], update_dict: Dict[str, Any]) -> None:
        for key, value in update_dict.items():
            if key in base_dict and isinstance(base_dict[key], dict) and isinstance(value, dict):
                self._deep_merge_dicts(base_dict[key], value)
            else:
                base_dict[key] = copy.deepcopy(value)

    def _validate_configs(self, config: Dict[str, Any]) -> None:
        """Check required keys and a few value ranges"""
        issues = []
        for section, required_keys in REQUIRED_KEYS.items():
            body = config.get(section)
            if not isinstance(body, dict):
                issues.append(f"section '{section}' must be a mapping")
                continue
            for required_key in required_keys:
                if required_key not in body:
                    issues.append(f"missing '{required_key}' in {section}")

        link = config.get("link", {})
        if link.get("bandwidth", 1) <= 0:
            issues.append("link.bandwidth must be positive")
        if link.get("queue_capacity", 1) < link.get("mtu", 0) + link.get("per_frame_overhead", 0):
            issues.append("link.queue_capacity must hold at least one MTU-sized frame")
        if config.get("policy", {}).get("mode") not in ("verdict", "capacity"):
            issues.append("policy.mode must be 'verdict' or 'capacity'")

        if issues:
            raise ConfigError("; ".join(issues))

    def section(self, name: str) -> Dict[str, Any]:
        """Effective values of one section"""
        return self.load_all_configs().get(name, {})

    def add_custom_default(self, name: str, overrides: Dict[str, Any], format_type: str = "yaml") -> Path:
        """Write an override file into the custom directory"""
        if self.custom_dir is None:
            raise ConfigError("no custom directory configured")
        fmt = format_type.lower()
        if fmt not in ("json", "yaml", "yml"):
            raise ConfigError(f"Unsupported config format: {format_type}")
        self.custom_dir.mkdir(parents=True, exist_ok=True)
        file_path = self.custom_dir / f"{name}.{fmt}"

        with open(file_path, 'w', encoding='utf-8') as f:
            if fmt == "json":
                json.dump(overrides, f, indent=2, sort_keys=True)
            else:
                yaml.safe_dump(overrides, f, default_flow_style=False, sort_keys=True)

        self.reload_configs()
        logger.info("Added override file %s", file_path)
        return file_path

    def list_available_configs(self) -> Dict[str, List[str]]:
        """List the base and override files that would be loaded"""
        configs: Dict[str, List[str]] = {"base_configs": [], "custom_configs": []}
        suffixes = ['.json', '.yaml', '.yml']

        if self.config_dir.exists():
            configs["base_configs"] = sorted(f.name for f in self.config_dir.glob("*") if f.suffix in suffixes)
        if self.custom_dir is not None and self.custom_dir.exists():
            configs["custom_configs"] = sorted(f.name for f in self.custom_dir.glob("*") if f.suffix in suffixes)

        return configs

    def reload_configs(self) -> None:
        """Drop cached files so the next access re-reads disk"""
        self.loaded_configs.clear()
        self._effective = None
        logger.debug("Configuration cache cleared")
