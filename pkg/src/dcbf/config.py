"""Unified configuration: the golden default snapshot and config-file parsing.

The config file is JSON mirroring every config dataclass, one section per
subsystem.  Unknown sections or keys are rejected so typos fail loudly.
"""

import json
from dataclasses import asdict

from .baselines import APFConfig, BACKSTEP_TRIGGER_DEG, BACKSTEP_WAYPOINT_LAG
from .errors import ConfigError
from .filter import FilterConfig
from .sim import DEFAULT_SAFETY_THRESHOLD_DEG, WorldConfig
from .training import RefineConfig, SIGMA_CHOICES, TrainConfig


def default_config():
    """The full default configuration snapshot, JSON-serializable."""
    world = asdict(WorldConfig())
    world["mass_range"] = list(world["mass_range"])
    world["static_friction_range"] = list(world["static_friction_range"])
    world["dynamic_friction_range"] = list(world["dynamic_friction_range"])
    refine = asdict(RefineConfig())
    flt = asdict(FilterConfig())
    flt["ring_scales"] = list(flt["ring_scales"])
    return {
        "world": world,
        "train": asdict(TrainConfig()),
        "refine": refine,
        "filter": flt,
        "apf": asdict(APFConfig()),
        "experiment": {
            "object_counts": [4, 10, 20, 40],
            "episodes": 100,
            "policies": ["donothing", "backstep", "apf", "dcbf"],
            "step_cap": 400,
            "master_seed": 0,
            "goal_tolerance": 0.02,
            "stall_patience": 50,
        },
        "safety": {
            "threshold_deg": DEFAULT_SAFETY_THRESHOLD_DEG,
            "backstep_trigger_deg": BACKSTEP_TRIGGER_DEG,
            "backstep_waypoint_lag": BACKSTEP_WAYPOINT_LAG,
            "sigma_choices": list(SIGMA_CHOICES),
            "history_len": 8,
        },
    }


def merge_config(overrides):
    """Defaults overlaid with a parsed config dict; rejects unknown keys."""
    cfg = default_config()
    for section, values in (overrides or {}).items():
        if section not in cfg:
            raise ConfigError(f"unknown config section {section!r}")
        if not isinstance(values, dict):
            raise ConfigError(f"config section {section!r} must be an object")
        for key, value in values.items():
            if key not in cfg[section]:
                raise ConfigError(f"unknown key {section}.{key}")
            cfg[section][key] = value
    return cfg


def load_config(path=None):
    if path is None:
        return default_config()
    try:
        with open(path, "r", encoding="utf-8") as fh:
            overrides = json.load(fh)
    except OSError as exc:
        raise ConfigError(f"cannot read config file: {exc}") from exc
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config file is not valid JSON: {exc}") from exc
    return merge_config(overrides)


def world_config(cfg, **overrides):
    d = dict(cfg["world"])
    d.update(overrides)
    return WorldConfig.from_dict(d).validate()


def train_config(cfg, **overrides):
    d = dict(cfg["train"])
    d.update(overrides)
    return TrainConfig(**d).validate()


def refine_config(cfg, **overrides):
    d = dict(cfg["refine"])
    d.update(overrides)
    return RefineConfig(**d).validate()


def filter_config(cfg, **overrides):
    d = dict(cfg["filter"])
    d.update(overrides)
    d["ring_scales"] = tuple(d["ring_scales"])
    return FilterConfig(**d).validate()


def apf_config(cfg, **overrides):
    d = dict(cfg["apf"])
    d.update(overrides)
    return APFConfig(**d).validate()


def config_to_json(cfg):
    return json.dumps(cfg, indent=2, sort_keys=True)
