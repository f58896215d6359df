"""Experiment configuration: schema, defaults, profiles, canonical hashing.

Config files are JSON. Validation fills defaults, rejects unknown keys, type
checks every leaf, and verifies referenced paths exist. The config hash is
taken over the canonical (sorted-key) serialization of the fully defaulted
config, so key order never matters and an empty file hashes identically to an
explicit dump of the defaults.
"""

from __future__ import annotations

import copy
import json
from pathlib import Path

from .common import config_hash

PROFILES = ("paper", "desk")


class ConfigValidationError(ValueError):
    """Config file failed validation (unknown key, bad type, missing path)."""


def _num(v):  # JSON has no int/float distinction worth enforcing for these
    return isinstance(v, (int, float)) and not isinstance(v, bool)


# Leaf spec: (default, checker, description). None defaults are optional leaves.
_SCHEMA = {
    "seed": (0, int, "global seed"),
    "output_dir": ("out", str, "artifact directory"),
    "split_seed": (42, int, "shuffle seed for the 60/20/20 split"),
    "dataset": {
        "kind": ("synthetic", ("synthetic", "lisa"), "dataset source"),
        "n_per_class": (500, int, "synthetic images per class"),
        "seed": (7, int, "synthetic generation seed"),
        "source_dir": (None, str, "frame directory (kind=lisa)"),
        "manifest": (None, str, "annotation CSV (kind=lisa)"),
    },
    "gan": {
        "gradient_penalty_weight": (10.0, _num, "penalty weight on the critic gradient norm"),
        "critic_steps_per_generator_step": (5, int, None),
        "batch_size": (64, int, None),
        "epochs": (100, int, None),
        "learning_rate": (1e-4, _num, None),
        "adam_beta1": (0.0, _num, None),
        "adam_beta2": (0.9, _num, None),
        "checkpoint_interval": (10, int, None),
        "seeds": ([0, 1, 2], [int], "one GAN trained per seed"),
        "latent_dim": (100, int, None),
        "base_channels": (64, int, None),
    },
    "reconstruction": {
        "gradient_steps": (2250, int, "descent steps per restart (L)"),
        "random_restarts": (20, int, "restarts per image (R)"),
        "step_size": (0.01, _num, None),
        "seed": (0, int, None),
    },
    "classifier": {
        "epochs": (30, int, None),
        "learning_rate": (1e-3, _num, None),
        "batch_size": (64, int, None),
        "seed": (0, int, None),
        "retrain_epochs": (10, int, "classifier_2 epochs when the accuracy gap is large"),
        "quick_epochs": (2, int, "classifier_2 epochs when within 1 point"),
        "surrogate_seed": (100, int, "independent seed for the transfer surrogate"),
    },
    "attacks": {
        "epsilon": (0.1, _num, "default perturbation magnitude"),
        "deepfool": {
            "overshoot": (0.02, _num, None),
            "max_iterations": (50, int, None),
        },
        "cw": {
            "confidence_weight": (1.0, _num, None),
            "step_size": (0.01, _num, None),
            "max_iterations": (10, int, None),
        },
        "pgd": {
            "max_iterations": (100, int, None),
        },
    },
    "defenses": {
        "gaussian_sigma": (1.0, _num, None),
        "jpeg_quality": (50, int, None),
        "feature_squeeze_bit_depth": (4, int, None),
        "median_window": (3, int, None),
    },
    "epsilon_grid": ([0.05, 0.10, 0.15, 0.20], [_num], "sweep grid"),
    "evaluation": {
        "families": (["fgsm", "deepfool", "cw_l2", "pgd_l2"], [str], "table rows"),
        "sweep_families": (["fgsm", "deepfool", "pgd_l2"], [str], None),
        "sweep_threat_models": (["white_box", "black_box"], [str], None),
        "eval_subset": (None, int, "cap on test images for tables"),
        "sweep_subset": (None, int, "cap on test images for sweeps"),
        "selection_subset": (None, int, "cap on validation images for generator selection"),
        "delay_sample": (8, int, "images timed per scenario"),
        "sensitivity_l_grid": ([], [int], "step grid for the delay/accuracy sweep"),
        "sensitivity_r_grid": ([], [int], None),
        "sensitivity_subset": (16, int, None),
    },
}

# Profile presets sit between user values and global defaults.
_PROFILE_OVERRIDES = {
    "paper": {},
    "desk": {
        "dataset": {"kind": "synthetic", "n_per_class": 500, "seed": 7},
        "gan": {"epochs": 10, "checkpoint_interval": 5, "seeds": [0, 1],
                "latent_dim": 64, "base_channels": 32},
        "reconstruction": {"gradient_steps": 200, "random_restarts": 4},
        "classifier": {"epochs": 5, "retrain_epochs": 3, "quick_epochs": 1},
        "attacks": {"deepfool": {"max_iterations": 20}, "pgd": {"max_iterations": 25}},
        "evaluation": {"eval_subset": 128, "sweep_subset": 32,
                       "sweep_families": ["fgsm"], "selection_subset": 48,
                       "delay_sample": 2, "sensitivity_l_grid": [50, 200],
                       "sensitivity_r_grid": [1, 4], "sensitivity_subset": 8},
    },
}


def _is_leaf(node) -> bool:
    return isinstance(node, tuple)


def _check_type(value, checker, path: str):
    if value is None:
        return
    if isinstance(checker, tuple):          # enumeration of allowed strings
        if value not in checker:
            raise ConfigValidationError(f"{path}: expected one of {checker}, got {value!r}")
    elif isinstance(checker, list):         # homogeneous list
        elem = checker[0]
        if not isinstance(value, list):
            raise ConfigValidationError(f"{path}: expected a list, got {type(value).__name__}")
        for i, item in enumerate(value):
            _check_type(item, elem, f"{path}[{i}]")
    elif checker is _num:
        if not _num(value):
            raise ConfigValidationError(f"{path}: expected a number, got {type(value).__name__}")
    elif not isinstance(value, checker):
        raise ConfigValidationError(
            f"{path}: expected {checker.__name__}, got {type(value).__name__}")


def _merge(schema: dict, user: dict, profile: dict, origins: dict, prefix: str,
           profile_name: str | None) -> dict:
    if not isinstance(user, dict):
        raise ConfigValidationError(f"{prefix or 'config'}: expected an object")
    for key in user:
        if key not in schema:
            raise ConfigValidationError(
                f"unknown config key {key!r}" + (f" under {prefix!r}" if prefix else ""))
    out = {}
    for key, node in schema.items():
        path = f"{prefix}.{key}" if prefix else key
        if _is_leaf(node):
            default, checker, _ = node
            if key in user:
                value, origin = user[key], "explicit"
            elif key in profile:
                value, origin = profile[key], f"profile:{profile_name}"
            else:
                value, origin = copy.deepcopy(default), "default"
            _check_type(value, checker, path)
            out[key] = value
            origins[path] = origin
        else:
            out[key] = _merge(node, user.get(key, {}), profile.get(key, {}),
                              origins, path, profile_name)
    return out


def _post_validate(cfg: dict) -> None:
    if cfg["dataset"]["kind"] == "lisa":
        for key in ("source_dir", "manifest"):
            value = cfg["dataset"][key]
            if value is None:
                raise ConfigValidationError(f"dataset.{key} is required when dataset.kind=lisa")
            if not Path(value).exists():
                raise ConfigValidationError(f"dataset.{key}: path {value!r} does not exist")
    grid = cfg["epsilon_grid"]
    if not grid or any(b <= a for a, b in zip(grid, grid[1:])):
        raise ConfigValidationError("epsilon_grid must be non-empty and strictly increasing")
    if cfg["reconstruction"]["gradient_steps"] < 0:
        raise ConfigValidationError("reconstruction.gradient_steps must be >= 0")
    if cfg["reconstruction"]["random_restarts"] < 1:
        raise ConfigValidationError("reconstruction.random_restarts must be >= 1")
    if cfg["gan"]["gradient_penalty_weight"] <= 0:
        raise ConfigValidationError("gan.gradient_penalty_weight must be > 0")
    if cfg["attacks"]["epsilon"] < 0:
        raise ConfigValidationError("attacks.epsilon must be >= 0")


def validate_config(source: str | Path | dict | None, profile: str | None = None
                    ) -> tuple[dict, str, dict]:
    """Validate and canonicalize a config.

    Args:
        source: path to a JSON file, an already-parsed dict, or None (defaults).
        profile: optional preset name ("paper" or "desk") applied beneath any
            explicit values.

    Returns:
        (config, hash, origins): the fully defaulted config dict, its
        canonical hash, and a dotted-path -> origin map where origin is one of
        "explicit", "profile:<name>", "default".

    Raises:
        ConfigValidationError: unknown key, wrong type, or missing path.
    """
    if source is None:
        user = {}
    elif isinstance(source, dict):
        user = source
    else:
        try:
            with open(source) as f:
                user = json.load(f)
        except FileNotFoundError:
            raise ConfigValidationError(f"config file {source} not found") from None
        except json.JSONDecodeError as e:
            raise ConfigValidationError(f"config file {source} is not valid JSON: {e}") from None
    if profile is not None and profile not in PROFILES:
        raise ConfigValidationError(f"unknown profile {profile!r}; choose from {PROFILES}")
    overrides = _PROFILE_OVERRIDES.get(profile, {}) if profile else {}
    origins: dict[str, str] = {}
    cfg = _merge(_SCHEMA, user, overrides, origins, "", profile)
    _post_validate(cfg)
    return cfg, config_hash(cfg), origins


def dump_config(cfg: dict, origins: dict) -> str:
    """Pretty JSON dump of the resolved config plus per-key origin markers."""
    return json.dumps({"config": cfg, "origins": origins}, indent=2, sort_keys=True)
