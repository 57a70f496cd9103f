"""Configuration loading: YAML overlays on full in-code defaults.

Every algorithm hyperparameter lives under its own key with the reference
value as default; desk-scale presets override network width and budgets.  The
checked-in ``configs/defaults.yaml`` mirrors ``default_config()`` and a test
keeps them in sync.
"""

from __future__ import annotations

import copy
from pathlib import Path

import numpy as np
import yaml

from .constraints import CircleGeometry
from .dynamics import BicycleParams
from .envs import IntersectionEnv, ScenarioConfig, ToySafeEnv
from .errors import ContractViolation
from .trainer import TrainConfig


class ConfigError(ValueError):
    """Bad configuration file; the CLI maps this to exit code 2."""


def default_config() -> dict:
    return {
        "train": {
            "gamma": 0.99,
            "delta": 0.01,
            "alpha0": 0.3,
            "alpha0_adaptive": 0.1,
            "relative_degree": 3,
            "xi_tolerance": 0.3,
            "alpha_lr": 1.0e-3,
            "alpha_min": 0.01,
            "alpha_max": 0.99,
            "damping": 0.1,
            "cg_iters": 20,
            "cg_tol": 1.0e-8,
            "backtrack_coeff": 0.8,
            "max_backtracks": 10,
            "constraint_tol": 1.0e-6,
            "pointwise_steps": 10,
            "dual_ascent_iters": 500,
            "dual_ascent_rate": 1.0e-2,
            "batch_residual_temperature": 0.05,
            "critic_lr_start": 8.0e-5,
            "critic_lr_end": 8.0e-6,
            "critic_epochs": 1,
            "critic_batch_size": 0,
            "hidden_layers": 2,
            "hidden_units": 256,
            "init_log_std": -1.6094379124341003,
            "log_std_frozen": False,
            "final_weight_scale": 0.01,
            "batch_env_steps": 2048,
            "rollout_batch_size": 512,
            "fvp_batch_size": 1024,
            "total_interactions": 2_000_000,
            "max_iterations": None,
            "checkpoint_every": 50,
            "dump_trajectories": False,
            "seed": 0,
        },
        "env": {
            "kind": "intersection",
            "toy": {
                "dt": 0.1,
                "p_max": 1.0,
                "p_ref": 0.3,
                "a_max": 1.0,
                "episode_steps": 50,
            },
            "intersection": {
                "scenario": {
                    "intersection_size": 50.0,
                    "lane_width": 3.75,
                    "lanes_per_direction": 3,
                    "extent": 60.0,
                    "radius_right": 20.0,
                    "radius_left": 30.0,
                    "arrival_rate": 0.1,
                    "initial_vehicles_mean": 3.0,
                    "max_vehicles": 8,
                    "speed_range": [6.0, 12.0],
                    "episode_steps": 200,
                    "v_target": 8.0,
                    "dt": 0.1,
                    "spawn_s_range": [5.0, 25.0],
                    "spawn_speed_range": [5.0, 9.0],
                    "spawn_h_margin": 2.0,
                    "lse_temperature": 0.5,
                },
                "vehicle": {
                    "mass": 1412.0,
                    "inertia_z": 1536.7,
                    "length_front": 1.06,
                    "length_rear": 1.85,
                    "stiffness_front": -128916.0,
                    "stiffness_rear": -85944.0,
                    "steer_max": 0.4,
                    "accel_max": 3.0,
                    "v_x_min": 0.5,
                    "length": 4.8,
                    "width": 2.0,
                },
                "circles": {
                    "front_offset": 1.2,
                    "rear_offset": -1.2,
                    "d_safe": 2.5,
                    "d_r_safe": 1.5,
                },
            },
        },
    }


def _merge(base: dict, overlay: dict, path: str = "") -> dict:
    out = copy.deepcopy(base)
    for key, value in overlay.items():
        where = f"{path}.{key}" if path else key
        if key not in base:
            raise ConfigError(f"unknown configuration key: {where}")
        if isinstance(base[key], dict):
            if not isinstance(value, dict):
                raise ConfigError(f"{where}: expected a mapping")
            out[key] = _merge(base[key], value, where)
        else:
            out[key] = value
    return out


def load_config(path: str | Path | None) -> dict:
    cfg = default_config()
    if path is None:
        return cfg
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"configuration file not found: {path}")
    try:
        overlay = yaml.safe_load(path.read_text()) or {}
    except yaml.YAMLError as exc:
        raise ConfigError(f"{path}: invalid YAML ({exc})") from exc
    if not isinstance(overlay, dict):
        raise ConfigError(f"{path}: top level must be a mapping")
    return _merge(cfg, overlay)


def build_train_config(cfg: dict, algorithm: str, seed: int | None = None) -> TrainConfig:
    t = dict(cfg["train"])
    alpha_adaptive = t.pop("alpha0_adaptive")
    t.pop("dump_trajectories", None)
    if algorithm == "gcbf_adaptive":
        t["alpha0"] = alpha_adaptive
    if seed is not None:
        t["seed"] = seed
    try:
        return TrainConfig(**t)
    except (ContractViolation, TypeError) as exc:
        raise ConfigError(f"train: {exc}") from exc


def build_env(cfg: dict):
    env_cfg = cfg["env"]
    kind = env_cfg["kind"]
    try:
        if kind == "toy":
            return ToySafeEnv(**env_cfg["toy"])
        if kind == "intersection":
            inter = env_cfg["intersection"]
            sc = dict(inter["scenario"])
            for key in ("speed_range", "spawn_s_range", "spawn_speed_range"):
                sc[key] = tuple(sc[key])
            return IntersectionEnv(ScenarioConfig(**sc),
                                   BicycleParams(**inter["vehicle"]),
                                   CircleGeometry(**inter["circles"]))
    except (ContractViolation, ValueError, TypeError) as exc:
        raise ConfigError(f"env.{kind}: {exc}") from exc
    raise ConfigError(f"env.kind: unknown environment {kind!r}")
