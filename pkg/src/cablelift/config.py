"""Run configuration: nested dataclasses loaded from YAML with dotted overrides.

Values the reference system never published (rotor constants, gains,
termination thresholds, action bounds) live here so every assumption is one
edit away.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

import yaml


class ConfigError(ValueError):
    pass


@dataclass
class PhysicsConfig:
    n_mavs: int = 3
    gravity: float = 9.81
    mav_mass: float = 0.6
    mav_inertia: list[float] = field(default_factory=lambda: [2.5e-3, 2.5e-3, 4.5e-3])
    mav_radius: float = 0.15
    load_mass: float = 1.4
    load_inertia: list[float] = field(default_factory=lambda: [0.025, 0.025, 0.045])
    attach_radius: float = 0.25
    cable_kind: str = "rigid_rod"  # rigid_rod | segmented
    cable_length: float = 1.0
    chain_particle_mass: float = 1e-3
    arm_length: float = 0.15
    k_f: float = 4.0e-6  # N / (rad/s)^2
    k_m: float = 6.4e-8  # N m / (rad/s)^2
    omega_max: float = 1000.0  # rad/s
    rotor_tau: float = 0.02  # s
    substeps: int = 6  # per control step
    solver_iterations: int = 8
    chain_solver_iterations: int = 24  # segmented cables: light particles under a heavy load converge slowly
    accel_noise_std: float = 0.0
    linear_drag: float = 0.0


@dataclass
class LowLevelConfig:
    iterations: int = 3  # controller ticks per control step (300 Hz at 100 Hz policy)
    filter_cutoff_hz: float = 10.0
    k_att: list[float] = field(default_factory=lambda: [8.0, 8.0, 4.0])
    k_rate: list[float] = field(default_factory=lambda: [30.0, 30.0, 12.0])
    k_vel: float = 3.0
    acc_bound: float = 5.0
    rate_bound: float = 2.0
    vel_bound: float = 2.0
    min_thrust_accel: float = 1e-3
    force_estimation: bool = True


@dataclass
class RewardWeights:
    lambda1: float = 1.5
    lambda2: float = 1.5
    lambda3: float = 1.5
    lambda4: float = 1.5
    lambda5: float = 0.5
    lambda6: float = 3.0
    lambda7: float = 0.5
    lambda8: float = 0.5
    lambda9: float = 0.5

    def as_array(self):
        return [getattr(self, f"lambda{i}") for i in range(1, 10)]


@dataclass
class EnvConfig:
    action_space: str = "ACCBR"  # ACCBR | ACC | VEL | CTBR
    observation: str = "partial"  # partial | partial_augmented | full
    history: int = 3
    duration: float = 10.0
    control_dt: float = 0.01
    spawn_xy: float = 1.0
    spawn_z: list[float] = field(default_factory=lambda: [0.5, 1.5])
    goal_tilt_deg: float = 45.0
    cone_angle_deg: float = 20.0
    load_mass_range: list[float] = field(default_factory=lambda: [1.0, 1.8])
    ground_clearance: float = 0.1
    load_cable_angle_deg: float = 70.0
    cable_mav_angle_deg: float = 70.0
    cable_clearance: float = 0.08
    mav_clearance: float = 0.3
    bounds_xy: float = 4.0
    bounds_z: list[float] = field(default_factory=lambda: [0.0, 4.0])
    min_tension: float = 0.1
    downwash_parallel_distance: float = 10.0
    reset_retries: int = 20


@dataclass
class NetConfig:
    actor_hidden: list[int] = field(default_factory=lambda: [256, 128, 64, 64])
    critic_hidden: list[int] = field(default_factory=lambda: [256, 128, 64, 64])
    activation: str = "elu"
    init_log_std: float = -1.0
    dtype: str = "float32"


@dataclass
class TrainerConfig:
    envs: int = 256
    rollouts: int = 128
    learning_epochs: int = 5
    mini_batches: int = 4
    discount_factor: float = 0.99
    gae_lambda: float = 0.95
    learning_rate_actor: float = 5e-4
    learning_rate_critic: float = 1e-4
    grad_norm_clip: float = 1.0
    ratio_clip: float = 0.1
    value_clip: float = 0.1
    entropy_loss_scale: float = 0.001
    value_loss_scale: float = 1.0
    kl_threshold: float = 0.0
    advantage_keep_fraction: float = 0.5
    critic: str = "centralized"  # centralized | local
    total_env_steps: int = 5_000_000
    checkpoint_every: int = 25


@dataclass
class Config:
    seed: int = 0
    physics: PhysicsConfig = field(default_factory=PhysicsConfig)
    lowlevel: LowLevelConfig = field(default_factory=LowLevelConfig)
    reward: RewardWeights = field(default_factory=RewardWeights)
    env: EnvConfig = field(default_factory=EnvConfig)
    nn: NetConfig = field(default_factory=NetConfig)
    marl: TrainerConfig = field(default_factory=TrainerConfig)

    def to_dict(self) -> dict[str, Any]:
        return dataclasses.asdict(self)

    def hash(self) -> str:
        blob = json.dumps(self.to_dict(), sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()

    def validate(self) -> "Config":
        p, e, m = self.physics, self.env, self.marl
        if p.n_mavs < 2:
            raise ConfigError("physics.n_mavs must be >= 2")
        if p.cable_kind not in ("rigid_rod", "segmented"):
            raise ConfigError(f"unknown physics.cable_kind {p.cable_kind!r}")
        if p.mav_mass <= 0 or p.load_mass <= 0 or min(p.mav_inertia + p.load_inertia) <= 0:
            raise ConfigError("masses and inertias must be positive")
        if p.cable_length <= 0:
            raise ConfigError("physics.cable_length must be positive")
        if p.substeps % self.lowlevel.iterations:
            raise ConfigError("physics.substeps must be a multiple of lowlevel.iterations")
        if e.action_space not in ("ACCBR", "ACC", "VEL", "CTBR"):
            raise ConfigError(f"unknown env.action_space {e.action_space!r}")
        if e.observation not in ("partial", "partial_augmented", "full"):
            raise ConfigError(f"unknown env.observation {e.observation!r}")
        if e.history < 1:
            raise ConfigError("env.history must be >= 1")
        steps = e.duration / e.control_dt
        if abs(steps - round(steps)) > 1e-9:
            raise ConfigError("env.duration / env.control_dt must be integral")
        if any(w <= 0 for w in self.reward.as_array()):
            raise ConfigError("reward weights must be positive")
        if m.critic not in ("centralized", "local"):
            raise ConfigError(f"unknown marl.critic {m.critic!r}")
        if not 0.0 < m.advantage_keep_fraction <= 1.0:
            raise ConfigError("marl.advantage_keep_fraction must be in (0, 1]")
        if m.envs < 1 or m.rollouts < 1 or m.mini_batches < 1 or m.learning_epochs < 1:
            raise ConfigError("marl sizes must be positive")
        if self.nn.activation not in ("elu", "tanh"):
            raise ConfigError(f"unknown nn.activation {self.nn.activation!r}")
        return self


def _build(cls, data: dict[str, Any], path: str):
    if not isinstance(data, dict):
        raise ConfigError(f"{path or 'config'} must be a mapping")
    known = {f.name: f for f in dataclasses.fields(cls)}
    unknown = set(data) - set(known)
    if unknown:
        raise ConfigError(f"unknown keys at {path or 'top level'}: {sorted(unknown)}")
    kwargs = {}
    for name, value in data.items():
        sub = _NESTED.get((cls, name))
        if sub is not None:
            kwargs[name] = _build(sub, value, f"{path}{name}.")
        else:
            kwargs[name] = value
    return cls(**kwargs)


_NESTED = {
    (Config, "physics"): PhysicsConfig,
    (Config, "lowlevel"): LowLevelConfig,
    (Config, "reward"): RewardWeights,
    (Config, "env"): EnvConfig,
    (Config, "nn"): NetConfig,
    (Config, "marl"): TrainerConfig,
}


def from_dict(data: dict[str, Any]) -> Config:
    return _build(Config, data, "").validate()


def apply_overrides(data: dict[str, Any], overrides: list[str]) -> dict[str, Any]:
    """Apply ``section.key=value`` strings; values are parsed as YAML scalars."""
    data = json.loads(json.dumps(data))
    for item in overrides:
        if "=" not in item:
            raise ConfigError(f"override {item!r} is not of the form key=value")
        key, raw = item.split("=", 1)
        parts = key.strip().split(".")
        node = data
        for part in parts[:-1]:
            node = node.setdefault(part, {})
            if not isinstance(node, dict):
                raise ConfigError(f"override {key!r} descends into a scalar")
        node[parts[-1]] = yaml.safe_load(raw)
    return data


def load(path: str | Path | None = None, overrides: list[str] | None = None) -> Config:
    data: dict[str, Any] = Config().to_dict()
    if path is not None:
        path = Path(path)
        if not path.exists():
            raise FileNotFoundError(f"config file not found: {path}")
        loaded = yaml.safe_load(path.read_text()) or {}
        if not isinstance(loaded, dict):
            raise ConfigError(f"{path} does not contain a mapping")
        data = _merge(data, loaded)
    data = apply_overrides(data, overrides or [])
    return from_dict(data)


def _merge(base: dict, extra: dict) -> dict:
    out = dict(base)
    for k, v in extra.items():
        if isinstance(v, dict) and isinstance(out.get(k), dict):
            out[k] = _merge(out[k], v)
        else:
            out[k] = v
    return out


def dump(cfg: Config, path: str | Path) -> None:
    Path(path).write_text(yaml.safe_dump(cfg.to_dict(), sort_keys=False))
