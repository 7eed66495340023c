"""Constrained rigid-body simulation of a multi-rotor team carrying a slung load.

Bodies are integrated with semi-implicit Euler; cables are massless distance
constraints enforced by position-based projection (Gauss-Seidel) followed by a
velocity projection.  Every array carries a leading environment axis ``E`` so
thousands of independent worlds advance with one set of numpy calls.

Body layout of a lift world: index 0 is the load, ``1..N`` are the MAVs and any
further bodies are the intermediate particles of segmented cables.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import _kernels, geom
from .config import ConfigError, PhysicsConfig


class SimulationDiverged(RuntimeError):
    def __init__(self, env_index: int, body_index: int):
        super().__init__(f"non-finite state in env {env_index}, body {body_index}")
        self.env_index = env_index
        self.body_index = body_index


@dataclass
class BodyParams:
    mass: float  # np.inf pins the body in place
    inertia: tuple[float, float, float] | None = None  # None: point mass, rotation ignored
    attachment_points: list = field(default_factory=list)

    def __post_init__(self):
        if not self.mass > 0:
            raise ConfigError("body mass must be positive")
        if self.inertia is not None and min(self.inertia) <= 0:
            raise ConfigError("inertia diagonal entries must be positive")


@dataclass
class CableModel:
    kind: str
    length: float
    attach_mav: np.ndarray
    attach_load: np.ndarray

    def __post_init__(self):
        if self.kind not in ("rigid_rod", "segmented"):
            raise ConfigError(f"unknown cable kind {self.kind!r}")
        if not self.length > 0:
            raise ConfigError("cable length must be positive")
        self.attach_mav = np.asarray(self.attach_mav, dtype=float)
        self.attach_load = np.asarray(self.attach_load, dtype=float)


@dataclass
class ConstraintSet:
    """Distance constraints ``|x_b - x_a| = length`` between attachment points."""

    body_a: np.ndarray
    local_a: np.ndarray
    body_b: np.ndarray
    local_b: np.ndarray
    length: np.ndarray
    n_particles: int = 0
    # index of the constraint nearest each MAV, per cable (tension monitoring)
    cable_top: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=int))
    cable_length: np.ndarray = field(default_factory=lambda: np.zeros(0))

    def __len__(self) -> int:
        return len(self.length)


def build_cable_constraints(cables: list[CableModel], n_mavs: int) -> ConstraintSet:
    """Constraints tying MAV ``i + 1`` to the load (body 0) through ``cables[i]``.

    Rigid rods give one constraint per cable.  Segmented cables give three equal
    segments joined through two particle bodies numbered after the MAVs.
    """
    if n_mavs < 2:
        raise ConfigError("need at least two MAVs")
    if len(cables) != n_mavs:
        raise ConfigError(f"{len(cables)} cables for {n_mavs} MAVs")
    load_points = np.array([c.attach_load for c in cables])
    for i in range(n_mavs):
        for j in range(i + 1, n_mavs):
            if np.allclose(load_points[i], load_points[j]):
                raise ConfigError(f"cables {i} and {j} share a load attachment point")
    a, la, b, lb, length, top = [], [], [], [], [], []
    zero = np.zeros(3)
    particle = 1 + n_mavs
    for i, c in enumerate(cables):
        mav = i + 1
        if c.kind == "rigid_rod":
            top.append(len(length))
            a.append(0), la.append(c.attach_load), b.append(mav), lb.append(c.attach_mav), length.append(c.length)
        else:
            seg = c.length / 3.0
            p1, p2 = particle, particle + 1
            particle += 2
            a.append(0), la.append(c.attach_load), b.append(p1), lb.append(zero), length.append(seg)
            a.append(p1), la.append(zero), b.append(p2), lb.append(zero), length.append(seg)
            top.append(len(length))
            a.append(p2), la.append(zero), b.append(mav), lb.append(c.attach_mav), length.append(seg)
    return ConstraintSet(
        body_a=np.array(a),
        local_a=np.array(la, dtype=float),
        body_b=np.array(b),
        local_b=np.array(lb, dtype=float),
        length=np.array(length, dtype=float),
        n_particles=particle - 1 - n_mavs,
        cable_top=np.array(top, dtype=int),
        cable_length=np.array([c.length for c in cables], dtype=float),
    )


class Rotors:
    """Quadratic thrust model of an X-configuration quadrotor."""

    def __init__(self, k_f: float, k_m: float, arm_length: float, omega_max: float, tau: float):
        self.k_f = k_f
        self.k_m = k_m
        self.arm_length = arm_length
        self.omega_max = omega_max
        self.tau = tau
        ang = np.deg2rad([45.0, 135.0, 225.0, 315.0])
        self.positions = arm_length * np.stack([np.cos(ang), np.sin(ang), np.zeros(4)], axis=-1)
        self.spin = np.array([1.0, -1.0, 1.0, -1.0])
        # rows: collective force, roll, pitch and yaw torque per unit rotor thrust
        self.allocation = np.stack(
            [np.ones(4), self.positions[:, 1], -self.positions[:, 0], self.spin * k_m / k_f]
        )
        self.allocation_inv = np.linalg.inv(self.allocation)

    @classmethod
    def from_config(cls, cfg: PhysicsConfig) -> "Rotors":
        return cls(cfg.k_f, cfg.k_m, cfg.arm_length, cfg.omega_max, cfg.rotor_tau)

    @property
    def thrust_max(self) -> float:
        return self.k_f * self.omega_max**2

    def rotor_thrusts(self, speeds: np.ndarray) -> np.ndarray:
        return self.k_f * np.square(speeds)

    def thrust_from_rotor_speeds(self, speeds: np.ndarray):
        """Collective force along body z and body-frame torque."""
        wrench = self.rotor_thrusts(speeds) @ self.allocation.T
        return wrench[..., 0], wrench[..., 1:]

    def speeds_for_wrench(self, force: np.ndarray, torque: np.ndarray):
        """Rotor speeds realising a wrench, with the saturation flag."""
        wrench = np.concatenate([np.asarray(force)[..., None], torque], axis=-1)
        thrusts = wrench @ self.allocation_inv.T
        speeds = np.sqrt(np.clip(thrusts, 0.0, None) / self.k_f)
        saturated = np.any(thrusts < 0.0, axis=-1) | np.any(speeds > self.omega_max, axis=-1)
        return np.minimum(speeds, self.omega_max), saturated

    def rotor_dynamics(self, speeds: np.ndarray, cmd: np.ndarray, dt: float) -> np.ndarray:
        """First-order lag toward ``cmd`` (exact discretisation)."""
        cmd = np.clip(cmd, 0.0, self.omega_max)
        return cmd + (speeds - cmd) * np.exp(-dt / self.tau)


class World:
    """State of ``E`` independent worlds sharing one body/constraint layout."""

    def __init__(
        self,
        bodies: list[BodyParams],
        constraints: ConstraintSet | None,
        n_envs: int,
        rotors: Rotors,
        mav_bodies: list[int],
        gravity: float = 9.81,
        iterations: int = 8,
        accel_noise_std: float = 0.0,
        linear_drag: float = 0.0,
        seed: int | np.random.SeedSequence | None = 0,
    ):
        E, B = n_envs, len(bodies)
        self.n_envs, self.n_bodies = E, B
        self.bodies = bodies
        self.constraints = constraints if constraints is not None else build_empty()
        self.rotors = rotors
        self.mav_bodies = np.asarray(mav_bodies, dtype=int)
        self.gravity = np.array([0.0, 0.0, -gravity])
        self.iterations = iterations
        self.accel_noise_std = accel_noise_std
        self.linear_drag = linear_drag
        self.rng = np.random.default_rng(seed)

        self.pos = np.zeros((E, B, 3))
        self.vel = np.zeros((E, B, 3))
        self.quat = np.tile(geom.IDENTITY_QUAT, (E, B, 1))
        self.omega = np.zeros((E, B, 3))
        inv_mass = np.array([0.0 if np.isinf(b.mass) else 1.0 / b.mass for b in bodies])
        self.inv_mass = np.tile(inv_mass, (E, 1))
        inv_inertia = np.array(
            [np.zeros(3) if b.inertia is None or np.isinf(b.mass) else 1.0 / np.asarray(b.inertia) for b in bodies]
        )
        self.inv_inertia = np.tile(inv_inertia, (E, 1, 1))
        self.rotational = np.array([b.inertia is not None and not np.isinf(b.mass) for b in bodies])
        M = len(self.mav_bodies)
        self.rotor_speeds = np.zeros((E, M, 4))
        self.failed = np.zeros((E, M), dtype=bool)
        self.time = np.zeros(E)
        self.specific_force = np.zeros((E, M, 3))
        self.tension = np.zeros((E, len(self.constraints)))
        self.diverged = np.zeros(E, dtype=bool)
        # constant world-frame force per body (disturbance injection), N
        self.external_force = np.zeros((E, B, 3))

    # ----------------------------------------------------------------- queries
    @property
    def n_mavs(self) -> int:
        return len(self.mav_bodies)

    def rotmats(self, bodies=None) -> np.ndarray:
        q = self.quat if bodies is None else self.quat[:, bodies]
        return geom.quat_to_rotmat(q)

    def attachment_world(self, body: int, local: np.ndarray) -> np.ndarray:
        if not np.any(local):
            return self.pos[:, body]
        return self.pos[:, body] + geom.rotate_vec(self.quat[:, body], local)

    def cable_residuals(self) -> np.ndarray:
        """``|distance - length|`` for every constraint, shape ``(E, C)``."""
        c = self.constraints
        out = np.empty((self.n_envs, len(c)))
        for k in range(len(c)):
            pa = self.attachment_world(c.body_a[k], c.local_a[k])
            pb = self.attachment_world(c.body_b[k], c.local_b[k])
            out[:, k] = np.abs(np.linalg.norm(pb - pa, axis=-1) - c.length[k])
        return out

    def mass(self) -> np.ndarray:
        with np.errstate(divide="ignore"):
            return np.where(self.inv_mass > 0, 1.0 / np.where(self.inv_mass > 0, self.inv_mass, 1.0), np.inf)

    def energy(self) -> np.ndarray:
        """Kinetic plus gravitational potential energy of the movable bodies."""
        m = self.mass()
        movable = self.inv_mass > 0
        m = np.where(movable, m, 0.0)
        kin = 0.5 * np.sum(m * np.sum(self.vel**2, axis=-1), axis=-1)
        R = self.rotmats()
        wb = np.einsum("ebji,ebj->ebi", R, self.omega)
        inertia = np.where(self.inv_inertia > 0, 1.0 / np.where(self.inv_inertia > 0, self.inv_inertia, 1.0), 0.0)
        rot = 0.5 * np.sum(inertia * wb**2, axis=(-1, -2))
        pot = -np.sum(m * (self.pos @ self.gravity), axis=-1)
        return kin + rot + pot

    def momentum(self) -> np.ndarray:
        m = np.where(self.inv_mass > 0, self.mass(), 0.0)
        return np.sum(m[..., None] * self.vel, axis=1)

    def accelerometer(self, mav_index: int | None = None) -> np.ndarray:
        """Specific force (world frame) over the last :func:`step` call plus noise."""
        f = self.specific_force if mav_index is None else self.specific_force[:, mav_index]
        if self.accel_noise_std > 0.0:
            f = f + self.rng.normal(0.0, self.accel_noise_std, size=f.shape)
        return f

    def copy(self) -> "World":
        new = object.__new__(World)
        new.__dict__.update(self.__dict__)
        for k, v in self.__dict__.items():
            if isinstance(v, np.ndarray):
                new.__dict__[k] = v.copy()
        new.rng = np.random.default_rng()
        new.rng.bit_generator.state = self.rng.bit_generator.state
        return new


def build_empty() -> ConstraintSet:
    z = np.zeros(0, dtype=int)
    return ConstraintSet(z, np.zeros((0, 3)), z, np.zeros((0, 3)), np.zeros(0))


def step(world: World, rotor_speed_cmds: np.ndarray, dt: float, substeps: int = 1, on_nan: str = "raise") -> World:
    """Advance ``world`` in place by ``substeps`` substeps of length ``dt``.

    Each substep: rotor lag, thrust and gravity, semi-implicit Euler, then
    ``world.iterations`` Gauss-Seidel sweeps of position projection over the
    cable constraints, velocity recovery from the position change, and one
    velocity projection sweep.  ``rotor_speed_cmds`` has shape ``(E, N, 4)``
    and is held over the call; rotors of failed MAVs produce no thrust.

    With ``on_nan="flag"`` diverged environments are zeroed and marked in
    ``world.diverged`` instead of raising :class:`SimulationDiverged`.
    """
    rot = world.rotors
    cmds = np.clip(np.asarray(rotor_speed_cmds, dtype=float), 0.0, rot.omega_max)
    c = world.constraints
    _kernels.advance(
        world.pos, world.vel, world.quat, world.omega,
        world.inv_mass, world.inv_inertia, world.rotational, world.mav_bodies,
        world.rotor_speeds, cmds, world.failed,
        rot.k_f, rot.allocation, float(np.exp(-dt / rot.tau)), world.linear_drag, world.gravity,
        c.body_a, c.local_a, c.body_b, c.local_b, c.length,
        world.iterations, dt, substeps,
        world.tension, world.specific_force, world.external_force,
    )
    world.time += dt * substeps
    _check_finite(world, on_nan)
    return world


def _check_finite(world: World, on_nan: str) -> None:
    bad = ~(
        np.isfinite(world.pos).all(-1)
        & np.isfinite(world.vel).all(-1)
        & np.isfinite(world.quat).all(-1)
        & np.isfinite(world.omega).all(-1)
    )
    if not bad.any():
        return
    env, body = np.argwhere(bad)[0]
    if on_nan == "raise":
        raise SimulationDiverged(int(env), int(body))
    envs = bad.any(-1)
    world.diverged |= envs
    for arr in (world.pos, world.vel, world.omega):
        arr[envs] = 0.0
    world.quat[envs] = geom.IDENTITY_QUAT
    world.specific_force[envs] = 0.0


# --------------------------------------------------------------- lift worlds
def load_attachment_points(cfg: PhysicsConfig) -> np.ndarray:
    """Attachment points on the load plane, evenly spread on a circle."""
    n = cfg.n_mavs
    ang = 2.0 * np.pi * np.arange(n) / n
    return cfg.attach_radius * np.stack([np.cos(ang), np.sin(ang), np.zeros(n)], axis=-1)


def make_cables(cfg: PhysicsConfig) -> list[CableModel]:
    return [
        CableModel(cfg.cable_kind, cfg.cable_length, np.zeros(3), p) for p in load_attachment_points(cfg)
    ]


def make_lift_world(cfg: PhysicsConfig, n_envs: int, seed=0) -> World:
    n = cfg.n_mavs
    constraints = build_cable_constraints(make_cables(cfg), n)
    bodies = [BodyParams(cfg.load_mass, tuple(cfg.load_inertia), list(load_attachment_points(cfg)))]
    bodies += [BodyParams(cfg.mav_mass, tuple(cfg.mav_inertia), [np.zeros(3)]) for _ in range(n)]
    bodies += [BodyParams(cfg.chain_particle_mass) for _ in range(constraints.n_particles)]
    return World(
        bodies,
        constraints,
        n_envs,
        Rotors.from_config(cfg),
        mav_bodies=list(range(1, n + 1)),
        gravity=cfg.gravity,
        iterations=cfg.chain_solver_iterations if cfg.cable_kind == "segmented" else cfg.solver_iterations,
        accel_noise_std=cfg.accel_noise_std,
        linear_drag=cfg.linear_drag,
        seed=seed,
    )


def place_lift(
    world: World,
    envs: np.ndarray,
    load_pos: np.ndarray,
    load_quat: np.ndarray,
    mav_yaw: np.ndarray,
    cone_angle: float,
) -> None:
    """Put the selected environments at rest with every cable taut.

    Each MAV sits at cable length from its load attachment along a direction
    tilted outward by ``cone_angle`` from the load-plane normal.
    """
    c = world.constraints
    world.pos[envs, 0] = load_pos
    world.quat[envs, 0] = load_quat
    n = world.n_mavs
    normal = geom.rotate_vec(load_quat, np.array([0.0, 0.0, 1.0]))
    for i in range(n):
        local = c.local_a[np.flatnonzero(c.body_a == 0)[i]]
        anchor = load_pos + geom.rotate_vec(load_quat, local)
        radial = geom.rotate_vec(load_quat, local / max(np.linalg.norm(local), 1e-12))
        direction = np.cos(cone_angle) * normal + np.sin(cone_angle) * radial
        length = c.cable_length[i]
        mav = i + 1
        world.pos[envs, mav] = anchor + length * direction
        if c.n_particles:
            # particles of cable i sit at thirds along the straight cable
            p1 = 1 + n + 2 * i
            world.pos[envs, p1] = anchor + (length / 3.0) * direction
            world.pos[envs, p1 + 1] = anchor + (2.0 * length / 3.0) * direction
        yaw = np.asarray(mav_yaw)[..., i] if np.ndim(mav_yaw) else mav_yaw
        world.quat[envs, mav] = geom.from_euler(np.zeros_like(yaw), np.zeros_like(yaw), yaw)
    world.vel[envs] = 0.0
    world.omega[envs] = 0.0
    world.rotor_speeds[envs] = 0.0
    world.failed[envs] = False
    world.diverged[envs] = False
    world.time[envs] = 0.0
    world.specific_force[envs] = -world.gravity
    world.tension[envs] = 0.0
