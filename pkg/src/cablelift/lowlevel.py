"""Per-MAV inner loop: policy action -> rotor speed commands.

The acceleration path estimates the external (cable) force from matched,
low-pass filtered accelerometer and thrust signals and folds it into the
thrust direction.  Attitude and rate loops are model based: the simulated
vehicle is known exactly, so an incremental (sensor-based) scheme would add
nothing here.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import signal

from . import geom
from .config import LowLevelConfig, PhysicsConfig
from . import physics
from .physics import Rotors, World

ACTION_DIMS = {"ACCBR": 6, "ACC": 3, "VEL": 3, "CTBR": 4}


def estimate_external_force(m, a_filtered, f_thrust_filtered):
    """External force in the world frame: ``m * a_filtered - f_filtered``."""
    return np.asarray(m)[..., None] * np.asarray(a_filtered) - np.asarray(f_thrust_filtered)


def acceleration_controller(a_ref, f_ext, m, gravity=9.81, eps=1e-3):
    """Thrust direction and magnitude that realise ``a_ref`` against gravity
    and the estimated external force.

    Returns ``(z_des, f_collective, free_fall)``; where the required specific
    force is below ``eps`` the direction falls back to world up with zero
    thrust and ``free_fall`` is set.
    """
    a_ref = np.asarray(a_ref, dtype=float)
    m = np.asarray(m, dtype=float)
    g = np.array([0.0, 0.0, -gravity])
    v = a_ref - g - np.asarray(f_ext, dtype=float) / m[..., None]
    norm = np.linalg.norm(v, axis=-1)
    free_fall = norm < eps
    z_des = np.where(free_fall[..., None], np.array([0.0, 0.0, 1.0]), v / np.where(free_fall, 1.0, norm)[..., None])
    f = np.where(free_fall, 0.0, m * norm)
    return z_des, f, free_fall


def desired_rotation(z_des, yaw):
    """Rotation whose body z is ``z_des`` and whose heading follows ``yaw``."""
    x_c = np.stack([np.cos(yaw), np.sin(yaw), np.zeros_like(yaw)], axis=-1)
    y = geom.cross(z_des, x_c)
    ny = np.linalg.norm(y, axis=-1, keepdims=True)
    # heading undefined when z_des is horizontal along x_c; fall back to world y
    y = np.where(ny > 1e-6, y / np.maximum(ny, 1e-12), np.array([0.0, 1.0, 0.0]))
    x = geom.cross(y, z_des)
    return np.stack([x, y, z_des], axis=-1)


def _vee(S):
    return np.stack([S[..., 2, 1], S[..., 0, 2], S[..., 1, 0]], axis=-1)


class AttitudeRateController:
    """Attitude P loop -> body-rate P loop with inertia model -> allocation."""

    def __init__(self, rotors: Rotors, inertia, k_att, k_rate):
        self.rotors = rotors
        self.J = np.asarray(inertia, dtype=float)
        self.k_att = np.asarray(k_att, dtype=float)
        self.k_rate = np.asarray(k_rate, dtype=float)

    def rate_setpoint(self, q, z_des, yaw_ref, omega_ff):
        R = geom.quat_to_rotmat(q)
        Rd = desired_rotation(z_des, yaw_ref)
        Rt = np.swapaxes(R, -1, -2)
        Rdt = np.swapaxes(Rd, -1, -2)
        e_R = 0.5 * _vee(Rdt @ R - Rt @ Rd)
        return -self.k_att * e_R + omega_ff

    def rotor_commands(self, q, omega_world, omega_sp, f_collective):
        """Rotor speeds for a body-rate setpoint; returns ``(speeds, saturated)``."""
        wb = geom.rotate_vec(geom.quat_conj(q), omega_world)
        J = self.J
        torque = J * (self.k_rate * (omega_sp - wb)) + geom.cross(wb, J * wb)
        return self.rotors.speeds_for_wrench(f_collective, torque)

    def __call__(self, q, omega_world, z_des, omega_ff, f_collective, yaw_ref):
        omega_sp = self.rate_setpoint(q, z_des, yaw_ref, omega_ff)
        return self.rotor_commands(q, omega_world, omega_sp, f_collective)


class Biquad:
    """Second-order Butterworth low-pass, direct form II transposed."""

    def __init__(self, cutoff_hz: float, sample_hz: float):
        b, a = signal.butter(2, cutoff_hz, btype="low", fs=sample_hz)
        self.b = b
        self.a = a

    def steady_state(self, x0):
        b, a = self.b, self.a
        z2 = (b[2] - a[2]) * x0
        z1 = (b[1] - a[1]) * x0 + z2
        return np.stack([z1, z2], axis=-2)

    def __call__(self, x, z):
        """Filter one sample; ``z`` has shape ``x.shape[:-1] + (2, 3)`` and is updated in place."""
        b, a = self.b, self.a
        y = b[0] * x + z[..., 0, :]
        z[..., 0, :] = b[1] * x - a[1] * y + z[..., 1, :]
        z[..., 1, :] = b[2] * x - a[2] * y
        return y


@dataclass
class LowLevelState:
    accel_filter: np.ndarray  # (E, N, 2, 3)
    thrust_filter: np.ndarray  # (E, N, 2, 3)
    last_rotor_cmd: np.ndarray  # (E, N, 4)
    yaw_ref: np.ndarray  # (E, N)
    f_ext: np.ndarray  # (E, N, 3), last estimate
    saturated: np.ndarray  # (E, N) bool, any saturation during the last period
    free_fall: np.ndarray  # (E, N) bool


class LowLevelController:
    """Runs the inner loop ``iterations`` times per policy step."""

    def __init__(self, cfg: LowLevelConfig, phys: PhysicsConfig, control_dt: float):
        self.cfg = cfg
        self.rotors = Rotors.from_config(phys)
        self.mass = phys.mav_mass
        self.gravity = phys.gravity
        self.dt = control_dt / cfg.iterations
        self.substeps = phys.substeps // cfg.iterations
        self.filter = Biquad(cfg.filter_cutoff_hz, 1.0 / self.dt)
        self.attitude = AttitudeRateController(self.rotors, phys.mav_inertia, cfg.k_att, cfg.k_rate)

    def initial_state(self, world: World) -> LowLevelState:
        E, N = world.n_envs, world.n_mavs
        st = LowLevelState(
            accel_filter=np.zeros((E, N, 2, 3)),
            thrust_filter=np.zeros((E, N, 2, 3)),
            last_rotor_cmd=np.zeros((E, N, 4)),
            yaw_ref=np.zeros((E, N)),
            f_ext=np.zeros((E, N, 3)),
            saturated=np.zeros((E, N), dtype=bool),
            free_fall=np.zeros((E, N), dtype=bool),
        )
        self.reset(st, world, np.arange(E))
        return st

    def reset(self, st: LowLevelState, world: World, envs) -> None:
        """Initialise filters at the current (assumed static) measurements."""
        envs = np.asarray(envs)
        if envs.dtype == bool:
            envs = np.flatnonzero(envs)
        if envs.size == 0:
            return
        a0 = world.specific_force[envs]
        st.accel_filter[envs] = self.filter.steady_state(a0)
        st.thrust_filter[envs] = self.filter.steady_state(self.thrust_vector(world)[envs])
        st.yaw_ref[envs] = geom.yaw_of(world.quat[envs][:, world.mav_bodies])
        st.last_rotor_cmd[envs] = world.rotor_speeds[envs]
        st.f_ext[envs] = 0.0

    def thrust_vector(self, world: World) -> np.ndarray:
        """World-frame thrust from the quadratic model applied to measured rotor speeds."""
        collective, _ = self.rotors.thrust_from_rotor_speeds(world.rotor_speeds)
        z = geom.rotate_vec(world.quat[:, world.mav_bodies], np.array([0.0, 0.0, 1.0]))
        return collective[..., None] * z

    def physical_action(self, variant: str, u: np.ndarray) -> dict[str, np.ndarray]:
        """Map a normalised action in ``[-1, 1]`` to physical references."""
        c = self.cfg
        u = np.clip(u, -1.0, 1.0)
        if variant == "ACCBR":
            return {"a_ref": c.acc_bound * u[..., :3], "omega_ref": c.rate_bound * u[..., 3:6]}
        if variant == "ACC":
            return {"a_ref": c.acc_bound * u[..., :3]}
        if variant == "VEL":
            return {"v_ref": c.vel_bound * u[..., :3]}
        if variant == "CTBR":
            f_max = 4.0 * self.rotors.thrust_max
            return {"f_c": 0.5 * (u[..., 0] + 1.0) * f_max, "omega_ref": c.rate_bound * u[..., 1:4]}
        raise ValueError(f"unknown action space {variant!r}")

    def execute_action(self, variant: str, ref: dict[str, np.ndarray], world: World, st: LowLevelState) -> np.ndarray:
        """One inner-loop update from current sensors; returns rotor speed commands ``(E, N, 4)``."""
        mavs = world.mav_bodies
        q = world.quat[:, mavs]
        omega = world.omega[:, mavs]
        a_f = self.filter(world.accelerometer(), st.accel_filter)
        f_f = self.filter(self.thrust_vector(world), st.thrust_filter)
        if self.cfg.force_estimation:
            st.f_ext = estimate_external_force(np.full(a_f.shape[:-1], self.mass), a_f, f_f)
        else:
            st.f_ext = np.zeros_like(a_f)

        if variant == "CTBR":
            omega_sp = ref["omega_ref"]
            cmd, sat = self.attitude.rotor_commands(q, omega, omega_sp, ref["f_c"])
            st.saturated |= sat
            st.last_rotor_cmd = cmd
            return cmd

        if variant == "VEL":
            a_ref = self.cfg.k_vel * (ref["v_ref"] - world.vel[:, mavs])
        else:
            a_ref = ref["a_ref"]
        omega_ff = ref.get("omega_ref")
        if omega_ff is None:
            omega_ff = np.zeros_like(a_ref)
        m = np.full(a_ref.shape[:-1], self.mass)
        z_des, f_coll, free_fall = acceleration_controller(
            a_ref, st.f_ext, m, self.gravity, self.cfg.min_thrust_accel
        )
        st.free_fall |= free_fall
        st.yaw_ref = st.yaw_ref + self.dt * omega_ff[..., 2]
        cmd, sat = self.attitude(q, omega, z_des, omega_ff, f_coll, st.yaw_ref)
        st.saturated |= sat
        st.last_rotor_cmd = cmd
        return cmd

    def run_period(self, variant: str, u: np.ndarray, world: World, st: LowLevelState, on_nan="raise", override=None):
        """Run one policy period: ``iterations`` controller ticks, each followed
        by the matching physics substeps.

        ``override`` optionally maps ``(mask (N,), a_ref (E, N, 3))``: masked
        agents fly the ACC path with that reference instead of ``u``.
        """
        ref = self.physical_action(variant, u)
        st.saturated[:] = False
        st.free_fall[:] = False
        h = self.dt / self.substeps
        for _ in range(self.cfg.iterations):
            cmd = self.execute_action(variant, ref, world, st)
            if override is not None:
                mask, a_ref = override
                if np.any(mask):
                    cmd_o = self.acc_override_command(a_ref, world, st)
                    cmd = np.where(mask[None, :, None], cmd_o, cmd)
            physics.step(world, cmd, h, substeps=self.substeps, on_nan=on_nan)
        return st

    def acc_override_command(self, a_ref, world: World, st: LowLevelState) -> np.ndarray:
        """Acceleration-path command using the estimate from the current tick."""
        mavs = world.mav_bodies
        m = np.full(a_ref.shape[:-1], self.mass)
        z_des, f_coll, _ = acceleration_controller(a_ref, st.f_ext, m, self.gravity, self.cfg.min_thrust_accel)
        cmd, _ = self.attitude(world.quat[:, mavs], world.omega[:, mavs], z_des, np.zeros_like(a_ref), f_coll, st.yaw_ref)
        return cmd
