"""Vectorised multi-agent environment: MAV team manipulating a slung load.

Each of the ``E`` environments holds one world.  Agents act at the policy
rate; the low-level controller and the physics run underneath.  All agents of
an environment receive the same scalar reward.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import geom, physics
from .config import Config
from .lowlevel import ACTION_DIMS, LowLevelController, desired_rotation

TERMINATION_REASONS = (
    "none",
    "ground",
    "load_cable_angle",
    "cable_mav_angle",
    "cable_collision",
    "mav_collision",
    "out_of_bounds",
    "slack_cable",
    "diverged",
)
REWARD_COMPONENTS = ("pos", "ori", "down", "act", "br", "thrust")


# ------------------------------------------------------------------ reward
def downwash_distance(p_mav, z_body, p_load, n_load, parallel_distance=10.0):
    """Distance from the load position to the nearest point where a MAV's
    downwash line (along ``-z_body``) crosses the load plane.

    ``p_mav`` and ``z_body`` are ``(..., N, 3)``; the minimum is taken over the
    MAV axis.  Lines parallel to the plane count as ``parallel_distance``.
    """
    t = -np.asarray(z_body, dtype=float)
    p_load = np.asarray(p_load, dtype=float)[..., None, :]
    n = np.asarray(n_load, dtype=float)[..., None, :]
    point, ok = geom.line_plane_intersection(p_mav, t, p_load, n)
    dist = np.where(ok, np.linalg.norm(np.where(ok[..., None], point, 0.0) - p_load, axis=-1), parallel_distance)
    return dist.min(axis=-1)


def reward_components(weights, pos_err, ori_err, down_dist, action, last_action, rates, thrusts, thrust_max, n_agents):
    """Per-step reward terms before time normalisation, each ``(E,)``.

    ``action``/``last_action`` are the joint policy outputs ``(E, K)``, ``rates``
    the joint body-rate part ``(E, R)``, ``thrusts`` the rotor thrusts ``(E, 4N)``.
    """
    l1, l2, l3, l4, l5, l6, l7, l8, l9 = weights
    d_act = (action - last_action) / n_agents
    return {
        "pos": l1 * np.exp(-l2 * pos_err),
        "ori": l3 * np.exp(-l4 * ori_err),
        "down": l5 * (1.0 - np.exp(-l6 * down_dist)),
        "act": l7 * np.exp(-np.sum(d_act * d_act, axis=-1)),
        "br": l8 * np.exp(-np.linalg.norm(rates / n_agents, axis=-1)),
        "thrust": l9 * np.exp(-np.max(thrusts / thrust_max, axis=-1)),
    }


# --------------------------------------------------------------- geometry
def segment_distance(p1, q1, p2, q2):
    """Closest distance between segments ``p1-q1`` and ``p2-q2`` (batched)."""
    d1 = q1 - p1
    d2 = q2 - p2
    r = p1 - p2
    a = np.sum(d1 * d1, axis=-1)
    e = np.sum(d2 * d2, axis=-1)
    f = np.sum(d2 * r, axis=-1)
    c = np.sum(d1 * r, axis=-1)
    b = np.sum(d1 * d2, axis=-1)
    denom = a * e - b * b
    eps = 1e-12
    s = np.where(denom > eps, np.clip((b * f - c * e) / np.where(denom > eps, denom, 1.0), 0.0, 1.0), 0.0)
    t = (b * s + f) / np.maximum(e, eps)
    s = np.where(t < 0.0, np.clip(-c / np.maximum(a, eps), 0.0, 1.0), np.where(t > 1.0, np.clip((b - c) / np.maximum(a, eps), 0.0, 1.0), s))
    t = np.clip(t, 0.0, 1.0)
    c1 = p1 + s[..., None] * d1
    c2 = p2 + t[..., None] * d2
    return np.linalg.norm(c1 - c2, axis=-1)


def _angle_between(u, v):
    nu = np.linalg.norm(u, axis=-1)
    nv = np.linalg.norm(v, axis=-1)
    c = np.sum(u * v, axis=-1) / np.maximum(nu * nv, 1e-12)
    return np.arccos(np.clip(c, -1.0, 1.0))


# ------------------------------------------------------------ episode log
@dataclass
class EpisodeRecorder:
    """Collects one environment's trajectory for CSV export."""

    env_index: int = 0
    rows: list = field(default_factory=list)

    def record(self, env: "CableLiftEnv", actions, components, reason: int):
        e = self.env_index
        p_L, q_L = env.load_pose()
        row = {"time": float(env.steps[e] * env.control_dt)}
        for k, v in zip("xyz", p_L[e]):
            row[f"load_{k}"] = float(v)
        for k, v in zip("wxyz", q_L[e]):
            row[f"load_q{k}"] = float(v)
        for k, v in zip("xyz", env.goal_pos[e]):
            row[f"goal_{k}"] = float(v)
        for k, v in zip("wxyz", env.goal_quat[e]):
            row[f"goal_q{k}"] = float(v)
        for i in range(env.n_agents):
            for j, v in enumerate(actions[e, i]):
                row[f"a{i}_{j}"] = float(v)
        for name in REWARD_COMPONENTS:
            row[f"r_{name}"] = float(components[name][e])
        row["termination"] = TERMINATION_REASONS[reason]
        self.rows.append(row)

    def to_csv(self, path) -> None:
        if not self.rows:
            raise ValueError("no rows recorded")
        with open(Path(path), "w", newline="") as fh:
            w = csv.DictWriter(fh, fieldnames=list(self.rows[0]))
            w.writeheader()
            w.writerows(self.rows)


# ------------------------------------------------------------ environment
class CableLiftEnv:
    def __init__(self, cfg: Config, n_envs: int, seed: int | np.random.SeedSequence = 0):
        self.cfg = cfg
        self.n_envs = n_envs
        ss = seed if isinstance(seed, np.random.SeedSequence) else np.random.SeedSequence(seed)
        world_ss, env_ss = ss.spawn(2)
        self.rng = np.random.default_rng(env_ss)
        pc, ec = cfg.physics, cfg.env
        self.n_agents = pc.n_mavs
        self.world = physics.make_lift_world(pc, n_envs, seed=world_ss)
        self.control_dt = ec.control_dt
        self.max_steps = int(round(ec.duration / ec.control_dt))
        self.controller = LowLevelController(cfg.lowlevel, pc, ec.control_dt)
        self.action_space = ec.action_space
        self.action_dim = ACTION_DIMS[ec.action_space]
        self.history = ec.history
        self.weights = np.array(cfg.reward.as_array())
        self.thrust_max = self.controller.rotors.thrust_max
        self.frame_dim = self._frame_dim(ec.observation)
        self.obs_dim = self.history * self.frame_dim
        self.state_dim = 30 + 18 * self.n_agents

        E, N = n_envs, self.n_agents
        self.goal_pos = np.zeros((E, 3))
        self.goal_quat = np.tile(geom.IDENTITY_QUAT, (E, 1))
        self.load_ref_offset = np.zeros((E, 3))
        self.steps = np.zeros(E, dtype=int)
        self.last_action = np.zeros((E, N, self.action_dim))
        self.obs_hist = np.zeros((E, N, self.history, self.frame_dim))
        self.ll_state = self.controller.initial_state(self.world)
        self.auto_reset = True  # evaluation turns this off and watches ``terminated``
        self.override = None  # (mask (N,), a_ref (E, N, 3)) for scripted teammates
        self.nominal_load_mass = pc.load_mass
        self.nominal_load_inertia = np.array(pc.load_inertia)

    def _frame_dim(self, variant: str) -> int:
        N = self.n_agents
        if variant == "partial":
            return 3 + 9 + 12 + 18 + N
        if variant == "partial_augmented":
            return 18 + 12 + 3 * (N - 1) + 18 + N
        return 30 + 18 * N + N

    # ---------------------------------------------------------------- state
    def load_pose(self):
        q = self.world.quat[:, 0]
        p = self.world.pos[:, 0] + geom.rotate_vec(q, self.load_ref_offset)
        return p, q

    def relative_goal(self):
        """``(d_G, R_G)``: goal position minus load position, and ``R_L^T R_goal``."""
        p_L, q_L = self.load_pose()
        d = self.goal_pos - p_L
        R_rel = geom.quat_to_rotmat(geom.quat_mul(geom.quat_conj(q_L), self.goal_quat))
        return d, R_rel

    def _body_blocks(self):
        w = self.world
        R = geom.quat_to_rotmat(w.quat).reshape(w.n_envs, w.n_bodies, 9)
        return w.pos, R, w.vel, w.omega

    def make_global_state(self) -> np.ndarray:
        """``[x_L, x_G, x_M1 .. x_MN]`` with ``x = [p, R (row-major), v, omega]``."""
        p, R, v, w = self._body_blocks()
        p_L, _ = self.load_pose()
        d, R_G = self.relative_goal()
        E = self.n_envs
        mavs = self.world.mav_bodies
        x_L = np.concatenate([p_L, R[:, 0], v[:, 0], w[:, 0]], axis=-1)
        x_G = np.concatenate([d, R_G.reshape(E, 9)], axis=-1)
        x_M = np.concatenate([p[:, mavs], R[:, mavs], v[:, mavs], w[:, mavs]], axis=-1).reshape(E, -1)
        return np.concatenate([x_L, x_G, x_M], axis=-1)

    def make_frame(self) -> np.ndarray:
        """Current single-step observation of every agent, ``(E, N, frame_dim)``."""
        p, R, v, w = self._body_blocks()
        p_L, _ = self.load_pose()
        d, R_G = self.relative_goal()
        E, N = self.n_envs, self.n_agents
        mavs = self.world.mav_bodies
        x_G = np.concatenate([d, R_G.reshape(E, 9)], axis=-1)
        x_M = np.concatenate([p[:, mavs], R[:, mavs], v[:, mavs], w[:, mavs]], axis=-1)
        eye = np.broadcast_to(np.eye(N), (E, N, N))
        variant = self.cfg.env.observation
        if variant == "partial":
            shared = np.concatenate([p_L, R[:, 0], x_G], axis=-1)
            return np.concatenate([np.broadcast_to(shared[:, None], (E, N, shared.shape[-1])), x_M, eye], axis=-1)
        if variant == "partial_augmented":
            shared = np.concatenate([p_L, R[:, 0], v[:, 0], w[:, 0], x_G], axis=-1)
            pm = p[:, mavs]
            neigh = np.stack(
                [np.concatenate([pm[:, (i + k) % N] for k in range(1, N)], axis=-1) for i in range(N)], axis=1
            )
            return np.concatenate(
                [np.broadcast_to(shared[:, None], (E, N, shared.shape[-1])), neigh, x_M, eye], axis=-1
            )
        s = self.make_global_state()
        return np.concatenate([np.broadcast_to(s[:, None], (E, N, s.shape[-1])), eye], axis=-1)

    def observations(self) -> np.ndarray:
        E, N = self.n_envs, self.n_agents
        return self.obs_hist.reshape(E, N, self.obs_dim).copy()

    def _push_frame(self, envs=None) -> None:
        frame = self.make_frame()
        if envs is None:
            self.obs_hist[:, :, 1:] = self.obs_hist[:, :, :-1].copy()
            self.obs_hist[:, :, 0] = frame
        else:
            self.obs_hist[envs] = frame[envs][:, :, None, :]

    # ---------------------------------------------------------------- reset
    def _sample_goal(self, n):
        ec = self.cfg.env
        pos = np.stack(
            [
                self.rng.uniform(-ec.spawn_xy, ec.spawn_xy, n),
                self.rng.uniform(-ec.spawn_xy, ec.spawn_xy, n),
                self.rng.uniform(ec.spawn_z[0], ec.spawn_z[1], n),
            ],
            axis=-1,
        )
        tilt = np.deg2rad(ec.goal_tilt_deg)
        quat = geom.from_euler(
            self.rng.uniform(-tilt, tilt, n), self.rng.uniform(-tilt, tilt, n), self.rng.uniform(-np.pi, np.pi, n)
        )
        return pos, quat

    def reset(self, seed=None):
        if seed is not None:
            ss = np.random.SeedSequence(seed)
            world_ss, env_ss = ss.spawn(2)
            self.rng = np.random.default_rng(env_ss)
            self.world.rng = np.random.default_rng(world_ss)
        self.reset_envs(np.arange(self.n_envs))
        return self.observations(), self.make_global_state()

    def reset_envs(self, envs: np.ndarray) -> None:
        envs = np.asarray(envs)
        if envs.size == 0:
            return
        ec = self.cfg.env
        n = envs.size
        load_pos = np.stack(
            [
                self.rng.uniform(-ec.spawn_xy, ec.spawn_xy, n),
                self.rng.uniform(-ec.spawn_xy, ec.spawn_xy, n),
                self.rng.uniform(ec.spawn_z[0], ec.spawn_z[1], n),
            ],
            axis=-1,
        )
        yaw = self.rng.uniform(-np.pi, np.pi, n)
        goal_pos, goal_quat = self._sample_goal(n)
        if self.n_agents > 3:
            lo, hi = ec.load_mass_range
            self.set_load_mass(envs, self.rng.uniform(lo, hi, n))
        self.place(envs, load_pos, geom.from_euler(0 * yaw, 0 * yaw, yaw), goal_pos, goal_quat)
        for _ in range(ec.reset_retries):
            bad = envs[self.check_termination()[envs] != 0]
            if bad.size == 0:
                break
            m = bad.size
            load_pos = np.stack(
                [
                    self.rng.uniform(-ec.spawn_xy, ec.spawn_xy, m),
                    self.rng.uniform(-ec.spawn_xy, ec.spawn_xy, m),
                    self.rng.uniform(ec.spawn_z[0], ec.spawn_z[1], m),
                ],
                axis=-1,
            )
            yaw = self.rng.uniform(-np.pi, np.pi, m)
            self.place(bad, load_pos, geom.from_euler(0 * yaw, 0 * yaw, yaw), self.goal_pos[bad], self.goal_quat[bad])

    def set_load_mass(self, envs, mass, com_offset=None) -> None:
        """Change the load's mass (inertia scales with it) and optionally its
        centre of mass, given in the load frame relative to the nominal one."""
        mass = np.broadcast_to(np.asarray(mass, dtype=float), np.shape(envs))
        w = self.world
        w.inv_mass[envs, 0] = 1.0 / mass
        scale = (mass / self.nominal_load_mass)[..., None]
        w.inv_inertia[envs, 0] = 1.0 / (self.nominal_load_inertia * scale)
        if com_offset is not None:
            # the body origin is the centre of mass; attachment points and the
            # reported load position move by -offset in the body frame.  The
            # constraint geometry is shared, so the offset applies to every env.
            com_offset = np.asarray(com_offset, dtype=float)
            self.load_ref_offset[:] = -com_offset
            c = w.constraints
            c.local_a[c.body_a == 0] = physics.load_attachment_points(self.cfg.physics) - com_offset

    def place(self, envs, load_pos, load_quat, goal_pos, goal_quat, load_vel=None) -> None:
        """Put ``envs`` into static equilibrium at the given load pose."""
        w = self.world
        ec = self.cfg.env
        yaw = geom.yaw_of(load_quat)
        com_pos = load_pos - geom.rotate_vec(load_quat, self.load_ref_offset[envs])
        physics.place_lift(w, envs, com_pos, load_quat, np.repeat(yaw[:, None], self.n_agents, 1), np.deg2rad(ec.cone_angle_deg))
        self.goal_pos[envs] = goal_pos
        self.goal_quat[envs] = goal_quat
        self._settle_equilibrium(envs, yaw)
        self.steps[envs] = 0
        self.last_action[envs] = 0.0
        self.controller.reset(self.ll_state, w, envs)
        self._push_frame(envs)

    def _settle_equilibrium(self, envs, yaw) -> None:
        """Cable tensions, MAV tilts and rotor speeds that hold the load still."""
        w = self.world
        c = w.constraints
        pc = self.cfg.physics
        g = pc.gravity
        N = self.n_agents
        q_L = w.quat[envs, 0]
        tops = []
        for i in range(N):
            # cable direction at the load: from the load attachment to the first node
            k0 = np.flatnonzero(c.body_a == 0)[i]
            pa = w.pos[envs, 0] + geom.rotate_vec(q_L, c.local_a[k0])
            pb = w.attachment_world(c.body_b[k0], c.local_b[k0])[envs]
            u = (pb - pa) / np.linalg.norm(pb - pa, axis=-1, keepdims=True)
            r = pa - w.pos[envs, 0]
            tops.append((u, r))
        # force and moment balance on the load, minimum-norm tensions
        A = np.zeros((envs.size, 6, N))
        for i, (u, r) in enumerate(tops):
            A[:, :3, i] = u
            A[:, 3:, i] = geom.cross(r, u)
        m_L = 1.0 / w.inv_mass[envs, 0]
        rhs = np.zeros((envs.size, 6))
        rhs[:, 2] = m_L * g
        T = np.linalg.lstsq(A[0], rhs[0], rcond=None)[0] if envs.size == 1 else np.stack(
            [np.linalg.lstsq(A[k], rhs[k], rcond=None)[0] for k in range(envs.size)]
        )
        T = np.atleast_2d(T)
        for i in range(N):
            u, _ = tops[i]
            m_chain = 2 * pc.chain_particle_mass if c.n_particles else 0.0
            thrust = (pc.mav_mass + m_chain) * g * np.array([0.0, 0.0, 1.0]) + T[:, i, None] * u
            z = thrust / np.linalg.norm(thrust, axis=-1, keepdims=True)
            Rm = desired_rotation(z, yaw)
            mav = w.mav_bodies[i]
            w.quat[envs, mav] = geom.rotmat_to_quat(Rm)
            w.rotor_speeds[envs, i] = np.sqrt(np.linalg.norm(thrust, axis=-1) / (4 * pc.k_f))[:, None]
        w.specific_force[envs] = np.array([0.0, 0.0, g])

    # ----------------------------------------------------------------- step
    def check_termination(self) -> np.ndarray:
        """First satisfied termination reason per env (0 = none)."""
        w = self.world
        ec = self.cfg.env
        E, N = self.n_envs, self.n_agents
        c = w.constraints
        reason = np.zeros(E, dtype=int)

        def mark(mask, code):
            reason[(reason == 0) & mask] = code

        mavs = w.mav_bodies
        # a switched-off MAV is passive payload: only the load and the flying
        # MAVs are held to the clearance, angle and spacing rules
        alive = ~w.failed
        z_mav = np.where(alive, w.pos[:, mavs, 2], np.inf)
        z_ground = np.minimum(w.pos[:, 0, 2], z_mav.min(axis=1))
        mark(z_ground < ec.ground_clearance, 1)

        load_idx = np.flatnonzero(c.body_a == 0)
        n_L = geom.rotate_vec(w.quat[:, 0], np.array([0.0, 0.0, 1.0]))
        z_M = geom.rotate_vec(w.quat[:, mavs], np.array([0.0, 0.0, 1.0]))
        load_ang = np.zeros((E, N))
        mav_ang = np.zeros((E, N))
        for i in range(N):
            anchor = w.attachment_world(0, c.local_a[load_idx[i]])
            first = w.attachment_world(c.body_b[load_idx[i]], c.local_b[load_idx[i]])
            top = c.cable_top[i]
            upper_a = w.attachment_world(c.body_a[top], c.local_a[top])
            load_ang[:, i] = _angle_between(first - anchor, n_L)
            mav_ang[:, i] = _angle_between(w.pos[:, mavs[i]] - upper_a, z_M[:, i])
        # after a failure the load roll about the remaining attachments is
        # unactuated, so the angle envelope no longer applies to that env
        intact = ~w.failed.any(axis=1)
        mark(intact & np.any(alive & (load_ang > np.deg2rad(ec.load_cable_angle_deg)), axis=1), 2)
        mark(intact & np.any(alive & (mav_ang > np.deg2rad(ec.cable_mav_angle_deg)), axis=1), 3)

        if N > 1:
            seg_a = np.stack([w.attachment_world(c.body_a[k], c.local_a[k]) for k in range(len(c))], axis=1)
            seg_b = np.stack([w.attachment_world(c.body_b[k], c.local_b[k]) for k in range(len(c))], axis=1)
            i, j = self._cable_pairs()
            dist = segment_distance(seg_a[:, i], seg_b[:, i], seg_a[:, j], seg_b[:, j])
            mark(np.any(dist < ec.cable_clearance, axis=1), 4)

            pm = w.pos[:, mavs]
            iu, ju = np.triu_indices(N, 1)
            dm = np.linalg.norm(pm[:, iu] - pm[:, ju], axis=-1)
            dm = np.where(alive[:, iu] & alive[:, ju], dm, np.inf)
            mark(np.any(dm < ec.mav_clearance, axis=1), 5)

        b = ec.bounds_xy
        outside = (
            (np.abs(w.pos[..., 0]) > b)
            | (np.abs(w.pos[..., 1]) > b)
            | (w.pos[..., 2] < ec.bounds_z[0])
            | (w.pos[..., 2] > ec.bounds_z[1])
        )
        mark(outside.any(axis=1), 6)
        if N > 3:
            mark(np.any(alive & (w.tension[:, c.cable_top] < ec.min_tension), axis=1), 7)
        mark(w.diverged, 8)
        return reason

    def _cable_pairs(self):
        if not hasattr(self, "_pairs"):
            c = self.world.constraints
            cable_of = np.zeros(len(c), dtype=int)
            # constraints are emitted cable by cable
            per = len(c) // self.n_agents
            cable_of[:] = np.arange(len(c)) // per
            i, j = np.triu_indices(len(c), 1)
            keep = cable_of[i] != cable_of[j]
            self._pairs = (i[keep], j[keep])
        return self._pairs

    def downwash(self) -> np.ndarray:
        w = self.world
        p_L, q_L = self.load_pose()
        n = geom.rotate_vec(q_L, np.array([0.0, 0.0, 1.0]))
        z = geom.rotate_vec(w.quat[:, w.mav_bodies], np.array([0.0, 0.0, 1.0]))
        return downwash_distance(w.pos[:, w.mav_bodies], z, p_L, n, self.cfg.env.downwash_parallel_distance)

    def rate_part(self, actions: np.ndarray) -> np.ndarray:
        if self.action_space == "ACCBR":
            return actions[..., 3:6]
        if self.action_space == "CTBR":
            return actions[..., 1:4]
        return np.zeros(actions.shape[:-1] + (0,))

    def compute_reward(self, actions: np.ndarray):
        E, N = self.n_envs, self.n_agents
        p_L, q_L = self.load_pose()
        pos_err = np.linalg.norm(self.goal_pos - p_L, axis=-1)
        ori_err = geom.quat_error_angle(geom.normalize(self.goal_quat), geom.normalize(q_L))
        thrusts = self.controller.rotors.rotor_thrusts(self.world.rotor_speeds).reshape(E, -1)
        comps = reward_components(
            self.weights,
            pos_err,
            ori_err,
            self.downwash(),
            actions.reshape(E, -1),
            self.last_action.reshape(E, -1),
            self.rate_part(actions).reshape(E, -1),
            thrusts,
            self.thrust_max,
            N,
        )
        comps = {k: v * self.control_dt for k, v in comps.items()}
        return sum(comps.values()), comps

    def step(self, actions: np.ndarray):
        """Advance every env one policy period.

        ``actions`` are raw (unclamped) normalised policy outputs ``(E, N, A)``.
        Finished environments are reset in place; their terminal observation
        and global state are returned in ``info``.
        """
        actions = np.asarray(actions, dtype=float)
        E, N = self.n_envs, self.n_agents
        self.controller.run_period(
            self.action_space, actions, self.world, self.ll_state, on_nan="flag", override=self.override
        )
        self.steps += 1
        reward, comps = self.compute_reward(actions)
        self.last_action = actions.copy()
        reason = self.check_termination()
        terminated = reason != 0
        timeout = (~terminated) & (self.steps >= self.max_steps)
        self._push_frame()
        info = {"components": comps, "reason": reason, "episode_steps": self.steps.copy()}
        done = terminated | timeout
        if done.any() and self.auto_reset:
            info["final_state"] = self.make_global_state()[done]
            info["final_obs"] = self.observations()[done]
            self.reset_envs(np.flatnonzero(done))
        return self.observations(), self.make_global_state(), reward, terminated, timeout, info

    def set_goal(self, envs, pos, quat) -> None:
        self.goal_pos[envs] = pos
        self.goal_quat[envs] = quat
