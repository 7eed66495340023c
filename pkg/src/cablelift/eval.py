"""Closed-loop evaluation of trained policies and the ablation runner."""

from __future__ import annotations

import copy
import csv
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
from scipy import optimize

from . import geom
from .config import Config
from .env import CableLiftEnv
from .marl import MappoAgent, Trainer

# Published NMPC baseline figures, kept for context in reports only.
NMPC_REFERENCE = {"pos_rmse_m": 0.45, "att_rmse_deg": 16.24, "time_to_target_s": 6.84, "solve_time_ms": 78.0}

SCENARIO_KINDS = ("setpoint_step", "figure_eight", "mav_failure", "heterogeneous", "load_mismatch")


class ConfigMismatch(ValueError):
    """A checkpoint cannot be run in the requested scenario."""


@dataclass
class Scenario:
    kind: str = "setpoint_step"
    n_mavs: int | None = None  # None: whatever the checkpoint was trained with
    duration: float = 10.0
    start_pos: list[float] = field(default_factory=lambda: [-1.0, 0.0, 1.5])
    start_yaw_deg: float = 0.0
    displacement: list[float] = field(default_factory=lambda: [2.0, 0.0, 0.0])
    attitude_deg: list[float] = field(default_factory=lambda: [30.0, -20.0, -90.0])
    random_goal: bool = False  # level goal drawn from the spawn box, spawn pose random
    failure_mav: int = 0
    failure_time: float = 2.0
    override_mav: int = 0
    # (time s, outward offset m) breakpoints of the scripted teammate
    override_script: list[list[float]] = field(default_factory=lambda: [[0.0, 0.0], [3.0, 0.7], [8.0, -0.3]])
    override_gains: list[float] = field(default_factory=lambda: [4.0, 3.0])
    delta_mass: float = 0.0
    com_offset: list[float] = field(default_factory=lambda: [0.0, 0.0, 0.0])
    v_max: float = 1.0
    a_max: float = 0.5
    repeats: int = 1
    seed: int = 0

    def validate(self) -> "Scenario":
        if self.kind not in SCENARIO_KINDS:
            raise ValueError(f"unknown scenario kind {self.kind!r}")
        if self.duration <= 0 or self.repeats < 1:
            raise ValueError("duration and repeats must be positive")
        if self.delta_mass < -1.0 or np.linalg.norm(self.com_offset) > 0.25:
            raise ValueError("load modification outside physical bounds")
        if self.v_max <= 0 or self.a_max <= 0:
            raise ValueError("figure-eight bounds must be positive")
        return self

    @classmethod
    def from_dict(cls, d: dict) -> "Scenario":
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise ValueError(f"unknown scenario keys: {sorted(unknown)}")
        return cls(**d).validate()


@dataclass
class TrackingMetrics:
    pos_rmse: float
    att_rmse: float  # deg
    time_to_target: float
    reached: bool
    final_pos_error: float
    final_att_error: float  # deg
    max_pos_error_after: float  # max position error after the event time (failure scenario) or overall
    terminated: bool
    termination_time: float


# ------------------------------------------------------------------ metrics
def rmse(series, reference=None) -> float:
    e = np.asarray(series, dtype=float)
    if reference is not None:
        e = e - np.asarray(reference, dtype=float)
    return float(np.sqrt(np.mean(e * e)))


def time_to_target(t, pos_err, att_err, tol_pos=0.10, tol_att=10.0, duration=None):
    """First time after which both errors stay inside tolerance.

    Returns ``(time, reached)``; when the errors never settle the time is the
    series duration and ``reached`` is False.
    """
    t = np.asarray(t, dtype=float)
    ok = (np.asarray(pos_err) < tol_pos) & (np.asarray(att_err) < tol_att)
    end = float(duration if duration is not None else (t[-1] if t.size else 0.0))
    if not ok.size or not ok[-1]:
        return end, False
    bad = np.flatnonzero(~ok)
    i = 0 if bad.size == 0 else bad[-1] + 1
    return float(t[i]), True


# ---------------------------------------------------------------- figure 8
def _figure_eight_shape():
    """Peak speed and acceleration factors of ``(sin u, sin 2u / 2)``."""
    u = np.linspace(0.0, 2.0 * np.pi, 20001)
    speed = np.hypot(np.cos(u), np.cos(2 * u))
    acc = np.hypot(np.sin(u), 2.0 * np.sin(2 * u))
    # refine the acceleration peak, it is not at a grid-friendly angle
    k = int(np.argmax(acc))
    res = optimize.minimize_scalar(
        lambda x: -np.hypot(np.sin(x), 2.0 * np.sin(2 * x)), bounds=(u[max(k - 1, 0)], u[min(k + 1, u.size - 1)]), method="bounded"
    )
    return float(speed.max()), float(max(acc.max(), -res.fun))


def figure_eight_params(v_max=1.0, a_max=0.5):
    """Amplitude ``A`` and angular rate ``w`` of ``p = (A sin wt, A/2 sin 2wt)``
    whose peak speed and acceleration equal the bounds."""
    c_v, c_a = _figure_eight_shape()
    w = (a_max / c_a) / (v_max / c_v)
    A = v_max / (c_v * w)
    return A, w


def figure_eight_reference(t, center=(0.0, 0.0, 1.5), v_max=1.0, a_max=0.5, yaw=0.0):
    """Goal positions ``(T, 3)`` and level goal quaternions ``(T, 4)`` at times ``t``."""
    A, w = figure_eight_params(v_max, a_max)
    t = np.asarray(t, dtype=float)
    pos = np.stack([A * np.sin(w * t), 0.5 * A * np.sin(2 * w * t), np.zeros_like(t)], axis=-1) + np.asarray(center)
    quat = np.broadcast_to(geom.from_euler(0.0, 0.0, yaw), t.shape + (4,)).copy()
    return pos, quat


# ---------------------------------------------------------- interventions
def inject_failure(world, mav_index: int, envs=None) -> None:
    """Switch a MAV's rotors off for good; it stays on its cable."""
    envs = slice(None) if envs is None else envs
    world.failed[envs, mav_index] = True
    world.rotor_speeds[envs, mav_index] = 0.0


def scripted_offset(script, t: float) -> float:
    """Piecewise-constant offset of a breakpoint script at time ``t``."""
    value = 0.0
    for t0, off in script:
        if t >= t0:
            value = off
    return value


def heterogeneous_override(env: CableLiftEnv, mav_index: int, setpoint, gains=(4.0, 3.0)):
    """Acceleration references for a PD position-setpoint teammate; returns
    the ``(mask, a_ref)`` pair consumed by the environment."""
    w = env.world
    body = w.mav_bodies[mav_index]
    kp, kd = gains
    a = kp * (np.asarray(setpoint) - w.pos[:, body]) - kd * w.vel[:, body]
    a = np.clip(a, -env.cfg.lowlevel.acc_bound, env.cfg.lowlevel.acc_bound)
    mask = np.zeros(env.n_agents, dtype=bool)
    mask[mav_index] = True
    a_ref = np.zeros((env.n_envs, env.n_agents, 3))
    a_ref[:, mav_index] = a
    return mask, a_ref


def load_mismatch(env: CableLiftEnv, delta_mass: float, offset) -> None:
    """Heavier load with a shifted centre of mass, applied to every env."""
    mass = env.nominal_load_mass + delta_mass
    env.set_load_mass(np.arange(env.n_envs), mass, com_offset=np.asarray(offset, dtype=float))


# ------------------------------------------------------------------ runner
def check_compatible(agent: MappoAgent, scenario: Scenario) -> None:
    if scenario.n_mavs is not None and scenario.n_mavs != agent.n_agents:
        raise ConfigMismatch(f"checkpoint trained for N={agent.n_agents}, scenario asks for N={scenario.n_mavs}")
    cfg = agent.cfg
    probe = CableLiftEnv(cfg, 1, 0)
    if probe.obs_dim != agent.obs_dim or probe.action_dim != agent.act_dim:
        raise ConfigMismatch(
            f"checkpoint observation/action widths {agent.obs_dim}/{agent.act_dim} do not match "
            f"its config ({probe.obs_dim}/{probe.action_dim})"
        )
    if scenario.kind in ("mav_failure", "heterogeneous") and not 0 <= max(scenario.failure_mav, scenario.override_mav) < agent.n_agents:
        raise ConfigMismatch("MAV index outside the team")


def _setup(env: CableLiftEnv, sc: Scenario, rng):
    """Initial placement and goals; returns a per-step goal callback or None."""
    E = env.n_envs
    envs = np.arange(E)
    if sc.random_goal:
        env.reset(seed=int(rng.integers(2**31)))
        p_L, q_L = env.load_pose()
        ec = env.cfg.env
        goal = np.stack(
            [rng.uniform(-ec.spawn_xy, ec.spawn_xy, E), rng.uniform(-ec.spawn_xy, ec.spawn_xy, E), rng.uniform(*ec.spawn_z, E)],
            axis=-1,
        )
        yaw = geom.yaw_of(q_L)
        env.set_goal(envs, goal, geom.from_euler(0 * yaw, 0 * yaw, yaw))
        return None
    yaw = np.full(E, np.deg2rad(sc.start_yaw_deg))
    start = np.tile(np.asarray(sc.start_pos, dtype=float), (E, 1))
    q0 = geom.from_euler(0 * yaw, 0 * yaw, yaw)
    if sc.kind in ("setpoint_step", "load_mismatch"):
        goal = start + np.asarray(sc.displacement, dtype=float)
        r, p, y = np.deg2rad(sc.attitude_deg)
        gq = np.tile(geom.from_euler(r, p, y), (E, 1))
        env.place(envs, start, q0, goal, gq)
        return None
    if sc.kind == "figure_eight":
        center = start
        pos0, quat0 = figure_eight_reference(np.zeros(E), center[0], sc.v_max, sc.a_max, yaw[0])
        env.place(envs, pos0, q0, pos0, quat0)

        def goal_at(t):
            return figure_eight_reference(np.full(E, t), center[0], sc.v_max, sc.a_max, yaw[0])

        return goal_at
    # hover scenarios: the goal is the start pose
    env.place(envs, start, q0, start.copy(), q0.copy())
    return None


def run_scenario(agent: MappoAgent, scenario: Scenario, record=True):
    """Deterministic closed-loop rollout of ``scenario.repeats`` copies.

    Returns ``(metrics per repeat, time-series rows)``.
    """
    sc = scenario.validate()
    check_compatible(agent, sc)
    agent.freeze()
    cfg = copy.deepcopy(agent.cfg)
    cfg.env.duration = max(cfg.env.duration, sc.duration + 1.0)
    rng = np.random.default_rng(sc.seed)
    env = CableLiftEnv(cfg, sc.repeats, np.random.SeedSequence(sc.seed))
    env.auto_reset = False
    if sc.kind == "load_mismatch":
        load_mismatch(env, sc.delta_mass, sc.com_offset)
    goal_at = _setup(env, sc, rng)
    E, N = env.n_envs, env.n_agents
    dt = env.control_dt
    n_steps = int(round(sc.duration / dt))
    alive = np.ones(E, dtype=bool)
    term_time = np.full(E, np.nan)
    t_hist, pos_err, att_err = [], [], []
    rows = []
    hover_sp = None
    if sc.kind == "heterogeneous":
        hover_sp = env.world.pos[:, env.world.mav_bodies[sc.override_mav]].copy()
        # outward: horizontal direction from the load centre to that MAV
        out = hover_sp - env.world.pos[:, 0]
        out[:, 2] = 0.0
        out /= np.maximum(np.linalg.norm(out, axis=-1, keepdims=True), 1e-9)
    for k in range(n_steps):
        t = k * dt
        if goal_at is not None:
            gp, gq = goal_at(t)
            env.set_goal(np.arange(E), gp, gq)
        if sc.kind == "mav_failure" and abs(t - sc.failure_time) < 0.5 * dt:
            inject_failure(env.world, sc.failure_mav)
        if sc.kind == "heterogeneous":
            sp = hover_sp + scripted_offset(sc.override_script, t) * out
            env.override = heterogeneous_override(env, sc.override_mav, sp, sc.override_gains)
        actions, _ = agent.act(env.observations(), deterministic=True)
        actions = np.asarray(actions, dtype=float)
        _, _, reward, term, _, info = env.step(actions)
        p_L, q_L = env.load_pose()
        e_pos = np.linalg.norm(env.goal_pos - p_L, axis=-1)
        e_att = np.rad2deg(geom.quat_error_angle(geom.normalize(env.goal_quat), geom.normalize(q_L)))
        newly = alive & term
        term_time[newly] = t + dt
        t_hist.append(t + dt)
        pos_err.append(np.where(alive, e_pos, np.nan))
        att_err.append(np.where(alive, e_att, np.nan))
        if record:
            for e in range(E):
                if not alive[e]:
                    continue
                row = {"repeat": e, "time": round(t + dt, 10)}
                row.update({f"load_{a}": float(v) for a, v in zip("xyz", p_L[e])})
                row.update({f"load_q{a}": float(v) for a, v in zip("wxyz", q_L[e])})
                row.update({f"goal_{a}": float(v) for a, v in zip("xyz", env.goal_pos[e])})
                row.update({f"goal_q{a}": float(v) for a, v in zip("wxyz", env.goal_quat[e])})
                row["pos_error"] = float(e_pos[e])
                row["att_error_deg"] = float(e_att[e])
                for i in range(N):
                    for j, v in enumerate(actions[e, i]):
                        row[f"a{i}_{j}"] = float(v)
                row["reward"] = float(reward[e])
                row["termination"] = int(info["reason"][e])
                rows.append(row)
        alive &= ~term
    t_hist = np.array(t_hist)
    pos_err = np.array(pos_err)
    att_err = np.array(att_err)
    metrics = []
    tail = max(1, int(round(1.0 / dt)))
    event = sc.failure_time if sc.kind == "mav_failure" else 0.0
    for e in range(E):
        valid = ~np.isnan(pos_err[:, e])
        pe, ae, te = pos_err[valid, e], att_err[valid, e], t_hist[valid]
        terminated = not np.isnan(term_time[e])
        if terminated:
            ttt, reached = sc.duration, False
        else:
            ttt, reached = time_to_target(te, pe, ae, duration=sc.duration)
        after = pe[te >= event] if np.any(te >= event) else pe
        metrics.append(
            TrackingMetrics(
                pos_rmse=rmse(pe),
                att_rmse=rmse(ae),
                time_to_target=ttt,
                reached=reached,
                final_pos_error=float(np.mean(pe[-tail:])),
                final_att_error=float(np.mean(ae[-tail:])),
                max_pos_error_after=float(np.max(after)) if after.size else float("nan"),
                terminated=terminated,
                termination_time=float(term_time[e]) if terminated else float("nan"),
            )
        )
    return metrics, rows


def hover_success(m: TrackingMetrics, tol_pos=0.25, tol_att=15.0) -> bool:
    return (not m.terminated) and m.final_pos_error < tol_pos and m.final_att_error < tol_att


def hover_scenario(seed=0, repeats=10, duration=10.0) -> Scenario:
    """Random spawn, level goal at the spawn heading somewhere in the spawn box."""
    return Scenario(kind="setpoint_step", random_goal=True, repeats=repeats, seed=seed, duration=duration)


# ------------------------------------------------------------------ output
def write_rows(path, rows) -> None:
    if not rows:
        raise ValueError("nothing to write")
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=list(rows[0]))
        w.writeheader()
        w.writerows(rows)


def metrics_rows(metrics, label="") -> list[dict]:
    out = []
    for i, m in enumerate(metrics):
        d = {"label": label, "repeat": i}
        d.update(asdict(m))
        out.append(d)
    return out


# ---------------------------------------------------------------- ablations
ABLATIONS = {
    "action_space": ("env.action_space", ["ACCBR", "ACC", "VEL", "CTBR"]),
    "observation_space": ("env.observation", ["full", "partial_augmented", "partial"]),
    "history_length": ("env.history", [1, 3, 5]),
    "critic": ("marl.critic", ["centralized", "local"]),
}


def _set(cfg: Config, dotted: str, value) -> None:
    section, key = dotted.split(".")
    setattr(getattr(cfg, section), key, value)


def final_mean_reward(history: list[dict], window=10) -> float:
    vals = [h["mean_episode_reward"] for h in history if not math.isnan(h["mean_episode_reward"])]
    return float(np.mean(vals[-window:])) if vals else float("nan")


def ablation_suite(kind: str, base: Config, out_dir, eval_repeats=10, eval_seed=1234, variants=None, progress=None):
    """Train every variant of one ablation on the same budget, evaluate each
    on the hover-setpoint task and write ``comparison.csv``."""
    if kind not in ABLATIONS:
        raise ValueError(f"unknown ablation {kind!r}; choose from {sorted(ABLATIONS)}")
    key, values = ABLATIONS[kind]
    values = variants if variants is not None else values
    out_dir = Path(out_dir)
    rows = []
    for v in values:
        cfg = copy.deepcopy(base)
        _set(cfg, key, v)
        cfg.validate()
        run_dir = out_dir / f"{kind}_{v}"
        trainer = Trainer(cfg, run_dir)
        history = trainer.train(progress=progress)
        metrics, _ = run_scenario(trainer.agent, hover_scenario(eval_seed, eval_repeats), record=False)
        write_rows(run_dir / "eval_metrics.csv", metrics_rows(metrics, str(v)))
        rows.append(
            {
                "ablation": kind,
                "variant": v,
                "env_steps": trainer.env_steps,
                "final_mean_reward": final_mean_reward(history),
                "hover_successes": sum(hover_success(m) for m in metrics),
                "hover_trials": len(metrics),
                "mean_final_pos_error": float(np.mean([m.final_pos_error for m in metrics])),
                "mean_final_att_error": float(np.mean([m.final_att_error for m in metrics])),
            }
        )
    write_rows(out_dir / "comparison.csv", rows)
    return rows
