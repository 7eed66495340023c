import copy
from dataclasses import asdict

import numpy as np
import pytest

from cablelift import config, geom
from cablelift.eval import (
    NMPC_REFERENCE,
    ConfigMismatch,
    Scenario,
    figure_eight_params,
    figure_eight_reference,
    hover_success,
    inject_failure,
    metrics_rows,
    rmse,
    run_scenario,
    scripted_offset,
    time_to_target,
    write_rows,
)
from cablelift.env import CableLiftEnv
from cablelift.marl import MappoAgent


@pytest.fixture(scope="module")
def agent():
    cfg = config.load(None, ["nn.actor_hidden=[32, 32]", "nn.critic_hidden=[32, 32]"])
    return MappoAgent(cfg, 135, 84, 6, 3, np.random.default_rng(0))


@pytest.fixture(scope="module")
def still_agent(agent):
    """Policy whose mean action is exactly zero: hold zero acceleration."""
    a = copy.deepcopy(agent)
    a.actor.net.weights[-1][:] = 0
    a.actor.net.biases[-1][:] = 0
    return a


def same_metrics(m1, m2):
    v1 = np.array([list(asdict(m).values()) for m in m1], dtype=float)
    v2 = np.array([list(asdict(m).values()) for m in m2], dtype=float)
    return np.array_equal(v1, v2, equal_nan=True)


# ---------------------------------------------------------------- metrics
def test_rmse_examples():
    assert rmse([3.0, 4.0]) == pytest.approx(3.5355, abs=1e-4)
    assert rmse(np.zeros(10)) == 0.0
    assert rmse([1.0, 2.0], [1.0, 2.0]) == 0.0


def test_time_to_target_examples():
    t = np.arange(1, 1001) * 0.01
    pos = np.where(t < 6.84 - 1e-9, 0.5, 0.05)
    att = np.where(t < 3.0, 20.0, 5.0)
    assert time_to_target(t, pos, att) == (pytest.approx(6.84), True)
    assert time_to_target(t, np.zeros_like(t), np.zeros_like(t))[0] == pytest.approx(0.01)
    assert time_to_target(np.arange(0, 10, 0.01), np.zeros(1000), np.zeros(1000))[0] == 0.0
    # dipping in and out again does not count
    pos2 = pos.copy()
    pos2[900] = 0.5
    assert time_to_target(t, pos2, att)[0] == pytest.approx(t[901])
    assert time_to_target(t, np.ones_like(t), att, duration=10.0) == (10.0, False)
    assert NMPC_REFERENCE["time_to_target_s"] == 6.84


# -------------------------------------------------------------- figure 8
def test_figure_eight_bounds_and_period():
    A, w = figure_eight_params(1.0, 0.5)
    T = 2 * np.pi / w
    t = np.linspace(0, T, 200001)
    p, q = figure_eight_reference(t)
    dt = t[1] - t[0]
    v = np.gradient(p, dt, axis=0)
    a = np.gradient(v, dt, axis=0)
    assert np.linalg.norm(v, axis=-1).max() == pytest.approx(1.0, abs=0.01)
    assert np.linalg.norm(a[5:-5], axis=-1).max() == pytest.approx(0.5, abs=0.01)
    assert np.allclose(p[0], p[-1], atol=1e-9)
    assert np.allclose(q, geom.IDENTITY_QUAT)


def test_scripted_offset():
    script = [[0.0, 0.0], [3.0, 0.7], [8.0, -0.3]]
    assert scripted_offset(script, 1.0) == 0.0
    assert scripted_offset(script, 3.0) == 0.7
    assert scripted_offset(script, 9.0) == -0.3


# ---------------------------------------------------------------- failure
def test_failed_mav_hangs_below_attachment():
    env = CableLiftEnv(config.load(), 1, 0)
    env.reset()
    env.place(np.arange(1), np.array([[0.0, 0.0, 2.0]]), geom.IDENTITY_QUAT[None], np.array([[0.0, 0.0, 2.0]]),
              geom.IDENTITY_QUAT[None])
    env.auto_reset = False
    inject_failure(env.world, 1)
    for _ in range(500):
        env.step(np.zeros((1, 3, 6)))
    w = env.world
    c = w.constraints
    attach = w.attachment_world(0, c.local_a[1])[0]
    assert w.pos[0, w.mav_bodies[1], 2] < attach[2]
    assert np.all(w.rotor_speeds[0, 1] == 0)
    # the others still receive ordinary observations, with no failure flag
    assert env.observations().shape == (1, 3, 135)


# ------------------------------------------------------------------ runner
def test_run_scenario_deterministic(agent):
    sc = Scenario(duration=1.0, repeats=2, seed=3)
    m1, r1 = run_scenario(agent, sc)
    m2, r2 = run_scenario(agent, sc)
    assert same_metrics(m1, m2) and r1 == r2
    assert {"time", "load_x", "goal_qz", "pos_error", "a2_5"} <= set(r1[0])
    # the default goal is a 2 m displacement with (30, -20, -90) deg attitude
    assert r1[0]["goal_x"] == pytest.approx(1.0)
    assert np.rad2deg(geom.to_euler(np.array([r1[0][f"goal_q{a}"] for a in "wxyz"]))) == pytest.approx(
        [30.0, -20.0, -90.0]
    )


def test_evaluation_does_not_touch_agent(agent):
    before = {k: v.copy() for k, v in agent.tensors().items()}
    run_scenario(agent, Scenario(duration=0.5, repeats=1))
    after = agent.tensors()
    assert all(np.array_equal(before[k], after[k]) for k in before)


def test_zero_delta_mass_is_nominal(agent):
    m0, r0 = run_scenario(agent, Scenario(kind="setpoint_step", duration=1.0))
    m1, r1 = run_scenario(agent, Scenario(kind="load_mismatch", duration=1.0, delta_mass=0.0))
    assert same_metrics(m0, m1) and r0 == r1


def test_zero_offset_override_close_to_policy(still_agent):
    agent = still_agent
    base = dict(duration=3.0, start_pos=[0.0, 0.0, 1.5])
    _, r0 = run_scenario(agent, Scenario(kind="heterogeneous", override_script=[[0.0, 0.0]], **base))
    _, r1 = run_scenario(agent, Scenario(kind="mav_failure", failure_time=1e9, **base))
    p0 = np.array([[r["load_x"], r["load_y"], r["load_z"]] for r in r0])
    p1 = np.array([[r["load_x"], r["load_y"], r["load_z"]] for r in r1])
    assert np.max(np.linalg.norm(p0 - p1, axis=-1)) < 0.05


def test_n_mismatch(agent):
    with pytest.raises(ConfigMismatch):
        run_scenario(agent, Scenario(n_mavs=4))


def test_metrics_output(agent, tmp_path):
    m, _ = run_scenario(agent, Scenario(duration=0.5, repeats=2))
    rows = metrics_rows(m, "x")
    write_rows(tmp_path / "m.csv", rows)
    assert (tmp_path / "m.csv").read_text().startswith("label,repeat,pos_rmse")
    assert isinstance(hover_success(m[0]), bool)
    assert all(v.pos_rmse >= 0 and v.att_rmse >= 0 for v in m)


def test_scenario_validation():
    with pytest.raises(ValueError):
        Scenario.from_dict({"kind": "nope"})
    with pytest.raises(ValueError):
        Scenario.from_dict({"bogus": 1})
    with pytest.raises(ValueError):
        Scenario(com_offset=[1.0, 0, 0]).validate()
