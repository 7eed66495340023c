import csv

import numpy as np
import pytest

import oracles
from cablelift import config
from cablelift.marl import (
    METRIC_FIELDS,
    MappoAgent,
    Trainer,
    clipped_value_loss,
    collect_rollouts,
    compute_gae,
    filter_advantages,
    normalize_advantages,
    ppo_actor_loss,
    ppo_update,
)

SMALL = [
    "marl.envs=4",
    "marl.rollouts=16",
    "marl.mini_batches=2",
    "marl.learning_epochs=2",
    "nn.actor_hidden=[32, 32]",
    "nn.critic_hidden=[32, 32]",
    "marl.checkpoint_every=1",
]


def small_cfg(*extra):
    return config.load(None, SMALL + list(extra))


# -------------------------------------------------------------------- GAE
def test_gae_example():
    adv, ret = compute_gae([1.0, 1.0], [0.0, 0.0, 0.0], [False, False], [False, False], 0.99, 0.95)
    assert np.allclose(adv, [1.9405, 1.0], atol=1e-12)
    assert np.allclose(ret, adv)


def test_gae_limits():
    rng = np.random.default_rng(0)
    r, v = rng.standard_normal(10), rng.standard_normal(11)
    f = np.zeros(10, dtype=bool)
    adv, _ = compute_gae(r, v, f, f, 0.99, 0.0)
    assert np.allclose(adv, r + 0.99 * v[1:] - v[:-1])
    adv, _ = compute_gae(np.zeros(10), np.zeros(11), f, f, 0.99, 0.95)
    assert np.all(adv == 0)


def test_gae_oracle(rng):
    for _ in range(1000):
        T = int(rng.integers(1, 12))
        r = rng.standard_normal(T)
        v = rng.standard_normal(T + 1)
        fv = rng.standard_normal(T)
        term = rng.random(T) < 0.15
        tout = (rng.random(T) < 0.15) & ~term
        adv, ret = compute_gae(r, v, term, tout, 0.99, 0.95, fv)
        oa, orr = oracles.gae(r.tolist(), v.tolist(), term.tolist(), tout.tolist(), fv.tolist(), 0.99, 0.95)
        for a, b in zip(list(adv) + list(ret), oa + orr):
            assert oracles.rel_err(a, b) < 1e-9


def test_gae_termination_masks_future():
    r = np.array([1.0, 2.0, 3.0, 4.0])
    v = np.zeros(5)
    term = np.array([False, True, False, False])
    f = np.zeros(4, dtype=bool)
    adv1, _ = compute_gae(r, v, term, f, 0.99, 0.95)
    r2 = r.copy()
    r2[2:] = -100.0
    adv2, _ = compute_gae(r2, v, term, f, 0.99, 0.95)
    assert np.array_equal(adv1[:2], adv2[:2])
    assert adv1[1] == 2.0


def test_gae_timeout_bootstraps_with_final_value():
    adv, _ = compute_gae([1.0], [0.0, 50.0], [False], [True], 0.5, 0.95, [2.0])
    assert adv[0] == pytest.approx(1.0 + 0.5 * 2.0)
    adv, _ = compute_gae([1.0], [0.0, 50.0], [True], [False], 0.5, 0.95, [2.0])
    assert adv[0] == pytest.approx(1.0)


# ---------------------------------------------------------------- filter
def test_filter_examples():
    a = np.array([0.1, -2.0, 0.5, -0.05])
    assert set(a[filter_advantages(a, 0.5)]) == {-2.0, 0.5}
    assert list(filter_advantages(np.ones(6), 0.5)) == [0, 1, 2]
    assert list(filter_advantages(np.array([1.0, -1.0, 1.0, -1.0]), 0.5)) == [0, 1]
    assert list(filter_advantages(a, 1.0)) == [0, 1, 2, 3]


def test_normalize_advantages(rng):
    a = normalize_advantages(rng.uniform(-3, 7, 501))
    assert abs(a.mean()) < 1e-6 and abs(a.std() - 1) < 1e-6


# ----------------------------------------------------------------- losses
def test_actor_loss_ratio_one_is_unclipped():
    adv = np.array([1.0, -2.0, 0.5])
    lp = np.array([-1.0, -2.0, -0.3])
    loss, _, ratio = ppo_actor_loss(lp, lp, adv, 0.1)
    assert np.all(ratio == 1.0)
    assert loss == pytest.approx(-adv.mean())


def test_actor_loss_gradient_finite_differences(rng):
    h = 1e-6
    for _ in range(200):
        lp_old = rng.uniform(-3, 0, 1)
        lp_new = lp_old + rng.uniform(-0.3, 0.3, 1)
        adv = rng.standard_normal(1)
        # stay away from the clip kink where the derivative is undefined
        if abs(abs(np.exp(lp_new - lp_old)[0] - 1) - 0.1) < 1e-3:
            continue
        _, g, _ = ppo_actor_loss(lp_new, lp_old, adv, 0.1)
        up = ppo_actor_loss(lp_new + h, lp_old, adv, 0.1)[0]
        dn = ppo_actor_loss(lp_new - h, lp_old, adv, 0.1)[0]
        num = (up - dn) / (2 * h)
        assert abs(num - g[0]) <= 1e-4 * max(abs(num), 1e-8) + 1e-10


def test_actor_loss_sign_flip():
    lp = np.array([-1.0, -0.5])
    adv = np.array([0.7, -0.2])
    _, g1, _ = ppo_actor_loss(lp, lp, adv, 0.1)
    _, g2, _ = ppo_actor_loss(lp, lp, -adv, 0.1)
    assert np.allclose(g1, -g2)


def test_value_loss_gradient_finite_differences(rng):
    h = 1e-6
    for _ in range(200):
        v_old, ret = rng.standard_normal(2)
        v = np.array([v_old + rng.uniform(-0.3, 0.3)])
        if abs(abs(v[0] - v_old) - 0.1) < 1e-3:
            continue
        _, g = clipped_value_loss(v, np.array([v_old]), np.array([ret]), 0.1)
        num = (clipped_value_loss(v + h, [v_old], [ret], 0.1)[0] - clipped_value_loss(v - h, [v_old], [ret], 0.1)[0]) / (2 * h)
        assert abs(num - g[0]) <= 1e-4 * max(abs(num), 1e-8) + 1e-10


# ---------------------------------------------------------------- trainer
def collect(cfg):
    tr = Trainer(cfg)
    batch = collect_rollouts(tr.agent, tr.rollout, cfg.marl.rollouts, tr.act_rng)
    return tr, batch


def test_batch_shapes_and_shared_reward():
    cfg = small_cfg()
    tr, b = collect(cfg)
    T, E, N = 16, 4, 3
    assert b.obs.shape == (T, E, N, 135)
    assert b.critic_in.shape == (T, E, N, 84)
    assert b.actions.shape == (T, E, N, 6)
    assert b.values.shape == (T + 1, E, N)
    assert np.all(b.rewards == b.rewards[..., :1])
    # centralized critic: all agents of a step see the same input, hence the same advantage
    adv, _ = compute_gae(b.rewards, b.values, b.terminated, b.timeout, 0.99, 0.95, b.final_values)
    assert np.allclose(adv, adv[..., :1])


def test_local_critic_dims():
    cfg = small_cfg("marl.critic=local")
    tr, b = collect(cfg)
    assert tr.agent.critic_dim == 135
    assert b.critic_in.shape[-1] == 135


def test_first_epoch_ratio_is_one():
    cfg = small_cfg()
    tr = Trainer(cfg)
    tr.iterate(1)  # non-trivial scalers and weights
    b = collect_rollouts(tr.agent, tr.rollout, cfg.marl.rollouts, tr.act_rng)
    ag = tr.agent
    obs = ag.obs_scaler.apply(b.obs.reshape(-1, ag.obs_dim), ag.dtype)
    lp = ag.actor.log_prob(ag.actor.mean(obs), b.actions.reshape(-1, ag.act_dim))
    assert np.max(np.abs(np.exp(lp - b.log_probs.reshape(-1)) - 1)) < 1e-6
    stats = ppo_update(ag, b, cfg.marl, tr.upd_rng, tr.actor_opt, tr.critic_opt)
    assert stats["first_ratio_dev"] < 1e-6
    assert stats["kept"] == b.log_probs.size // 2


def test_parameter_sharing_property():
    cfg = small_cfg()
    tr, b = collect(cfg)
    obs = b.obs[0]
    mean, _ = tr.agent.act(obs, deterministic=True)
    swapped = obs[:, ::-1]
    mean2, _ = tr.agent.act(swapped, deterministic=True)
    assert np.array_equal(mean2, mean[:, ::-1])


def test_determinism_bit_identical():
    rows = []
    for _ in range(2):
        tr = Trainer(small_cfg())
        rows.append(np.array([[v for k, v in r.items() if k != "seconds"] for r in tr.train(2)], dtype=float))
    assert np.array_equal(rows[0], rows[1], equal_nan=True)


def test_smoke_train_writes_csv(tmp_path):
    cfg = small_cfg("marl.envs=2")
    tr = Trainer(cfg, tmp_path)
    tr.train(2)
    rows = list(csv.DictReader(open(tmp_path / "metrics.csv")))
    assert len(rows) == 2 and list(rows[0]) == list(METRIC_FIELDS)
    assert int(rows[-1]["env_steps"]) == 2 * 2 * 16
    assert (tmp_path / "final.ckpt").exists()
    assert (tmp_path / "checkpoints" / "iter_00002.ckpt").exists()
    agent = MappoAgent.load(tmp_path / "final.ckpt")
    obs = np.random.default_rng(0).standard_normal((5, 3, 135))
    assert np.array_equal(agent.act(obs, deterministic=True)[0], tr.agent.act(obs, deterministic=True)[0])
    assert agent.extra_meta["config_hash"] == cfg.hash()
