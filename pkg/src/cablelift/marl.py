"""Multi-agent PPO with a shared actor and a centralized (or local) critic."""

from __future__ import annotations

import csv
import logging
import time
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import nn
from .config import Config, from_dict
from .env import REWARD_COMPONENTS, TERMINATION_REASONS, CableLiftEnv

log = logging.getLogger(__name__)


class TrainingDiverged(RuntimeError):
    """A loss became non-finite; the update was abandoned."""


# ------------------------------------------------------------------ agent
class MappoAgent:
    """Actor, critic and their input scalers."""

    def __init__(self, cfg: Config, obs_dim: int, state_dim: int, act_dim: int, n_agents: int, rng=None):
        rng = rng if rng is not None else np.random.default_rng(cfg.seed)
        dtype = np.dtype(cfg.nn.dtype)
        self.cfg = cfg
        self.n_agents = n_agents
        self.obs_dim = obs_dim
        self.act_dim = act_dim
        self.critic_kind = cfg.marl.critic
        self.critic_dim = state_dim if self.critic_kind == "centralized" else obs_dim
        self.actor = nn.GaussianPolicy(
            obs_dim, act_dim, cfg.nn.actor_hidden, cfg.nn.activation, cfg.nn.init_log_std, rng, dtype
        )
        self.critic = nn.Mlp([self.critic_dim, *cfg.nn.critic_hidden, 1], cfg.nn.activation, rng, dtype, out_gain=1.0)
        self.obs_scaler = nn.RunningScaler(obs_dim)
        self.critic_scaler = nn.RunningScaler(self.critic_dim)
        self.value_scaler = nn.RunningScaler(1, clip=None)
        self.dtype = dtype

    def critic_input(self, obs, state):
        """``(..., N, critic_dim)``: the global state repeated per agent, or the
        agent's own observation."""
        if self.critic_kind == "centralized":
            return np.broadcast_to(state[..., None, :], state.shape[:-1] + (self.n_agents, state.shape[-1]))
        return obs

    def act(self, obs, rng=None, deterministic=False):
        x = self.obs_scaler.apply(np.asarray(obs, dtype=self.dtype), self.dtype)
        mean = self.actor.mean(x)
        if deterministic:
            return mean, None
        return self.actor.sample(mean, rng)

    def value(self, critic_in):
        """Critic output mapped back to return units."""
        v = self.critic(self.critic_scaler.apply(np.asarray(critic_in, dtype=self.dtype), self.dtype))[..., 0]
        return self.value_scaler.inverse(v[..., None])[..., 0]

    # ------------------------------------------------------------ storage
    def meta(self) -> dict:
        return {
            "config": self.cfg.to_dict(),
            "config_hash": self.cfg.hash(),
            "obs_dim": self.obs_dim,
            "act_dim": self.act_dim,
            "critic_dim": self.critic_dim,
            "n_agents": self.n_agents,
            "actor_sizes": self.actor.net.sizes,
            "critic_sizes": self.critic.sizes,
        }

    def tensors(self) -> dict[str, np.ndarray]:
        t = {}
        for name, net in (("actor", self.actor.net), ("critic", self.critic)):
            for k, (W, b) in enumerate(zip(net.weights, net.biases)):
                t[f"{name}.W{k}"] = W
                t[f"{name}.b{k}"] = b
        t["actor.log_std"] = self.actor.log_std
        for name, sc in (("obs", self.obs_scaler), ("critic_in", self.critic_scaler), ("value", self.value_scaler)):
            for k, v in sc.state().items():
                t[f"scaler.{name}.{k}"] = np.asarray(v)
        return t

    def save(self, path, extra_meta=None) -> None:
        meta = self.meta()
        meta.update(extra_meta or {})
        nn.save_checkpoint(path, self.tensors(), meta)

    @classmethod
    def load(cls, path) -> "MappoAgent":
        tensors, meta = nn.load_checkpoint(path)
        try:
            cfg = from_dict(meta["config"])
        except Exception as exc:
            raise nn.CheckpointError(f"{path}: unreadable embedded config ({exc})") from exc
        agent = cls(cfg, meta["obs_dim"], meta["critic_dim"] if cfg.marl.critic == "centralized" else 0, meta["act_dim"], meta["n_agents"])
        try:
            for name, net in (("actor", agent.actor.net), ("critic", agent.critic)):
                for k in range(len(net.weights)):
                    W, b = tensors[f"{name}.W{k}"], tensors[f"{name}.b{k}"]
                    if W.shape != net.weights[k].shape or b.shape != net.biases[k].shape:
                        raise nn.IncompatibleCheckpoint(f"{path}: layer {name}.{k} has shape {W.shape}")
                    net.weights[k] = W.astype(net.dtype)
                    net.biases[k] = b.astype(net.dtype)
            agent.actor.log_std = tensors["actor.log_std"].astype(agent.dtype)
            for name, sc in (("obs", agent.obs_scaler), ("critic_in", agent.critic_scaler), ("value", agent.value_scaler)):
                sc.load_state({k: tensors[f"scaler.{name}.{k}"] for k in ("count", "mean", "var")})
        except KeyError as exc:
            raise nn.CheckpointError(f"{path}: missing tensor {exc}") from exc
        agent.extra_meta = meta
        return agent

    def freeze(self) -> None:
        for sc in (self.obs_scaler, self.critic_scaler, self.value_scaler):
            sc.frozen = True


# ---------------------------------------------------------------- rollouts
@dataclass
class RolloutBatch:
    """Time-major arrays; agent axis last before features."""

    obs: np.ndarray  # (T, E, N, obs_dim)
    critic_in: np.ndarray  # (T, E, N, critic_dim)
    actions: np.ndarray  # (T, E, N, A)
    log_probs: np.ndarray  # (T, E, N)
    rewards: np.ndarray  # (T, E, N), identical along N
    values: np.ndarray  # (T + 1, E, N), last row is the bootstrap value
    terminated: np.ndarray  # (T, E) bool
    timeout: np.ndarray  # (T, E) bool
    final_values: np.ndarray  # (T, E, N), value of the true final state where timeout
    episode_returns: list
    episode_lengths: list
    reasons: np.ndarray  # termination histogram over the rollout
    components: dict  # per-step mean of each reward component


class RolloutState:
    """Environment handle plus per-env accumulators carried across rollouts."""

    def __init__(self, env: CableLiftEnv, seed):
        self.env = env
        self.obs, self.state = env.reset(seed=seed)
        self.ep_return = np.zeros(env.n_envs)


def collect_rollouts(agent: MappoAgent, rs: RolloutState, steps: int, rng) -> RolloutBatch:
    env = rs.env
    E, N = env.n_envs, env.n_agents
    obs_l, cin_l, act_l, lp_l, rew_l, val_l = [], [], [], [], [], []
    term_l, to_l, fin_l = [], [], []
    ep_returns, ep_lengths = [], []
    reasons = np.zeros(len(TERMINATION_REASONS), dtype=int)
    comp_sum = {k: 0.0 for k in REWARD_COMPONENTS}
    for _ in range(steps):
        cin = agent.critic_input(rs.obs, rs.state)
        actions, logp = agent.act(rs.obs, rng)
        values = agent.value(cin)
        obs, state, reward, term, timeout, info = env.step(actions)
        final_v = np.zeros((E, N))
        done = term | timeout
        if done.any():
            f_cin = agent.critic_input(info["final_obs"], info["final_state"])
            final_v[done] = agent.value(f_cin)
            rs.ep_return += reward
            ep_returns += list(rs.ep_return[done])
            ep_lengths += list(info["episode_steps"][done])
            rs.ep_return[done] = 0.0
            np.add.at(reasons, info["reason"][done], 1)
        else:
            rs.ep_return += reward
        for k in REWARD_COMPONENTS:
            comp_sum[k] += float(info["components"][k].mean())
        obs_l.append(rs.obs)
        cin_l.append(np.ascontiguousarray(cin, dtype=agent.dtype))
        act_l.append(actions)
        lp_l.append(logp)
        rew_l.append(np.repeat(reward[:, None], N, axis=1))
        val_l.append(values)
        term_l.append(term)
        to_l.append(timeout)
        fin_l.append(final_v)
        rs.obs, rs.state = obs, state
    val_l.append(agent.value(agent.critic_input(rs.obs, rs.state)))
    return RolloutBatch(
        obs=np.stack(obs_l).astype(agent.dtype),
        critic_in=np.stack(cin_l),
        actions=np.stack(act_l),
        log_probs=np.stack(lp_l),
        rewards=np.stack(rew_l),
        values=np.stack(val_l),
        terminated=np.stack(term_l),
        timeout=np.stack(to_l),
        final_values=np.stack(fin_l),
        episode_returns=ep_returns,
        episode_lengths=ep_lengths,
        reasons=reasons,
        components={k: v / steps for k, v in comp_sum.items()},
    )


# -------------------------------------------------------------------- GAE
def compute_gae(rewards, values, terminated, timeout, gamma, lam, final_values=None):
    """Advantages and returns by the GAE recursion.

    ``values`` has one more leading entry than ``rewards`` (the bootstrap value
    after the last step).  A terminated step bootstraps with zero, a timed-out
    step with ``final_values`` (the value of the true last state), and both cut
    the recursion since the next entry belongs to a new episode.
    """
    rewards = np.asarray(rewards, dtype=float)
    values = np.asarray(values, dtype=float)
    T = rewards.shape[0]
    term = np.asarray(terminated, dtype=bool)
    trunc = np.asarray(timeout, dtype=bool)
    extra = rewards.ndim - term.ndim
    term = term.reshape(term.shape + (1,) * extra)
    trunc = trunc.reshape(trunc.shape + (1,) * extra)
    fv = np.zeros_like(rewards) if final_values is None else np.asarray(final_values, dtype=float)
    next_v = np.where(trunc, fv, values[1:])
    next_v = np.where(term, 0.0, next_v)
    delta = rewards + gamma * next_v - values[:-1]
    cont = ~(term | trunc)
    adv = np.zeros_like(rewards)
    last = np.zeros_like(rewards[0])
    for t in range(T - 1, -1, -1):
        last = delta[t] + gamma * lam * cont[t] * last
        adv[t] = last
    return adv, adv + values[:-1]


def filter_advantages(advantages, keep_fraction=0.5) -> np.ndarray:
    """Indices (into the flattened array) of the ``keep_fraction`` largest
    ``|A|``; ties go to the lower index."""
    a = np.abs(np.asarray(advantages).ravel())
    k = int(round(keep_fraction * a.size))
    if keep_fraction >= 1.0:
        return np.arange(a.size)
    order = np.argsort(-a, kind="stable")
    return np.sort(order[:k])


def normalize_advantages(a):
    return (a - a.mean()) / (a.std() + 1e-8)


# ------------------------------------------------------------------ losses
def ppo_actor_loss(logp_new, logp_old, adv, clip):
    """Clipped surrogate loss and its gradient w.r.t. ``logp_new``."""
    ratio = np.exp(logp_new - logp_old)
    s1 = adv * ratio
    s2 = adv * np.clip(ratio, 1.0 - clip, 1.0 + clip)
    k = adv.size
    loss = -np.mean(np.minimum(s1, s2))
    unclipped = s1 <= s2
    grad = -(adv * ratio * unclipped) / k
    return loss, grad, ratio


def clipped_value_loss(v_pred, v_old, returns, clip, scale=1.0):
    """Squared error of the prediction clipped to ``v_old +- clip``, with its gradient."""
    diff = v_pred - v_old
    v_c = v_old + np.clip(diff, -clip, clip)
    err = v_c - returns
    loss = scale * np.mean(err * err)
    grad = scale * 2.0 * err * (np.abs(diff) <= clip) / err.size
    return loss, grad


# ------------------------------------------------------------------ update
def ppo_update(agent: MappoAgent, batch: RolloutBatch, mc, rng, actor_opt, critic_opt) -> dict:
    """Filter, then run ``epochs x mini_batches`` clipped PPO steps."""
    vs = agent.value_scaler
    adv, returns = compute_gae(
        batch.rewards, batch.values, batch.terminated, batch.timeout, mc.discount_factor, mc.gae_lambda, batch.final_values
    )
    vs.update(returns.reshape(-1, 1))
    v_old = vs.apply(batch.values[:-1].reshape(-1, 1))[:, 0]
    ret_n = vs.apply(returns.reshape(-1, 1))[:, 0]

    A = batch.actions.shape[-1]
    obs = agent.obs_scaler.apply(batch.obs.reshape(-1, agent.obs_dim), agent.dtype)
    cin = agent.critic_scaler.apply(batch.critic_in.reshape(-1, agent.critic_dim), agent.dtype)
    actions = batch.actions.reshape(-1, A)
    logp_old = batch.log_probs.reshape(-1)
    adv_f = adv.reshape(-1)

    keep = filter_advantages(adv_f, mc.advantage_keep_fraction)
    n_mb = mc.mini_batches
    stats = {"policy_loss": 0.0, "value_loss": 0.0, "first_ratio_dev": 0.0, "actor_grad_norm": 0.0}
    n_steps = 0
    first = True
    for epoch in range(mc.learning_epochs):
        perm = rng.permutation(keep)
        for mb in np.array_split(perm, n_mb):
            a_mb = normalize_advantages(adv_f[mb])
            mean, cache = agent.actor.mean(obs[mb], keep_cache=True)
            logp = agent.actor.log_prob(mean, actions[mb])
            p_loss, g_logp, ratio = ppo_actor_loss(logp, logp_old[mb], a_mb, mc.ratio_clip)
            if first:
                stats["first_ratio_dev"] = float(np.max(np.abs(ratio - 1.0)))
                first = False
            g_mean, g_ls = agent.actor.log_prob_grads(mean, actions[mb])
            grads, _ = agent.actor.net.backward(cache, g_logp[:, None] * g_mean)
            g_log_std = (g_logp[:, None] * g_ls).sum(axis=0) - mc.entropy_loss_scale * (
                (agent.actor.log_std >= nn.LOG_STD_MIN) & (agent.actor.log_std <= nn.LOG_STD_MAX)
            )
            grads.append(g_log_std.astype(agent.dtype))

            v_pred, c_cache = agent.critic.forward(cin[mb], keep_cache=True)
            v_loss, g_v = clipped_value_loss(v_pred[:, 0], v_old[mb], ret_n[mb], mc.value_clip, mc.value_loss_scale)
            c_grads, _ = agent.critic.backward(c_cache, g_v[:, None])

            if not (np.isfinite(p_loss) and np.isfinite(v_loss)):
                raise TrainingDiverged(f"non-finite loss at epoch {epoch}")
            stats["actor_grad_norm"] += nn.clip_grad_norm(grads, mc.grad_norm_clip)
            nn.clip_grad_norm(c_grads, mc.grad_norm_clip)
            actor_opt.step(grads)
            critic_opt.step(c_grads)
            stats["policy_loss"] += float(p_loss)
            stats["value_loss"] += float(v_loss)
            n_steps += 1
    stats["policy_loss"] /= n_steps
    stats["value_loss"] /= n_steps
    stats["actor_grad_norm"] /= n_steps
    stats["kept"] = int(keep.size)
    return stats


# ------------------------------------------------------------------ trainer
METRIC_FIELDS = (
    ["iteration", "env_steps", "mean_episode_reward", "mean_step_reward", "episodes", "mean_episode_length"]
    + [f"r_{k}" for k in REWARD_COMPONENTS]
    + [f"term_{k}" for k in TERMINATION_REASONS[1:]]
    + ["timeouts", "policy_loss", "value_loss", "std", "first_ratio_dev", "seconds"]
)


class Trainer:
    def __init__(self, cfg: Config, out_dir=None):
        cfg.validate()
        self.cfg = cfg
        root = np.random.SeedSequence(cfg.seed)
        env_ss, net_ss, act_ss, upd_ss, reset_ss = root.spawn(5)
        self.env = CableLiftEnv(cfg, cfg.marl.envs, env_ss)
        self.agent = MappoAgent(
            cfg, self.env.obs_dim, self.env.state_dim, self.env.action_dim, self.env.n_agents, np.random.default_rng(net_ss)
        )
        self.act_rng = np.random.default_rng(act_ss)
        self.upd_rng = np.random.default_rng(upd_ss)
        self.rollout = RolloutState(self.env, reset_ss.generate_state(1)[0])
        self.actor_opt = nn.Adam(self.agent.actor.params, cfg.marl.learning_rate_actor)
        self.critic_opt = nn.Adam(self.agent.critic.params, cfg.marl.learning_rate_critic)
        self.out_dir = Path(out_dir) if out_dir is not None else None
        self.history: list[dict] = []
        self.env_steps = 0

    @property
    def iterations(self) -> int:
        mc = self.cfg.marl
        per_iter = mc.envs * mc.rollouts
        return max(1, -(-mc.total_env_steps // per_iter))

    def iterate(self, it: int) -> dict:
        mc = self.cfg.marl
        t0 = time.perf_counter()
        batch = collect_rollouts(self.agent, self.rollout, mc.rollouts, self.act_rng)
        stats = ppo_update(self.agent, batch, mc, self.upd_rng, self.actor_opt, self.critic_opt)
        # scalers stay frozen while a rollout is collected and while it is trained on
        self.agent.obs_scaler.update(batch.obs.reshape(-1, self.agent.obs_dim))
        self.agent.critic_scaler.update(batch.critic_in.reshape(-1, self.agent.critic_dim))
        self.env_steps += mc.envs * mc.rollouts
        n_ep = len(batch.episode_returns)
        row = {
            "iteration": it,
            "env_steps": self.env_steps,
            "mean_episode_reward": float(np.mean(batch.episode_returns)) if n_ep else float("nan"),
            "mean_step_reward": float(batch.rewards.mean()),
            "episodes": n_ep,
            "mean_episode_length": float(np.mean(batch.episode_lengths)) if n_ep else float("nan"),
        }
        row.update({f"r_{k}": v for k, v in batch.components.items()})
        row.update({f"term_{k}": int(batch.reasons[i + 1]) for i, k in enumerate(TERMINATION_REASONS[1:])})
        row["timeouts"] = int(batch.timeout.sum())
        row["policy_loss"] = stats["policy_loss"]
        row["value_loss"] = stats["value_loss"]
        row["std"] = float(np.exp(self.agent.actor.clamped_log_std()).mean())
        row["first_ratio_dev"] = stats["first_ratio_dev"]
        row["seconds"] = time.perf_counter() - t0
        return row

    def train(self, iterations=None, progress=None) -> list[dict]:
        n = iterations if iterations is not None else self.iterations
        writer = None
        fh = None
        if self.out_dir is not None:
            self.out_dir.mkdir(parents=True, exist_ok=True)
            fh = open(self.out_dir / "metrics.csv", "w", newline="")
            writer = csv.DictWriter(fh, fieldnames=METRIC_FIELDS)
            writer.writeheader()
        try:
            for it in range(1, n + 1):
                row = self.iterate(it)
                self.history.append(row)
                if writer is not None:
                    writer.writerow(row)
                    fh.flush()
                    if it % self.cfg.marl.checkpoint_every == 0:
                        self.save(self.out_dir / "checkpoints" / f"iter_{it:05d}.ckpt")
                if progress is not None:
                    progress(row)
                log.info(
                    "iter %d steps %d ep_reward %.3f ep_len %.1f (%.1fs)",
                    it, row["env_steps"], row["mean_episode_reward"], row["mean_episode_length"], row["seconds"],
                )
        finally:
            if fh is not None:
                fh.close()
        if self.out_dir is not None:
            self.save(self.out_dir / "final.ckpt")
        return self.history

    def save(self, path) -> None:
        self.agent.save(path, {"iteration": len(self.history), "env_steps": self.env_steps})
