"""The target multi-agent system: independent per-agent DQN training, a frozen
greedy joint policy, and rollouts with optional attack hooks.

Everything outside this module treats :class:`VictimPolicy` as a black box:
observation in, action out.  Parameters are kept private and there is no
accessor for them.
"""

from __future__ import annotations

import json
import logging
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import ndmath as nm
from .envs import episode_seed, make_env
from .errors import ArgumentError, ConfigError, ShapeError, TrainingFailure

log = logging.getLogger(__name__)


class VictimPolicy:
    """Frozen deterministic joint policy; ``act`` is argmax with lowest-index ties."""

    def __init__(self, env_name, nets):
        self.env_name = env_name
        self._nets = tuple(nets)
        self.deterministic = True
        env = make_env(env_name)
        self.n_agents = env.spec.n_agents
        self.obs_dim = env.spec.obs_dim
        self.action_count = env.spec.action_count
        if len(self._nets) != self.n_agents:
            raise ConfigError(f"{len(self._nets)} agent networks for {self.n_agents} agents")

    def act(self, agent, observation):
        vec = getattr(observation, "vector", observation)
        vec = np.asarray(vec, dtype=np.float64)
        if vec.shape != (self.obs_dim,):
            raise ShapeError(f"observation shape {vec.shape}, expected ({self.obs_dim},)")
        return nm.argmax_first(self._nets[agent](vec))

    def act_batch(self, agent, observations):
        """Greedy actions for a stack of observations (rows)."""
        obs = np.asarray(observations, dtype=np.float64)
        if obs.ndim != 2 or obs.shape[1] != self.obs_dim:
            raise ShapeError(f"observation batch shape {obs.shape}")
        return np.argmax(self._nets[agent](obs), axis=1)

    def save(self, directory):
        directory = Path(directory)
        directory.mkdir(parents=True, exist_ok=True)
        files = []
        for i, net in enumerate(self._nets):
            name = f"agent_{i}.ckpt"
            nm.save_network(directory / name, net, {"role": "victim", "agent": i})
            files.append(name)
        manifest = {"format": "adapam-victim-1", "env": self.env_name, "agents": files}
        (directory / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
        return directory

    @classmethod
    def load(cls, directory):
        directory = Path(directory)
        manifest = json.loads((directory / "manifest.json").read_text())
        nets = [nm.load_network(directory / f)[0] for f in manifest["agents"]]
        return cls(manifest["env"], nets)


def random_policy_actions(rng, env):
    return rng.integers(0, env.spec.action_count, size=env.spec.n_agents)


# --------------------------------------------------------------------------
# rollouts


@dataclass
class StepRecord:
    t: int
    state: np.ndarray
    observations: list
    actions: list
    reward: float
    alive: list
    attacks: list = field(default_factory=list)


@dataclass
class EpisodeLog:
    episode: int
    reset_seed: int
    steps: list
    total_reward: float
    win: bool | None
    length: int


@dataclass(frozen=True)
class RolloutSummary:
    n_episodes: int
    mean_reward: float
    stderr_reward: float
    win_rate: float | None
    mean_length: float

    def as_dict(self):
        return asdict(self)


def summarize(episodes):
    rewards = np.array([e.total_reward for e in episodes], dtype=np.float64)
    n = len(rewards)
    stderr = float(rewards.std(ddof=1) / math.sqrt(n)) if n > 1 else 0.0
    wins = [e.win for e in episodes if e.win is not None]
    win_rate = float(np.mean(wins)) if wins and len(wins) == n else None
    return RolloutSummary(n, float(rewards.mean()), stderr, win_rate,
                          float(np.mean([e.length for e in episodes])))


class AttackHook:
    """No-op hook.  Subclasses may swap observations and/or executed actions."""

    def begin_episode(self, episode, state):
        pass

    def perturb(self, env, state, observations, alive):
        """Return ``(observations_fed_to_victim, attack_annotations)``."""
        return observations, []

    def override(self, env, state, actions, attacks):
        return actions

    def after_step(self, state, attacks, actions, result):
        pass


def run_episode(env, victim, reset_seed, episode=0, hook=None, keep_steps=True):
    state = env.reset(reset_seed)
    if hook is not None:
        hook.begin_episode(episode, state)
    n = env.spec.n_agents
    steps, total = [], 0.0
    while True:
        alive = env.alive(state)
        clean = [env.observe(state, i).vector if alive[i] else None for i in range(n)]
        fed, attacks = clean, []
        if hook is not None:
            fed, attacks = hook.perturb(env, state, list(clean), alive)
        actions = [victim.act(i, fed[i]) if alive[i] else 0 for i in range(n)]
        for a in attacks:
            if a.get("malicious_action") is not None and alive[a["agent"]]:
                a["victim_success"] = bool(actions[a["agent"]] == a["malicious_action"])
        if hook is not None:
            actions = hook.override(env, state, list(actions), attacks)
        result = env.step(state, actions)
        if hook is not None:
            hook.after_step(state, attacks, actions, result)
        total += result.reward
        if keep_steps:
            steps.append(StepRecord(state.t, state.vector, clean, list(actions), result.reward,
                                    list(alive), attacks))
        state = result.next_state
        if result.done:
            break
    return EpisodeLog(episode, int(reset_seed), steps, total, result.win, state.t)


def rollout(env, victim, n_episodes, seed, attack_hook=None, keep_steps=True):
    """Play ``n_episodes`` greedy episodes; returns ``(episode_logs, summary)``."""
    if isinstance(env, str):
        env = make_env(env)
    if n_episodes < 1:
        raise ArgumentError("need at least one episode")
    logs = [run_episode(env, victim, episode_seed(seed, e), e, attack_hook, keep_steps)
            for e in range(n_episodes)]
    return logs, summarize(logs)


def random_rollout(env, n_episodes, seed):
    """Uniform-random joint policy on the same episode seeds as :func:`rollout`."""
    if isinstance(env, str):
        env = make_env(env)
    out = []
    for e in range(n_episodes):
        rs = episode_seed(seed, e)
        rng = np.random.default_rng([int(seed), e, 7])
        state = env.reset(rs)
        total = 0.0
        while True:
            res = env.step(state, random_policy_actions(rng, env))
            total += res.reward
            state = res.next_state
            if res.done:
                break
        out.append(EpisodeLog(e, rs, [], total, res.win, state.t))
    return out, summarize(out)


# --------------------------------------------------------------------------
# training


@dataclass
class VictimTrainConfig:
    episodes: int = 1500
    lr: float = 1e-3
    gamma: float = 0.95
    eps_start: float = 1.0
    eps_end: float = 0.05
    eps_decay_frac: float = 0.6
    target_sync: int = 200
    replay_capacity: int = 50000
    batch_size: int = 64
    hidden: tuple = (64, 64)
    reward_scale: float = 1.0
    grad_clip: float = 10.0
    # the horizon cut is a truncation, not a terminal: bootstrap through it
    bootstrap_timeout: bool = True
    eval_every: int = 100
    select_episodes: int = 30
    check_episodes: int = 100
    margin: float = 0.0
    min_win_rate: float = 0.8
    seed: int = 0

    def __post_init__(self):
        self.hidden = tuple(int(h) for h in self.hidden)
        positive = ("episodes", "lr", "target_sync", "replay_capacity", "batch_size",
                    "eval_every", "select_episodes", "check_episodes", "reward_scale")
        for name in positive:
            if not getattr(self, name) > 0:
                raise ConfigError(f"victim.{name} must be positive")
        if not 0.0 < self.gamma <= 1.0:
            raise ConfigError("victim.gamma must lie in (0, 1]")
        if not 0.0 <= self.eps_end <= self.eps_start <= 1.0:
            raise ConfigError("exploration schedule must be non-increasing within [0, 1]")

    def epsilon(self, episode):
        decay = max(1, int(self.eps_decay_frac * self.episodes))
        frac = min(1.0, episode / decay)
        return self.eps_start + frac * (self.eps_end - self.eps_start)


class _Replay:
    def __init__(self, capacity, obs_dim):
        self.obs = np.zeros((capacity, obs_dim))
        self.nxt = np.zeros((capacity, obs_dim))
        self.act = np.zeros(capacity, dtype=np.int64)
        self.rew = np.zeros(capacity)
        self.done = np.zeros(capacity)
        self.capacity = capacity
        self.size = 0
        self.pos = 0

    def add(self, o, a, r, o2, d):
        i = self.pos
        self.obs[i], self.act[i], self.rew[i], self.done[i] = o, a, r, d
        self.nxt[i] = o2 if o2 is not None else 0.0
        self.pos = (i + 1) % self.capacity
        self.size = min(self.size + 1, self.capacity)


def _selection_score(summary):
    if summary.win_rate is not None:
        return (summary.win_rate, summary.mean_reward)
    return (summary.mean_reward,)


def train_victim(env, config, curve=None):
    """Independent double-DQN per agent on the shared reward.

    Keeps the greedy snapshot with the best score on a fixed selection seed
    set, then checks it against a uniform-random joint policy on
    ``check_episodes`` paired episodes.  Raises :class:`TrainingFailure` when
    the margin (or, for grid_battle, ``min_win_rate``) is not met.
    """
    if isinstance(env, str):
        env = make_env(env)
    spec = env.spec
    cfg = config
    rng = np.random.default_rng([cfg.seed, 11])
    sizes = (spec.obs_dim, *cfg.hidden, spec.action_count)
    online = [nm.Network.init(sizes, seed=cfg.seed * 1000 + i) for i in range(spec.n_agents)]
    target = list(online)
    opt = [nm.adam_init(n.params) for n in online]
    buffers = [_Replay(cfg.replay_capacity, spec.obs_dim) for _ in range(spec.n_agents)]
    select_seed = cfg.seed + 100_003
    best, best_score = None, None
    updates = 0
    curve = curve if curve is not None else []

    for ep in range(cfg.episodes):
        eps = cfg.epsilon(ep)
        state = env.reset(episode_seed(cfg.seed, ep))
        ep_reward = 0.0
        while True:
            alive = env.alive(state)
            obs = [env.observe(state, i).vector if alive[i] else None for i in range(spec.n_agents)]
            acts = []
            for i in range(spec.n_agents):
                if not alive[i]:
                    acts.append(0)
                elif rng.random() < eps:
                    acts.append(int(rng.integers(spec.action_count)))
                else:
                    acts.append(nm.argmax_first(online[i](obs[i])))
            res = env.step(state, acts)
            nxt_alive = env.alive(res.next_state)
            truncated = cfg.bootstrap_timeout and env.truncated(res)
            for i in range(spec.n_agents):
                if not alive[i]:
                    continue
                terminal = (res.done and not truncated) or not nxt_alive[i]
                o2 = None if terminal else env.observe(res.next_state, i).vector
                buffers[i].add(obs[i], acts[i], res.reward * cfg.reward_scale, o2, float(terminal))
            ep_reward += res.reward
            state = res.next_state

            if buffers[0].size >= cfg.batch_size:
                for i in range(spec.n_agents):
                    buf = buffers[i]
                    if buf.size < cfg.batch_size:
                        continue
                    idx = rng.integers(0, buf.size, size=cfg.batch_size)
                    q_next_online = online[i](buf.nxt[idx])
                    q_next_target = target[i](buf.nxt[idx])
                    a_star = np.argmax(q_next_online, axis=1)
                    boot = q_next_target[np.arange(cfg.batch_size), a_star]
                    y = buf.rew[idx] + cfg.gamma * (1.0 - buf.done[idx]) * boot
                    g = nm.grad(online[i].params, online[i].spec, buf.obs[idx],
                                nm.TableSquared(buf.act[idx], y))
                    grads = nm.clip_by_global_norm(g.d_params, cfg.grad_clip)
                    p, opt[i] = nm.adam_step(online[i].params, grads, opt[i], cfg.lr)
                    online[i] = online[i].with_params(p)
                updates += 1
                if updates % cfg.target_sync == 0:
                    target = list(online)
            if res.done:
                break

        if (ep + 1) % cfg.eval_every == 0 or ep + 1 == cfg.episodes:
            snap = VictimPolicy(spec.name, online)
            _, summary = rollout(env, snap, cfg.select_episodes, select_seed, keep_steps=False)
            score = _selection_score(summary)
            curve.append({"episode": ep + 1, "epsilon": eps, "train_reward": ep_reward,
                          "select_reward": summary.mean_reward,
                          "select_win_rate": summary.win_rate})
            log.info("victim ep %d eps %.3f select reward %.3f win %s", ep + 1, eps,
                     summary.mean_reward, summary.win_rate)
            if best_score is None or score > best_score:
                best, best_score = snap, score

    check_seed = cfg.seed + 200_003
    _, trained = rollout(env, best, cfg.check_episodes, check_seed, keep_steps=False)
    _, rand = random_rollout(env, cfg.check_episodes, check_seed)
    metrics = {"victim_mean_reward": trained.mean_reward, "random_mean_reward": rand.mean_reward,
               "victim_win_rate": trained.win_rate, "random_win_rate": rand.win_rate}
    if not trained.mean_reward > rand.mean_reward + cfg.margin:
        raise TrainingFailure("victim does not beat the random joint policy by the margin", metrics)
    if spec.has_win_flag and trained.win_rate < cfg.min_win_rate:
        raise TrainingFailure("victim win rate below the configured floor", metrics)
    best.train_metrics = metrics
    return best
