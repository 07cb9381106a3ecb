"""Adaptive selection of (adversary agent, malicious action) with discrete SAC.

The policy factorises as ``pi(i, a | s) = softmax(C1(s))[i] *
softmax(C2(s ++ onehot(i)))[a]``.  Twin critics output one value per
flattened pair ``i * |A| + a``, so the soft Bellman target and the policy
objective are exact sums over the joint support instead of sampled
estimates.
"""

from __future__ import annotations

import json
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import ndmath as nm
from .envs import episode_seed, make_env
from .errors import ConfigError, NumericError, ShapeError, TrainingFailure
from .perturber import CwConfig, PerturbBudget, cw_attack
from .victim import AttackHook, run_episode

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class AttackDecision:
    agent: int
    action: int


@dataclass(frozen=True)
class SelectorPolicy:
    c1: nm.Network
    c2: nm.Network
    n_agents: int
    action_count: int

    @property
    def state_dim(self):
        return self.c1.spec.in_dim

    @classmethod
    def init(cls, state_dim, n_agents, action_count, hidden=(64, 64), seed=0):
        c1 = nm.Network.init((state_dim, *hidden, n_agents), seed=seed * 1000 + 1)
        c2 = nm.Network.init((state_dim + n_agents, *hidden, action_count), seed=seed * 1000 + 2)
        return cls(c1, c2, n_agents, action_count)

    @classmethod
    def zeros(cls, state_dim, n_agents, action_count, hidden=(8,)):
        """A selector whose networks output all-zero logits (uniform policy)."""
        base = cls.init(state_dim, n_agents, action_count, hidden)
        return cls(base.c1.with_params(base.c1.params.zeros_like()),
                   base.c2.with_params(base.c2.params.zeros_like()), n_agents, action_count)

    def save(self, directory):
        directory = Path(directory)
        directory.mkdir(parents=True, exist_ok=True)
        nm.save_network(directory / "selector_c1.ckpt", self.c1, {"role": "agent_classifier"})
        nm.save_network(directory / "selector_c2.ckpt", self.c2, {"role": "action_classifier"})

    @classmethod
    def load(cls, directory):
        directory = Path(directory)
        c1, _ = nm.load_network(directory / "selector_c1.ckpt")
        c2, _ = nm.load_network(directory / "selector_c2.ckpt")
        return cls(c1, c2, c1.spec.out_dim, c2.spec.out_dim)


def _batch_states(selector, s):
    s = np.asarray(s, dtype=np.float64)
    single = s.ndim == 1
    sb = s[None, :] if single else s
    if sb.ndim != 2 or sb.shape[1] != selector.state_dim:
        raise ShapeError(f"state shape {s.shape}, expected (..., {selector.state_dim})")
    return sb, single


def _c2_inputs(sb, n):
    b = sb.shape[0]
    rep = np.repeat(sb, n, axis=0)
    onehot = np.tile(np.eye(n), (b, 1))
    return np.hstack([rep, onehot])


def _log_joint(selector, sb):
    """Log-probabilities of the joint distribution, shape (B, n, |A|), plus pieces."""
    n, k = selector.n_agents, selector.action_count
    l1, hs1 = nm.mlp_forward_cache(selector.c1.params, selector.c1.spec, sb)
    x2 = _c2_inputs(sb, n)
    l2, hs2 = nm.mlp_forward_cache(selector.c2.params, selector.c2.spec, x2)
    logp1 = nm.log_softmax(l1)
    logp2 = nm.log_softmax(l2).reshape(sb.shape[0], n, k)
    return logp1[:, :, None] + logp2, (logp1, logp2, hs1, hs2)


def joint_prob(selector, s):
    """n x |A| matrix of pi(i, a | s) (or a batch of them)."""
    sb, single = _batch_states(selector, s)
    logp, _ = _log_joint(selector, sb)
    p = np.exp(logp)
    return p[0] if single else p


def select(selector, s, rng=None, greedy=False):
    """Sample (i, a) hierarchically, or take the argmax of the joint in greedy mode."""
    sb, _ = _batch_states(selector, s)
    logp, (logp1, logp2, _, _) = _log_joint(selector, sb)
    if greedy:
        flat = int(np.argmax(logp[0].ravel()))
        return AttackDecision(flat // selector.action_count, flat % selector.action_count)
    p1 = np.exp(logp1[0])
    i = min(int(np.searchsorted(np.cumsum(p1), rng.random() * p1.sum(), side="right")),
            selector.n_agents - 1)
    p2 = np.exp(logp2[0, i])
    a = min(int(np.searchsorted(np.cumsum(p2), rng.random() * p2.sum(), side="right")),
            selector.action_count - 1)
    return AttackDecision(i, a)


def attack_reward(r):
    """The attacker is paid the negated team reward."""
    r = float(r)
    if not math.isfinite(r):
        raise NumericError(f"non-finite team reward {r}")
    return -r


# --------------------------------------------------------------------------
# critics and losses


@dataclass(frozen=True)
class TwinCritics:
    q1: nm.Network
    q2: nm.Network
    target1: nm.Network
    target2: nm.Network

    @classmethod
    def init(cls, state_dim, n_pairs, hidden=(64, 64), seed=0):
        q1 = nm.Network.init((state_dim, *hidden, n_pairs), seed=seed * 1000 + 11)
        q2 = nm.Network.init((state_dim, *hidden, n_pairs), seed=seed * 1000 + 12)
        return cls(q1, q2, q1, q2)

    def swapped(self):
        return TwinCritics(self.q2, self.q1, self.target2, self.target1)

    def save(self, directory):
        directory = Path(directory)
        directory.mkdir(parents=True, exist_ok=True)
        for name in ("q1", "q2", "target1", "target2"):
            nm.save_network(directory / f"critic_{name}.ckpt", getattr(self, name), {"role": name})

    @classmethod
    def load(cls, directory):
        directory = Path(directory)
        return cls(*(nm.load_network(directory / f"critic_{n}.ckpt")[0]
                     for n in ("q1", "q2", "target1", "target2")))


@dataclass(frozen=True)
class Transition:
    state: np.ndarray
    agent: int
    action: int
    reward: float
    next_state: np.ndarray
    done: bool


@dataclass
class Batch:
    states: np.ndarray
    agents: np.ndarray
    actions: np.ndarray
    rewards: np.ndarray
    next_states: np.ndarray
    dones: np.ndarray

    @classmethod
    def of(cls, transitions):
        return cls(np.array([t.state for t in transitions], dtype=np.float64),
                   np.array([t.agent for t in transitions], dtype=np.int64),
                   np.array([t.action for t in transitions], dtype=np.int64),
                   np.array([t.reward for t in transitions], dtype=np.float64),
                   np.array([t.next_state for t in transitions], dtype=np.float64),
                   np.array([t.done for t in transitions], dtype=np.float64))

    def flat_index(self, action_count):
        return self.agents * action_count + self.actions


class ReplayBuffer:
    """Fixed-capacity ring buffer; the oldest transition is evicted first."""

    def __init__(self, capacity, state_dim):
        if capacity < 1:
            raise ConfigError("replay capacity must be positive")
        self.capacity = int(capacity)
        self.states = np.zeros((capacity, state_dim))
        self.next_states = np.zeros((capacity, state_dim))
        self.agents = np.zeros(capacity, dtype=np.int64)
        self.actions = np.zeros(capacity, dtype=np.int64)
        self.rewards = np.zeros(capacity)
        self.dones = np.zeros(capacity)
        self.size = 0
        self.pos = 0
        self.total_added = 0

    def __len__(self):
        return self.size

    def add(self, tr):
        i = self.pos
        self.states[i] = tr.state
        self.next_states[i] = tr.next_state
        self.agents[i], self.actions[i] = tr.agent, tr.action
        self.rewards[i], self.dones[i] = tr.reward, float(tr.done)
        self.pos = (i + 1) % self.capacity
        self.size = min(self.size + 1, self.capacity)
        self.total_added += 1

    def oldest_index(self):
        return self.pos if self.size == self.capacity else 0

    def sample(self, batch_size, rng):
        idx = rng.integers(0, self.size, size=batch_size)
        return Batch(self.states[idx], self.agents[idx], self.actions[idx], self.rewards[idx],
                     self.next_states[idx], self.dones[idx])


def _min_q(net_a, net_b, states):
    return np.minimum(net_a(states), net_b(states))


def critic_target(batch, critics, selector, gamma, alpha, rng=None, sampled=False):
    """Soft Bellman target y for every transition in ``batch``.

    The expectation over the next (agent, action) pair is an exact sum over
    all n*|A| pairs weighted by the selector's joint distribution, unless
    ``sampled`` is set, in which case one pair is drawn per transition.
    """
    s2 = np.asarray(batch.next_states, dtype=np.float64)
    if s2.ndim != 2 or s2.shape[1] != selector.state_dim:
        raise ShapeError(f"next-state batch shape {s2.shape}")
    logp, _ = _log_joint(selector, s2)
    b = s2.shape[0]
    logp = logp.reshape(b, -1)
    qmin = _min_q(critics.target1, critics.target2, s2)
    if qmin.shape != logp.shape:
        raise ShapeError(f"critic outputs {qmin.shape[1]} values, selector has {logp.shape[1]} pairs")
    soft = qmin - alpha * logp
    if sampled:
        p = np.exp(logp)
        u = rng.random(b)[:, None]
        pick = np.minimum((np.cumsum(p, axis=1) < u).sum(axis=1), p.shape[1] - 1)
        value = soft[np.arange(b), pick]
    else:
        value = np.sum(np.exp(logp) * soft, axis=1)
    return np.asarray(batch.rewards) + gamma * (1.0 - np.asarray(batch.dones)) * value


def critic_loss(batch, q, y, action_count, with_grad=False):
    """Mean over the batch of 1/2 (Q(s, i, a) - y)^2; ``y`` is a constant."""
    states = np.asarray(batch.states, dtype=np.float64)
    head = nm.TableSquared(batch.flat_index(action_count), y)
    if with_grad:
        return nm.grad(q.params, q.spec, states, head)
    return nm.loss_value(q.params, q.spec, states, head)


@dataclass(frozen=True)
class PolicyLossResult:
    loss: float
    d_c1: nm.ParameterSet
    d_c2: nm.ParameterSet
    entropy: float


def policy_loss(states, selector, critics, alpha):
    """Batch mean of sum_{i,a} pi(i,a|s) (alpha log pi(i,a|s) - min(Q1, Q2)(s,i,a)).

    Critic values are constants; returns the value, gradients for both
    classifiers and the mean joint entropy.
    """
    sb = np.asarray(states, dtype=np.float64)
    if sb.ndim == 1:
        sb = sb[None, :]
    b = sb.shape[0]
    n, k = selector.n_agents, selector.action_count
    logp, (logp1, logp2, hs1, hs2) = _log_joint(selector, sb)
    q = _min_q(critics.q1, critics.q2, sb).reshape(b, n, k)
    pi = np.exp(logp)
    g = alpha * logp - q
    loss = float(np.mean(np.sum(pi * g, axis=(1, 2))))
    entropy = float(np.mean(-np.sum(pi * logp, axis=(1, 2))))

    w = g + alpha
    p1 = np.exp(logp1)
    p2 = np.exp(logp2)
    inner = np.sum(p2 * w, axis=2)                                   # (b, n)
    d_l1 = p1 * (inner - np.sum(p1 * inner, axis=1, keepdims=True))  # (b, n)
    d_l2 = p1[:, :, None] * p2 * (w - inner[:, :, None])             # (b, n, k)
    d_l1 /= b
    d_l2 /= b
    g1, _ = nm.mlp_backward(selector.c1.params, selector.c1.spec, hs1, d_l1)
    g2, _ = nm.mlp_backward(selector.c2.params, selector.c2.spec, hs2, d_l2.reshape(b * n, k))
    return PolicyLossResult(loss, nm.ParameterSet(g1, selector.c1.params.seed),
                            nm.ParameterSet(g2, selector.c2.params.seed), entropy)


# --------------------------------------------------------------------------
# the attack hook shared by training and evaluation


class AdaptiveAttackHook(AttackHook):
    """Select (i, a), craft the perturbation on proxy i, inject it into agent i's observation.

    ``gate`` (optional) is called once per step and returns whether to attack.
    When ``record`` is set, transitions are appended to ``self.transitions``.
    """

    def __init__(self, selector, proxies, budget, cw_config, rng=None, greedy=False,
                 gate=None, record=False):
        self.selector = selector
        self.proxies = proxies
        self.budget = budget
        self.cw = cw_config
        self.rng = rng
        self.greedy = greedy
        self.gate = gate
        self.record = record
        self.transitions = []
        self._pending = None
        self.cw_calls = 0
        self.cw_successes = 0

    def begin_episode(self, episode, state):
        self._pending = None
        if self.gate is not None and hasattr(self.gate, "begin_episode"):
            self.gate.begin_episode(episode)

    def perturb(self, env, state, observations, alive):
        self._pending = None
        self.env = env
        if self.gate is not None and not self.gate():
            return observations, []
        s = env.state_features(state)
        d = select(self.selector, s, self.rng, self.greedy)
        self._pending = (s, d)
        ann = {"kind": "observation", "agent": d.agent, "malicious_action": d.action,
               "injected": False}
        if alive[d.agent]:
            o = observations[d.agent]
            res = cw_attack(self.proxies[d.agent], o, d.action, self.budget, self.cw)
            observations[d.agent] = res.perturbed
            self.cw_calls += 1
            self.cw_successes += int(res.success_on_proxy)
            ann.update(injected=True, perturbed=res.perturbed, linf=res.linf, l2=res.l2,
                       proxy_success=res.success_on_proxy, iters=res.iters_used)
        return observations, [ann]

    def after_step(self, state, attacks, actions, result):
        if self.record and self._pending is not None:
            s, d = self._pending
            self.transitions.append((s, d.agent, d.action, attack_reward(result.reward),
                                     result.next_state, bool(result.done),
                                     self.env.truncated(result)))


# --------------------------------------------------------------------------
# training


@dataclass
class SacConfig:
    gamma: float = 0.99
    alpha: float = 0.05
    mu: float = 0.005
    replay_capacity: int = 100000
    batch_size: int = 64
    episodes: int = 300
    updates_per_step: float = 1.0
    warmup_steps: int = 256
    critic_lr: float = 1e-3
    policy_lr: float = 3e-4
    hidden: tuple = (64, 64)
    grad_clip: float = 10.0
    eval_every: int = 50
    eval_episodes: int = 10
    expectation: str = "exact"
    # the horizon cut is a truncation, not a terminal: bootstrap through it
    bootstrap_timeout: bool = True
    seed: int = 0

    def __post_init__(self):
        self.hidden = tuple(int(h) for h in self.hidden)
        if not 0.0 < self.gamma <= 1.0:
            raise ConfigError("sac.gamma must lie in (0, 1]")
        if self.alpha <= 0:
            raise ConfigError("sac.alpha must be positive")
        if not 0.0 <= self.mu <= 1.0:
            raise ConfigError("sac.mu must lie in [0, 1]")
        if self.expectation not in ("exact", "sampled"):
            raise ConfigError("sac.expectation must be 'exact' or 'sampled'")
        for name in ("replay_capacity", "batch_size", "episodes", "critic_lr", "policy_lr",
                     "eval_every", "eval_episodes"):
            if not getattr(self, name) > 0:
                raise ConfigError(f"sac.{name} must be positive")


@dataclass
class AttackerState:
    selector: SelectorPolicy
    critics: TwinCritics
    opt_q1: nm.AdamState
    opt_q2: nm.AdamState
    opt_c1: nm.AdamState
    opt_c2: nm.AdamState

    @classmethod
    def init(cls, state_dim, n_agents, action_count, cfg):
        sel = SelectorPolicy.init(state_dim, n_agents, action_count, cfg.hidden, cfg.seed)
        crit = TwinCritics.init(state_dim, n_agents * action_count, cfg.hidden, cfg.seed)
        return cls(sel, crit, nm.adam_init(crit.q1.params), nm.adam_init(crit.q2.params),
                   nm.adam_init(sel.c1.params), nm.adam_init(sel.c2.params))


def sac_update(st, batch, cfg, rng=None):
    """Critic steps for both twins, one policy step, then Polyak target updates."""
    k = st.selector.action_count
    y = critic_target(batch, st.critics, st.selector, cfg.gamma, cfg.alpha, rng,
                      sampled=cfg.expectation == "sampled")
    out = {}
    nets = {}
    for name, opt_name in (("q1", "opt_q1"), ("q2", "opt_q2")):
        net = getattr(st.critics, name)
        g = critic_loss(batch, net, y, k, with_grad=True)
        grads = nm.clip_by_global_norm(g.d_params, cfg.grad_clip)
        params, opt = nm.adam_step(net.params, grads, getattr(st, opt_name), cfg.critic_lr)
        nets[name] = net.with_params(params)
        setattr(st, opt_name, opt)
        out[f"J_{name}"] = g.loss
    critics = TwinCritics(nets["q1"], nets["q2"], st.critics.target1, st.critics.target2)
    pl = policy_loss(batch.states, st.selector, critics, cfg.alpha)
    g1 = nm.clip_by_global_norm(pl.d_c1, cfg.grad_clip)
    g2 = nm.clip_by_global_norm(pl.d_c2, cfg.grad_clip)
    p1, st.opt_c1 = nm.adam_step(st.selector.c1.params, g1, st.opt_c1, cfg.policy_lr)
    p2, st.opt_c2 = nm.adam_step(st.selector.c2.params, g2, st.opt_c2, cfg.policy_lr)
    st.selector = SelectorPolicy(st.selector.c1.with_params(p1), st.selector.c2.with_params(p2),
                                 st.selector.n_agents, st.selector.action_count)
    t1 = critics.target1.with_params(nm.polyak_update(critics.target1.params, critics.q1.params, cfg.mu))
    t2 = critics.target2.with_params(nm.polyak_update(critics.target2.params, critics.q2.params, cfg.mu))
    st.critics = TwinCritics(critics.q1, critics.q2, t1, t2)
    out["J_pi"] = pl.loss
    out["entropy"] = pl.entropy
    for v in out.values():
        if not math.isfinite(v):
            raise TrainingFailure("attacker losses diverged", out)
    return out


def evaluate_attacker(env, victim, selector, proxies, budget, cw, n_episodes, seed, greedy=True):
    hook = AdaptiveAttackHook(selector, proxies, budget, cw, np.random.default_rng([seed, 5]),
                              greedy=greedy)
    returns = []
    for e in range(n_episodes):
        ep = run_episode(env, victim, episode_seed(seed, e), e, hook, keep_steps=False)
        returns.append(-ep.total_reward)
    rate = hook.cw_successes / hook.cw_calls if hook.cw_calls else float("nan")
    return float(np.mean(returns)), rate


def train_attacker(env, victim, proxies, budget, cw_config, sac_config, curve=None):
    """Adaptive selection policy learning at a 100% perturbation rate.

    Each environment step samples (i, a), crafts and injects the perturbed
    observation, lets every agent act, and stores (s, i, a, -r, s').  After
    each episode the learner takes ``updates_per_step`` gradient steps per
    collected environment step: both critics, the policy, then both targets.
    """
    if victim is None or proxies is None:
        raise ConfigError("attacker training needs a victim and proxies")
    if isinstance(env, str):
        env = make_env(env)
    cfg = sac_config
    spec = env.spec
    curve = curve if curve is not None else []
    rng = np.random.default_rng([cfg.seed, 31])
    st = AttackerState.init(spec.state_dim, spec.n_agents, spec.action_count, cfg)
    buf = ReplayBuffer(cfg.replay_capacity, spec.state_dim)
    hook = AdaptiveAttackHook(st.selector, proxies, budget, cw_config, rng, record=True)
    eval_seed = cfg.seed + 300_007
    env_steps = 0
    pending_updates = 0.0
    last = {}
    for ep in range(cfg.episodes):
        hook.selector = st.selector
        hook.transitions = []
        episode = run_episode(env, victim, episode_seed(cfg.seed + 17, ep), ep, hook,
                              keep_steps=False)
        for s, i, a, r, s2, done, truncated in hook.transitions:
            done = done and not (cfg.bootstrap_timeout and truncated)
            buf.add(Transition(s, i, a, r, env.state_features(s2), done))
        n_new = len(hook.transitions)
        env_steps += n_new
        if len(buf) >= max(cfg.warmup_steps, cfg.batch_size):
            pending_updates += cfg.updates_per_step * n_new
            while pending_updates >= 1.0:
                last = sac_update(st, buf.sample(cfg.batch_size, rng), cfg, rng)
                pending_updates -= 1.0
        if (ep + 1) % cfg.eval_every == 0 or ep + 1 == cfg.episodes:
            ret, rate = evaluate_attacker(env, victim, st.selector, proxies, budget, cw_config,
                                          cfg.eval_episodes, eval_seed)
            row = {"episode": ep + 1, "env_steps": env_steps, "attacker_return": ret,
                   "train_return": -episode.total_reward,
                   "J_q1": last.get("J_q1", float("nan")), "J_q2": last.get("J_q2", float("nan")),
                   "J_pi": last.get("J_pi", float("nan")), "entropy": last.get("entropy", float("nan")),
                   "cw_success_rate": rate}
            curve.append(row)
            log.info("attacker ep %d steps %d eval return %.3f cw %.3f", ep + 1, env_steps, ret, rate)
    st.replay = buf
    return st
