"""Per-agent proxy policies imitating the victim through adversarial imitation.

For every agent there is a generator (the proxy policy, observation ->
action logits) and a discriminator scoring (observation, one-hot action)
pairs.  The discriminator minimises binary cross-entropy between expert and
proxy pairs; the generator takes REINFORCE steps on the imitation reward
``-log(1 - D(o, a))`` with a moving-average baseline.  An optional
behaviour-cloning warm start precedes the adversarial phase.

Only the victim's query surface (``act`` / ``act_batch``) and clean rollouts
are used here.  Optionally the expert set is widened with jittered copies of
its observations, labelled by querying the victim, so the proxy also learns
the victim's decisions inside the perturbation budget.
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import ndmath as nm
from .envs import episode_seed, make_env
from .errors import ArgumentError, ConfigError, TrainingFailure
from .victim import rollout

log = logging.getLogger(__name__)


@dataclass
class ExpertDataset:
    env_name: str
    train_obs: list
    train_act: list
    heldout_obs: list
    heldout_act: list
    train_episodes: list
    heldout_episodes: list

    @property
    def n_agents(self):
        return len(self.train_obs)

    def save(self, path):
        entries = {}
        for i in range(self.n_agents):
            entries[f"train_obs_{i}"] = self.train_obs[i]
            entries[f"train_act_{i}"] = self.train_act[i].astype(np.float64)
            entries[f"heldout_obs_{i}"] = self.heldout_obs[i]
            entries[f"heldout_act_{i}"] = self.heldout_act[i].astype(np.float64)
        meta = {"env": self.env_name, "train_episodes": list(self.train_episodes),
                "heldout_episodes": list(self.heldout_episodes), "n_agents": self.n_agents}
        return nm.save_checkpoint(path, nm.ParameterSet(entries), meta)

    @classmethod
    def load(cls, path):
        params, meta = nm.load_checkpoint(path)
        n = meta["n_agents"]
        get = lambda k: np.array(params[k])  # noqa: E731
        return cls(meta["env"],
                   [get(f"train_obs_{i}") for i in range(n)],
                   [get(f"train_act_{i}").astype(np.int64) for i in range(n)],
                   [get(f"heldout_obs_{i}") for i in range(n)],
                   [get(f"heldout_act_{i}").astype(np.int64) for i in range(n)],
                   meta["train_episodes"], meta["heldout_episodes"])


def _stack(rows, dim):
    return np.array(rows, dtype=np.float64).reshape(-1, dim)


def collect_expert(env, victim, n_episodes, seed, holdout_frac=0.2):
    """Clean victim rollouts split into train / held-out sets by episode."""
    if isinstance(env, str):
        env = make_env(env)
    if n_episodes < 1:
        raise ArgumentError("need at least one expert episode")
    if not 0.0 <= holdout_frac < 1.0:
        raise ArgumentError("holdout_frac must lie in [0, 1)")
    logs, _ = rollout(env, victim, n_episodes, seed)
    order = np.random.default_rng([int(seed), 3]).permutation(n_episodes)
    n_hold = int(round(holdout_frac * n_episodes))
    held = sorted(int(e) for e in order[:n_hold])
    train = sorted(int(e) for e in order[n_hold:])
    n, d = env.spec.n_agents, env.spec.obs_dim

    def gather(episodes):
        obs = [[] for _ in range(n)]
        act = [[] for _ in range(n)]
        for e in episodes:
            for step in logs[e].steps:
                for i in range(n):
                    if step.alive[i]:
                        obs[i].append(step.observations[i])
                        act[i].append(step.actions[i])
        return ([_stack(o, d) for o in obs], [np.array(a, dtype=np.int64) for a in act])

    tr_o, tr_a = gather(train)
    ho_o, ho_a = gather(held)
    return ExpertDataset(env.spec.name, tr_o, tr_a, ho_o, ho_a, train, held)


def query_neighbourhood(expert, victim, copies, radius, seed=0):
    """Add ``copies`` uniformly jittered versions of each training observation, labelled by
    querying the victim.  The jitter stays in the observation box [-1, 1]."""
    if copies < 1 or radius <= 0:
        return expert
    rng = np.random.default_rng([int(seed), 22])
    obs, act = [], []
    for i in range(expert.n_agents):
        o = expert.train_obs[i]
        new_o, new_a = [o], [expert.train_act[i]]
        for _ in range(copies):
            x = np.clip(o + rng.uniform(-radius, radius, o.shape), -1.0, 1.0)
            new_o.append(x)
            new_a.append(np.asarray(victim.act_batch(i, x), dtype=np.int64))
        obs.append(np.vstack(new_o))
        act.append(np.concatenate(new_a))
    return ExpertDataset(expert.env_name, obs, act, expert.heldout_obs, expert.heldout_act,
                         expert.train_episodes, expert.heldout_episodes)


def agreement(proxy, victim, agent, observations):
    """Fraction of observations on which the proxy's argmax equals the victim's action."""
    obs = np.asarray(observations, dtype=np.float64)
    if obs.ndim != 2 or obs.shape[0] == 0:
        raise ArgumentError("agreement needs a non-empty set of observations")
    proxy_actions = np.argmax(proxy(obs), axis=1)
    victim_actions = victim.act_batch(agent, obs)
    return float(np.mean(proxy_actions == victim_actions))


# --------------------------------------------------------------------------
# GAIL pieces


def disc_input(obs, actions, action_count):
    obs = np.atleast_2d(np.asarray(obs, dtype=np.float64))
    onehot = np.zeros((obs.shape[0], action_count))
    onehot[np.arange(obs.shape[0]), np.asarray(actions, dtype=np.int64)] = 1.0
    return np.hstack([obs, onehot])


def disc_score(disc, obs, actions, action_count):
    """D(o, a) in (0, 1)."""
    return nm.sigmoid(disc(disc_input(obs, actions, action_count))[:, 0])


def imitation_reward(disc, obs, actions, action_count):
    """-log(1 - D(o, a)), computed stably as softplus of the logit."""
    z = disc(disc_input(obs, actions, action_count))[:, 0]
    return np.logaddexp(0.0, z)


def discriminator_loss(disc, expert_batch, proxy_batch, action_count):
    head, x = _disc_head(expert_batch, proxy_batch, action_count)
    return nm.loss_value(disc.params, disc.spec, x, head)


def _disc_head(expert_batch, proxy_batch, action_count):
    eo, ea = expert_batch
    po, pa = proxy_batch
    ne, npx = len(ea), len(pa)
    if ne == 0 or npx == 0:
        raise ArgumentError("discriminator update needs non-empty expert and proxy batches")
    x = np.vstack([disc_input(eo, ea, action_count), disc_input(po, pa, action_count)])
    labels = np.concatenate([np.ones(ne), np.zeros(npx)])
    weights = np.concatenate([np.full(ne, 1.0 / ne), np.full(npx, 1.0 / npx)])
    return nm.SigmoidCrossEntropy(labels, weights), x


def discriminator_update(disc, opt_state, expert_batch, proxy_batch, action_count, lr):
    """One Adam step on -mean log D(expert) - mean log(1 - D(proxy)).

    Returns ``(disc', opt_state', loss_before_step)``.
    """
    head, x = _disc_head(expert_batch, proxy_batch, action_count)
    g = nm.grad(disc.params, disc.spec, x, head)
    params, opt_state = nm.adam_step(disc.params, g.d_params, opt_state, lr)
    return disc.with_params(params), opt_state, g.loss


def generator_update(proxy, opt_state, disc, batch, action_count, lr, baseline,
                     entropy_coef=0.0, baseline_rate=0.1):
    """One REINFORCE step on the imitation reward.

    ``batch`` is ``(observations, actions)`` gathered with the proxy acting.
    Returns ``(proxy', opt_state', baseline', diagnostics)``.
    """
    obs, acts = batch
    if len(acts) == 0:
        raise ArgumentError("generator update needs a non-empty rollout batch")
    r = imitation_reward(disc, obs, acts, action_count)
    mean_r = float(np.mean(r))
    if baseline is None:
        baseline = mean_r
    head = nm.WeightedLogProb(acts, r - baseline, entropy_coef)
    g = nm.grad(proxy.params, proxy.spec, np.asarray(obs), head)
    params, opt_state = nm.adam_step(proxy.params, g.d_params, opt_state, lr)
    baseline = (1.0 - baseline_rate) * baseline + baseline_rate * mean_r
    return proxy.with_params(params), opt_state, baseline, {"mean_imitation_reward": mean_r,
                                                             "surrogate_loss": g.loss}


def bc_epoch(proxy, opt_state, obs, acts, lr, batch_size, rng):
    n = len(acts)
    order = rng.permutation(n)
    for start in range(0, n, batch_size):
        idx = order[start:start + batch_size]
        g = nm.grad(proxy.params, proxy.spec, obs[idx], nm.CrossEntropy(acts[idx]))
        params, opt_state = nm.adam_step(proxy.params, g.d_params, opt_state, lr)
        proxy = proxy.with_params(params)
    return proxy, opt_state


def cross_entropy(proxy, obs, acts):
    return nm.loss_value(proxy.params, proxy.spec, obs, nm.CrossEntropy(acts))


# --------------------------------------------------------------------------
# training driver


@dataclass
class ProxyTrainConfig:
    hidden: tuple = (64, 64)
    disc_hidden: tuple = (64,)
    bc_epochs: int = 15
    bc_lr: float = 1e-3
    bc_batch: int = 64
    gail_epochs: int = 5
    gail_rollouts: int = 4
    disc_lr: float = 1e-3
    gen_lr: float = 1e-4
    entropy_coef: float = 0.0
    # victim-labelled jitter around expert observations (0 = expert pairs only)
    query_copies: int = 0
    query_radius: float = 0.3
    min_agreement: float = 0.85
    seed: int = 0

    def __post_init__(self):
        self.hidden = tuple(int(h) for h in self.hidden)
        self.disc_hidden = tuple(int(h) for h in self.disc_hidden)
        if self.bc_epochs < 0 or self.gail_epochs < 0:
            raise ConfigError("epoch counts must be non-negative")
        if self.query_copies < 0 or self.query_radius < 0:
            raise ConfigError("query_copies and query_radius must be non-negative")
        if self.gail_rollouts < 1 or self.bc_batch < 1:
            raise ConfigError("gail_rollouts and bc_batch must be positive")
        if not 0.0 <= self.min_agreement <= 1.0:
            raise ConfigError("min_agreement must lie in [0, 1]")


class ProxyPolicy:
    """White-box stand-ins for the victim agents."""

    def __init__(self, env_name, nets, discs=None):
        self.env_name = env_name
        self.nets = list(nets)
        self.discs = list(discs) if discs is not None else None

    def __getitem__(self, agent):
        return self.nets[agent]

    def __len__(self):
        return len(self.nets)

    def act(self, agent, obs):
        return nm.argmax_first(self.nets[agent](obs))

    def save(self, directory):
        directory = Path(directory)
        directory.mkdir(parents=True, exist_ok=True)
        files = {"proxies": [], "discriminators": []}
        for i, net in enumerate(self.nets):
            nm.save_network(directory / f"proxy_{i}.ckpt", net, {"role": "proxy", "agent": i})
            files["proxies"].append(f"proxy_{i}.ckpt")
        for i, disc in enumerate(self.discs or []):
            nm.save_network(directory / f"disc_{i}.ckpt", disc, {"role": "discriminator", "agent": i})
            files["discriminators"].append(f"disc_{i}.ckpt")
        manifest = {"format": "adapam-proxy-1", "env": self.env_name, **files}
        (directory / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
        return directory

    @classmethod
    def load(cls, directory):
        directory = Path(directory)
        manifest = json.loads((directory / "manifest.json").read_text())
        nets = [nm.load_network(directory / f)[0] for f in manifest["proxies"]]
        discs = [nm.load_network(directory / f)[0] for f in manifest["discriminators"]] or None
        return cls(manifest["env"], nets, discs)


def _proxy_rollouts(env, victim, proxy, agent, n_episodes, seed, rng):
    """Episodes where ``agent`` samples from the proxy and the rest follow the victim."""
    obs, acts = [], []
    n = env.spec.n_agents
    for e in range(n_episodes):
        state = env.reset(episode_seed(seed, e))
        while True:
            alive = env.alive(state)
            joint = []
            for i in range(n):
                if not alive[i]:
                    joint.append(0)
                    continue
                o = env.observe(state, i).vector
                if i == agent:
                    p = nm.softmax(proxy(o))
                    a = int(rng.choice(len(p), p=p))
                    obs.append(o)
                    acts.append(a)
                else:
                    a = victim.act(i, o)
                joint.append(a)
            res = env.step(state, joint)
            state = res.next_state
            if res.done:
                break
    return np.array(obs).reshape(-1, env.spec.obs_dim), np.array(acts, dtype=np.int64)


def train_magail(env, victim, expert, config, curve=None):
    """Behaviour-cloning warm start then alternating discriminator/generator steps.

    ``curve`` (a list) receives one row per epoch: BC rows carry the training
    cross-entropy, adversarial rows the discriminator loss, mean imitation
    reward and held-out agreement per agent.
    """
    if isinstance(env, str):
        env = make_env(env)
    spec = env.spec
    cfg = config
    n, k = spec.n_agents, spec.action_count
    curve = curve if curve is not None else []
    expert = query_neighbourhood(expert, victim, cfg.query_copies, cfg.query_radius, cfg.seed)
    rng = np.random.default_rng([cfg.seed, 21])
    proxies = [nm.Network.init((spec.obs_dim, *cfg.hidden, k), seed=cfg.seed * 1000 + 500 + i)
               for i in range(n)]
    discs = [nm.Network.init((spec.obs_dim + k, *cfg.disc_hidden, 1), seed=cfg.seed * 1000 + 700 + i)
             for i in range(n)]
    p_opt = [nm.adam_init(p.params) for p in proxies]
    d_opt = [nm.adam_init(d.params) for d in discs]

    for epoch in range(cfg.bc_epochs):
        row = {"phase": "bc", "epoch": epoch + 1}
        for i in range(n):
            proxies[i], p_opt[i] = bc_epoch(proxies[i], p_opt[i], expert.train_obs[i],
                                            expert.train_act[i], cfg.bc_lr, cfg.bc_batch, rng)
            row[f"bc_loss_{i}"] = cross_entropy(proxies[i], expert.train_obs[i], expert.train_act[i])
            row[f"agreement_{i}"] = agreement(proxies[i], victim, i, expert.heldout_obs[i])
        curve.append(row)

    g_opt = [nm.adam_init(p.params) for p in proxies]
    baselines = [None] * n
    for epoch in range(cfg.gail_epochs):
        row = {"phase": "gail", "epoch": epoch + 1}
        for i in range(n):
            rollout_seed = int(rng.integers(2**31))
            batch = _proxy_rollouts(env, victim, proxies[i], i, cfg.gail_rollouts, rollout_seed, rng)
            if len(batch[1]) == 0:
                continue
            pick = rng.integers(0, len(expert.train_act[i]), size=len(batch[1]))
            expert_batch = (expert.train_obs[i][pick], expert.train_act[i][pick])
            discs[i], d_opt[i], d_loss = discriminator_update(discs[i], d_opt[i], expert_batch,
                                                              batch, k, cfg.disc_lr)
            proxies[i], g_opt[i], baselines[i], diag = generator_update(
                proxies[i], g_opt[i], discs[i], batch, k, cfg.gen_lr, baselines[i],
                cfg.entropy_coef)
            row[f"disc_loss_{i}"] = d_loss
            row[f"imitation_reward_{i}"] = diag["mean_imitation_reward"]
            row[f"agreement_{i}"] = agreement(proxies[i], victim, i, expert.heldout_obs[i])
        curve.append(row)
        log.info("gail epoch %d %s", epoch + 1,
                 {key: round(v, 4) for key, v in row.items() if key.startswith("agreement")})

    final = {f"agreement_{i}": agreement(proxies[i], victim, i, expert.heldout_obs[i])
             for i in range(n)}
    result = ProxyPolicy(spec.name, proxies, discs)
    result.final_agreement = final
    if min(final.values()) < cfg.min_agreement:
        raise TrainingFailure("proxy agreement below the configured floor", final)
    return result
