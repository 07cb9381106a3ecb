"""Attack-time orchestration, baselines, and the three evaluation axes.

Methods share one per-step Bernoulli gate whose random stream depends only
on (seed, episode), so every method sees the same candidate attack steps for
as long as the episodes stay in lockstep.
"""

from __future__ import annotations

import csv
import gzip
import io
import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
from scipy import stats

from . import ndmath as nm
from .envs import GlobalState, episode_seed, make_env
from .errors import ArgumentError, ConfigError, ShapeError
from .perturber import CwConfig, PerturbBudget, cw_attack
from .selector import AdaptiveAttackHook
from .victim import AttackHook, run_episode, summarize

METHODS = ("none", "adapam", "random_all", "fixed_targeted", "direct_control")


@dataclass(frozen=True)
class AttackRunConfig:
    method: str
    rate: float = 1.0
    episodes: int = 100
    seed: int = 0
    epsilon: float = 0.3
    cw: CwConfig = CwConfig()
    greedy: bool = True

    def __post_init__(self):
        if self.method not in METHODS:
            raise ConfigError(f"unknown attack method {self.method!r}; choose from {METHODS}")
        if not 0.0 <= self.rate <= 1.0:
            raise ConfigError("perturbation rate must lie in [0, 1]")
        if self.episodes < 1:
            raise ConfigError("episodes must be positive")


class BernoulliGate:
    """Fires with probability ``rate`` at each step; replayable from (seed, episode)."""

    def __init__(self, rate, seed):
        self.rate = float(rate)
        self.seed = int(seed)
        self.rng = None

    def begin_episode(self, episode):
        self.rng = np.random.default_rng([self.seed, int(episode), 11])

    def __call__(self):
        return bool(self.rng.random() < self.rate)

    def replay(self, episode, n_steps):
        rng = np.random.default_rng([self.seed, int(episode), 11])
        return rng.random(n_steps) < self.rate


class _GatedHook(AttackHook):
    def __init__(self, gate):
        self.gate = gate

    def begin_episode(self, episode, state):
        self.gate.begin_episode(episode)
        self.episode = episode


class RandomAllHook(_GatedHook):
    """Uniform(-eps, eps) noise on every living agent's observation, clipped to the box."""

    def __init__(self, gate, budget, seed):
        super().__init__(gate)
        self.budget = budget
        self.seed = seed

    def begin_episode(self, episode, state):
        super().begin_episode(episode, state)
        self.rng = np.random.default_rng([self.seed, int(episode), 12])

    def perturb(self, env, state, observations, alive):
        if not self.gate():
            return observations, []
        attacks = []
        for i, o in enumerate(observations):
            if not alive[i]:
                continue
            noise = self.rng.uniform(-self.budget.epsilon, self.budget.epsilon, size=o.shape)
            p = self.budget.project(o, o + noise)
            observations[i] = p
            d = p - o
            attacks.append({"kind": "observation", "agent": i, "malicious_action": None,
                            "injected": True, "perturbed": p, "linf": float(np.abs(d).max()),
                            "l2": float(np.sqrt(d @ d))})
        return observations, attacks


class FixedTargetedHook(_GatedHook):
    """Always agent 0; target = proxy-0's least-likely action on the clean observation."""

    def __init__(self, gate, proxies, budget, cw_config):
        super().__init__(gate)
        self.proxy = proxies[0]
        self.budget = budget
        self.cw = cw_config

    def perturb(self, env, state, observations, alive):
        if not self.gate():
            return observations, []
        if not alive[0]:
            return observations, [{"kind": "observation", "agent": 0, "malicious_action": None,
                                   "injected": False}]
        o = observations[0]
        target = int(np.argmin(self.proxy(o)))
        res = cw_attack(self.proxy, o, target, self.budget, self.cw)
        observations[0] = res.perturbed
        return observations, [{"kind": "observation", "agent": 0, "malicious_action": target,
                               "injected": True, "perturbed": res.perturbed, "linf": res.linf,
                               "l2": res.l2, "proxy_success": res.success_on_proxy,
                               "iters": res.iters_used}]


class DirectControlHook(_GatedHook):
    """Overrides agent 0's executed action with a uniformly random one."""

    def __init__(self, gate, seed):
        super().__init__(gate)
        self.seed = seed
        self._fire = False

    def begin_episode(self, episode, state):
        super().begin_episode(episode, state)
        self.rng = np.random.default_rng([self.seed, int(episode), 13])

    def perturb(self, env, state, observations, alive):
        self._fire = self.gate()
        if not self._fire:
            return observations, []
        ann = {"kind": "action", "agent": 0, "malicious_action": None, "injected": False}
        return observations, [ann]

    def override(self, env, state, actions, attacks):
        if not self._fire:
            return actions
        a = int(self.rng.integers(env.spec.action_count))
        ann = attacks[0]
        if env.alive(state)[0]:
            actions[0] = a
            ann.update(malicious_action=a, injected=True, victim_success=True)
        return actions


def make_hook(env, method, config, selector=None, proxies=None):
    budget = PerturbBudget(config.epsilon)
    gate = BernoulliGate(config.rate, config.seed)
    if method == "none":
        return None
    if method == "adapam":
        if selector is None or proxies is None:
            raise ConfigError("adapam needs a trained selector and proxies")
        return AdaptiveAttackHook(selector, proxies, budget, config.cw,
                                  rng=np.random.default_rng([config.seed, 14]),
                                  greedy=config.greedy, gate=gate)
    if method == "random_all":
        return RandomAllHook(gate, budget, config.seed)
    if method == "fixed_targeted":
        if proxies is None:
            raise ConfigError("fixed_targeted needs trained proxies")
        return FixedTargetedHook(gate, proxies, budget, config.cw)
    if method == "direct_control":
        return DirectControlHook(gate, config.seed)
    raise ConfigError(f"unknown attack method {method!r}")


# --------------------------------------------------------------------------
# summaries


@dataclass
class RunSummary:
    method: str
    rate: float
    epsilon: float
    seed: int
    n_episodes: int
    mean_reward: float
    stderr_reward: float
    win_rate: float | None
    mean_length: float
    n_attack_steps: int
    n_injected: int
    proxy_success_rate: float | None
    victim_success_rate: float | None
    episode_rewards: list = field(repr=False)
    episode_wins: list = field(repr=False)

    def as_dict(self):
        return asdict(self)


def _rate(flags):
    return float(np.mean(flags)) if flags else None


def summarize_run(logs, method, rate, epsilon, seed):
    """Aggregates recomputed from per-episode records."""
    base = summarize(logs)
    attack_steps = injected = 0
    proxy_flags, victim_flags = [], []
    for ep in logs:
        for step in ep.steps:
            if step.attacks:
                attack_steps += 1
            for a in step.attacks:
                if a.get("injected"):
                    injected += 1
                    if "proxy_success" in a:
                        proxy_flags.append(bool(a["proxy_success"]))
                    if a.get("malicious_action") is not None and "victim_success" in a:
                        victim_flags.append(bool(a["victim_success"]))
    return RunSummary(method, float(rate), float(epsilon), int(seed), base.n_episodes,
                      base.mean_reward, base.stderr_reward, base.win_rate, base.mean_length,
                      attack_steps, injected, _rate(proxy_flags), _rate(victim_flags),
                      [float(e.total_reward) for e in logs],
                      [None if e.win is None else bool(e.win) for e in logs])


@dataclass
class RunResult:
    logs: list
    summary: RunSummary


def run_attack(env, victim, config, selector=None, proxies=None):
    """Roll out ``config.episodes`` episodes under the chosen attack method."""
    if isinstance(env, str):
        env = make_env(env)
    hook = make_hook(env, config.method, config, selector, proxies)
    logs = [run_episode(env, victim, episode_seed(config.seed, e), e, hook)
            for e in range(config.episodes)]
    return RunResult(logs, summarize_run(logs, config.method, config.rate, config.epsilon,
                                         config.seed))


# --------------------------------------------------------------------------
# stealth


def linf_distance(o, o_tilde):
    o = np.asarray(o, dtype=np.float64)
    o_tilde = np.asarray(o_tilde, dtype=np.float64)
    if o.shape != o_tilde.shape:
        raise ShapeError(f"length mismatch {o.shape} vs {o_tilde.shape}")
    return float(np.abs(o_tilde - o).max(initial=0.0))


@dataclass
class StealthReport:
    method: str
    epsilon: float
    n: int
    mean_linf: float
    median_linf: float
    p95_linf: float
    max_linf: float
    mean_l2: float
    within_budget: bool
    n_nonzero: int = 0
    mean_linf_nonzero: float = 0.0

    def as_dict(self):
        return asdict(self)


def stealth(logs, method, epsilon, tol=1e-12):
    """L-inf / L2 statistics over every injected observation perturbation.

    Injections that leave the observation unchanged (the victim already takes
    the chosen action) count with distance 0; ``mean_linf_nonzero`` excludes them.
    """
    linf, l2 = [], []
    for ep in logs:
        for step in ep.steps:
            for a in step.attacks:
                if a.get("injected") and a.get("kind") == "observation":
                    o = step.observations[a["agent"]]
                    linf.append(linf_distance(o, a["perturbed"]))
                    d = np.asarray(a["perturbed"]) - o
                    l2.append(float(np.sqrt(d @ d)))
    if not linf:
        return StealthReport(method, epsilon, 0, 0.0, 0.0, 0.0, 0.0, 0.0, True)
    arr = np.array(linf)
    moved = arr[arr > 0]
    return StealthReport(method, float(epsilon), len(arr), float(arr.mean()), float(np.median(arr)),
                         float(np.percentile(arr, 95)), float(arr.max()), float(np.mean(l2)),
                         bool(arr.max() <= epsilon + tol), len(moved),
                         float(moved.mean()) if len(moved) else 0.0)


# --------------------------------------------------------------------------
# detection


@dataclass(frozen=True)
class DetectorConfig:
    hidden: tuple = (64,)
    epochs: int = 30
    lr: float = 3e-3
    batch_size: int = 64
    val_frac: float = 0.25
    percentile: float = 5.0
    min_episodes: int = 10
    seed: int = 0

    def __post_init__(self):
        if not 0.0 < self.val_frac < 1.0:
            raise ConfigError("detector val_frac must lie in (0, 1)")
        if not 0.0 < self.percentile < 100.0:
            raise ConfigError("detector percentile must lie in (0, 100)")
        if self.epochs < 1 or self.batch_size < 1 or self.min_episodes < 2:
            raise ConfigError("detector epochs, batch_size must be positive and min_episodes >= 2")


@dataclass
class Detector:
    env_name: str
    nets: list
    tau: float
    val_fp_rate: float
    val_accuracy: list

    def scores(self, agent, features, actions):
        p = nm.softmax(self.nets[agent](np.atleast_2d(features)))
        return p[np.arange(p.shape[0]), np.asarray(actions, dtype=np.int64)]

    def save(self, directory):
        directory = Path(directory)
        directory.mkdir(parents=True, exist_ok=True)
        for i, net in enumerate(self.nets):
            nm.save_network(directory / f"detector_{i}.ckpt", net, {"role": "detector", "agent": i})
        manifest = {"format": "adapam-detector-1", "env": self.env_name, "tau": self.tau,
                    "val_fp_rate": self.val_fp_rate, "val_accuracy": self.val_accuracy,
                    "n_agents": len(self.nets)}
        (directory / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")

    @classmethod
    def load(cls, directory):
        directory = Path(directory)
        m = json.loads((directory / "manifest.json").read_text())
        nets = [nm.load_network(directory / f"detector_{i}.ckpt")[0] for i in range(m["n_agents"])]
        return cls(m["env"], nets, m["tau"], m["val_fp_rate"], m["val_accuracy"])


def _pairs(env, logs, agent):
    x, y = [], []
    for ep in logs:
        for step in ep.steps:
            if step.alive[agent]:
                x.append(env.state_features(GlobalState(np.asarray(step.state), step.t)))
                y.append(step.actions[agent])
    return (np.array(x, dtype=np.float64).reshape(-1, env.spec.state_dim),
            np.array(y, dtype=np.int64))


def train_detector(env, clean_logs, config=DetectorConfig()):
    """Per-agent state -> action classifiers; tau = low percentile of held-out clean scores."""
    if isinstance(env, str):
        env = make_env(env)
    if len(clean_logs) < config.min_episodes:
        raise ArgumentError(f"detector needs at least {config.min_episodes} clean episodes")
    if any(not ep.steps for ep in clean_logs):
        raise ArgumentError("clean logs must keep their steps")
    rng = np.random.default_rng([config.seed, 41])
    order = rng.permutation(len(clean_logs))
    n_val = max(1, int(round(config.val_frac * len(clean_logs))))
    val = [clean_logs[i] for i in sorted(order[:n_val])]
    train = [clean_logs[i] for i in sorted(order[n_val:])]
    spec = env.spec
    nets, val_scores, accuracy = [], [], []
    for i in range(spec.n_agents):
        x, y = _pairs(env, train, i)
        xv, yv = _pairs(env, val, i)
        net = nm.Network.init((spec.state_dim, *config.hidden, spec.action_count),
                              seed=config.seed * 1000 + 900 + i)
        if len(y) == 0:
            raise ArgumentError(f"no clean training pairs for agent {i}")
        opt = nm.adam_init(net.params)
        for _ in range(config.epochs):
            perm = rng.permutation(len(y))
            for start in range(0, len(y), config.batch_size):
                idx = perm[start:start + config.batch_size]
                g = nm.grad(net.params, net.spec, x[idx], nm.CrossEntropy(y[idx]))
                params, opt = nm.adam_step(net.params, g.d_params, opt, config.lr)
                net = net.with_params(params)
        nets.append(net)
        if len(yv):
            p = nm.softmax(net(xv))
            val_scores.append(p[np.arange(len(yv)), yv])
            accuracy.append(float(np.mean(np.argmax(p, axis=1) == yv)))
        else:
            accuracy.append(float("nan"))
    pooled = np.concatenate(val_scores)
    tau = float(np.percentile(pooled, config.percentile))
    fp = float(np.mean(pooled < tau))
    return Detector(spec.name, nets, tau, fp, accuracy)


@dataclass
class DetectionReport:
    method: str
    tau: float
    tp: int
    fp: int
    fn: int
    tn: int
    precision: float
    recall: float
    f1: float

    def as_dict(self):
        return asdict(self)


def confusion_f1(tp, fp, fn):
    precision = tp / (tp + fp) if tp + fp else 0.0
    recall = tp / (tp + fn) if tp + fn else 0.0
    f1 = 2 * precision * recall / (precision + recall) if precision + recall else 0.0
    return precision, recall, f1


def detect(detector, env, logs, method=""):
    """Flag (agent, t) pairs whose executed action scores below tau; F1 against attack truth.

    Positives are the living agents whose observation was perturbed, or whose
    action was overridden, at that step.  With no positives F1 is 0.
    """
    if isinstance(env, str):
        env = make_env(env)
    tp = fp = fn = tn = 0
    for ep in logs:
        if not ep.steps:
            raise ArgumentError("detection needs episode logs with steps and attack annotations")
        feats = np.array([env.state_features(GlobalState(np.asarray(s.state), s.t)) for s in ep.steps])
        for i in range(env.spec.n_agents):
            rows = [k for k, s in enumerate(ep.steps) if s.alive[i]]
            if not rows:
                continue
            acts = [ep.steps[k].actions[i] for k in rows]
            flagged = detector.scores(i, feats[rows], acts) < detector.tau
            for k, flag in zip(rows, flagged):
                attacks = ep.steps[k].attacks
                if attacks is None:
                    raise ArgumentError("episode log lacks attack annotations")
                truth = any(a["agent"] == i and a.get("injected") for a in attacks)
                if truth and flag:
                    tp += 1
                elif truth:
                    fn += 1
                elif flag:
                    fp += 1
                else:
                    tn += 1
    precision, recall, f1 = confusion_f1(tp, fp, fn)
    return DetectionReport(method, detector.tau, tp, fp, fn, tn, precision, recall, f1)


# --------------------------------------------------------------------------
# statistics and sweeps


def mean_stderr(values):
    v = np.asarray(values, dtype=np.float64)
    if len(v) == 0:
        return float("nan"), float("nan")
    se = float(v.std(ddof=1) / math.sqrt(len(v))) if len(v) > 1 else 0.0
    return float(v.mean()), se


def one_sided_greater(a, b):
    """Paired one-sided t-test p-value for H1: mean(a - b) < 0.

    Small values mean ``a`` is significantly below ``b``.
    """
    d = np.asarray(a, dtype=np.float64) - np.asarray(b, dtype=np.float64)
    if len(d) < 2 or np.all(d == d[0]):
        return 1.0 if len(d) == 0 or d[0] >= 0 else 0.0
    return float(stats.ttest_1samp(d, 0.0, alternative="less").pvalue)


@dataclass
class SweepRow:
    method: str
    rate: float
    mean_decrease: float
    stderr_decrease: float
    n_seeds: int
    per_seed: list
    episode_decreases: list = field(repr=False)


def sweep_rate(env, victim, methods, rates, seeds, episodes, epsilon=0.3, cw=CwConfig(),
               selector=None, proxies=None, runner=None):
    """Reward decrease vs the clean run for every (method, rate), aggregated over seeds.

    ``runner`` optionally maps a list of (config) cells to RunSummary objects
    (e.g. a process pool); by default cells run sequentially.
    """
    if isinstance(env, str):
        env = make_env(env)
    cells = [AttackRunConfig("none", 0.0, episodes, s, epsilon, cw) for s in seeds]
    cells += [AttackRunConfig(m, r, episodes, s, epsilon, cw)
              for m in methods for r in rates for s in seeds]
    if runner is None:
        results = [run_attack(env, victim, c, selector, proxies).summary for c in cells]
    else:
        results = runner(cells)
    clean = {s: results[k] for k, s in enumerate(seeds)}
    rows, summaries = [], results[len(seeds):]
    it = iter(summaries)
    for m in methods:
        for r in rates:
            per_seed, per_episode = [], []
            for s in seeds:
                res = next(it)
                per_seed.append(clean[s].mean_reward - res.mean_reward)
                per_episode.extend(np.subtract(clean[s].episode_rewards, res.episode_rewards).tolist())
            mean, se = mean_stderr(per_seed)
            rows.append(SweepRow(m, float(r), mean, se, len(seeds), per_seed, per_episode))
    return rows, results


# --------------------------------------------------------------------------
# serialisation


def _jsonable(x, digits=6):
    if isinstance(x, np.ndarray):
        return [round(float(v), digits) for v in x.ravel()]
    if isinstance(x, (np.floating, float)):
        return round(float(x), digits)
    if isinstance(x, (np.integer,)):
        return int(x)
    if isinstance(x, (np.bool_,)):
        return bool(x)
    if isinstance(x, dict):
        return {k: _jsonable(v, digits) for k, v in sorted(x.items())}
    if isinstance(x, (list, tuple)):
        return [_jsonable(v, digits) for v in x]
    return x


EPISODE_LOG_FORMAT = "adapam-ep-1"


def step_records(ep):
    """One JSON-ready record per timestep of an episode log."""
    out = []
    for k, st in enumerate(ep.steps):
        out.append(_jsonable({
            "format": EPISODE_LOG_FORMAT, "episode": ep.episode, "reset_seed": ep.reset_seed,
            "t": st.t, "state": st.state, "observations": st.observations, "actions": st.actions,
            "reward": st.reward, "alive": st.alive, "attacks": st.attacks,
            "done": k == len(ep.steps) - 1, "win": ep.win if k == len(ep.steps) - 1 else None,
        }))
    return out


def write_episode_logs(path, logs):
    """Gzipped JSON lines, one per timestep, with a zero mtime so identical runs give identical bytes."""
    buf = io.BytesIO()
    with gzip.GzipFile(fileobj=buf, mode="wb", mtime=0, filename="") as gz:
        for ep in logs:
            for rec in step_records(ep):
                gz.write((json.dumps(rec, sort_keys=True) + "\n").encode())
    Path(path).write_bytes(buf.getvalue())


def read_episode_logs(path):
    """Inverse of :func:`write_episode_logs`, regrouped into one dict per episode."""
    episodes = {}
    with gzip.open(path, "rt") as fh:
        for line in fh:
            rec = json.loads(line)
            if rec.get("format") != EPISODE_LOG_FORMAT:
                raise ArgumentError(f"{path}: unsupported episode log format {rec.get('format')!r}")
            ep = episodes.setdefault(rec["episode"], {"episode": rec["episode"],
                                                      "reset_seed": rec["reset_seed"], "steps": []})
            ep["steps"].append(rec)
            if rec["done"]:
                ep["win"] = rec["win"]
    out = []
    for e in sorted(episodes):
        ep = episodes[e]
        ep["total_reward"] = sum(r["reward"] for r in ep["steps"])
        ep["length"] = len(ep["steps"])
        out.append(ep)
    return out


def write_json(path, obj):
    Path(path).write_text(json.dumps(_jsonable(obj, 10), indent=2, sort_keys=True) + "\n")


def write_csv(path, header, rows):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(header)
        for r in rows:
            w.writerow([f"{v:.6g}" if isinstance(v, float) else ("" if v is None else v) for v in r])
