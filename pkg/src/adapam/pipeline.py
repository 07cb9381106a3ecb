"""Pipeline stages: each reads upstream artifacts, writes its own directory, updates the manifest.

Layout under ``<out>/<env>/``::

    victim/  expert/  proxy/  attacker/  detector/  eval/  report/  manifest.json
"""

from __future__ import annotations

import logging
import time
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path

import numpy as np

from . import evalkit as ek
from . import plotting
from .config import UPSTREAM, STAGE_SECTIONS, PipelineManifest
from .envs import make_env
from .proxy import ExpertDataset, ProxyPolicy, collect_expert, train_magail
from .selector import SelectorPolicy, TwinCritics, train_attacker
from .victim import VictimPolicy, rollout

log = logging.getLogger(__name__)


def env_root(out, env):
    return Path(out) / env


def _stage_dir(root, name, clean=True):
    d = root / name
    d.mkdir(parents=True, exist_ok=True)
    if clean:
        for p in d.iterdir():
            if p.is_file():
                p.unlink()
    return d


def _write_curve(path, rows):
    if not rows:
        return
    header = []
    for r in rows:
        for k in r:
            if k not in header:
                header.append(k)
    ek.write_csv(path, header, [[r.get(k) for k in header] for r in rows])


def _config_hash(cfg, stage):
    return cfg.hash("env", "seed", *STAGE_SECTIONS[stage])


def _finish(cfg, root, stage, directory):
    m = PipelineManifest(root)
    (directory / "config.json").write_text(cfg.dumps())
    return m.complete(stage, directory, _config_hash(cfg, stage), UPSTREAM[stage])


def _require(root, stage):
    PipelineManifest(root).require(*UPSTREAM[stage])


# --------------------------------------------------------------------------
# training stages


def stage_victim(cfg, out):
    from .victim import train_victim
    root = env_root(out, cfg.env)
    d = _stage_dir(root, "victim")
    curve = []
    victim = train_victim(cfg.env, cfg.victim_config(), curve)
    victim.save(d)
    _write_curve(d / "curve.csv", curve)
    ek.write_json(d / "metrics.json", victim.train_metrics)
    plotting.curve_figure(d / "curve.svg", curve, "episode", ["select_reward"],
                          f"victim training ({cfg.env})")
    return _finish(cfg, root, "victim", d)


def stage_expert(cfg, out):
    root = env_root(out, cfg.env)
    _require(root, "expert")
    victim = VictimPolicy.load(root / "victim")
    d = _stage_dir(root, "expert")
    ex = cfg.section("expert")
    data = collect_expert(cfg.env, victim, int(ex["episodes"]), cfg.seed + 1000,
                          float(ex["holdout_frac"]))
    data.save(d / "expert.ckpt")
    ek.write_json(d / "summary.json", {"train_pairs": [len(a) for a in data.train_act],
                                       "heldout_pairs": [len(a) for a in data.heldout_act]})
    return _finish(cfg, root, "expert", d)


def stage_proxy(cfg, out):
    root = env_root(out, cfg.env)
    _require(root, "proxy")
    victim = VictimPolicy.load(root / "victim")
    data = ExpertDataset.load(root / "expert" / "expert.ckpt")
    d = _stage_dir(root, "proxy")
    curve = []
    proxy = train_magail(cfg.env, victim, data, cfg.proxy_config(), curve)
    proxy.save(d)
    _write_curve(d / "curve.csv", curve)
    ek.write_json(d / "metrics.json", proxy.final_agreement)
    return _finish(cfg, root, "proxy", d)


def stage_attacker(cfg, out):
    root = env_root(out, cfg.env)
    _require(root, "attacker")
    victim = VictimPolicy.load(root / "victim")
    proxy = ProxyPolicy.load(root / "proxy")
    d = _stage_dir(root, "attacker")
    curve = []
    st = train_attacker(cfg.env, victim, proxy, cfg.budget(), cfg.cw_config(), cfg.sac_config(), curve)
    st.selector.save(d)
    st.critics.save(d)
    _write_curve(d / "curve.csv", curve)
    plotting.curve_figure(d / "curve.svg", curve, "env_steps", ["attacker_return"],
                          f"attacker training ({cfg.env})")
    return _finish(cfg, root, "attacker", d)


def stage_detector(cfg, out):
    root = env_root(out, cfg.env)
    _require(root, "detector")
    victim = VictimPolicy.load(root / "victim")
    d = _stage_dir(root, "detector")
    n = int(cfg.section("eval")["clean_detector_episodes"])
    logs, _ = rollout(cfg.env, victim, n, cfg.seed + 2000)
    det = ek.train_detector(cfg.env, logs, cfg.detector_config())
    det.save(d)
    return _finish(cfg, root, "detector", d)


# --------------------------------------------------------------------------
# evaluation


class Artifacts:
    """Frozen trained artifacts for one environment, loaded from the stage directories."""

    def __init__(self, root):
        root = Path(root)
        self.victim = VictimPolicy.load(root / "victim")
        self.proxies = ProxyPolicy.load(root / "proxy") if (root / "proxy").exists() else None
        att = root / "attacker"
        self.selector = SelectorPolicy.load(att) if (att / "selector_c1.ckpt").exists() else None
        det = root / "detector"
        self.detector = ek.Detector.load(det) if (det / "manifest.json").exists() else None


_WORKER = {}


def _init_worker(root, env):
    _WORKER["art"] = Artifacts(root)
    _WORKER["env"] = make_env(env)


def _run_cell(run_cfg):
    art = _WORKER["art"]
    res = ek.run_attack(_WORKER["env"], art.victim, run_cfg, art.selector, art.proxies)
    return res if run_cfg.rate == 1.0 or run_cfg.method == "none" else ek.RunResult([], res.summary)


def run_cells(root, env, cells, workers=1):
    """Run attack cells, optionally on a process pool; results come back in order."""
    if workers <= 1:
        _init_worker(root, env)
        return [_run_cell(c) for c in cells]
    with ProcessPoolExecutor(workers, initializer=_init_worker, initargs=(str(root), env)) as pool:
        return list(pool.map(_run_cell, cells, chunksize=1))


def _run_cfg(cfg, method, rate, seed):
    ev = cfg.section("eval")
    return ek.AttackRunConfig(method, float(rate), int(ev["episodes"]), int(seed),
                              cfg.budget().epsilon, cfg.cw_config(), bool(ev["greedy"]))


def _cell_name(method, rate, seed):
    return f"{method}_rate{rate:g}_seed{seed}"


def stage_run_attack(cfg, out, methods=None, rate=1.0, workers=1):
    root = env_root(out, cfg.env)
    _require(root, "eval")
    ev = cfg.section("eval")
    methods = methods or ev["methods"]
    d = _stage_dir(root, "eval", clean=False)
    cells = [_run_cfg(cfg, m, rate, s) for m in methods for s in ev["seeds"]]
    results = run_cells(root, cfg.env, cells, workers)
    for c, r in zip(cells, results):
        name = _cell_name(c.method, c.rate, c.seed)
        ek.write_json(d / f"{name}.json", r.summary.as_dict())
        if r.logs:
            ek.write_episode_logs(d / f"{name}.jsonl.gz", r.logs)
    return results


def stage_sweep(cfg, out, methods=None, rates=None, workers=1):
    root = env_root(out, cfg.env)
    _require(root, "eval")
    ev = cfg.section("eval")
    methods = [m for m in (methods or ev["methods"]) if m != "none"]
    rates = [float(r) for r in (rates or ev["rate_grid"])]
    runner = lambda cells: [r.summary for r in run_cells(root, cfg.env, cells, workers)]  # noqa: E731
    rows, _ = ek.sweep_rate(cfg.env, None, methods, rates, ev["seeds"], int(ev["episodes"]),
                            cfg.budget().epsilon, cfg.cw_config(), runner=runner)
    d = _stage_dir(root, "eval", clean=False)
    _write_sweep(d, rows, cfg.env)
    return rows


def _write_sweep(d, rows, env):
    ek.write_csv(d / "sweep.csv", ["method", "rate", "mean_decrease", "stderr_decrease", "n_seeds"],
                 [[r.method, r.rate, r.mean_decrease, r.stderr_decrease, r.n_seeds] for r in rows])
    plotting.sweep_figure(d / "sweep.svg", rows, f"reward decrease vs rate ({env})")


def _fmt(mean, se):
    return f"{mean:.4g} ± {se:.2g}"


def stage_report(cfg, out, workers=1):
    """Everything the evaluation needs in one pass: rate sweep (which includes the rho = 1
    cells used for the headline, stealth and detection tables), written as CSV, JSON and SVG."""
    t0 = time.time()
    root = env_root(out, cfg.env)
    _require(root, "eval")
    art = Artifacts(root)
    env = make_env(cfg.env)
    ev = cfg.section("eval")
    seeds = [int(s) for s in ev["seeds"]]
    methods = [m for m in ev["methods"] if m != "none"]
    rates = sorted({float(r) for r in ev["rate_grid"]} | {1.0})
    cells = [_run_cfg(cfg, "none", 0.0, s) for s in seeds]
    cells += [_run_cfg(cfg, m, r, s) for m in methods for r in rates for s in seeds]
    results = run_cells(root, cfg.env, cells, workers)
    by_key = {(c.method, c.rate, c.seed): r for c, r in zip(cells, results)}
    clean = {s: by_key[("none", 0.0, s)] for s in seeds}

    d = _stage_dir(root, "report")
    eps = cfg.budget().epsilon

    # headline table at rho = 1
    table1, headline = [], {}
    for m in ["none"] + methods:
        runs = [clean[s] if m == "none" else by_key[(m, 1.0, s)] for s in seeds]
        rewards = np.concatenate([r.summary.episode_rewards for r in runs])
        base = np.concatenate([clean[s].summary.episode_rewards for s in seeds])
        wins = [r.summary.win_rate for r in runs]
        seed_means = [r.summary.mean_reward for r in runs]
        dec = [clean[s].summary.mean_reward - r.summary.mean_reward for s, r in zip(seeds, runs)]
        win_ms = ek.mean_stderr(wins) if None not in wins else (None, None)
        headline[m] = {"reward": ek.mean_stderr(seed_means), "win_rate": win_ms,
                       "decrease": ek.mean_stderr(dec),
                       "episode_decrease": (base - rewards).tolist(),
                       "victim_success": [r.summary.victim_success_rate for r in runs],
                       "proxy_success": [r.summary.proxy_success_rate for r in runs]}
        table1.append([m, *headline[m]["reward"], *(win_ms if win_ms[0] is not None else ("", "")),
                       *headline[m]["decrease"]])
    # methods as columns, one row per metric
    metrics = ["reward_mean", "reward_stderr", "win_rate_mean", "win_rate_stderr",
               "reward_decrease_mean", "reward_decrease_stderr"]
    ek.write_csv(d / "table1.csv", ["metric"] + [row[0] for row in table1],
                 [[name] + [row[1 + k] for row in table1] for k, name in enumerate(metrics)])

    # stealth
    table2, stealth = [], {}
    for m in methods:
        reps = [ek.stealth(by_key[(m, 1.0, s)].logs, m, eps) for s in seeds]
        logs = [ep for s in seeds for ep in by_key[(m, 1.0, s)].logs]
        pooled = ek.stealth(logs, m, eps)
        stealth[m] = pooled.as_dict()
        mean, se = ek.mean_stderr([r.mean_linf for r in reps if r.n])
        table2.append([m, mean, se, pooled.max_linf, pooled.n, pooled.within_budget,
                       pooled.mean_linf_nonzero, pooled.n_nonzero])
    ek.write_csv(d / "table2.csv", ["method", "mean_linf", "mean_linf_stderr", "max_linf",
                                    "n_perturbations", "within_budget", "mean_linf_nonzero",
                                    "n_nonzero"], table2)

    # detection
    table3, detection = [], {}
    if art.detector is not None:
        for m in methods:
            reps = [ek.detect(art.detector, env, by_key[(m, 1.0, s)].logs, m) for s in seeds]
            tp, fp, fn = (sum(getattr(r, k) for r in reps) for k in ("tp", "fp", "fn"))
            precision, recall, f1 = ek.confusion_f1(tp, fp, fn)
            mean, se = ek.mean_stderr([r.f1 for r in reps])
            detection[m] = {"f1_pooled": f1, "precision": precision, "recall": recall,
                            "f1_per_seed": [r.f1 for r in reps], "tau": art.detector.tau}
            table3.append([m, mean, se, f1, precision, recall])
        ek.write_csv(d / "table3.csv", ["method", "f1_mean", "f1_stderr", "f1_pooled", "precision",
                                        "recall"], table3)

    # sweep
    rows = []
    for m in methods:
        for r in rates:
            per_seed = [clean[s].summary.mean_reward - by_key[(m, r, s)].summary.mean_reward
                        for s in seeds]
            per_ep = np.concatenate([np.subtract(clean[s].summary.episode_rewards,
                                                 by_key[(m, r, s)].summary.episode_rewards)
                                     for s in seeds]).tolist()
            mean, se = ek.mean_stderr(per_seed)
            rows.append(ek.SweepRow(m, r, mean, se, len(seeds), per_seed, per_ep))
    _write_sweep(d, rows, cfg.env)
    plotting.bar_figure(d / "stealth.svg", [r[0] for r in table2], [r[1] for r in table2],
                        [r[2] for r in table2], "mean L-inf", f"perturbation size ({cfg.env})")
    if table3:
        plotting.bar_figure(d / "detection.svg", [r[0] for r in table3], [r[1] for r in table3],
                            [r[2] for r in table3], "detector F1", f"detectability ({cfg.env})")

    for c, r in zip(cells, results):
        if r.logs and (c.rate == 1.0 or c.method == "none"):
            ek.write_episode_logs(d / f"{_cell_name(c.method, c.rate, c.seed)}.jsonl.gz", r.logs)
    report = {
        "env": cfg.env, "seeds": seeds, "epsilon": eps, "episodes": int(ev["episodes"]),
        "headline": {m: {k: v for k, v in h.items() if k != "episode_decrease"}
                     for m, h in headline.items()},
        "stealth": stealth, "detection": detection,
        "sweep": [{"method": r.method, "rate": r.rate, "mean_decrease": r.mean_decrease,
                   "stderr_decrease": r.stderr_decrease, "per_seed": r.per_seed} for r in rows],
        "summaries": [r.summary.as_dict() for r in results],
    }
    ek.write_json(d / "report.json", report)
    (d / "config.json").write_text(cfg.dumps())
    log.info("report for %s written in %.1fs", cfg.env, time.time() - t0)
    return {"headline": headline, "stealth": stealth, "detection": detection, "sweep": rows,
            "results": by_key, "clean": clean}


STAGE_FUNCS = {
    "victim": stage_victim,
    "expert": stage_expert,
    "proxy": stage_proxy,
    "attacker": stage_attacker,
    "detector": stage_detector,
}


def run_pipeline(cfg, out, workers=1, report=True):
    times = {}
    for name in ("victim", "expert", "proxy", "attacker", "detector"):
        t = time.time()
        STAGE_FUNCS[name](cfg, out)
        times[name] = time.time() - t
        log.info("stage %s done in %.1fs", name, times[name])
    result = None
    if report:
        t = time.time()
        result = stage_report(cfg, out, workers)
        times["report"] = time.time() - t
    return times, result

