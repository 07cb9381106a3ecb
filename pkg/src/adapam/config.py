"""Experiment configuration (versioned JSON) and the staged pipeline manifest."""

from __future__ import annotations

import copy
import dataclasses
import datetime as _dt
import hashlib
import json
from pathlib import Path

from .errors import ConfigError, IntegrityError, StagedDependencyError
from .evalkit import METHODS, DetectorConfig
from .perturber import CwConfig, PerturbBudget
from .proxy import ProxyTrainConfig
from .selector import SacConfig
from .victim import VictimTrainConfig

FORMAT_VERSION = 1
ENVS = ("coop_spread", "grid_battle")

# Sections built from library config classes; their ``seed`` comes from the top level.
_SECTION_TYPES = {
    "victim": VictimTrainConfig,
    "proxy": ProxyTrainConfig,
    "sac": SacConfig,
    "detector": DetectorConfig,
}

_PLAIN_SECTIONS = {
    "expert": {"episodes": 2000, "holdout_frac": 0.2},
    "perturber": {"epsilon": 0.3, "c": 5.0, "max_iters": 500, "step_size": 0.05, "kappa": 2.0,
                  "early_stop": True, "restart_patience": 30},
    "eval": {"episodes": 100, "seeds": [0, 1, 2], "methods": list(METHODS),
             "rate_grid": [0.25, 0.5, 0.75, 1.0], "greedy": True, "clean_detector_episodes": 200},
}

# Per-environment overrides of library defaults, tuned at desk scale.
ENV_DEFAULTS = {
    "coop_spread": {"victim": {"gamma": 0.95, "episodes": 2000, "hidden": [64]},
                    "expert": {"episodes": 4000},
                    "proxy": {"hidden": [128], "bc_epochs": 100, "bc_batch": 256, "bc_lr": 3e-3},
                    "sac": {"episodes": 2000}},
    "grid_battle": {"victim": {"episodes": 1500, "hidden": [64]},
                    "proxy": {"query_copies": 3}},
}


def _section_defaults(cls):
    out = {}
    for f in dataclasses.fields(cls):
        if f.name == "seed":
            continue
        if f.default is not dataclasses.MISSING:
            v = f.default
        else:
            v = f.default_factory()
        out[f.name] = list(v) if isinstance(v, tuple) else v
    return out


def default_dict(env):
    if env not in ENVS:
        raise ConfigError(f"unknown environment {env!r}; choose from {ENVS}")
    d = {"format_version": FORMAT_VERSION, "env": env, "seed": 0}
    for name, cls in _SECTION_TYPES.items():
        d[name] = _section_defaults(cls)
    for name, sec in _PLAIN_SECTIONS.items():
        d[name] = copy.deepcopy(sec)
    for name, sec in ENV_DEFAULTS[env].items():
        d[name].update(sec)
    return d


def _merge(base, override, path=""):
    for key, value in override.items():
        where = f"{path}{key}"
        if key not in base:
            raise ConfigError(f"unknown config key {where!r}")
        if isinstance(base[key], dict):
            if not isinstance(value, dict):
                raise ConfigError(f"config key {where!r} must be a table")
            _merge(base[key], value, where + ".")
        else:
            base[key] = value
    return base


class ExperimentConfig:
    """Resolved experiment settings.  ``data`` is a plain JSON-compatible dict."""

    def __init__(self, data):
        self.data = data
        self._validate()

    @classmethod
    def from_dict(cls, raw, env=None):
        if not isinstance(raw, dict):
            raise ConfigError("config must be a JSON object")
        env = env or raw.get("env", "coop_spread")
        version = raw.get("format_version", FORMAT_VERSION)
        if version != FORMAT_VERSION:
            raise ConfigError(f"unsupported config format_version {version}")
        raw = dict(raw)
        raw["env"] = env
        return cls(_merge(default_dict(env), raw))

    @classmethod
    def load(cls, path, env=None):
        try:
            raw = json.loads(Path(path).read_text())
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{path}: invalid JSON ({exc})") from exc
        except OSError as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from exc
        return cls.from_dict(raw, env)

    @classmethod
    def defaults(cls, env="coop_spread"):
        return cls(default_dict(env))

    def to_dict(self):
        return copy.deepcopy(self.data)

    def dumps(self):
        return json.dumps(self.data, indent=2, sort_keys=True) + "\n"

    def with_seed(self, seed):
        d = self.to_dict()
        d["seed"] = int(seed)
        return ExperimentConfig(d)

    def __eq__(self, other):
        return isinstance(other, ExperimentConfig) and self.data == other.data

    @property
    def env(self):
        return self.data["env"]

    @property
    def seed(self):
        return int(self.data["seed"])

    def section(self, name):
        if name in _SECTION_TYPES:
            try:
                return _SECTION_TYPES[name](**self.data[name], seed=self.seed)
            except TypeError as exc:
                raise ConfigError(f"section {name!r}: {exc}") from exc
        return copy.deepcopy(self.data[name])

    def victim_config(self):
        return self.section("victim")

    def proxy_config(self):
        return self.section("proxy")

    def sac_config(self):
        return self.section("sac")

    def detector_config(self):
        d = self.section("detector")
        return dataclasses.replace(d, hidden=tuple(d.hidden))

    def budget(self):
        return PerturbBudget(float(self.data["perturber"]["epsilon"]))

    def cw_config(self):
        p = self.data["perturber"]
        return CwConfig(c=float(p["c"]), max_iters=int(p["max_iters"]),
                        step_size=float(p["step_size"]), kappa=float(p["kappa"]),
                        early_stop=bool(p["early_stop"]),
                        restart_patience=int(p["restart_patience"]), seed=self.seed)

    def _validate(self):
        d = self.data
        if d.get("env") not in ENVS:
            raise ConfigError(f"unknown environment {d.get('env')!r}")
        if not isinstance(d.get("seed"), int) or isinstance(d.get("seed"), bool) or d["seed"] < 0:
            raise ConfigError("seed must be a non-negative integer")
        for name in _SECTION_TYPES:
            self.section(name)
        self.budget()
        self.cw_config()
        ev = d["eval"]
        for m in ev["methods"]:
            if m not in METHODS:
                raise ConfigError(f"unknown method {m!r} in eval.methods")
        if any(not 0.0 <= float(r) <= 1.0 for r in ev["rate_grid"]):
            raise ConfigError("eval.rate_grid values must lie in [0, 1]")
        if int(ev["episodes"]) < 1 or not ev["seeds"]:
            raise ConfigError("eval.episodes must be positive and eval.seeds non-empty")
        ex = d["expert"]
        if int(ex["episodes"]) < 2 or not 0.0 < float(ex["holdout_frac"]) < 1.0:
            raise ConfigError("expert.episodes must be >= 2 and expert.holdout_frac in (0, 1)")

    def hash(self, *sections):
        keys = sections or tuple(sorted(self.data))
        blob = json.dumps({k: self.data[k] for k in keys}, sort_keys=True)
        return hashlib.sha256(blob.encode()).hexdigest()


# --------------------------------------------------------------------------
# manifest

STAGES = ("victim", "expert", "proxy", "attacker", "detector")
UPSTREAM = {
    "victim": (),
    "expert": ("victim",),
    "proxy": ("victim", "expert"),
    "attacker": ("victim", "proxy"),
    "detector": ("victim",),
    "eval": ("victim", "proxy", "attacker", "detector"),
}
# Config sections that determine each stage's outputs (beyond env and seed).
STAGE_SECTIONS = {
    "victim": ("victim",),
    "expert": ("expert",),
    "proxy": ("proxy",),
    "attacker": ("sac", "perturber"),
    "detector": ("detector", "eval"),
}


def sha256_file(path):
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 16), b""):
            h.update(chunk)
    return h.hexdigest()


class PipelineManifest:
    """Stage completion records with content hashes, stored as ``manifest.json``."""

    def __init__(self, root):
        self.root = Path(root)
        self.path = self.root / "manifest.json"
        if self.path.exists():
            self.data = json.loads(self.path.read_text())
        else:
            self.data = {"format": "adapam-manifest-1", "stages": {}}

    def record(self, stage):
        return self.data["stages"].get(stage)

    def require(self, *stages):
        """Raise unless every stage is recorded and its files still match their hashes."""
        for stage in stages:
            rec = self.record(stage)
            if rec is None:
                raise StagedDependencyError(stage, f"stage {stage!r} has not been run")
            for rel, digest in rec["files"].items():
                p = self.root / rel
                if not p.exists():
                    raise IntegrityError(f"stage {stage!r}: missing artifact {rel}")
                if sha256_file(p) != digest:
                    raise IntegrityError(f"stage {stage!r}: artifact {rel} does not match its hash")

    def complete(self, stage, directory, config_hash, upstream=()):
        directory = Path(directory)
        files = {str(p.relative_to(self.root)): sha256_file(p)
                 for p in sorted(directory.rglob("*")) if p.is_file()}
        upstream_hashes = {u: self._stage_digest(u) for u in upstream}
        rec = {"files": files, "config_hash": config_hash, "upstream": upstream_hashes}
        old = self.record(stage)
        if old is not None and all(old.get(k) == rec[k] for k in rec):
            return old
        rec["completed_at"] = _dt.datetime.now(_dt.timezone.utc).isoformat(timespec="seconds")
        self.data["stages"][stage] = rec
        self.save()
        return rec

    def _stage_digest(self, stage):
        rec = self.record(stage)
        blob = json.dumps(rec["files"], sort_keys=True)
        return hashlib.sha256(blob.encode()).hexdigest()

    def save(self):
        self.root.mkdir(parents=True, exist_ok=True)
        self.path.write_text(json.dumps(self.data, indent=2, sort_keys=True) + "\n")
