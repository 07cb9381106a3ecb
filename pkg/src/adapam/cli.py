"""Command-line entry point: ``adapam <subcommand> [options]``.

Exit codes: 0 success, 2 configuration error, 3 missing upstream stage,
4 training failure, 5 integrity error.
"""

from __future__ import annotations

import argparse
import logging
import os
import sys

from . import pipeline
from .config import ExperimentConfig
from .errors import AdapamError

STAGE_COMMANDS = {
    "train-victim": "victim",
    "collect-expert": "expert",
    "train-proxy": "proxy",
    "train-attacker": "attacker",
    "train-detector": "detector",
}


def _csv_list(text):
    return [t.strip() for t in text.split(",") if t.strip()]


def _float_list(text):
    try:
        return [float(t) for t in _csv_list(text)]
    except ValueError as exc:
        raise argparse.ArgumentTypeError(f"bad rate list {text!r}") from exc


def build_parser():
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="JSON experiment config")
    common.add_argument("--env", help="environment name (overrides the config)")
    common.add_argument("--seed", type=int, help="top-level seed (overrides the config)")
    common.add_argument("--out", help="output root (default: $ADAPAM_OUT or ./out)")
    common.add_argument("--workers", type=int, default=1, help="process pool size for evaluation")
    common.add_argument("-v", "--verbose", action="store_true")

    p = argparse.ArgumentParser(prog="adapam", description="adaptive adversarial attacks on multi-agent policies")
    sub = p.add_subparsers(dest="command", required=True)
    for name in STAGE_COMMANDS:
        sub.add_parser(name, parents=[common], help=f"run the {STAGE_COMMANDS[name]} stage")
    ra = sub.add_parser("run-attack", parents=[common], help="evaluate attack methods at one rate")
    ra.add_argument("--method", type=_csv_list, help="comma-separated methods")
    ra.add_argument("--rate", type=float, default=1.0)
    sw = sub.add_parser("sweep-rate", parents=[common], help="reward decrease over a rate grid")
    sw.add_argument("--method", type=_csv_list)
    sw.add_argument("--rate-grid", type=_float_list)
    rp = sub.add_parser("report", parents=[common], help="tables, sweep and figures")
    rp.add_argument("--rate-grid", type=_float_list)
    rp.add_argument("--method", type=_csv_list)
    pl = sub.add_parser("pipeline", parents=[common], help="all stages followed by the report")
    pl.add_argument("--rate-grid", type=_float_list)
    pl.add_argument("--method", type=_csv_list)
    sub.add_parser("show-config", parents=[common], help="print the resolved configuration")
    return p


def resolve_config(args):
    if args.config:
        cfg = ExperimentConfig.load(args.config, env=args.env)
    else:
        cfg = ExperimentConfig.defaults(args.env or "coop_spread")
    data = cfg.to_dict()
    if args.seed is not None:
        data["seed"] = args.seed
    if getattr(args, "rate_grid", None):
        data["eval"]["rate_grid"] = args.rate_grid
    if getattr(args, "method", None) and args.command in ("report", "pipeline"):
        data["eval"]["methods"] = args.method
    return ExperimentConfig(data)


def run(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    cfg = resolve_config(args)
    out = args.out or os.environ.get("ADAPAM_OUT") or "out"
    cmd = args.command
    if cmd == "show-config":
        sys.stdout.write(cfg.dumps())
    elif cmd in STAGE_COMMANDS:
        rec = pipeline.STAGE_FUNCS[STAGE_COMMANDS[cmd]](cfg, out)
        print(f"{STAGE_COMMANDS[cmd]}: {len(rec['files'])} files under {pipeline.env_root(out, cfg.env)}")
    elif cmd == "run-attack":
        for r in pipeline.stage_run_attack(cfg, out, args.method, args.rate, args.workers):
            s = r.summary
            print(f"{s.method:15s} rate={s.rate:g} seed={s.seed} reward={s.mean_reward:.3f} "
                  f"win_rate={s.win_rate}")
    elif cmd == "sweep-rate":
        for r in pipeline.stage_sweep(cfg, out, args.method, args.rate_grid, args.workers):
            print(f"{r.method:15s} rate={r.rate:g} decrease={r.mean_decrease:.3f} ± {r.stderr_decrease:.3f}")
    elif cmd in ("report", "pipeline"):
        if cmd == "pipeline":
            times, res = pipeline.run_pipeline(cfg, out, args.workers)
            print("stage seconds: " + ", ".join(f"{k}={v:.1f}" for k, v in times.items()))
        else:
            res = pipeline.stage_report(cfg, out, args.workers)
        for m, h in res["headline"].items():
            print(f"{m:15s} reward={h['reward'][0]:.3f} ± {h['reward'][1]:.3f} "
                  f"decrease={h['decrease'][0]:.3f}")
        print(f"report written to {pipeline.env_root(out, cfg.env) / 'report'}")
    return 0


def main(argv=None):
    try:
        return run(argv)
    except AdapamError as exc:
        print(f"adapam: error: {exc}", file=sys.stderr)
        return exc.exit_code


if __name__ == "__main__":
    sys.exit(main())
