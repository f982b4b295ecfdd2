"""Command-line entry point: ``gradprop run|gradcheck|baseline|validate-config``."""
from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import asdict, replace

from . import harness
from .errors import ConfigError, GradPropError, NumericError, ParseError

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_NUMERIC = 3

log = logging.getLogger("gradprop")


def _load(args) -> harness.ExperimentConfig:
    cfg = harness.load_config(args.config)
    if getattr(args, "seed", None) is not None:
        cfg = replace(cfg, seed=args.seed)
    if getattr(args, "out", None) is not None:
        cfg = replace(cfg, out=args.out)
    return cfg


def _summary(records) -> dict:
    last = records[-1] if records else None
    return {} if last is None else {k: v for k, v in asdict(last).items() if v is not None}


def cmd_run(args) -> int:
    cfg = _load(args)
    if args.replicas > 1:
        outs = harness.run_replicas(cfg, args.replicas)
        print(json.dumps({"replicas": [str(p) for p in outs]}))
        return EXIT_OK
    res = harness.run_experiment(cfg)
    print(json.dumps(_summary(res.records)))
    return EXIT_OK


def cmd_baseline(args) -> int:
    cfg = _load(args)
    res = harness.supervised_baseline(cfg)
    print(json.dumps(_summary(res.records)))
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    rep = harness.gradcheck_report(args.checkpoint, args.task, args.points, args.out)
    rep.pop("per_point")
    print(json.dumps(rep))
    return EXIT_OK


def cmd_validate(args) -> int:
    cfg = harness.load_config(args.config)
    print(f"ok: {cfg.algorithm} on {cfg.task.kind} task, {cfg.total_steps} steps")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="gradprop", description=__doc__)
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    run = sub.add_parser("run", help="train one configuration")
    run.add_argument("--config", required=True)
    run.add_argument("--seed", type=int)
    run.add_argument("--out")
    run.add_argument("--replicas", type=int, default=1,
                     help="independent runs with seeds seed..seed+k-1")
    run.set_defaults(func=cmd_run)

    base = sub.add_parser("baseline", help="supervised backprop on the same actor and task")
    base.add_argument("--config", required=True)
    base.add_argument("--seed", type=int)
    base.add_argument("--out")
    base.set_defaults(func=cmd_baseline)

    gc = sub.add_parser("gradcheck", help="gradient error report for a saved model")
    gc.add_argument("--checkpoint", required=True)
    gc.add_argument("--task", required=True, help="task manifest written by a run")
    gc.add_argument("--points", type=int, default=100)
    gc.add_argument("--out", help="CSV file to append the summary row to")
    gc.set_defaults(func=cmd_gradcheck)

    val = sub.add_parser("validate-config", help="parse and check a config file")
    val.add_argument("--config", required=True)
    val.set_defaults(func=cmd_validate)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (ConfigError, ParseError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except NumericError as exc:
        print(f"numeric abort: {exc.args[0] if exc.args else exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (GradPropError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
