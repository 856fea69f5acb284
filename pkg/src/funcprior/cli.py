"""Command-line entry point: ``funcprior <stage> --experiment <id> ...``.

Exit status is 0 on success, 2 for invalid configuration or missing
prerequisite artifacts and 3 for numerical failures (diverged training,
non-finite gradients, failed solver iterations).
"""
from __future__ import annotations

import argparse
import json
import sys

from . import pipeline as pl

COMMANDS = {
    "gen-data": "gen-data",
    "train-prior": "train-prior",
    "train-deeponet": "train-deeponet",
    "posterior": "posterior",
    "baseline": "baseline",
    "diagnose": "diagnose",
    "run-all": "all",
}


def _parser():
    p = argparse.ArgumentParser(prog="funcprior", description="Learned functional priors: experiment runner")
    sub = p.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        s = sub.add_parser(name)
        s.add_argument("--experiment", choices=pl.EXPERIMENTS)
        s.add_argument("--config", help="JSON run configuration")
        s.add_argument("--seed", type=int)
        s.add_argument("--out")
        s.add_argument("--preset", choices=("desk", "paper"))
        s.add_argument("--set", action="append", default=[], metavar="KEY=JSON",
                       help="override one preset setting, e.g. --set gan_steps=1000")
    return p


def build_config(args) -> pl.ExperimentConfig:
    doc = pl.load_config(args.config) if args.config else {}
    overrides = dict(doc.get("overrides", {}))
    for item in args.set:
        key, sep, raw = item.partition("=")
        if not sep:
            raise pl.ValidationError(f"--set expects KEY=VALUE, got {item!r}")
        try:
            overrides[key] = json.loads(raw)
        except json.JSONDecodeError:
            overrides[key] = raw
    experiment = args.experiment or doc.get("experiment")
    if experiment is None:
        raise pl.ValidationError("no experiment given (use --experiment or a config file)")
    seed = args.seed if args.seed is not None else doc.get("seed", 0)
    return pl.ExperimentConfig(
        experiment=experiment,
        stage=COMMANDS[args.command],
        preset=args.preset or doc.get("preset", "desk"),
        seed=seed,
        out=args.out or doc.get("out", "runs"),
        overrides=overrides,
    )


def main(argv=None) -> int:
    args = _parser().parse_args(argv)
    try:
        cfg = build_config(args)
        manifest = pl.run(cfg)
    except pl.ValidationError as err:
        print(f"error: {err}", file=sys.stderr)
        return 2
    except (FloatingPointError, ArithmeticError, RuntimeError) as err:
        print(f"numerical failure: {err}", file=sys.stderr)
        return 3
    for k in sorted(manifest.metrics):
        print(f"{k},{manifest.metrics[k]!r}")
    return 0


if __name__ == "__main__":
    sys.exit(main())
