"""Command line: ``ipf list`` and ``ipf run <experiment> [options]``."""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

from .experiments import EXPERIMENTS, resolve_params, run_experiment
from .sde_model import parse_key_values


def _load_config(path):
    text = Path(path).read_text()
    if str(path).endswith(".json"):
        data = json.loads(text)
        if not isinstance(data, dict):
            raise ValueError("config file must hold an object")
        return data
    return parse_key_values(text)


def _parse_set(items):
    out = {}
    for item in items or []:
        if "=" not in item:
            raise ValueError(f"--set expects key=value, got {item!r}")
        k, v = item.split("=", 1)
        out[k.strip()] = v.strip()
    return out


def build_parser():
    ap = argparse.ArgumentParser(prog="ipf", description="Implicit particle filter experiments")
    sub = ap.add_subparsers(dest="command", required=True)
    sub.add_parser("list", help="list experiments and their default parameters")
    run = sub.add_parser("run", help="run one experiment")
    run.add_argument("experiment")
    run.add_argument("--seed", type=int, default=0)
    run.add_argument("--particles", type=int)
    run.add_argument("--repeats", type=int)
    run.add_argument("--fast", action="store_true", help="desk-size repeat counts")
    run.add_argument("--out", default="results")
    run.add_argument("--config", help="JSON or key=value file with parameter overrides")
    run.add_argument("--set", action="append", metavar="KEY=VALUE", help="override one parameter (repeatable)")
    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    if args.command == "list":
        for name, exp in EXPERIMENTS.items():
            print(f"{name:12s} {exp.description}")
            for k, v in exp.defaults.items():
                print(f"    {k} = {v}")
        return 0
    try:
        overrides = _load_config(args.config) if args.config else {}
        overrides.update(_parse_set(args.set))
        params = resolve_params(args.experiment, overrides, args.fast, args.particles, args.repeats)
        run_experiment(args.experiment, params, args.seed, args.out)
    except (KeyError, ValueError, OSError, RuntimeError, ArithmeticError) as exc:
        msg = exc.args[0] if isinstance(exc, KeyError) and exc.args else exc
        print(f"ipf: error: {msg}", file=sys.stderr)
        return 2
    print(f"wrote {args.experiment} results to {args.out}")
    return 0


if __name__ == "__main__":
    sys.exit(main())
