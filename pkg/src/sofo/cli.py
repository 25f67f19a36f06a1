"""Command-line entry point: ``sofo <verb> --config FILE --out DIR --seed S``."""

from __future__ import annotations

import argparse
import json
import logging
import sys

from .config import ConfigError, load_config

VERBS = {
    "tracking": "tracking",
    "mse-sweep": "mse_sweep",
    "opf-compare": "opf_compare",
    "constants": "constants",
    "contraction": "contraction",
}


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="sofo", description="Stochastic online feedback optimization experiments.")
    sub = p.add_subparsers(dest="verb", required=True)
    for verb in VERBS:
        s = sub.add_parser(verb)
        s.add_argument("--config", required=True, help="experiment JSON")
        s.add_argument("--out", required=True, help="output directory")
        s.add_argument("--seed", type=int, action="append", help="seed (repeatable); overrides the config")
        s.add_argument("--replications", type=int, help="Monte-Carlo replications")
        s.add_argument("--threads", type=int, default=1, help="worker threads (results do not depend on it)")
        s.add_argument("--backend", choices=["numba", "numpy"], help="kernel backend; overrides the config")
        s.add_argument("-v", "--verbose", action="store_true")
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    from .experiments import run_experiment

    try:
        cfg = load_config(args.config)
        if args.backend:
            cfg["backend"] = args.backend
        if args.replications is not None and args.replications < 1:
            raise ConfigError("--replications must be positive")
        if args.threads < 1:
            raise ConfigError("--threads must be positive")
        res = run_experiment(cfg, args.out, args.seed, args.replications, args.threads, kind=VERBS[args.verb])
    except (ConfigError, OSError, ValueError) as exc:
        print(f"sofo: error: {exc}", file=sys.stderr)
        return 2
    for seed, r in res["results"].items():
        print(json.dumps({"seed": seed, **{k: v for k, v in r["summary"].items() if k != "table"}},
                         default=float, sort_keys=True))
    return 0


if __name__ == "__main__":
    sys.exit(main())
