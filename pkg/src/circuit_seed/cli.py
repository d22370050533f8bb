"""``circuit-seed`` command-line entry point."""

from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import replace
from pathlib import Path

from . import experiments as ex
from .experiments import ConfigError

EXIT_OK, EXIT_CONFIG, EXIT_DIVERGED, EXIT_IO = 0, 2, 3, 4

COMMANDS = ("discover", "train", "sweep", "knockout", "diagnose", "stability", "ablate-ab", "compare")

log = logging.getLogger("circuit_seed")


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="circuit-seed",
                                description="Gradient-informed placement of sparse adapter parameters.")
    p.add_argument("command", choices=COMMANDS)
    p.add_argument("--config", type=Path, help="key = value config file ('#' starts a comment)")
    p.add_argument("--seed", type=int, help="master seed; seed i of the run uses seed + i")
    p.add_argument("--seeds", type=int, help="number of seeds")
    p.add_argument("--jobs", type=int, help="parallel worker processes for independent cells")
    p.add_argument("--out", help="output directory")
    p.add_argument("--method", help="comma-separated methods")
    p.add_argument("--budget", help="comma-separated budgets (fractions <= 1 or integer k)")
    p.add_argument("--regime", choices=("auto", "clean", "noisy"))
    p.add_argument("--task", choices=("sparse_b", "dense_rank2"))
    p.add_argument("--steps", type=int)
    p.add_argument("--lr", type=float)
    p.add_argument("--circuits", nargs="+", type=Path, help="circuit files for 'compare'")
    p.add_argument("-v", "--verbose", action="store_true")
    return p


def config_from_args(args) -> ex.ExperimentConfig:
    overrides = {
        "seed": args.seed, "seeds": args.seeds, "jobs": args.jobs, "out": args.out,
        "regime": args.regime, "task": args.task, "steps": args.steps, "lr": args.lr,
        "methods": ex._TUPLE_PARSERS["methods"](args.method) if args.method else None,
        "budgets": ex._TUPLE_PARSERS["budgets"](args.budget) if args.budget else None,
    }
    cfg = ex.load_config(args.config, **overrides)
    return cfg if cfg.experiment else replace(cfg, experiment=args.command)


def run(args) -> int:
    if args.command == "compare":
        if not args.circuits or len(args.circuits) < 2:
            raise ConfigError("compare needs at least two --circuits files")
        print(json.dumps(ex.compare_circuits(args.circuits), indent=2))
        return EXIT_OK

    cfg = config_from_args(args)
    log.info("running %s into %s", args.command, cfg.outdir())
    if args.command == "discover":
        circuits = ex.run_discover(cfg)
        print(f"wrote {len(circuits)} circuits under {cfg.outdir()}")
    elif args.command in ("sweep", "train"):
        table = (ex.run_sweep if args.command == "sweep" else ex.run_train)(cfg)
        for a in table.aggregate():
            print(f"{a['method']:>10} k={a['k']:>4} mean={a['mean']:.4f} "
                  f"min={a['min']:.4f} max={a['max']:.4f} failed={a['n_failed']}")
        if table.has_failures:
            return EXIT_DIVERGED
    elif args.command == "knockout":
        for p in ex.run_knockout(cfg)["curve"]:
            print(f"f={p['fraction']:<6g} circuit={p['circuit_mse']:.4f} random={p['random_mse']:.4f}")
    elif args.command == "diagnose":
        summary = ex.run_diagnose(cfg)["summary"]
        print(json.dumps({r: {k: v for k, v in s.items() if k != "knockout"} for r, s in summary.items()},
                         indent=2))
    elif args.command == "stability":
        print(json.dumps(ex.run_stability(cfg), indent=2))
    elif args.command == "ablate-ab":
        for s in ex.run_ablate_ab(cfg)["summary"]:
            print(f"k={s['k']:>4} b_only={s['b_only_mean']:.4f} a_plus_b={s['ab_mean']:.4f}")
    return EXIT_OK


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(message)s")
    try:
        return run(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except OSError as exc:
        print(f"I/O error: {exc}", file=sys.stderr)
        return EXIT_IO
    except ValueError as exc:
        print(f"invalid argument: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
