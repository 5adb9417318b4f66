"""Command-line entry point: ``mfopt {run,validate,single,gradient-check}``."""
import argparse
import sys
from pathlib import Path

import numpy as np

from mfopt.harness import (ExperimentConfig, build_problem, cmd_run, cmd_single, gradient_check,
                           sample_starts)
from mfopt.optimizer import VARIANTS
from mfopt.validation import validate


def _parser():
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", type=Path, help="INI configuration file")
    common.add_argument("--scale", choices=("desk", "paper"), default="desk",
                        help="built-in configuration when --config is not given")
    common.add_argument("--out", type=Path, help="output directory")
    common.add_argument("--seed", type=int, help="seed for random starts and test parameters")

    p = argparse.ArgumentParser(prog="mfopt", description="Multi-fidelity trust-region optimization "
                                "of a parametrized heat equation.")
    sub = p.add_subparsers(dest="command", required=True)

    run = sub.add_parser("run", parents=[common], help="benchmark the optimizer variants")
    run.add_argument("--variant", action="append", choices=VARIANTS,
                     help="restrict to this variant (repeatable)")
    run.add_argument("--starts", type=int, help="number of random starts")
    run.add_argument("--workers", type=int, help="worker processes")
    run.add_argument("--cache", type=Path, help="directory for cached reference trajectories")

    val = sub.add_parser("validate", parents=[common], help="model and estimator self-checks")
    val.add_argument("--inject-fault", choices=("basis",), help="corrupt the reduced basis to "
                     "confirm that the reproduction check fails")

    single = sub.add_parser("single", parents=[common], help="one optimization run with its full log")
    single.add_argument("--variant", choices=VARIANTS, default="RelaxedTrRbMlOpt")
    single.add_argument("--mu", type=float, nargs="+", help="initial parameter (default: first random start)")

    grad = sub.add_parser("gradient-check", parents=[common],
                          help="FOM adjoint gradient against central differences")
    grad.add_argument("--points", type=int, default=3, help="number of random interior parameters")
    grad.add_argument("--reduced", action="store_true", help="use the smaller validation problem")
    return p


def _config(args):
    cfg = ExperimentConfig.load(args.config, scale=args.scale)
    changes = {}
    if args.seed is not None:
        changes["seed"] = args.seed
    if args.out is not None:
        changes["out"] = str(args.out)
    if getattr(args, "starts", None) is not None:
        changes["starts"] = args.starts
    if getattr(args, "workers", None) is not None:
        changes["workers"] = args.workers
    return cfg.replace(**changes) if changes else cfg


def _progress(msg):
    print(msg, file=sys.stderr, flush=True)


def main(argv=None):
    args = _parser().parse_args(argv)
    cfg = _config(args)

    if args.command == "run":
        variants = tuple(args.variant) if args.variant else VARIANTS
        outcomes, table = cmd_run(cfg, cfg.out, variants, progress=_progress, cache_dir=args.cache)
        print(table.format())
        failed = [o for o in outcomes if o.error]
        for o in failed:
            print(f"{o.variant} start {o.start_index}: {o.error}", file=sys.stderr)
        print(f"results written to {cfg.out}")
        return 1 if failed else 0

    if args.command == "validate":
        report = validate(config=cfg, fault=args.inject_fault, seed=cfg.seed, progress=_progress)
        print(report.format())
        print("all checks passed" if report.passed else "some checks FAILED")
        return 0 if report.passed else 1

    if args.command == "single":
        if args.mu is not None:
            mu0 = np.asarray(args.mu, dtype=float)
        else:
            mu0 = sample_starts(cfg)[0]
        rec = cmd_single(cfg, args.variant, mu0, cfg.out)
        print(f"{rec.variant}: status {rec.status}, J = {rec.J:.6e}, mu = {np.array2string(rec.mu)}, "
              f"criticality {rec.criticality:.2e}, outer iterations {rec.outer_iters}, "
              f"{rec.total_time:.2f} s")
        print(f"evaluations: FOM {rec.count('FOM')}, RB {rec.count('RB')}, ML {rec.count('ML')}")
        print(f"log written to {cfg.out}")
        return 0 if rec.converged else 1

    if args.command == "gradient-check":
        fom = build_problem(cfg, reduced=args.reduced).fom
        rng = np.random.default_rng(cfg.seed)
        lo, hi = fom.bounds
        pad = 0.1 * (hi - lo)
        rows = gradient_check(fom, rng.uniform(lo + pad, hi - pad, size=(args.points, lo.size)))
        worst = 0.0
        for r in rows:
            worst = max(worst, float(np.max(r["rel_error"])))
            print(f"mu = {np.array2string(r['mu'], precision=5)}  adjoint = {np.array2string(r['adjoint'], precision=8)}"
                  f"  fd = {np.array2string(r['fd'], precision=8)}  rel. error = {np.max(r['rel_error']):.2e}")
        print(f"max relative error {worst:.2e}")
        return 0 if worst <= 1e-4 else 1
    return 2


if __name__ == "__main__":
    sys.exit(main())
