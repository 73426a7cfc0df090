"""
Command-line entry point for the torus flow lab.

    python -m app.main run    --config CONFIG [--out DIR] [--seed N] [--override KEY=VALUE ...]
    python -m app.main verify --config CONFIG [--inject-fault CHECK ...] [--discretization]
    python -m app.main sweep  --config CONFIG [--out DIR]

Exit codes: 0 success, 1 verify failure, 2 non-convergence, 3 numerical
abort, 4 config error.
"""
import argparse
import logging
import os
import sys
from typing import List, Optional

from app.config import RunConfig, parse_config, settings
from app.exceptions import ConfigError, NumericalAbort
from app.services import run_service, verify_service

logger = logging.getLogger(__name__)

# Required improvement of the flag degree error when the grid is doubled
DISCRETIZATION_RATIO = 8.0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="torus-flow-lab", description="Donaldson and Yang-Mills flows on model bundles over tori")
    subparsers = parser.add_subparsers(dest="command", required=True)

    for name, help_text in (
        ("run", "integrate one flow and write trace, manifest and summary"),
        ("verify", "run the invariant battery and print PASS/FAIL per item"),
        ("sweep", "one run per amplitude in sweep.amplitudes"),
    ):
        sub = subparsers.add_parser(name, help=help_text)
        sub.add_argument("--config", required=True, help="YAML run configuration")
        sub.add_argument("--out", help="output directory (overrides output.directory)")
        sub.add_argument("--seed", type=int, help="perturbation seed (overrides perturbation.seed)")
        sub.add_argument("--override", action="append", default=[], metavar="KEY=VALUE",
                         help="dotted-key override, repeatable")
        sub.add_argument("--verbose", action="store_true", help="debug logging")
        if name == "verify":
            sub.add_argument("--inject-fault", action="append", default=[], metavar="CHECK",
                             help="force the named check to fail, repeatable")
            sub.add_argument("--discretization", action="store_true",
                             help="also compare flag degree errors at n_grid and 2 n_grid")
    return parser


def load_config(args: argparse.Namespace) -> RunConfig:
    config = parse_config(args.config, args.override)
    if args.seed is not None:
        config.perturbation.seed = args.seed
    if args.out:
        config.output.directory = args.out
    return config


def command_run(config: RunConfig) -> int:
    result = run_service.run(config)
    with open(os.path.join(result.directory, "summary.txt"), "r", encoding="utf-8") as f:
        print(f.read().rstrip())
    return result.exit_code


def command_sweep(config: RunConfig) -> int:
    results = run_service.sweep(config)
    for result in results:
        print(f"{result.directory}: {result.status}")
    return run_service.combined_exit_code(results)


def command_verify(config: RunConfig, faults: List[str], discretization: bool) -> int:
    results = verify_service.verify(config, inject_fault=faults)
    for result in results:
        print(result.line())
    passed = verify_service.all_passed(results)

    if discretization:
        study = run_service.discretization_study(config)
        ok = study.ratio >= DISCRETIZATION_RATIO
        print(f"[{'PASS' if ok else 'FAIL'}] discretization_order: error {study.error_coarse:.3e} "
              f"(n={study.n_coarse}) -> {study.error_fine:.3e} (n={study.n_fine}), ratio {study.ratio:.1f}")
        passed = passed and ok

    print("=" * 60)
    print("ALL CHECKS PASSED" if passed else "SOME CHECKS FAILED")
    return run_service.EXIT_SUCCESS if passed else run_service.EXIT_CHECK_FAILED


def main(argv: Optional[List[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(
        format="%(name)s:%(levelname)s:%(message)s",
        level=logging.DEBUG if args.verbose else getattr(logging, settings.log_level.upper(), logging.INFO),
    )

    try:
        config = load_config(args)
        if args.command == "run":
            return command_run(config)
        if args.command == "sweep":
            return command_sweep(config)
        return command_verify(config, args.inject_fault, args.discretization)
    except ConfigError as e:
        logger.error(f"[ERROR] config: {e}")
        return run_service.EXIT_CONFIG_ERROR
    except NumericalAbort as e:
        logger.error(f"[ERROR] numerical abort: {e} {e.diagnostics}")
        return run_service.EXIT_ABORTED
    except ValueError as e:
        # precondition failures while building geometry or bundle
        logger.error(f"[ERROR] invalid input: {e}")
        return run_service.EXIT_CONFIG_ERROR


if __name__ == "__main__":
    sys.exit(main())
