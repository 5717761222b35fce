"""Command-line front end: weakmeaspy run | validate | replay | report."""
import argparse
import csv
import logging
import sys
from pathlib import Path

from .continuous import Trajectory, moment_functional
from .discrete import ChainRecord
from .ensemble import EnsembleRunner, acceptance, describe_system, format_report, load_config, load_stats, \
    read_records, replay_record, write_report_tables
from .logger import Logger
from .weakmeaserror import PersistenceError, WeakMeasError

EXIT_OK = 0
EXIT_ERROR = 1
EXIT_REJECTED = 2


def parse_args(argv: list[str] | None = None) -> argparse.Namespace:
    parser = argparse.ArgumentParser(prog="weakmeaspy", description=__doc__)
    verbosity = parser.add_mutually_exclusive_group()
    verbosity.add_argument("-v", "--verbose", action="store_true", help="Log at DEBUG level.")
    verbosity.add_argument("-q", "--quiet", action="store_true", help="Log warnings and errors only.")
    commands = parser.add_subparsers(dest="command", required=True)

    run = commands.add_parser("run", help="Run an ensemble and write stats, summary and trajectories.")
    run.add_argument("config", type=Path, help="YAML experiment config.")
    run.add_argument("--set", dest="overrides", action="append", default=[], metavar="KEY=VALUE",
                     help="Override a config value, e.g. ensemble.master_seed=7. Repeatable.")
    run.add_argument("--output-dir", type=Path, default=None, help="Directory for all artefacts.")

    validate = commands.add_parser("validate", help="Check a config and print the resolved system.")
    validate.add_argument("config", type=Path)
    validate.add_argument("--set", dest="overrides", action="append", default=[], metavar="KEY=VALUE")

    replay = commands.add_parser("replay", help="Recompute one recorded trajectory and write its per-step CSV.")
    replay.add_argument("trajectories", type=Path, help="trajectories.jsonl written by 'run'.")
    replay.add_argument("--index", type=int, default=0, help="Trajectory index to replay.")
    replay.add_argument("--config", type=Path, default=None,
                        help="Experiment config; needed for discrete chains and state-diffusion runs.")
    replay.add_argument("--every", type=int, default=1, help="Keep every m-th stored point in the CSV.")
    replay.add_argument("--csv", type=Path, default=None, help="Output CSV (default: replay_<index>.csv).")

    report = commands.add_parser("report", help="Summarize a stats file and write plot-ready tables.")
    report.add_argument("stats", type=Path, help="stats.json written by 'run'.")
    return parser.parse_args(argv)


def _level(args: argparse.Namespace) -> int:
    if args.verbose:
        return logging.DEBUG
    if args.quiet:
        return logging.WARNING
    return logging.INFO


def cmd_run(args: argparse.Namespace, logger: logging.Logger) -> int:
    cfg = load_config(args.config, args.overrides, output_dir=args.output_dir)
    Path(cfg.output.directory).mkdir(parents=True, exist_ok=True)
    Logger("weakmeaspy", log_file=Path(cfg.output.directory) / "run.log")
    runner = EnsembleRunner(cfg)
    stats = runner.run()
    runner.write_outputs(stats)
    print(format_report(stats))
    result = acceptance(stats)
    if not result.passed:
        for failure in result.failures:
            logger.warning(failure)
        return EXIT_REJECTED
    return EXIT_OK


def cmd_validate(args: argparse.Namespace, logger: logging.Logger) -> int:
    cfg = load_config(args.config, args.overrides)
    facts = describe_system(cfg)
    for key, value in facts.items():
        print(f"{key:>12}: {value}")
    return EXIT_OK


def _chain_rows(record: ChainRecord, every: int) -> list[list[float]]:
    picked = list(range(0, len(record.xs), every))
    if picked[-1] != len(record.xs) - 1:
        picked.append(len(record.xs) - 1)
    return [[s, *record.xs[s].tolist(), float(moment_functional(record.xs[s]))] for s in picked]


def cmd_replay(args: argparse.Namespace, logger: logging.Logger) -> int:
    records = [r for r in read_records(args.trajectories) if r.index == args.index]
    if not records:
        raise PersistenceError(f"{args.trajectories} holds no trajectory with index {args.index}",
                               response=str(args.trajectories))
    cfg = load_config(args.config) if args.config else None
    replayed = replay_record(records[0], cfg)
    target = args.csv or args.trajectories.parent / f"replay_{args.index}.csv"
    if isinstance(replayed, Trajectory):
        replayed.to_csv(target, every=args.every)
    else:
        with open(target, "w", newline="") as handle:
            writer = csv.writer(handle)
            writer.writerow(["step", *[f"x{i}" for i in range(replayed.p0.n)], "moment"])
            writer.writerows(_chain_rows(replayed, args.every))
    logger.info(f"trajectory {args.index} reproduced; wrote {target}")
    return EXIT_OK


def cmd_report(args: argparse.Namespace, logger: logging.Logger) -> int:
    stats = load_stats(args.stats)
    print(format_report(stats))
    for path in write_report_tables(stats, args.stats.parent):
        logger.info(f"wrote {path}")
    return EXIT_OK


COMMANDS = {"run": cmd_run, "validate": cmd_validate, "replay": cmd_replay, "report": cmd_report}


def main(argv: list[str] | None = None) -> int:
    args = parse_args(argv)
    logger = Logger("weakmeaspy.cli", level=_level(args)).get_logger()
    try:
        return COMMANDS[args.command](args, logger)
    except WeakMeasError as e:
        logger.error(str(e))
        print(f"error: {e}", file=sys.stderr)
        return EXIT_ERROR
    finally:
        Logger.close_file_handlers()


if __name__ == "__main__":
    sys.exit(main())
