"""Command line interface.

    esorqp run --config scenarios/acc.yaml --out out/acc
    esorqp sweep --config scenarios/acc.yaml --axis observer.bandwidth --values 5,10,20,40
    esorqp bounds --config scenarios/segway.yaml
    esorqp verify --log out/acc/trajectory.csv --config scenarios/acc.yaml

Exit codes: 0 on success, 1 on a runtime error, 2 when a safety violation
(or a failed bound check) is detected, 3 when infeasible QP samples occurred.
"""
import argparse
import logging
import os
import sys

import yaml

from .config import read_config, write_config
from .harness import (build_scenario, compute_metrics, export_bounds, export_csv,
                      read_log_csv, run_scenario, sweep, sweep_rows, verify_bounds)
from .bounds import bounds_rows
from .utils import EsorError

logger = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_ERROR = 1
EXIT_UNSAFE = 2
EXIT_INFEASIBLE = 3
PASS_RATE = 0.999


def _parse_value(text):
    try:
        return float(text)
    except ValueError:
        return yaml.safe_load(text)


def _exit_code(metrics):
    if metrics.violations > 0:
        return EXIT_UNSAFE
    if metrics.infeasible > 0:
        return EXIT_INFEASIBLE
    return EXIT_OK


def _print_rows(rows):
    if not rows:
        return
    header = list(rows[0].keys())
    print("\t".join(header))
    for row in rows:
        print("\t".join(f"{row[k]:.6g}" if isinstance(row[k], float) else str(row[k])
                        for k in header))


def cmd_run(args):
    cfg = read_config(args.config)
    if args.controller:
        cfg = cfg._replace(controller=args.controller)
    out = args.out or cfg.output
    os.makedirs(out, exist_ok=True)
    scenario = build_scenario(cfg)
    log = run_scenario(cfg, scenario)
    metrics = compute_metrics(log, cfg.bounds.transient)
    export_csv(log, os.path.join(out, "trajectory.csv"))
    export_csv(metrics, os.path.join(out, "metrics.csv"))
    export_bounds(scenario, os.path.join(out, "bounds.csv"))
    write_config(cfg, os.path.join(out, "config.yaml"))
    _print_rows([metrics._asdict()])
    return _exit_code(metrics)


def cmd_sweep(args):
    cfg = read_config(args.config)
    values = [_parse_value(v) for v in args.values.split(",")]
    rows = sweep(cfg, args.axis, values, args.workers)
    records = sweep_rows(rows, args.axis)
    if args.out:
        os.makedirs(args.out, exist_ok=True)
        export_csv(records, os.path.join(args.out, "sweep.csv"))
    _print_rows(records)
    codes = [_exit_code(row.metrics) for row in rows]
    return EXIT_UNSAFE if EXIT_UNSAFE in codes else max(codes)


def cmd_bounds(args):
    scenario = build_scenario(read_config(args.config))
    names = [c.name for c in scenario.plant.channels]
    if args.out:
        export_bounds(scenario, args.out)
    _print_rows(bounds_rows(scenario.bounds, names))
    return EXIT_OK


def cmd_verify(args):
    cfg = read_config(args.config)
    scenario = build_scenario(cfg)
    log = read_log_csv(args.log)
    report = verify_bounds(log, scenario.bounds, cfg.bounds.transient)
    print(f"containment\t{report.containment:.6f}")
    print(f"sufficiency\t{report.sufficiency:.6f}")
    print(f"max_exceedance\t{report.max_exceedance:.6g}")
    print(f"flagged\t{len(report.flagged)}")
    for t, check, name in report.flagged[:args.show]:
        print(f"  t={t:.4f}\t{check}\t{name}")
    if report.containment < PASS_RATE or report.sufficiency < PASS_RATE:
        return EXIT_UNSAFE
    return EXIT_OK


def build_parser():
    parser = argparse.ArgumentParser(prog="esorqp",
                                     description="Observer-based robust CBF safety filters")
    verbosity = parser.add_mutually_exclusive_group()
    verbosity.add_argument("-v", "--verbose", action="store_true", help="Log debug messages")
    verbosity.add_argument("-q", "--quiet", action="store_true", help="Log warnings only")
    commands = parser.add_subparsers(dest="command", required=True)

    run = commands.add_parser("run", help="Run one scenario")
    run.add_argument("--config", required=True, help="Scenario YAML file")
    run.add_argument("--out", help="Output directory (default: the config's output)")
    run.add_argument("--controller", help="Override the configured controller")
    run.set_defaults(func=cmd_run)

    sw = commands.add_parser("sweep", help="Run a scenario over values of one field")
    sw.add_argument("--config", required=True, help="Scenario YAML file")
    sw.add_argument("--axis", required=True, help="Dotted field, e.g. observer.bandwidth")
    sw.add_argument("--values", required=True, help="Comma-separated values")
    sw.add_argument("--workers", type=int, default=1, help="Parallel runs")
    sw.add_argument("--out", help="Directory for sweep.csv")
    sw.set_defaults(func=cmd_sweep)

    bd = commands.add_parser("bounds", help="Print the observer error bounds")
    bd.add_argument("--config", required=True, help="Scenario YAML file")
    bd.add_argument("--out", help="Write the bounds as CSV to this file")
    bd.set_defaults(func=cmd_bounds)

    vf = commands.add_parser("verify", help="Check a logged trajectory against its bounds")
    vf.add_argument("--log", required=True, help="trajectory.csv from a run")
    vf.add_argument("--config", required=True, help="Scenario YAML file of the run")
    vf.add_argument("--show", type=int, default=10, help="Flagged samples to print")
    vf.set_defaults(func=cmd_verify)
    return parser


def main(argv=None):
    args = build_parser().parse_args(argv)
    level = logging.DEBUG if args.verbose else logging.WARNING if args.quiet else logging.INFO
    logging.basicConfig(level=level, format="%(asctime)s %(name)s %(levelname)s %(message)s")
    try:
        return args.func(args)
    except (EsorError, OSError) as e:
        logger.error("%s", getattr(e, "message", e))
        return EXIT_ERROR


if __name__ == "__main__":
    sys.exit(main())
