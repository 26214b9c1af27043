"""Command-line entry point: ``saddlemix {generate,run,compare,grid,validate}``."""

import argparse
import json
import logging
import sys

from . import harness, problems
from .oracle import ContractError, NumericError
from .trace import write_text_atomic

EXIT_OK, EXIT_USAGE, EXIT_NUMERIC, EXIT_BUDGET = 0, 1, 2, 3


def _config(args):
    cfg = harness.RunConfig()
    if getattr(args, "config", None):
        cfg = harness.load_config(args.config, cfg)
    pairs = [harness.parse_setting(s) for s in getattr(args, "set", None) or []]
    return harness.apply_settings(cfg, pairs).validate()


def _add_config_args(p):
    p.add_argument("--config", help="flat key=value file, or a trace file to replay")
    p.add_argument("--set", action="append", metavar="KEY=VALUE",
                   help="override one config key (repeatable; wins over --config)")


def cmd_generate(args):
    cfg = _config(args)
    problem = harness.build_problem(cfg)
    problems.save_problem(problem, args.out)
    print(f"wrote {cfg.problem} problem n={problem.n} d={problem.d} to {args.out}")
    return EXIT_OK


def cmd_run(args):
    cfg = _config(args)
    outcome = harness.run_to_files(cfg)
    print(json.dumps(outcome.summary, sort_keys=True))
    if outcome.summary["budget_exhausted"] and cfg.budget_fatal:
        return EXIT_BUDGET
    return EXIT_OK


def cmd_compare(args):
    cfg = _config(args)
    methods = [m.strip() for m in args.methods.split(",") if m.strip()]
    for m in methods:
        if m not in harness.METHODS:
            raise ContractError(f"unknown method {m!r}")
    problem = harness.build_problem(cfg)
    table = harness.compare(problem, cfg, methods, out_prefix=args.prefix)
    text = harness.format_table(table)
    if args.out:
        write_text_atomic(args.out, text)
    sys.stdout.write(text)
    if cfg.budget_fatal and any(r["budget_exhausted"] for r in table):
        return EXIT_BUDGET
    return EXIT_OK


def cmd_grid(args):
    cfg = _config(args)
    grid = {}
    for axis in args.axis:
        key, values = harness.parse_setting(axis)
        grid[key] = [harness._coerce(key, v) for v in values.split(",")]
    problem = harness.build_problem(cfg)
    try:
        best, table = harness.grid_search(problem, cfg, grid, seed=cfg.seed, tied=args.tied)
    except harness.GridError as exc:
        for row in exc.table:
            print(json.dumps(row, sort_keys=True, default=str))
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    for row in table:
        print(json.dumps(row, sort_keys=True, default=str))
    best_cell = {k: getattr(best, k) for k in grid}
    if args.tied and "adam_alpha" in grid:
        best_cell["adam_eps"] = best.adam_eps
    print("best " + json.dumps(best_cell, sort_keys=True))
    return EXIT_OK


def cmd_validate(args):
    rows = harness.validate_problems(pairs=args.pairs, seed=args.seed)
    ok = True
    for name, check, value, passed in rows:
        ok &= passed
        print(f"{'PASS' if passed else 'FAIL'} {name:<10} {check:<24} {value:.3e}")
    return EXIT_OK if ok else EXIT_NUMERIC


def build_parser():
    parser = argparse.ArgumentParser(prog="saddlemix", description=__doc__)
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("generate", help="write a serialized problem instance")
    _add_config_args(p)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_generate)

    p = sub.add_parser("run", help="run one optimizer stack, write trace and summary")
    _add_config_args(p)
    p.set_defaults(func=cmd_run)

    p = sub.add_parser("compare", help="run several stacks on one problem")
    _add_config_args(p)
    p.add_argument("--methods", default="sgd,adam,svrg,cubic,mix")
    p.add_argument("--prefix", help="write per-method traces to PREFIX<method>.csv")
    p.add_argument("--out", help="write the summary table here as CSV")
    p.set_defaults(func=cmd_compare)

    p = sub.add_parser("grid", help="grid search over config keys")
    _add_config_args(p)
    p.add_argument("--axis", action="append", required=True, metavar="KEY=V1,V2,...")
    p.add_argument("--tied", action="store_true", help="tie adam_eps to adam_alpha")
    p.set_defaults(func=cmd_grid)

    p = sub.add_parser("validate", help="oracle self-checks on shipped problems")
    p.add_argument("--pairs", type=int, default=20)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_validate)
    return parser


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except ContractError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except NumericError as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (problems.SpectrumError, ArithmeticError) as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
