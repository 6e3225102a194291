"""Command-line entry point: gen-data, train, sweep, measure, verify, report."""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from .. import worlds
from . import config as cfgmod
from . import experiment, report, verify
from .config import ConfigError
from .experiment import RunFailure

EXIT_OK, EXIT_INVALID, EXIT_VERIFY, EXIT_RUN = 0, 1, 2, 3


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        # usage errors are validation errors (exit 1), not verification failures
        self.print_usage(sys.stderr)
        self.exit(EXIT_INVALID, f"{self.prog}: error: {message}\n")


def _parser() -> argparse.ArgumentParser:
    common = _Parser(add_help=False)
    common.add_argument("--config", help="TOML config file")
    common.add_argument("--preset", help="built-in config (fig2-desk, mnist-distractor) or, for gen-data, a world")
    common.add_argument("--out", default="out", help="output directory (default: out)")
    common.add_argument("--seed", type=int, help="override seeds (grid seeds, data seed, or suite seed)")
    common.add_argument("--jobs", type=int, default=1, help="worker processes (default: 1)")
    common.add_argument("-v", "--verbose", action="store_true")

    p = _Parser(prog="offmanifold-lab", description=__doc__)
    sub = p.add_subparsers(dest="command", required=True)
    sub.add_parser("gen-data", parents=[common], help="write train/test datasets as CSV")
    sub.add_parser("train", parents=[common], help="train every grid point and save models")
    sub.add_parser("measure", parents=[common], help="measure saved models and write the report")
    sub.add_parser("sweep", parents=[common], help="train and measure every grid point")
    v = sub.add_parser("verify", parents=[common], help="run a self-check suite")
    v.add_argument("suite", choices=[*verify.SUITES, "all"])
    r = sub.add_parser("report", parents=[common], help="check and summarize an existing report")
    r.add_argument("--strict", action="store_true", help="also fail when rank-trend checks fail")
    return p


def _load_config(args) -> dict:
    overrides = {}
    if args.seed is not None:
        if args.seed < 0 or args.seed >= 2**64:
            raise ConfigError("--seed must be an unsigned 64-bit integer")
        overrides = {"grid": {"seeds": [args.seed]}} if args.command != "gen-data" else {
            "world": {"train_seed": args.seed, "test_seed": args.seed + 1}}
    return cfgmod.load(args.config, args.preset, overrides)


def _gen_data(args) -> int:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    if args.preset in worlds.PRESETS and args.config is None:
        seed = 0 if args.seed is None else args.seed
        w = worlds.preset(args.preset)
        w.sample(1000, seed).to_csv(out / "train.csv")
        w.sample(1000, seed + 1).to_csv(out / "test.csv")
    else:
        env = experiment.build_environment(_load_config(args))
        env.train.to_csv(out / "train.csv")
        env.test.to_csv(out / "test.csv")
    print(f"wrote {out / 'train.csv'} and {out / 'test.csv'}")
    return EXIT_OK


def _verify(args) -> int:
    suites = verify.SUITES if args.suite == "all" else (args.suite,)
    ok = True
    for s in suites:
        for c in verify.run(s, seed=0 if args.seed is None else args.seed):
            print(f"[{s}] {c.line()}")
            ok &= c.passed
    return EXIT_OK if ok else EXIT_VERIFY


def _report(args) -> int:
    out = Path(args.out)
    try:
        rows = report.read_csv(out / "report.csv")
        meta = json.loads((out / "report.json").read_text())
    except OSError as exc:
        raise ConfigError(f"no report in {out}: {exc}") from exc
    delta = meta["thresholds"]["delta_acc"]
    print(report.summary(rows))
    problems = report.consistency_problems(rows, delta)
    for p in problems:
        print(f"FAIL  regime consistency: {p}")
    if not problems:
        print("PASS  regime consistency: every row matches classify_regime on its own fields")
    print("alignment peaks:", json.dumps(meta.get("alignment_peaks", {}), sort_keys=True))
    trend_ok = True
    objectives = [o for o in ("gradnorm", "smoothness", "randsmooth") if any(r["objective"] == o for r in rows)]
    if objectives:
        for c in report.trend_checks(rows, objectives):
            print(c.line())
            trend_ok &= c.passed
        if any(o == "gradnorm" for o in objectives):
            for c in report.alignment_checks(rows):
                print(c.line())
                trend_ok &= c.passed
    if problems or (args.strict and not trend_ok):
        return EXIT_VERIFY
    return EXIT_OK


def _run(args) -> int:
    if args.jobs < 1:
        raise ConfigError("--jobs must be >= 1")
    if args.command == "gen-data":
        return _gen_data(args)
    if args.command == "verify":
        return _verify(args)
    if args.command == "report":
        return _report(args)
    cfg = _load_config(args)
    if args.command == "train":
        results = experiment.train_only(cfg, args.out, jobs=args.jobs)
        failed = [r for r in results if r.status != "ok"]
        print(f"trained {len(results) - len(failed)} of {len(results)} models into {Path(args.out) / 'models'}")
        for r in failed:
            print(f"  run {r.point.index} failed: {r.error}")
        return EXIT_RUN if len(failed) == len(results) else EXIT_OK
    rows = experiment.run_experiment(cfg, args.out, jobs=args.jobs, require_models=args.command == "measure",
                                     preset=args.preset)
    print(report.summary(rows))
    n_failed = sum(r["regime"] == report.FAILED for r in rows)
    print(f"wrote {Path(args.out) / 'report.csv'} ({len(rows)} rows, {n_failed} failed)")
    return EXIT_RUN if n_failed == len(rows) else EXIT_OK


def main(argv=None) -> int:
    try:
        args = _parser().parse_args(argv)
    except SystemExit as exc:  # usage errors and --help
        return int(exc.code or 0)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return _run(args)
    except (ConfigError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INVALID
    except RunFailure as exc:
        print(f"run failed: {exc}", file=sys.stderr)
        return EXIT_RUN
    except Exception as exc:  # anything unexpected during a run
        print(f"run failed: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_RUN


if __name__ == "__main__":
    sys.exit(main())
