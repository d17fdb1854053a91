"""Command-line interface: generate | run | sweep | report.

Exit codes: 0 success, 1 usage error, 2 data error, 3 numerical failure.
"""

from __future__ import annotations

import argparse
import os
import sys

from .cohort import GenConfig
from .exceptions import ConvergenceError, DataFormatError
from .pipeline import (ExperimentConfig, emit_plot_data, format_summary, load_config,
                       run_experiment, run_generate, run_sweep)

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_DATA = 2
EXIT_NUMERICAL = 3


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="trajsurv",
        description="LSTM trajectory features feeding Cox prognosis, end to end.")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--config", metavar="PATH", help="flat key=value config file")
        p.add_argument("--seed", type=int, metavar="N", help="master seed")
        p.add_argument("--out", metavar="DIR", help="output directory")

    gen = sub.add_parser("generate", help="write a calibrated synthetic cohort")
    common(gen)
    gen.add_argument("--n", type=int, metavar="N", help="number of subjects")
    gen.add_argument("--visits", metavar="PATH", help="visits CSV to write")
    gen.add_argument("--outcomes", metavar="PATH", help="outcomes CSV to write")

    for name, text in (("run", "train, fit the model family, and report"),
                       ("sweep", "repeat the imaging-augmented model over hidden sizes")):
        p = sub.add_parser(name, help=text)
        common(p)
        p.add_argument("--max-iters", type=int, metavar="N",
                       help="training iteration cap (desk-scale override)")
        p.add_argument("--visits", metavar="PATH", help="visits CSV")
        p.add_argument("--outcomes", metavar="PATH", help="outcomes CSV")

    rep = sub.add_parser("report", help="emit plot-data CSVs from a finished run")
    common(rep)
    rep.add_argument("--report", metavar="PATH",
                     help="report.csv path (default: <out>/report.csv)")
    return parser


def _config_from_args(args) -> ExperimentConfig:
    overrides = {"seed": getattr(args, "seed", None),
                 "out_dir": getattr(args, "out", None),
                 "max_iters": getattr(args, "max_iters", None),
                 "visits_path": getattr(args, "visits", None),
                 "outcomes_path": getattr(args, "outcomes", None),
                 "n_subjects": getattr(args, "n", None)}
    return load_config(args.config, **overrides)


def _cmd_generate(args) -> int:
    cfg = _config_from_args(args)
    defaults = ExperimentConfig()
    # with no explicit file paths, the CSVs land inside the output directory
    if cfg.visits_path == defaults.visits_path:
        cfg.visits_path = os.path.join(cfg.out_dir, "visits.csv")
    if cfg.outcomes_path == defaults.outcomes_path:
        cfg.outcomes_path = os.path.join(cfg.out_dir, "outcomes.csv")
    gen = GenConfig(n_subjects=cfg.n_subjects, seed=cfg.seed)
    summary = run_generate(cfg, gen)
    print(f"wrote {cfg.visits_path} and {cfg.outcomes_path}")
    print(format_summary(summary))
    return EXIT_OK


def _cmd_run(args) -> int:
    cfg = _config_from_args(args)
    report = run_experiment(cfg)
    for row in report.rows:
        print(f"{row.model:<22} {row.horizon:>2}m  C={row.c_index:.4f}  "
              f"n={row.n_subjects} events={row.n_events}")
    for cmp in report.comparisons:
        print(f"{cmp.model_a} vs {cmp.model_b} ({cmp.horizon}m): "
              f"dC={cmp.delta_c:+.4f} p={cmp.p_value:.4f}")
    print(f"report written to {os.path.join(cfg.out_dir, 'report.csv')}")
    return EXIT_OK


def _cmd_sweep(args) -> int:
    cfg = _config_from_args(args)
    results = run_sweep(cfg)
    for dim, horizon, c in results:
        print(f"hidden_dim={dim} {horizon}m C={c:.4f}")
    print(f"sweep written to {os.path.join(cfg.out_dir, 'sweep.csv')}")
    return EXIT_OK


def _cmd_report(args) -> int:
    cfg = _config_from_args(args)
    report_path = args.report or os.path.join(cfg.out_dir, "report.csv")
    written = emit_plot_data(report_path, cfg.out_dir)
    for path in written:
        print(f"wrote {path}")
    return EXIT_OK


_DISPATCH = {"generate": _cmd_generate, "run": _cmd_run,
             "sweep": _cmd_sweep, "report": _cmd_report}


def main(argv=None) -> int:
    parser = _build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_OK if exc.code == 0 else EXIT_USAGE
    try:
        return _DISPATCH[args.command](args)
    except (DataFormatError, FileNotFoundError, OSError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except (ConvergenceError, FloatingPointError) as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL
    except ValueError as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
