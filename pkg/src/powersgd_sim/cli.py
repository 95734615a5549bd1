"""Command-line harness: ``run``, ``sweep`` and ``report``.

Exit codes: 0 all verdicts pass, 1 a verdict failed, 2 usage or config
error, 3 numerical divergence.
"""
from __future__ import annotations

import argparse
import itertools
import logging
import math
import sys
from pathlib import Path

from .config import describe, load_config, load_sweep
from .errors import ConfigError
from .study import (
    CHECK_SENSE,
    CHECKS,
    StudyDivergence,
    read_summary_csv,
    run_study,
    summary_csv,
    write_text,
)

EXIT_OK, EXIT_VERDICT, EXIT_CONFIG, EXIT_DIVERGED = 0, 1, 2, 3

log = logging.getLogger("powersgd_sim")


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise ConfigError(message)


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="powersgd-sim", description=__doc__.splitlines()[0])
    parser.add_argument("--out-dir", default="out", help="directory for CSV artifacts")
    parser.add_argument("--seed", type=int, default=None, help="override master_seed")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)
    p = sub.add_parser("run", help="run the trials of one config")
    p.add_argument("config")
    p = sub.add_parser("sweep", help="run the cross product of a parameter grid")
    p.add_argument("config")
    p.add_argument("sweep_spec")
    p = sub.add_parser("report", help="print the verdict table of a summary CSV")
    p.add_argument("summary")
    return parser


def _apply_seed(config, seed):
    return config if seed is None else config.with_values(master_seed=seed)


def _print_summary(s, out=sys.stdout):
    print(f"{describe(s.config)}: eta={s.eta:.6g}", file=out)
    ci = "" if math.isnan(s.ci_half_width) else f" +/- {s.ci_half_width:.4g}"
    print(f"  final grad_sq mean {s.mean_grad_sq_final:.6g}{ci}; T-average {s.mean_grad_sq_timeavg:.6g}; "
          f"comm {s.comm_total} floats/node", file=out)
    for v in s.verdicts:
        if v.status != "na":
            print(f"  {v.name:<12}{v.status.upper():<5} observed={v.observed:.6g} bound={v.bound:.6g}", file=out)


def cmd_run(args) -> int:
    config = _apply_seed(load_config(args.config), args.seed)
    out_dir = Path(args.out_dir)
    try:
        summary = run_study(config, out_dir)
    except StudyDivergence as exc:
        print(f"diverged: trial {exc.trial} step {exc.step}; partial CSV written to {out_dir}",
              file=sys.stderr)
        return EXIT_DIVERGED
    write_text(out_dir / "summary.csv", summary_csv([summary.row(0)]))
    _print_summary(summary)
    return EXIT_OK if summary.passed else EXIT_VERDICT


def cmd_sweep(args) -> int:
    base = _apply_seed(load_config(args.config), args.seed)
    grid = load_sweep(args.sweep_spec)
    names = [name for name, _ in grid]
    cells = [dict(zip(names, combo)) for combo in itertools.product(*(vals for _, vals in grid))]
    configs = [base.with_values(**cell) for cell in cells]  # validate every cell up front
    out_dir = Path(args.out_dir)
    rows, passed = [], True
    for i, (cell, config) in enumerate(zip(cells, configs)):
        cell_dir = out_dir / f"cell_{i:03d}"
        try:
            summary = run_study(config, cell_dir)
        except StudyDivergence as exc:
            write_text(out_dir / "summary.csv", summary_csv(rows))
            print(f"diverged in cell {i} {cell}: trial {exc.trial} step {exc.step}", file=sys.stderr)
            return EXIT_DIVERGED
        rows.append(summary.row(i))
        passed &= summary.passed
        print(f"[cell {i}] {cell}", flush=True)
        _print_summary(summary)
    write_text(out_dir / "summary.csv", summary_csv(rows))
    return EXIT_OK if passed else EXIT_VERDICT


def _num(text: str) -> float:
    try:
        return float(text) if text != "" else math.nan
    except ValueError:
        raise ConfigError(f"non-numeric value {text!r} in summary") from None


def cmd_report(args) -> int:
    rows = read_summary_csv(args.summary)
    failed = False
    for row in rows:
        print(f"cell {row['cell']}: {row['problem']} {row['schedule']} N={row['N']} r={row['r']} "
              f"tau={row['tau']} eta={row['eta_resolved']} mu={row['mu']} T={row['T']} "
              f"trials={row['trials']}")
        print(f"  {'check':<12}{'status':<7}{'bound':>14}{'observed':>14}{'margin':>14}  detail")
        for c in CHECKS:
            status = row[f"{c}_status"]
            if status == "na":
                continue
            obs, bound = _num(row[f"{c}_observed"]), _num(row[f"{c}_bound"])
            sense = CHECK_SENSE.get(c, "<=")
            margin = obs - bound if sense == ">=" else (-abs(obs - bound) + 0.0 if sense == "==" else bound - obs)
            print(f"  {c:<12}{status.upper():<7}{bound:>14.6g}{obs:>14.6g}{margin:>14.6g}  "
                  f"{row[f'{c}_detail']}")
            failed |= status == "fail"
        if row["epsilon_zero"]:
            print(f"  observed mean final grad_sq {_num(row['mean_grad_sq_final']):.6g} "
                  f"(+/- {_num(row['ci_half_width']):.3g}) vs epsilon_0 {_num(row['epsilon_zero']):.6g}")
        print(f"  comm per node: exact {row['comm_total']}, simplified figure x T {_num(row['comm_simplified']):.6g}")
        if row["oracle_mean_var"]:
            print(f"  oracle mean variance at x0: {_num(row['oracle_mean_var']):.6g}")
    _print_variance_study(rows)
    return EXIT_VERDICT if failed else EXIT_OK


def _print_variance_study(rows):
    # Averaging N independent oracles divides the variance by N.
    pts = [(int(r["N"]), _num(r["oracle_mean_var"])) for r in rows if r["oracle_mean_var"]]
    if len({n for n, _ in pts}) < 2:
        return
    n0, v0 = pts[0]
    print("oracle variance vs N (ratio to first cell; 1/N scaling predicts N/N0):")
    for n, v in pts:
        print(f"  N={n:<5} variance {v:.6g}  ratio {v0 / v:.4g}  predicted {n / n0:.4g}")


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                            format="%(levelname)s %(name)s: %(message)s")
        handler = {"run": cmd_run, "sweep": cmd_sweep, "report": cmd_report}[args.command]
        return handler(args)
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
