"""Command-line entry point: ``srnlna {simulate,infer,gradcheck,evaluate}``."""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from . import experiment as ex
from .lna import VARIANTS


def _parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="srnlna", description=__doc__)
    p.add_argument("-v", "--verbose", action="count", default=0, help="more logging (repeatable)")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("simulate", help="simulate one synthetic dataset per replication")
    s.add_argument("--config", required=True, type=Path)
    s.add_argument("--out", required=True, type=Path)
    s.add_argument("--trajectories", action="store_true", help="also export SSA paths as CSV")

    i = sub.add_parser("infer", help="run every sampler cell on every replication")
    i.add_argument("--config", required=True, type=Path)
    i.add_argument("--data", required=True, type=Path, help="directory written by simulate")
    i.add_argument("--out", required=True, type=Path)
    i.add_argument("--cells", nargs="+", help="restrict to these sampler names")
    i.add_argument("--reps", nargs="+", type=int, help="restrict to these replication indices")
    i.add_argument("--workers", type=int, help=f"worker processes (default ${ex.WORKERS_ENV} or 1)")

    g = sub.add_parser("gradcheck", help="compare analytic and finite-difference gradients")
    g.add_argument("--config", required=True, type=Path)
    g.add_argument("--data", required=True, type=Path, help="a dataset file")
    g.add_argument("--draws", required=True, type=int)
    g.add_argument("--variant", choices=VARIANTS, default=VARIANTS[0])
    g.add_argument("--report", type=Path, help="write the full report as JSON")

    e = sub.add_parser("evaluate", help="RMSE table and convergence traces from chain files")
    e.add_argument("--in", dest="in_dir", required=True, type=Path)
    e.add_argument("--truth", required=True, type=Path)
    e.add_argument("--out", required=True, type=Path)
    return p


def main(argv=None) -> int:
    args = _parser().parse_args(argv)
    level = logging.WARNING - 10 * min(args.verbose, 2)
    logging.basicConfig(level=level, format="%(levelname)s %(name)s: %(message)s")
    try:
        if args.command == "simulate":
            cfg = ex.load_config(args.config)
            paths = ex.cmd_simulate(cfg, args.out, args.trajectories, diagnostics=args.verbose > 0)
            print(f"wrote {len(paths)} datasets to {args.out}")
        elif args.command == "infer":
            cfg = ex.load_config(args.config)
            results = ex.cmd_infer(cfg, args.data, args.out, args.cells, args.reps, args.workers)
            for rep, name, rate in results:
                print(f"rep {rep:02d} {name}: acceptance {rate:.3f}")
        elif args.command == "gradcheck":
            if args.draws < 0:
                raise ValueError("--draws must be >= 0")
            cfg = ex.load_config(args.config)
            report = ex.cmd_gradcheck(cfg, args.data, args.draws, args.variant)
            if args.report:
                args.report.write_text(json.dumps(report, indent=1) + "\n", encoding="utf-8")
            for k, row in enumerate(report["draws"]):
                print(f"draw {k:3d}: rel. error {row['rel_error']:.3e}")
            status = "ok" if report["passed"] else "FAILED"
            print(f"max relative error {report['max_rel_error']:.3e} (tolerance {report['tolerance']:g}): {status}")
            return 0 if report["passed"] else 1
        elif args.command == "evaluate":
            table, _ = ex.cmd_evaluate(args.in_dir, args.truth, args.out)
            for cell, name, mean, half, n in table:
                print(f"{cell:24s} {name:12s} {float(mean):.4f} +- {float(half):.4f} (n={n})")
    except (ex.ConfigError, ValueError, FileNotFoundError, RuntimeError) as err:
        print(f"srnlna: error: {err}", file=sys.stderr)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
