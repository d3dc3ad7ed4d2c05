"""Command line front end: run simulations, aggregate figure CSVs, dump layout."""

from __future__ import annotations

import argparse
import sys

from .config import MODES, ConfigError, load_config
from .geometry import build_layout, layout_csv
from .metrics import aggregate_runs, fmt


def _add_run_args(p: argparse.ArgumentParser):
    p.add_argument("--mode", choices=MODES)
    p.add_argument("--users-per-cell", type=int, dest="users_per_cell")
    p.add_argument("--seed", type=int)
    p.add_argument("--duration-ttis", type=int, dest="duration_ttis")
    p.add_argument("--warmup-ttis", type=int, dest="warmup_ttis")
    p.add_argument("--config", default=None, help="flat key = value config file")
    p.add_argument("--out", default=None, help="output directory for CSVs")
    p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                   help="override any config key")


def _overrides(args) -> dict:
    ov = {}
    for key in ("mode", "users_per_cell", "seed", "duration_ttis", "warmup_ttis"):
        val = getattr(args, key, None)
        if val is not None:
            ov[key] = val
    for item in args.set:
        if "=" not in item:
            raise ConfigError(f"--set expects KEY=VALUE, got {item!r}")
        k, v = item.split("=", 1)
        ov[k.strip()] = v.strip()
    return ov


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(prog="mbmsim",
                                     description="Cellular mobile-TV multicast simulator")
    sub = parser.add_subparsers(dest="cmd", required=True)

    run_p = sub.add_parser("run", help="execute one simulation run")
    _add_run_args(run_p)

    agg_p = sub.add_parser("report", help="aggregate figure CSVs over run directories")
    agg_p.add_argument("--runs", nargs="+", required=True)
    agg_p.add_argument("--out", required=True)

    lay_p = sub.add_parser("layout", help="dump the cell layout as CSV")
    lay_p.add_argument("--config", default=None)
    lay_p.add_argument("--out", default=None, help="file path (default: stdout)")

    args = parser.parse_args(argv)
    try:
        if args.cmd == "run":
            from .engine import run as engine_run
            cfg = load_config(args.config, _overrides(args))
            result = engine_run(cfg, args.out)
            r = result.record
            print(f"mode={r.mode} users_per_cell={r.users_per_cell} seed={r.seed} "
                  f"sessions={r.sessions_evaluated} usr={fmt(r.usr)} "
                  f"group_power_w={fmt(r.group_power_w)} "
                  f"attempts={fmt(r.avg_harq_attempts)} load={fmt(r.avg_load)}")
            return 0
        if args.cmd == "report":
            aggregate_runs(args.runs, args.out)
            print(f"wrote fig2..fig7 CSVs to {args.out}")
            return 0
        if args.cmd == "layout":
            cfg = load_config(args.config, {})
            text = layout_csv(build_layout(cfg))
            if args.out:
                with open(args.out, "w", encoding="utf-8") as fh:
                    fh.write(text)
            else:
                sys.stdout.write(text)
            return 0
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    except Exception as exc:  # invariant violations and IO errors
        print(f"error: {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
