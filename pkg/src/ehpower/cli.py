"""Command-line front end.

    ehpower solve        --config cfg.json [--seed N] [--out file.json]
    ehpower sweep-eta    --config cfg.json [--seed N] [--out file.csv]
                         [--format csv|json] [--jobs J]
    ehpower trace-region --config cfg.json [--seed N] [--out file.csv]
                         [--format csv|json] [--jobs J]
    ehpower dp-train     --config cfg.json [--seed N] --out tables.npz
    ehpower validate     --config cfg.json [--seed N] solution.json

Exit codes: 0 on success, 2 for configuration problems, 3 when a solver
fails. The config schema is documented in the README and in ehpower.bench.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import math
import sys

import numpy as np

from .bench import (
    REGION_COLUMNS,
    SWEEP_COLUMNS,
    ConfigError,
    load_config,
    rows_to_json,
    solve_one,
    sweep_eta,
    trace_region,
    write_rows,
)
from .core import RealizedPolicy, validate_policy
from .online import value_iterate
from .rates import companion_threshold


def _add_common(sub, jobs: bool = False, fmt: bool = True):
    sub.add_argument("--config", required=True, help="experiment config JSON")
    sub.add_argument("--seed", type=int, default=None,
                     help="override the config's master_seed")
    sub.add_argument("--out", default=None, help="output path (default: stdout)")
    if fmt:
        sub.add_argument("--format", choices=("csv", "json"), default="csv",
                         help="table output format (default: csv)")
    if jobs:
        sub.add_argument("--jobs", type=int, default=1,
                         help="worker processes; results are identical for any value")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="ehpower",
        description="Throughput studies for an energy-harvesting transmitter "
                    "with a lossy battery.",
    )
    subs = parser.add_subparsers(dest="command", required=True)

    solve = subs.add_parser("solve", help="solve one instance and dump JSON")
    _add_common(solve, fmt=False)
    solve.set_defaults(func=_cmd_solve)

    sweep = subs.add_parser("sweep-eta", help="policies across the eta grid")
    _add_common(sweep, jobs=True)
    sweep.set_defaults(func=_cmd_sweep)

    region = subs.add_parser("trace-region", help="broadcast rate-region boundary")
    _add_common(region, jobs=True)
    region.set_defaults(func=_cmd_region)

    train = subs.add_parser("dp-train", help="train DP tables and save them")
    _add_common(train, fmt=False)
    train.set_defaults(func=_cmd_dp_train)

    check = subs.add_parser("validate", help="re-check a solve dump against its config")
    _add_common(check, fmt=False)
    check.add_argument("solution", help="JSON file produced by the solve command")
    check.set_defaults(func=_cmd_validate)
    return parser


def _load(args):
    cfg = load_config(args.config)
    if args.seed is not None:
        cfg = dataclasses.replace(cfg, master_seed=args.seed)
    return cfg


def _emit_text(text: str, out_path):
    if out_path is None:
        sys.stdout.write(text)
        if not text.endswith("\n"):
            sys.stdout.write("\n")
    else:
        with open(out_path, "w") as fh:
            fh.write(text)
            if not text.endswith("\n"):
                fh.write("\n")


def _emit_rows(rows, columns, args):
    if args.format == "json":
        _emit_text(rows_to_json(rows), args.out)
    elif args.out is None:
        write_rows(rows, columns, sys.stdout)
    else:
        with open(args.out, "w", newline="") as fh:
            write_rows(rows, columns, fh)


def _cmd_solve(args) -> int:
    cfg = _load(args)
    dump = solve_one(cfg)
    _emit_text(json.dumps(dump, indent=2), args.out)
    return 0


def _cmd_sweep(args) -> int:
    cfg = _load(args)
    rows = sweep_eta(cfg, jobs=args.jobs)
    _emit_rows(rows, SWEEP_COLUMNS, args)
    return 0


def _cmd_region(args) -> int:
    cfg = _load(args)
    rows = trace_region(cfg, jobs=args.jobs)
    _emit_rows(rows, REGION_COLUMNS, args)
    return 0


def _cmd_dp_train(args) -> int:
    if args.out is None:
        raise ConfigError("dp-train needs --out (an .npz path for the tables)")
    cfg = _load(args)
    rate = cfg.rate()
    dist = cfg.distribution()
    solution = value_iterate(cfg.storage, dist, rate, cfg.dp_config(rate, dist))
    solution.save(args.out)
    summary = {
        "out": args.out,
        "sweeps": int(solution.residuals.size),
        "final_residual": float(solution.residuals[-1]),
        "eta": cfg.storage.eta,
    }
    sys.stdout.write(json.dumps(summary, indent=2) + "\n")
    return 0


def _cmd_validate(args) -> int:
    cfg = _load(args)
    try:
        with open(args.solution) as fh:
            dump = json.load(fh)
    except FileNotFoundError:
        raise ConfigError(f"solution: file not found: {args.solution}") from None
    except json.JSONDecodeError as exc:
        raise ConfigError(f"solution: invalid JSON ({exc})") from None

    problems = []
    profile = cfg.profile(0)
    if dump.get("n_slots") != profile.n_slots or dump.get("delta_s") != profile.delta:
        problems.append(
            "horizon mismatch: solution has "
            f"{dump.get('n_slots')} slots of {dump.get('delta_s')} s, config gives "
            f"{profile.n_slots} of {profile.delta} s"
        )
    else:
        pol = dump["policy"]
        realized = RealizedPolicy(
            profile.delta,
            np.asarray(pol["p_w"], dtype=float),
            np.asarray(pol["s_w"], dtype=float),
            np.asarray(pol["u_w"], dtype=float),
            np.asarray(pol["e_j"], dtype=float),
        )
        violation = validate_policy(realized, profile, cfg.storage)
        if violation is not None:
            problems.append(f"policy infeasible: {violation}")
        utility = realized.average_utility(cfg.rate())
        stated = float(dump["utility_bps"])
        if not math.isclose(utility, stated, rel_tol=1e-9, abs_tol=1e-12):
            problems.append(
                f"utility mismatch: recomputed {utility!r}, solution says {stated!r}"
            )

    rate = cfg.rate()
    eta = cfg.storage.eta
    for i, seg in enumerate(dump.get("segments", [])):
        p_u = float(seg["p_u_w"])
        p_s = math.inf if seg["p_s_w"] is None else float(seg["p_s_w"])
        want = companion_threshold(p_u, eta, rate)
        same = (math.isinf(want) and math.isinf(p_s)) or math.isclose(
            want, p_s, rel_tol=1e-6, abs_tol=1e-12
        )
        if not same:
            problems.append(
                f"segment {i}: thresholds ({p_u}, {p_s}) break the marginal-rate "
                f"coupling (expected p_s = {want})"
            )

    verdict = {"ok": not problems, "problems": problems}
    _emit_text(json.dumps(verdict, indent=2), args.out)
    return 0 if not problems else 3


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    except Exception as exc:  # solver-side failure
        print(f"solver failure: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
