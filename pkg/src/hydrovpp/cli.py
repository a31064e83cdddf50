"""Command-line entry points: gen-data, solve, validate, settle.

Exit codes are a stable contract: 0 complete/certified, 2 input error,
3 iteration-or-time budget exhausted.  Every flag can also be supplied
through a HYDROVPP_<NAME> environment variable (flags win).
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
import time

import numpy as np

from . import cadmmb, fileio, presets
from . import scenarios as sg
from .centralized import (assemble_centralized, initial_lower_bound,
                          initial_upper_bound, solve_centralized)
from .consensus import PenaltyConfig
from .market import extract_bid_curves, fixed_bid_from_curve, settle_ex_post
from .model import FEASIBLE_LIMIT, OPTIMAL, SolveOptions

log = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_INPUT = 2
EXIT_BUDGET = 3


def _env(name: str, default, cast=str):
    raw = os.environ.get(f"HYDROVPP_{name.upper()}")
    if raw is None:
        return default
    try:
        return cast(raw)
    except ValueError:
        log.warning("ignoring unparsable HYDROVPP_%s=%r", name.upper(), raw)
        return default


def cmd_gen_data(args) -> int:
    os.makedirs(args.out, exist_ok=True)
    if args.stats:
        try:
            stats = fileio.load_stats(args.stats)
        except (OSError, ValueError, KeyError, json.JSONDecodeError) as exc:
            print(f"error: cannot read stats file {args.stats}: {exc}",
                  file=sys.stderr)
            return EXIT_INPUT
    else:
        stats = sg.UncertaintyStats.for_month(args.month)
    if args.preset == "twelve":
        cascade = presets.twelve_plant_cascade(horizon=args.horizon,
                                               nseg=args.segments)
        stats = stats.with_inflow_mean(1400.0)
    elif args.preset == "certification":
        cascade = presets.certification_cascade(horizon=args.horizon)
        stats = stats.with_inflow_mean(700.0)
    else:
        cascade = presets.desk_cascade(n_plants=args.plants,
                                       horizon=args.horizon,
                                       nseg=args.segments,
                                       stepped_bands=args.stepped)
        stats = stats.with_inflow_mean(700.0)
    fileio.save_cascade(cascade, os.path.join(args.out, "cascade.json"))
    fileio.save_stats(stats, os.path.join(args.out, "stats.json"))
    for size in args.sizes:
        pool = sg.generate_synthetic(stats, cascade, size, seed=args.seed)
        fileio.save_scenarios(pool, args.out, prefix=f"pool{size}")
    print(f"wrote cascade, stats and scenario pools {args.sizes} to {args.out}")
    return EXIT_OK


def _load_inputs(args):
    cascade = fileio.load_cascade(args.cascade)
    scenarios = fileio.load_scenarios(args.scenarios)
    return cascade, scenarios


def cmd_solve(args) -> int:
    try:
        cascade, scenarios = _load_inputs(args)
    except (OSError, ValueError, KeyError, json.JSONDecodeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INPUT
    os.makedirs(args.out, exist_ok=True)
    params = cadmmb.AlgorithmParams(
        rho0=args.rho0, eps_gap=args.eps_gap, eps_ub=args.eps_ub,
        max_iterations=args.max_iter, wall_budget_s=args.time_budget,
        seed=args.seed, mip_rel_gap=args.mip_gap,
        penalty=PenaltyConfig(mode=args.penalty_mode),
    )

    if args.method == "centralized":
        instance = assemble_centralized(cascade, scenarios)
        fileio.save_instance_stats(instance,
                                   os.path.join(args.out, "instance_stats.json"))
        res = solve_centralized(instance,
                                SolveOptions(time_limit=args.time_budget,
                                             mip_rel_gap=args.mip_gap,
                                             seed=args.seed))
        doc = {
            "method": "centralized", "status": res.status,
            "objective": res.objective, "best_bound": res.best_bound,
            "wall_time_s": res.wall_time, "seed": args.seed,
        }
        with open(os.path.join(args.out, "certificate.json"), "w") as f:
            json.dump(doc, f, indent=2)
        if res.x is not None:
            fileio.save_solution(instance, res.x,
                                 os.path.join(args.out, "solution.csv"))
            curves = extract_bid_curves(scenarios, instance.offers(res.x))
            fileio.save_bid_curves(curves,
                                   os.path.join(args.out, "bid_curves.csv"))
        print(f"centralized: {res.status}, objective "
              f"{res.objective if res.objective is not None else 'n/a'}")
        return EXIT_OK if res.status == OPTIMAL else EXIT_BUDGET

    result = cadmmb.run(cascade, scenarios, params, method=args.method,
                        workers=args.workers)
    fileio.save_trace(result.trace, os.path.join(args.out, "trace.csv"))
    fileio.save_certificate(result, params,
                            os.path.join(args.out, "certificate.json"))
    if result.instance is not None:
        fileio.save_instance_stats(result.instance,
                                   os.path.join(args.out, "instance_stats.json"))
    if result.best_x is not None and result.instance is not None:
        fileio.save_solution(result.instance, result.best_x,
                             os.path.join(args.out, "solution.csv"))
    if result.bid_curves is not None:
        fileio.save_bid_curves(result.bid_curves,
                               os.path.join(args.out, "bid_curves.csv"))
    gap = "n/a" if not np.isfinite(result.gap_percent) else \
        f"{result.gap_percent:.5f}%"
    print(f"{args.method}: {result.status} after {result.iterations} "
          f"iterations, gap {gap}")
    ok = result.status in (cadmmb.CERTIFIED, cadmmb.RESIDUAL_CONVERGED)
    return EXIT_OK if ok else EXIT_BUDGET


def cmd_validate(args) -> int:
    try:
        cascade = fileio.load_cascade(args.cascade)
        pool = fileio.load_scenarios(args.scenarios)
        test = fileio.load_scenarios(args.test)
    except (OSError, ValueError, KeyError, json.JSONDecodeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INPUT
    os.makedirs(args.out, exist_ok=True)
    variants = ("milp", "lp") if args.variants == "both" else (args.variants,)
    rows = sg.run_validation(cascade, pool, test, args.sizes, args.rounds,
                             variants=variants, seed=args.seed,
                             options=SolveOptions(mip_rel_gap=args.mip_gap))
    fileio.save_validation(rows, os.path.join(args.out, "validation.csv"))
    for r in rows:
        print(f"size={r.size:3d} variant={r.variant}: mean error "
              f"{r.mean_error:.2f} (std {r.std_error:.2f}, "
              f"excluded {r.excluded})")
    return EXIT_OK


def cmd_settle(args) -> int:
    try:
        curves = fileio.load_bid_curves(args.curves)
        realized = fileio.load_realized(args.realized)
    except (OSError, ValueError, KeyError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INPUT
    if len(realized["price_da"]) != len(curves):
        print(f"error: realization has {len(realized['price_da'])} hours, "
              f"curves have {len(curves)}", file=sys.stderr)
        return EXIT_INPUT
    os.makedirs(args.out, exist_ok=True)
    total, ledger = settle_ex_post(
        curves, realized["price_da"], realized["price_up"],
        realized["price_down"], realized["production_mwh"])

    if args.baseline:
        try:
            base_curves = fileio.load_bid_curves(args.baseline)
        except (OSError, ValueError) as exc:
            print(f"error: {exc}", file=sys.stderr)
            return EXIT_INPUT
    else:
        base_curves = [fixed_bid_from_curve(c) for c in curves]
    base_total, _base_ledger = settle_ex_post(
        base_curves, realized["price_da"], realized["price_up"],
        realized["price_down"], realized["production_mwh"])

    summary = {
        "fixed_bid_profit": base_total,
        "improvement_vs_fixed_percent":
            100.0 * (total - base_total) / abs(base_total)
            if base_total else None,
        "produced_mwh": float(sum(realized["production_mwh"])),
    }
    if summary["produced_mwh"] > 0:
        summary["profit_per_mwh"] = total / summary["produced_mwh"]

    if realized["inflow"] and args.cascade:
        cascade = fileio.load_cascade(args.cascade)
        plant = cascade.plants[-1]
        series = realized["inflow"].get(plant.plant_id)
        if series is not None:
            labels = sg.regime_classify(series, plant.curve)
            per = {}
            for lab, h in zip(labels, ledger):
                acc = per.setdefault(lab, [0.0, 0.0])
                acc[0] += h.profit
                acc[1] += h.production_mwh
            summary["regime_profit"] = {
                lab: {"profit": v[0], "produced_mwh": v[1],
                      "profit_per_mwh": (v[0] / v[1]) if v[1] else None}
                for lab, v in per.items()}

    fileio.save_settlement(ledger, total,
                           os.path.join(args.out, "settlement.csv"),
                           summary=summary,
                           path_summary=os.path.join(args.out,
                                                     "settlement_summary.json"))
    print(f"profit {total:.2f} EUR (fixed-bid baseline {base_total:.2f})")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(
        prog="hydrovpp",
        description="Day-ahead bidding for a cascaded-hydro VPP: "
                    "centralized MILP and consensus ADMM with certified "
                    "bounds.")
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen-data", help="emit cascade/stats/scenario files")
    g.add_argument("--preset", choices=("desk", "certification", "twelve"),
                   default="desk")
    g.add_argument("--plants", type=int, default=3)
    g.add_argument("--segments", type=int, default=5)
    g.add_argument("--horizon", type=int, default=24)
    g.add_argument("--month", default="february",
                   choices=sorted(presets.MONTHLY_STATS))
    g.add_argument("--stats", help="stats JSON overriding the built-ins")
    g.add_argument("--stepped", action="store_true",
                   help="storage bands with per-segment widths")
    g.add_argument("--sizes", type=int, nargs="+", default=[5])
    g.add_argument("--seed", type=int, default=_env("seed", 0, int))
    g.add_argument("--out", default=_env("out", "data"))
    g.set_defaults(func=cmd_gen_data)

    s = sub.add_parser("solve", help="solve one day-ahead bidding instance")
    s.add_argument("--cascade", required=True)
    s.add_argument("--scenarios", required=True, help="scenario manifest JSON")
    s.add_argument("--method", default="cadmmb",
                   choices=("centralized", "admm", "cadmmb"))
    s.add_argument("--workers", type=int, default=_env("workers", 1, int))
    s.add_argument("--seed", type=int, default=_env("seed", 0, int))
    s.add_argument("--rho0", type=float, default=_env("rho0", 0.1, float))
    s.add_argument("--eps-gap", type=float, default=_env("eps_gap", 0.01, float))
    s.add_argument("--eps-ub", type=float, default=_env("eps_ub", 0.01, float))
    s.add_argument("--max-iter", type=int, default=_env("max_iter", 5000, int))
    s.add_argument("--time-budget", type=float,
                   default=_env("time_budget", 4 * 3600.0, float))
    s.add_argument("--mip-gap", type=float, default=_env("mip_gap", 1e-6, float))
    s.add_argument("--penalty-mode", default="pwl", choices=("pwl", "miqp"))
    s.add_argument("--out", default=_env("out", "run"))
    s.set_defaults(func=cmd_solve)

    v = sub.add_parser("validate", help="out-of-sample validation sweep")
    v.add_argument("--cascade", required=True)
    v.add_argument("--scenarios", required=True, help="training pool manifest")
    v.add_argument("--test", required=True, help="testing set manifest")
    v.add_argument("--sizes", type=int, nargs="+", default=[5, 10, 15, 20, 25])
    v.add_argument("--rounds", type=int, default=100)
    v.add_argument("--variants", default="both", choices=("both", "milp", "lp"))
    v.add_argument("--seed", type=int, default=_env("seed", 0, int))
    v.add_argument("--mip-gap", type=float, default=_env("mip_gap", 1e-6, float))
    v.add_argument("--out", default=_env("out", "validation"))
    v.set_defaults(func=cmd_validate)

    st = sub.add_parser("settle", help="ex-post settlement of bid curves")
    st.add_argument("--curves", required=True, help="bid-curve CSV")
    st.add_argument("--realized", required=True, help="realized-path CSV")
    st.add_argument("--baseline", help="fixed-bid curve CSV to compare against")
    st.add_argument("--cascade", help="cascade JSON (enables regime breakdown)")
    st.add_argument("--out", default=_env("out", "settlement"))
    st.set_defaults(func=cmd_settle)
    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(
        level=logging.DEBUG if args.verbose else logging.WARNING,
        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except BrokenPipeError:
        return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
