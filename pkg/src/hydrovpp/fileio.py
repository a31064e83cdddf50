"""File formats: cascade JSON, scenario CSVs + manifest, bid-curve CSV,
trace CSV, certificate JSON, solution CSV, validation CSV, stats JSON,
settlement reports."""

from __future__ import annotations

import csv
import json
import logging
import os
from dataclasses import asdict
from typing import Optional, Sequence

import numpy as np

from . import scenarios as sg
from .cadmmb import BoundsTrace, RunResult
from .centralized import CentralizedInstance
from .hydro import CascadeData, CascadeTopology, OperationalCurve, PlantSpec
from .market import BidCurve, HourLedger, ScenarioSet

log = logging.getLogger(__name__)


# -- cascade ---------------------------------------------------------------

def save_cascade(cascade: CascadeData, path: str) -> None:
    topo = cascade.topology
    doc = {
        "delta_t_seconds": topo.delta_t_s,
        "horizon": topo.horizon,
        "plants": [
            {
                "id": p.plant_id,
                "capacity_mw": p.capacity_mw,
                "head_min_m": p.head_min,
                "head_max_m": p.head_max,
                "q_turbine_min_m3s": p.q_turbine_min,
                "q_turbine_max_m3s": p.q_turbine_max,
                "ramp_q_turbine_m3s": p.ramp_q_turbine,
                "q_barrage_min_m3s": p.q_barrage_min,
                "efficiency": p.efficiency,
                "tailrace_level_m": p.tailrace_level,
                "initial_level_m": p.initial_level,
                "surface_m2": p.surface_m2,
                "big_m_oc": p.big_m_oc,
                "big_m_br": p.big_m_br,
                "inflow_fraction": p.inflow_fraction,
                "operational_curve": [list(s) for s in p.curve.segments],
            }
            for p in cascade.plants
        ],
        "links": [
            {
                "from": topo.plant_ids[i],
                "to": topo.plant_ids[i + 1],
                "tau_barrage_s": topo.tau_barrage_s[i],
                "tau_turbine_s": topo.tau_turbine_s[i],
            }
            for i in range(len(topo.plant_ids) - 1)
        ],
        "boundary": cascade.boundary or {},
    }
    with open(path, "w") as f:
        json.dump(doc, f, indent=2)


def load_cascade(path: str) -> CascadeData:
    with open(path) as f:
        doc = json.load(f)
    plants = []
    for p in doc["plants"]:
        plants.append(PlantSpec(
            plant_id=p["id"],
            capacity_mw=p["capacity_mw"],
            head_min=p["head_min_m"],
            head_max=p["head_max_m"],
            q_turbine_min=p["q_turbine_min_m3s"],
            q_turbine_max=p["q_turbine_max_m3s"],
            ramp_q_turbine=p["ramp_q_turbine_m3s"],
            q_barrage_min=p["q_barrage_min_m3s"],
            efficiency=p["efficiency"],
            tailrace_level=p["tailrace_level_m"],
            initial_level=p["initial_level_m"],
            surface_m2=p["surface_m2"],
            big_m_oc=p.get("big_m_oc"),
            big_m_br=p.get("big_m_br"),
            inflow_fraction=p.get("inflow_fraction", 1.0),
            curve=OperationalCurve(tuple(tuple(s) for s in p["operational_curve"])),
        ))
    ids = [p.plant_id for p in plants]
    by_from = {l["from"]: l for l in doc.get("links", [])}
    tau_br, tau_tr = [], []
    for i in range(len(ids) - 1):
        link = by_from.get(ids[i])
        if link is None or link["to"] != ids[i + 1]:
            raise ValueError(f"missing or misordered link {ids[i]} -> {ids[i+1]}")
        tau_br.append(float(link["tau_barrage_s"]))
        tau_tr.append(float(link["tau_turbine_s"]))
    topo = CascadeTopology(tuple(ids), tuple(tau_br), tuple(tau_tr),
                           float(doc["delta_t_seconds"]), int(doc["horizon"]))
    return CascadeData(tuple(plants), topo, boundary=doc.get("boundary") or None)


# -- scenarios ---------------------------------------------------------------

def _write_series_csv(path: str, arr: np.ndarray) -> None:
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["scenario", "hour", "value"])
        for s in range(arr.shape[0]):
            for t in range(arr.shape[1]):
                w.writerow([s, t, repr(float(arr[s, t]))])


def _read_series_csv(path: str) -> np.ndarray:
    rows = []
    with open(path, newline="") as f:
        r = csv.DictReader(f)
        for row in r:
            rows.append((int(row["scenario"]), int(row["hour"]),
                         float(row["value"])))
    if not rows:
        raise ValueError(f"{path}: empty scenario file")
    ns = max(r[0] for r in rows) + 1
    nt = max(r[1] for r in rows) + 1
    arr = np.full((ns, nt), np.nan)
    for s, t, v in rows:
        arr[s, t] = v
    if np.isnan(arr).any():
        raise ValueError(f"{path}: missing (scenario, hour) entries")
    return arr


def save_scenarios(scenarios: ScenarioSet, out_dir: str,
                   prefix: str = "scenarios") -> str:
    """One CSV per uncertainty source plus a manifest binding them:
    returns the manifest path."""
    os.makedirs(out_dir, exist_ok=True)
    sources: dict = {}
    for name in ("price_da", "price_up", "price_down", "wind", "solar"):
        fn = f"{prefix}_{name}.csv"
        _write_series_csv(os.path.join(out_dir, fn), getattr(scenarios, name))
        sources[name] = fn
    inflow = {}
    for pid, arr in scenarios.inflow.items():
        fn = f"{prefix}_inflow_{pid}.csv"
        _write_series_csv(os.path.join(out_dir, fn), arr)
        inflow[pid] = fn
    sources["inflow"] = inflow
    manifest = {
        "probabilities": [float(p) for p in scenarios.probabilities],
        "sources": sources,
    }
    mpath = os.path.join(out_dir, f"{prefix}_manifest.json")
    with open(mpath, "w") as f:
        json.dump(manifest, f, indent=2)
    return mpath


def load_scenarios(manifest_path: str) -> ScenarioSet:
    base = os.path.dirname(manifest_path)
    with open(manifest_path) as f:
        manifest = json.load(f)
    src = manifest["sources"]

    def rd(fn):
        return _read_series_csv(os.path.join(base, fn))

    return ScenarioSet(
        probabilities=np.asarray(manifest["probabilities"], dtype=float),
        price_da=rd(src["price_da"]),
        price_up=rd(src["price_up"]),
        price_down=rd(src["price_down"]),
        inflow={pid: rd(fn) for pid, fn in src["inflow"].items()},
        wind=rd(src["wind"]),
        solar=rd(src["solar"]),
    )


# -- stats -------------------------------------------------------------------

def save_stats(stats: sg.UncertaintyStats, path: str) -> None:
    doc = {
        "sources": {
            name: {"mean": getattr(stats, name)[0],
                   "std": getattr(stats, name)[1]}
            for name in ("price_da", "price_up", "price_down", "inflow",
                         "solar", "wind")
        },
        "price_shape": [float(v) for v in stats.price_shape],
        "solar_shape": [float(v) for v in stats.solar_shape],
        "wind_capacity_mw": stats.wind_capacity,
        "solar_capacity_mw": stats.solar_capacity,
    }
    with open(path, "w") as f:
        json.dump(doc, f, indent=2)


def load_stats(path: str) -> sg.UncertaintyStats:
    with open(path) as f:
        doc = json.load(f)
    src = doc["sources"]
    kw = {name: (float(src[name]["mean"]), float(src[name]["std"]))
          for name in ("price_da", "price_up", "price_down", "inflow",
                       "solar", "wind")}
    if "price_shape" in doc:
        kw["price_shape"] = np.asarray(doc["price_shape"], dtype=float)
    if "solar_shape" in doc:
        kw["solar_shape"] = np.asarray(doc["solar_shape"], dtype=float)
    if "wind_capacity_mw" in doc:
        kw["wind_capacity"] = float(doc["wind_capacity_mw"])
    if "solar_capacity_mw" in doc:
        kw["solar_capacity"] = float(doc["solar_capacity_mw"])
    return sg.UncertaintyStats(**kw)


# -- curves, traces, certificates, solutions ---------------------------------

def save_bid_curves(curves: Sequence[BidCurve], path: str) -> None:
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["hour", "price", "quantity"])
        for t, curve in enumerate(curves):
            for price, qty in curve.points:
                w.writerow([t, repr(price), repr(qty)])


def load_bid_curves(path: str) -> list[BidCurve]:
    by_hour: dict[int, list[tuple[float, float]]] = {}
    with open(path, newline="") as f:
        for row in csv.DictReader(f):
            by_hour.setdefault(int(row["hour"]), []).append(
                (float(row["price"]), float(row["quantity"])))
    if not by_hour:
        raise ValueError(f"{path}: no bid points")
    hours = sorted(by_hour)
    if hours != list(range(len(hours))):
        raise ValueError(f"{path}: hours not contiguous from 0")
    return [BidCurve(tuple(sorted(by_hour[t]))) for t in hours]


def save_trace(trace: BoundsTrace, path: str) -> None:
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["k", "lower_bound", "upper_bound", "gap_percent", "rho",
                    "primal_residual", "dual_residual", "wall_time_s"])
        for r in trace.rows:
            w.writerow([r.k, repr(r.lb), repr(r.ub), repr(r.gap), repr(r.rho),
                        repr(r.primal_residual), repr(r.dual_residual),
                        repr(r.wall_time)])


def save_certificate(result: RunResult, params, path: str) -> None:
    with open(path, "w") as f:
        json.dump(result.certificate(params), f, indent=2)


def save_solution(instance: CentralizedInstance, x: np.ndarray, path: str) -> None:
    """All primal values keyed by symbol and indices."""
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["symbol", "n", "scenario", "t", "segment", "value"])
        for key, vid in instance.spec.index.items():
            sym = key[0]
            rest = list(key[1:]) + [""] * (4 - len(key[1:]))
            w.writerow([sym, *rest, repr(float(x[vid]))])


def save_instance_stats(instance: CentralizedInstance, path: str,
                        extra: Optional[dict] = None) -> None:
    doc = instance.spec.stats()
    doc["decision_variables"] = instance.decision_variable_count()
    doc["plants"] = instance.cascade.n_plants
    doc["scenarios"] = instance.scenarios.n_scenarios
    doc["horizon"] = instance.scenarios.horizon
    if extra:
        doc.update(extra)
    with open(path, "w") as f:
        json.dump(doc, f, indent=2)


def save_validation(rows: Sequence[sg.ValidationRow], path: str) -> None:
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["training_size", "variant", "mean_error", "std_error",
                    "rounds", "excluded"])
        for r in rows:
            w.writerow([r.size, r.variant, repr(r.mean_error),
                        repr(r.std_error), r.rounds, r.excluded])


# -- settlement ---------------------------------------------------------------

def load_realized(path: str) -> dict:
    """Realized-path CSV: hour, price_da, price_up, price_down,
    production_mwh and optional inflow_<plant> columns."""
    hours = []
    with open(path, newline="") as f:
        reader = csv.DictReader(f)
        if reader.fieldnames is None:
            raise ValueError(f"{path}: empty realization file")
        required = {"hour", "price_da", "price_up", "price_down",
                    "production_mwh"}
        missing = required - set(reader.fieldnames)
        if missing:
            raise ValueError(f"{path}: missing columns {sorted(missing)}")
        inflow_cols = [c for c in reader.fieldnames if c.startswith("inflow_")]
        for row in reader:
            hours.append(row)
    if not hours:
        raise ValueError(f"{path}: no realized hours")
    hours.sort(key=lambda r: int(r["hour"]))
    out = {
        "price_da": [float(r["price_da"]) for r in hours],
        "price_up": [float(r["price_up"]) for r in hours],
        "price_down": [float(r["price_down"]) for r in hours],
        "production_mwh": [float(r["production_mwh"]) for r in hours],
        "inflow": {c[len("inflow_"):]: [float(r[c]) for r in hours]
                   for c in inflow_cols},
    }
    return out


def save_settlement(ledger: Sequence[HourLedger], total: float, path_csv: str,
                    summary: Optional[dict] = None,
                    path_summary: Optional[str] = None) -> None:
    with open(path_csv, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["hour", "price_da", "price_up", "price_down",
                    "cleared_mwh", "production_mwh", "shortfall_mwh",
                    "surplus_mwh", "profit"])
        for h in ledger:
            w.writerow([h.hour, repr(h.price_da), repr(h.price_up),
                        repr(h.price_down), repr(h.cleared_mwh),
                        repr(h.production_mwh), repr(h.shortfall_mwh),
                        repr(h.surplus_mwh), repr(h.profit)])
    if path_summary is not None:
        doc = {"total_profit": total}
        if summary:
            doc.update(summary)
        with open(path_summary, "w") as f:
            json.dump(doc, f, indent=2)
