"""Monolithic stochastic bidding MILP, plus the two warm-start bounds.

The instance couples every plant/scenario hydro block with the market
block (power balance, offer-ordering, expected-cost objective).  The
initial lower bound relaxes integrality; the initial upper bound solves
a flexibility-free restriction (pinched level bands, barrage forced
open, segment binaries fixed by routing each scenario's inflows
downstream in run-of-river mode).
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, replace
from typing import Optional

import numpy as np

from . import hydro as hy
from . import market as mk
from .model import (FEASIBLE_LIMIT, OPTIMAL, ModelBuilder, ProblemSpec,
                    SolveOptions, SolveResult, fix_variables,
                    relax_integrality, solve)

log = logging.getLogger(__name__)

# symbols in the per-step decision inventory (the census counts these)
DECISION_SYMBOLS = ("e", "dup", "ddn", "qtr", "qbr", "h", "p", "bbr", "boc")


class AssemblyError(ValueError):
    """Builder failure annotated with its (plant, scenario) location."""


@dataclass
class CentralizedInstance:
    spec: ProblemSpec
    cascade: hy.CascadeData
    scenarios: mk.ScenarioSet
    market_vars: mk.MarketVars
    hydro_vars: list[list[hy.HydroVars]]   # [n][w]
    bid_mode: str = "curve"

    def decision_variable_count(self) -> int:
        """Columns in the per-step inventory: offers/imbalances plus the
        plant variables over t in T (boundary states and auxiliaries are
        excluded)."""
        count = 0
        for key in self.spec.keys:
            sym = key[0]
            if sym in DECISION_SYMBOLS:
                count += 1
            elif sym == "zfbl" and key[3] >= 1:
                count += 1
        return count

    def expected_decision_count(self) -> int:
        W = self.scenarios.n_scenarios
        T = self.scenarios.horizon
        per_plant = sum(6 + p.curve.nseg for p in self.cascade.plants)
        return W * T * (3 + per_plant)

    def offers(self, x: np.ndarray) -> np.ndarray:
        W, T = self.scenarios.n_scenarios, self.scenarios.horizon
        out = np.empty((W, T))
        for w in range(W):
            for t in range(T):
                out[w, t] = x[self.market_vars.e[w][t]]
        return out

    def binary_assignments(self, x: np.ndarray) -> dict[int, float]:
        """One-hot segment choice (argmax) and rounded barrage flags from a
        primal vector; keys are column ids of this instance."""
        out: dict[int, float] = {}
        for n in range(self.cascade.n_plants):
            for w in range(self.scenarios.n_scenarios):
                hv = self.hydro_vars[n][w]
                for t in range(self.cascade.horizon):
                    out[hv.bbr[t]] = float(round(x[hv.bbr[t]]))
                    cols = hv.boc[t]
                    best = int(np.argmax([x[c] for c in cols]))
                    for i, cvid in enumerate(cols):
                        out[cvid] = 1.0 if i == best else 0.0
        return out


def assemble_centralized(cascade: hy.CascadeData, scenarios: mk.ScenarioSet,
                         bid_mode: str = "curve",
                         barrage_gate: bool = True,
                         history: Optional[dict] = None,
                         check_coverage: bool = True) -> CentralizedInstance:
    """Build the full bidding instance.

    ``bid_mode`` is "curve" (offer-ordering rows, the default) or "fixed"
    (one offer per hour across scenarios).  ``history`` optionally maps
    plant id -> {"qtr": [...], "qbr": [...]} pre-horizon discharges.
    """
    if cascade.n_plants == 0:
        raise AssemblyError("empty cascade")
    if bid_mode not in ("curve", "fixed"):
        raise AssemblyError(f"unknown bid mode {bid_mode!r}")
    ext = scenarios.inflow_matrix(cascade.topology.plant_ids)
    if ext.shape[1:] != (scenarios.n_scenarios, scenarios.horizon):
        raise AssemblyError("inflow series shape mismatch")
    if check_coverage:
        problems = hy.check_curve_coverage(cascade, ext)
        if problems:
            raise AssemblyError(
                "operational curves cannot bracket the inflows:\n  " +
                "\n  ".join(problems[:20]))

    W, T = scenarios.n_scenarios, scenarios.horizon
    mb = ModelBuilder()
    mv = mk.allocate_market_vars(mb, W, T)
    max_ext = float(ext.max())
    hvs: list[list[hy.HydroVars]] = []
    for n, plant in enumerate(cascade.plants):
        per_w = []
        for w in range(W):
            up_hist = {} if history is None or n == 0 else \
                history.get(cascade.plants[n - 1].plant_id, {})
            surf = scenarios.surface.get(plant.plant_id)
            try:
                hv = hy.add_plant_block(
                    mb, cascade, n, w, ext[n, w],
                    upstream_qtr=hvs[n - 1][w].qtr if n > 0 else None,
                    upstream_qbr=hvs[n - 1][w].qbr if n > 0 else None,
                    history_qtr=up_hist.get("qtr"),
                    history_qbr=up_hist.get("qbr"),
                    max_external_inflow=max_ext,
                    surface=surf[w] if surf is not None else None,
                    include_barrage_gate=barrage_gate,
                )
            except Exception as exc:
                raise AssemblyError(
                    f"plant {plant.plant_id} (n={n}, w={w}): {exc}") from exc
            per_w.append(hv)
        hvs.append(per_w)

    for w in range(W):
        mk.build_power_balance(mb, mv, [hvs[n][w].p for n in range(cascade.n_plants)],
                               scenarios, w, cascade.topology.delta_t_s)
    if bid_mode == "curve":
        mk.build_bid_monotonicity(mb, mv, scenarios)
    else:
        for t in range(T):
            for w in range(1, W):
                mb.add_row([(mv.e[w][t], 1.0), (mv.e[0][t], -1.0)], "==", 0.0)
    mk.build_objective(mb, mv, scenarios)
    return CentralizedInstance(mb.build(), cascade, scenarios, mv, hvs, bid_mode)


def solve_centralized(instance: CentralizedInstance,
                      options: Optional[SolveOptions] = None) -> SolveResult:
    return solve(instance.spec, options)


def initial_lower_bound(instance: CentralizedInstance,
                        options: Optional[SolveOptions] = None) -> SolveResult:
    """LP relaxation of the full instance; its optimum sits below J*."""
    return solve(relax_integrality(instance.spec), options)


def _run_of_river_routing(cascade: hy.CascadeData, ext: np.ndarray,
                          w: int, history: Optional[dict] = None) -> np.ndarray:
    """Anticipated inflow per (plant, t) when every plant passes its inflow
    straight through (q_out := q_in), honoring link delays."""
    T = cascade.horizon
    N = cascade.n_plants
    qin = np.zeros((N, T))
    qtr = np.zeros((N, T))
    qbr = np.zeros((N, T))
    max_ext = float(ext.max())
    for n in range(N):
        plant = cascade.plants[n]
        m_br = plant.m_br(max_ext)
        if n == 0:
            hist = {}
        elif history is not None:
            hist = history.get(cascade.plants[n - 1].plant_id, {})
        else:
            hist = cascade.boundary_of(cascade.plants[n - 1].plant_id)

        def upstream(series, hist_series, tt):
            if tt >= 0:
                return series[tt]
            hs = hist.get(hist_series)
            if hs is None or -tt > len(hs):
                return 0.0
            return float(hs[tt])

        if n == 0:
            qin[n] = ext[n, w]
        else:
            d_br, d_tr = cascade.topology.delay_steps(n - 1)
            for t in range(T):
                qin[n, t] = (upstream(qbr[n - 1], "qbr", t - d_br)
                             + upstream(qtr[n - 1], "qtr", t - d_tr)
                             + ext[n, w, t])
        # split the pass-through between turbines and the (forced-open) barrage
        for t in range(T):
            spill = min(max(qin[n, t] - plant.q_turbine_max,
                            plant.q_barrage_min), m_br)
            qbr[n, t] = spill
            qtr[n, t] = float(np.clip(qin[n, t] - spill, plant.q_turbine_min,
                                      plant.q_turbine_max))
    return qin


def build_restricted_instance(cascade: hy.CascadeData, scenarios: mk.ScenarioSet,
                              bid_mode: str = "curve",
                              history: Optional[dict] = None,
                              ) -> tuple[CentralizedInstance, dict[int, float]]:
    """Flexibility-free restriction used for the initial upper bound.

    Every level band is pinched to its point nearest the boundary level,
    the barrage flag is fixed open everywhere (its gating row dropped),
    and segment flags are fixed from the run-of-river routing pass.
    Returns the restricted instance and the binary assignments.
    """
    pinched_plants = tuple(
        replace(p, curve=p.curve.pinched(p.initial_level))
        for p in cascade.plants)
    pinched = hy.CascadeData(pinched_plants, cascade.topology, cascade.boundary)
    inst = assemble_centralized(pinched, scenarios, bid_mode=bid_mode,
                                barrage_gate=False, history=history,
                                check_coverage=False)
    ext = scenarios.inflow_matrix(cascade.topology.plant_ids)
    fixes: Optional[dict[int, float]] = {}
    try:
        for w in range(scenarios.n_scenarios):
            qin = _run_of_river_routing(cascade, ext, w, history)
            for n, plant in enumerate(cascade.plants):
                hv = inst.hydro_vars[n][w]
                for t in range(cascade.horizon):
                    seg = plant.curve.segment_of(float(qin[n, t]))
                    for i, vid in enumerate(hv.boc[t]):
                        fixes[vid] = 1.0 if i == seg else 0.0
                    fixes[hv.bbr[t]] = 1.0
    except ValueError as exc:
        log.info("routing pass could not bracket an inflow (%s); the "
                 "restriction will be solved as a MILP instead", exc)
        fixes = None
    return inst, fixes


def initial_upper_bound(instance: CentralizedInstance,
                        options: Optional[SolveOptions] = None,
                        fallback_time_limit: float = 60.0,
                        history: Optional[dict] = None,
                        ) -> tuple[SolveResult, Optional[np.ndarray], "CentralizedInstance"]:
    """Restricted-problem bound; any feasible point of it is feasible in
    the full instance, so its objective sits above J*.

    Solves the restriction as an LP (binaries fixed by the routing pass);
    if that is infeasible, falls back to a time-boxed MILP on the pinched
    restriction with free binaries.  Returns (result, point mapped onto
    the full instance's columns, restricted instance).
    """
    options = options or SolveOptions()
    restricted, fixes = build_restricted_instance(
        instance.cascade, instance.scenarios, instance.bid_mode, history)
    if fixes is not None:
        lp = fix_variables(restricted.spec, fixes)
        res = solve(lp, options)
    else:
        res = SolveResult(status="infeasible", x=None, objective=None,
                          best_bound=None, wall_time=0.0,
                          message="routing pass failed")
    if res.status != OPTIMAL:
        log.info("restricted LP %s; falling back to time-boxed restricted MILP",
                 res.status)
        fb_opts = SolveOptions(time_limit=fallback_time_limit,
                               mip_rel_gap=1e-4, seed=options.seed)
        res = solve(restricted.spec, fb_opts)
        if res.status not in (OPTIMAL, FEASIBLE_LIMIT):
            log.warning("restriction infeasible both ways (%s); starting "
                        "without a finite upper bound", res.status)
            return res, None, restricted
    # map the restricted primal onto the full instance's column order
    x_full = np.zeros(instance.spec.ncols)
    for key, vid in restricted.spec.index.items():
        x_full[instance.spec.index[key]] = res.x[vid]
    return res, x_full, restricted
