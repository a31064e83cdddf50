"""Synthetic uncertainty: generation, reduction, out-of-sample validation.

Scenario families are deliberately simple (independent sources, lognormal
prices/inflow with AR(1) smoothing, shape-masked truncated normals for
renewables) — the out-of-sample validation harness is what establishes
whether a scenario count represents the uncertainty well enough.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from . import presets
from .centralized import assemble_centralized, solve_centralized
from .hydro import CascadeData, OperationalCurve
from .market import BidCurve, ScenarioSet, extract_bid_curves
from .model import (OPTIMAL, SolveOptions, fix_variables, relax_integrality,
                    solve)

log = logging.getLogger(__name__)


@dataclass
class UncertaintyStats:
    """Hourly mean/std per source plus diurnal shape profiles."""

    price_da: tuple[float, float]
    price_up: tuple[float, float]
    price_down: tuple[float, float]
    inflow: tuple[float, float]
    solar: tuple[float, float]
    wind: tuple[float, float]
    price_shape: np.ndarray = field(
        default_factory=lambda: presets.PRICE_SHAPE_24.copy())
    solar_shape: np.ndarray = field(
        default_factory=lambda: presets.SOLAR_SHAPE_24.copy())
    wind_capacity: float = presets.WIND_CAPACITY_MW
    solar_capacity: float = presets.SOLAR_CAPACITY_MW

    def __post_init__(self):
        for name in ("price_da", "price_up", "price_down", "inflow",
                     "solar", "wind"):
            m, s = getattr(self, name)
            if s < 0:
                raise ValueError(f"{name}: negative std")
        if not (self.price_up[0] >= self.price_da[0] >= self.price_down[0]):
            raise ValueError("monthly means must order price_up >= da >= down")

    @classmethod
    def for_month(cls, month: str) -> "UncertaintyStats":
        table = presets.MONTHLY_STATS[month]
        return cls(**{k: tuple(v) for k, v in table.items()})

    def scaled_inflow(self, factor: float) -> "UncertaintyStats":
        """Same statistics with the river rescaled (desk-size cascades)."""
        m, s = self.inflow
        out = UncertaintyStats(
            price_da=self.price_da, price_up=self.price_up,
            price_down=self.price_down, inflow=(m * factor, s * factor),
            solar=self.solar, wind=self.wind,
            price_shape=self.price_shape, solar_shape=self.solar_shape,
            wind_capacity=self.wind_capacity, solar_capacity=self.solar_capacity)
        return out

    def with_inflow_mean(self, target: float) -> "UncertaintyStats":
        """Rescale the river so its mean matches a cascade's nominal flow."""
        return self.scaled_inflow(target / self.inflow[0])


def _shape_for(shape: np.ndarray, horizon: int) -> np.ndarray:
    if horizon == shape.shape[0]:
        return shape
    x = np.linspace(0.0, 1.0, shape.shape[0])
    xi = np.linspace(0.0, 1.0, horizon)
    return np.interp(xi, x, shape)


def _lognormal_factor(rng: np.random.Generator, cv: float, size) -> np.ndarray:
    """Multiplicative lognormal noise with mean exactly 1."""
    if cv <= 0:
        return np.ones(size)
    sigma2 = math.log(1.0 + cv * cv)
    return rng.lognormal(-0.5 * sigma2, math.sqrt(sigma2), size)


def _ar1(rng: np.random.Generator, size: tuple[int, int], phi: float = 0.85
         ) -> np.ndarray:
    """Unit-variance AR(1) paths, one per row."""
    w, t = size
    out = np.empty(size)
    innov = rng.standard_normal(size) * math.sqrt(1.0 - phi * phi)
    out[:, 0] = rng.standard_normal(w)
    for k in range(1, t):
        out[:, k] = phi * out[:, k - 1] + innov[:, k]
    return out


def generate_synthetic(stats: UncertaintyStats, cascade: CascadeData,
                       count: int, horizon: Optional[int] = None,
                       seed: int = 0) -> ScenarioSet:
    """Independent per-source sampling, reproducible by seed.

    Prices and inflow are lognormal around the monthly mean (prices carry
    the diurnal shape, inflow a slow AR(1) wiggle so a scenario stays in
    one flow regime for hours at a time); solar is a daylight bell with a
    truncated-normal amplitude; wind is a truncated-normal AR(1) path
    clipped at installed capacity.
    """
    T = horizon if horizon is not None else cascade.horizon
    rng = np.random.default_rng(seed)
    shape_p = _shape_for(stats.price_shape, T)
    shape_s = _shape_for(stats.solar_shape, T)

    m, s = stats.price_da
    cv = s / m
    # price levels move together within a day: a scenario-wide base level
    # dominates, the residual wiggle is slow AR(1) — scenario ranks stay
    # stable across hours, which coherent price-quantity curves rely on
    base = _lognormal_factor(rng, 0.72 * cv, (count, 1))
    noise = np.exp(0.36 * cv * _ar1(rng, (count, T), phi=0.9))
    noise /= noise.mean(axis=1, keepdims=True)
    price_da = m * shape_p[None, :] * base * noise

    up_gap = stats.price_up[0] - stats.price_da[0]
    dn_gap = stats.price_da[0] - stats.price_down[0]
    price_up = price_da + up_gap * _lognormal_factor(rng, 0.3, (count, T))
    price_down = np.clip(
        price_da - dn_gap * _lognormal_factor(rng, 0.3, (count, T)), 0.0, None)

    m_q, s_q = stats.inflow
    cv_q = s_q / m_q
    river_base = m_q * _lognormal_factor(rng, 0.85 * cv_q, (count, 1))
    wiggle = np.exp(0.25 * cv_q * _ar1(rng, (count, T)))
    wiggle /= wiggle.mean(axis=1, keepdims=True)
    # cap so the head plant's last open-ended segment can always bracket
    head_cap = 1.3 * max(cascade.plants[0].curve.breakpoints)
    river = np.clip(river_base * wiggle, 0.25 * m_q,
                    min(3.2 * m_q, head_cap) if head_cap > 0 else 3.2 * m_q)
    # every path starts at the pre-horizon steady flow; forecast dispersion
    # grows over the first few hours (keeps the boundary state consistent)
    lead_in = np.minimum(np.arange(T) / 4.0, 1.0)[None, :]
    river = m_q + (river - m_q) * lead_in
    inflow = {}
    for p in cascade.plants:
        trib_noise = _lognormal_factor(rng, 0.1, (count, T))
        inflow[p.plant_id] = p.inflow_fraction * river * trib_noise

    m_w, s_w = stats.wind
    wind = np.clip(m_w + s_w * _ar1(rng, (count, T)), 0.0, stats.wind_capacity)

    m_s, s_s = stats.solar
    shape_mean = float(shape_s.mean()) or 1.0
    amp = np.clip(
        (m_s + s_s * rng.standard_normal((count, 1))) / shape_mean,
        0.0, stats.solar_capacity)
    solar = np.clip(amp * shape_s[None, :] *
                    _lognormal_factor(rng, 0.15, (count, T)),
                    0.0, stats.solar_capacity)

    return ScenarioSet(
        probabilities=np.full(count, 1.0 / count),
        price_da=price_da, price_up=price_up, price_down=price_down,
        inflow=inflow, wind=wind, solar=solar,
    )


def reduce_scenarios(full: ScenarioSet, m: int, seed: int = 0) -> ScenarioSet:
    """Uniform random subset without replacement, equal probabilities."""
    if m <= 0:
        raise ValueError("subset size must be positive")
    if m > full.n_scenarios:
        raise ValueError(f"cannot pick {m} of {full.n_scenarios} scenarios")
    rng = np.random.default_rng(seed)
    idx = sorted(rng.choice(full.n_scenarios, size=m, replace=False).tolist())
    return full.subset(idx)


# ---------------------------------------------------------------------------
# inflow regimes
# ---------------------------------------------------------------------------

ENERGETIC, LOW_FLOW, FLOOD = "energetic", "low-flow", "flood"


def regime_classify(inflow_path: Sequence[float], curve: OperationalCurve,
                    pinch_ratio: float = 0.25) -> list[str]:
    """Label each hour by where its inflow sits on the operational curve.

    Wide-band segments are energetic; pinched segments below the widest
    band are low-flow, above it flood.  Everything past the last
    breakpoint is flood.
    """
    widths = [zhi - zlo for _, zlo, zhi in curve.segments]
    wmax = max(widths)
    if wmax <= 0:
        wide = []
    else:
        wide = [i for i, w in enumerate(widths) if w >= pinch_ratio * wmax]
    if wide:
        lo_edge, hi_edge = min(wide), max(wide)
    else:
        mid = (curve.nseg - 1) / 2.0
        lo_edge, hi_edge = mid, mid
    labels = []
    for q in inflow_path:
        i = curve.segment_of(float(q)) if q >= curve.segments[0][0] else 0
        if wide and lo_edge <= i <= hi_edge:
            labels.append(ENERGETIC)
        elif i < lo_edge:
            labels.append(LOW_FLOW)
        else:
            labels.append(FLOOD)
    return labels


# ---------------------------------------------------------------------------
# out-of-sample validation
# ---------------------------------------------------------------------------

@dataclass
class ValidationRow:
    size: int
    variant: str
    mean_error: float
    std_error: float
    rounds: int
    excluded: int = 0


def _train(cascade: CascadeData, train: ScenarioSet, variant: str,
           options: SolveOptions):
    inst = assemble_centralized(cascade, train)
    spec = inst.spec if variant == "milp" else relax_integrality(inst.spec)
    res = solve(spec, options)
    if not res.ok:
        raise RuntimeError(f"training solve failed: {res.status}")
    return inst, res


def recourse_cost(cascade: CascadeData, realized: ScenarioSet, w: int,
                  cleared_mwh: Sequence[float], variant: str = "milp",
                  options: Optional[SolveOptions] = None) -> Optional[float]:
    """Imbalance-optimal dispatch cost for one realized path with the
    day-ahead offer already fixed; None when the recourse is infeasible."""
    options = options or SolveOptions()
    single = realized.single(w)
    inst = assemble_centralized(cascade, single)
    fixes = {inst.market_vars.e[0][t]: float(cleared_mwh[t])
             for t in range(single.horizon)}
    spec = fix_variables(inst.spec, fixes)
    if variant == "lp":
        spec = relax_integrality(spec)
    res = solve(spec, options)
    if not res.ok:
        return None
    return res.objective


def out_of_sample_validate(train: ScenarioSet, test: ScenarioSet,
                           cascade: CascadeData, variant: str = "milp",
                           options: Optional[SolveOptions] = None) -> dict:
    """Train on one set, clear the resulting curves against each test
    scenario, re-dispatch, and report the objective-function error."""
    options = options or SolveOptions()
    inst, res = _train(cascade, train, variant, options)
    curves = extract_bid_curves(train, inst.offers(res.x))
    test_costs = []
    excluded = 0
    for w in range(test.n_scenarios):
        cleared = [curves[t].cleared_quantity(float(test.price_da[w, t]))
                   for t in range(test.horizon)]
        cost = recourse_cost(cascade, test, w, cleared, variant, options)
        if cost is None:
            excluded += 1
            log.warning("recourse infeasible for test scenario %d; excluded", w)
        else:
            test_costs.append(cost)
    if not test_costs:
        raise RuntimeError("all test scenarios infeasible in recourse")
    mean_test = float(np.mean(test_costs))
    return {
        "train_objective": res.objective,
        "mean_test_objective": mean_test,
        "error": abs(res.objective - mean_test),
        "excluded": excluded,
        "n_test": len(test_costs),
    }


def run_validation(cascade: CascadeData, pool: ScenarioSet, test: ScenarioSet,
                   sizes: Sequence[int], rounds: int,
                   variants: Sequence[str] = ("milp", "lp"),
                   seed: int = 0,
                   options: Optional[SolveOptions] = None) -> list[ValidationRow]:
    """Repeated random sub-sampling per training size, as a report table."""
    rows = []
    for variant in variants:
        for size in sizes:
            errors = []
            excluded = 0
            for r in range(rounds):
                sub = reduce_scenarios(pool, size, seed=seed * 100003 + size * 131 + r)
                out = out_of_sample_validate(sub, test, cascade, variant, options)
                errors.append(out["error"])
                excluded += out["excluded"]
            rows.append(ValidationRow(size, variant, float(np.mean(errors)),
                                      float(np.std(errors)), rounds, excluded))
    return rows


# ---------------------------------------------------------------------------
# price-quantity curves vs fixed hourly bids
# ---------------------------------------------------------------------------

@dataclass
class DayComparison:
    day: int
    curve_profit: float
    fixed_profit: float
    curve_profit_per_mwh: float
    fixed_profit_per_mwh: float
    regime_profit: dict        # regime -> (profit sum, produced MWh)


def _settled_profit(cascade: CascadeData, test: ScenarioSet, w: int,
                    cleared: Sequence[float], variant: str,
                    options: SolveOptions) -> Optional[tuple[float, float]]:
    """(profit, produced MWh) of the imbalance-optimal dispatch against one
    realized path, offer already cleared."""
    single = test.single(w)
    inst = assemble_centralized(cascade, single)
    fixes = {inst.market_vars.e[0][t]: float(cleared[t])
             for t in range(single.horizon)}
    spec = fix_variables(inst.spec, fixes)
    if variant == "lp":
        spec = relax_integrality(spec)
    res = solve(spec, options)
    if not res.ok:
        return None
    produced = 0.0
    dh = cascade.topology.delta_hours
    for n in range(cascade.n_plants):
        hv = inst.hydro_vars[n][0]
        produced += dh * sum(res.x[c] for c in hv.p)
    produced += dh * float(single.wind[0].sum() + single.solar[0].sum())
    return -res.objective, produced


def mean_scenario(sc: ScenarioSet) -> ScenarioSet:
    """Single point-forecast scenario: the source-wise mean paths."""
    return ScenarioSet(
        probabilities=np.array([1.0]),
        price_da=sc.price_da.mean(axis=0, keepdims=True),
        price_up=sc.price_up.mean(axis=0, keepdims=True),
        price_down=sc.price_down.mean(axis=0, keepdims=True),
        inflow={pid: a.mean(axis=0, keepdims=True)
                for pid, a in sc.inflow.items()},
        wind=sc.wind.mean(axis=0, keepdims=True),
        solar=sc.solar.mean(axis=0, keepdims=True),
        surface={pid: a[:1] for pid, a in sc.surface.items()},
    )


def bidding_mode_experiment(cascade: CascadeData, stats: UncertaintyStats,
                            days: int, train_count: int = 6,
                            test_draws: int = 6, seed: int = 0,
                            options: Optional[SolveOptions] = None,
                            ) -> list[DayComparison]:
    """Ex-post comparison of stochastic price-quantity curves against the
    traditional fixed hourly bids (a deterministic point-forecast plan),
    day by day: train, clear against fresh realizations, re-dispatch,
    settle."""
    options = options or SolveOptions()
    out = []
    for day in range(days):
        train = generate_synthetic(stats, cascade, train_count,
                                   seed=seed + 7919 * day)
        curve_inst = assemble_centralized(cascade, train, bid_mode="curve")
        curve_res = solve(curve_inst.spec, options)
        det = mean_scenario(train)
        fixed_inst = assemble_centralized(cascade, det)
        fixed_res = solve(fixed_inst.spec, options)
        if not (curve_res.ok and fixed_res.ok):
            log.warning("day %d: training solve failed (%s/%s); skipped",
                        day, curve_res.status, fixed_res.status)
            continue
        curves = extract_bid_curves(train, curve_inst.offers(curve_res.x))
        fixed_bids = [float(fixed_res.x[fixed_inst.market_vars.e[0][t]])
                      for t in range(train.horizon)]

        test = generate_synthetic(stats, cascade, test_draws,
                                  seed=seed + 7919 * day + 104729)
        c_profit = f_profit = 0.0
        c_mwh = f_mwh = 0.0
        regime_tally: dict[str, list[float]] = {}
        head = cascade.plants[-1]
        for w in range(test_draws):
            cleared_c = [curves[t].cleared_quantity(float(test.price_da[w, t]))
                         for t in range(test.horizon)]
            got = _settled_profit(cascade, test, w, cleared_c, "milp", options)
            got_f = _settled_profit(cascade, test, w, fixed_bids, "milp", options)
            if got is None or got_f is None:
                log.warning("day %d draw %d: recourse infeasible; skipped", day, w)
                continue
            c_profit += got[0]
            c_mwh += got[1]
            f_profit += got_f[0]
            f_mwh += got_f[1]
            labels = regime_classify(test.inflow[head.plant_id][w], head.curve)
            hourly = got[0] / test.horizon
            hourly_mwh = got[1] / test.horizon
            for lab in labels:
                acc = regime_tally.setdefault(lab, [0.0, 0.0])
                acc[0] += hourly
                acc[1] += hourly_mwh
        if c_mwh == 0 or f_mwh == 0:
            continue
        out.append(DayComparison(
            day=day, curve_profit=c_profit / test_draws,
            fixed_profit=f_profit / test_draws,
            curve_profit_per_mwh=c_profit / c_mwh,
            fixed_profit_per_mwh=f_profit / f_mwh,
            regime_profit={k: tuple(v) for k, v in regime_tally.items()},
        ))
    return out
