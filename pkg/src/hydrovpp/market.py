"""Market coupling: offers, imbalances, bidding curves, settlement.

The VPP sells energy day-ahead under dual pricing: shortfalls are bought
back at the up-penalty price, surpluses paid the down price.  Offers per
hour must be non-decreasing in the scenario price, which turns the
scenario offers into a price-quantity bidding curve.
"""

from __future__ import annotations

import bisect
import logging
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from .model import LinExpr, ModelBuilder

log = logging.getLogger(__name__)


@dataclass
class ScenarioSet:
    """Per-scenario forecasts over the horizon.

    Arrays are (n_scenarios, horizon); inflow is keyed by plant id.
    Probabilities must sum to one.
    """

    probabilities: np.ndarray
    price_da: np.ndarray
    price_up: np.ndarray
    price_down: np.ndarray
    inflow: dict[str, np.ndarray]
    wind: np.ndarray
    solar: np.ndarray
    surface: dict[str, np.ndarray] = field(default_factory=dict)

    def __post_init__(self):
        self.probabilities = np.asarray(self.probabilities, dtype=float)
        if abs(self.probabilities.sum() - 1.0) > 1e-9:
            raise ValueError(
                f"probabilities sum to {self.probabilities.sum()}, not 1")
        if np.any(self.probabilities <= 0):
            raise ValueError("non-positive scenario probability")
        shape = self.price_da.shape
        for name in ("price_up", "price_down", "wind", "solar"):
            if getattr(self, name).shape != shape:
                raise ValueError(f"{name} shape {getattr(self, name).shape} "
                                 f"!= price shape {shape}")
        for pid, arr in self.inflow.items():
            if arr.shape != shape:
                raise ValueError(f"inflow[{pid}] shape mismatch")
            if np.any(arr < 0):
                raise ValueError(f"negative external inflow for {pid}")
        if self.probabilities.shape[0] != shape[0]:
            raise ValueError("probability count != scenario count")
        bad = np.sum((self.price_up < self.price_da - 1e-9) |
                     (self.price_da < self.price_down - 1e-9))
        if bad:
            log.warning("dual-pricing rationality violated at %d (scenario, "
                        "hour) points: expected price_up >= price_da >= "
                        "price_down", int(bad))

    @property
    def n_scenarios(self) -> int:
        return self.price_da.shape[0]

    @property
    def horizon(self) -> int:
        return self.price_da.shape[1]

    def inflow_matrix(self, plant_ids: Sequence[str]) -> np.ndarray:
        """(n_plants, n_scenarios, horizon) array in cascade order."""
        return np.stack([self.inflow[pid] for pid in plant_ids])

    def subset(self, idx: Sequence[int]) -> "ScenarioSet":
        idx = list(idx)
        m = len(idx)
        return ScenarioSet(
            probabilities=np.full(m, 1.0 / m),
            price_da=self.price_da[idx],
            price_up=self.price_up[idx],
            price_down=self.price_down[idx],
            inflow={pid: arr[idx] for pid, arr in self.inflow.items()},
            wind=self.wind[idx],
            solar=self.solar[idx],
            surface={pid: arr[idx] for pid, arr in self.surface.items()},
        )

    def single(self, w: int) -> "ScenarioSet":
        return self.subset([w])


@dataclass
class MarketVars:
    """Column ids per scenario: offer e plus the two imbalance slacks."""

    e: list[list[int]] = field(default_factory=list)     # [w][t]
    dup: list[list[int]] = field(default_factory=list)
    ddn: list[list[int]] = field(default_factory=list)


def allocate_market_vars(mb: ModelBuilder, n_scenarios: int, horizon: int) -> MarketVars:
    mv = MarketVars()
    for w in range(n_scenarios):
        mv.e.append([mb.add_var(("e", w, t), 0.0, np.inf) for t in range(horizon)])
        mv.dup.append([mb.add_var(("dup", w, t), 0.0, np.inf) for t in range(horizon)])
        mv.ddn.append([mb.add_var(("ddn", w, t), 0.0, np.inf) for t in range(horizon)])
    return mv


def build_power_balance(mb: ModelBuilder, mv: MarketVars,
                        hydro_p: Sequence[Sequence[int]],
                        scenarios: ScenarioSet, w: int,
                        delta_t_s: float) -> int:
    """(sum_n p + wind + solar) dt - e - ddn + dup = 0, in MWh per hour."""
    if delta_t_s <= 0:
        raise ValueError("sampling period must be positive to convert to hours")
    dh = delta_t_s / 3600.0
    T = scenarios.horizon
    rows = 0
    for t in range(T):
        e = LinExpr(const=dh * float(scenarios.wind[w, t] + scenarios.solar[w, t]))
        for p_cols in hydro_p:
            e.add(p_cols[t], dh)
        e.add(mv.e[w][t], -1.0)
        e.add(mv.ddn[w][t], -1.0)
        e.add(mv.dup[w][t], 1.0)
        mb.add_expr_row(e, "==", 0.0)
        rows += 1
    return rows


def build_objective(mb: ModelBuilder, mv: MarketVars, scenarios: ScenarioSet) -> None:
    """Expected day-ahead cost: sum P_w (pi_up dup - pi_dn ddn - pi e)."""
    for w in range(scenarios.n_scenarios):
        pw = float(scenarios.probabilities[w])
        for t in range(scenarios.horizon):
            mb.obj_linear(mv.dup[w][t], pw * float(scenarios.price_up[w, t]))
            mb.obj_linear(mv.ddn[w][t], -pw * float(scenarios.price_down[w, t]))
            mb.obj_linear(mv.e[w][t], -pw * float(scenarios.price_da[w, t]))


def build_bid_monotonicity(mb: ModelBuilder, mv: MarketVars,
                           scenarios: ScenarioSet) -> int:
    """Offers non-decreasing along each hour's price ordering.

    Scenarios are grouped by equal price; group boundaries get either a
    direct e_lo <= e_hi row (singletons) or an auxiliary variable with
    e <= w <= e' rows so the ordering stays transitive across ties.
    Within a tie group no ordering is imposed.
    """
    rows = 0
    for t in range(scenarios.horizon):
        prices = scenarios.price_da[:, t]
        order = sorted(range(scenarios.n_scenarios), key=lambda w: prices[w])
        groups: list[list[int]] = []
        for w in order:
            if groups and prices[w] == prices[groups[-1][0]]:
                groups[-1].append(w)
            else:
                groups.append([w])
        for g in range(len(groups) - 1):
            lo, hi = groups[g], groups[g + 1]
            if len(lo) == 1 and len(hi) == 1:
                mb.add_row([(mv.e[hi[0]][t], 1.0), (mv.e[lo[0]][t], -1.0)],
                           ">=", 0.0)
                rows += 1
            else:
                aux = mb.add_var(("bidw", t, g), -np.inf, np.inf)
                for w in lo:
                    mb.add_row([(aux, 1.0), (mv.e[w][t], -1.0)], ">=", 0.0)
                    rows += 1
                for w in hi:
                    mb.add_row([(mv.e[w][t], 1.0), (aux, -1.0)], ">=", 0.0)
                    rows += 1
    return rows


@dataclass(frozen=True)
class BidCurve:
    """One hour's offer as sorted (price, quantity) points, quantities
    non-decreasing in price."""

    points: tuple[tuple[float, float], ...]

    def __post_init__(self):
        if not self.points:
            raise ValueError("empty bid curve")
        ps = [p for p, _ in self.points]
        if any(ps[i] >= ps[i + 1] for i in range(len(ps) - 1)):
            raise ValueError("curve prices must be strictly increasing")
        qs = [q for _, q in self.points]
        if any(qs[i] > qs[i + 1] + 1e-9 for i in range(len(qs) - 1)):
            raise ValueError("curve quantities must be non-decreasing")

    def cleared_quantity(self, price: float) -> float:
        """Step clearing: rightmost point at or below the realized price;
        below the lowest point the lowest point's quantity applies."""
        ps = [p for p, _ in self.points]
        i = bisect.bisect_right(ps, price) - 1
        return self.points[max(i, 0)][1]


def extract_bid_curves(scenarios: ScenarioSet, offers: np.ndarray,
                       tol: float = 1e-6) -> list[BidCurve]:
    """Per-hour curves from scenario prices and solved offers.

    Duplicate prices merge to the largest offered quantity.  Monotonicity
    drift within ``tol`` is snapped upward; anything larger means the
    solution violates the offer-ordering rows and is rejected.
    """
    curves = []
    for t in range(scenarios.horizon):
        merged: dict[float, float] = {}
        for w in range(scenarios.n_scenarios):
            p = float(scenarios.price_da[w, t])
            q = float(offers[w, t])
            merged[p] = max(merged.get(p, -np.inf), q)
        pts = sorted(merged.items())
        qs = []
        run = -np.inf
        for p, q in pts:
            if q < run - tol:
                raise ValueError(
                    f"hour {t}: offer {q} at price {p} drops more than {tol} "
                    f"below an earlier offer {run}")
            run = max(run, q)
            qs.append(run)
        curves.append(BidCurve(tuple((p, q) for (p, _), q in zip(pts, qs))))
    return curves


@dataclass
class HourLedger:
    hour: int
    price_da: float
    price_up: float
    price_down: float
    cleared_mwh: float
    production_mwh: float
    shortfall_mwh: float      # bought back at price_up
    surplus_mwh: float        # paid at price_down
    profit: float


def settle_ex_post(curves: Sequence[BidCurve], price_da: Sequence[float],
                   price_up: Sequence[float], price_down: Sequence[float],
                   production_mwh: Sequence[float],
                   price_guard: tuple[float, float] = (-500.0, 4000.0),
                   ) -> tuple[float, list[HourLedger]]:
    """Clear each hour's curve at the realized price and settle imbalances.

    Returns (total profit in EUR, per-hour ledger).  Profit is
    pi*e + pi_dn*surplus - pi_up*shortfall per hour.
    """
    T = len(curves)
    if any(len(s) != T for s in (price_da, price_up, price_down, production_mwh)):
        raise ValueError("realized series length != number of hourly curves")
    ledger = []
    total = 0.0
    for t in range(T):
        pi = float(price_da[t])
        if not (price_guard[0] <= pi <= price_guard[1]):
            log.warning("hour %d: realized price %.2f outside guard %s; "
                        "settling anyway", t, pi, price_guard)
        e = curves[t].cleared_quantity(pi)
        prod = float(production_mwh[t])
        shortfall = max(e - prod, 0.0)
        surplus = max(prod - e, 0.0)
        profit = pi * e + float(price_down[t]) * surplus - float(price_up[t]) * shortfall
        ledger.append(HourLedger(t, pi, float(price_up[t]), float(price_down[t]),
                                 e, prod, shortfall, surplus, profit))
        total += profit
    return total, ledger


def fixed_bid_from_curve(curve: BidCurve) -> BidCurve:
    """Collapse a curve to the point nearest its mean price (a single-point
    fixed hourly bid)."""
    prices = [p for p, _ in curve.points]
    mean_p = sum(prices) / len(prices)
    best = min(curve.points, key=lambda pq: abs(pq[0] - mean_p))
    return BidCurve((best,))
