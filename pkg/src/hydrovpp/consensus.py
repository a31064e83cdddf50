"""Consensus splitting of the bidding problem for distributed iteration.

The monolith's coupling variables (each plant's discharges and output)
are duplicated: every hydro subproblem owns its plant's discharge and
output copies plus copies of its upstream neighbour's discharges; the
balancing subproblem owns an output copy per plant/scenario.  Globals
are the averages of the two copies of each component; duals price the
copy/global mismatches.  The head plant has no upstream blocks, and the
last plant's own-discharge copies are the only ones of their globals
(their duals stay at zero).

Quadratic penalty handling: no installed backend solves MIQPs, so the
hydro step minimizes the penalty through tangent epigraph cuts (keeping
the subproblem a MILP) and then re-optimizes the continuous part exactly
with binaries fixed.  The balancing step is a plain convex QP and is
solved exactly.
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from . import hydro as hy
from . import market as mk
from .model import (OPTIMAL, BackendUnsupported, ModelBuilder, ProblemSpec,
                    SolveOptions, fix_variables, solve)

log = logging.getLogger(__name__)


@dataclass
class PenaltyConfig:
    """How hydro subproblems treat the quadratic consensus penalty."""

    mode: str = "pwl"          # "pwl" (tangent cuts) or "miqp" (unsupported)
    cuts: int = 4              # geometric cut levels on each side of the center
    polish: bool = True        # exact QP re-solve with binaries fixed

    def __post_init__(self):
        if self.mode not in ("pwl", "miqp"):
            raise ValueError(f"unknown penalty mode {self.mode!r}")


@dataclass
class ConsensusState:
    """Globals, local copies, duals and residuals of one iteration.

    All arrays are (n_plants, n_scenarios, horizon).  ``up_*`` arrays hold
    subproblem n's copies of plant n-1's discharges; row 0 is unused.
    """

    g_qtr: np.ndarray
    g_qbr: np.ndarray
    g_p: np.ndarray
    own_qtr: np.ndarray
    own_qbr: np.ndarray
    own_p: np.ndarray
    bal_p: np.ndarray
    up_qtr: np.ndarray
    up_qbr: np.ndarray
    lam_own_qtr: np.ndarray
    lam_own_qbr: np.ndarray
    lam_tilde_p: np.ndarray
    lam_bar_p: np.ndarray
    lam_up_qtr: np.ndarray
    lam_up_qbr: np.ndarray
    rho: float = 1.0
    k: int = 0
    primal_residual: float = float("nan")
    dual_residual: float = float("nan")
    prev_g: Optional[tuple[np.ndarray, np.ndarray, np.ndarray]] = None

    @classmethod
    def zeros(cls, n_plants: int, n_scenarios: int, horizon: int,
              rho: float) -> "ConsensusState":
        def z():
            return np.zeros((n_plants, n_scenarios, horizon))
        return cls(g_qtr=z(), g_qbr=z(), g_p=z(), own_qtr=z(), own_qbr=z(),
                   own_p=z(), bal_p=z(), up_qtr=z(), up_qbr=z(),
                   lam_own_qtr=z(), lam_own_qbr=z(), lam_tilde_p=z(),
                   lam_bar_p=z(), lam_up_qtr=z(), lam_up_qbr=z(), rho=rho)

    @property
    def shape(self) -> tuple[int, int, int]:
        return self.g_qtr.shape

    def zero_sum_violation(self) -> float:
        """Worst componentwise |dual pair sum|; zero by construction."""
        n = self.shape[0]
        worst = 0.0
        if n > 1:
            worst = max(worst, float(np.abs(
                self.lam_own_qtr[:-1] + self.lam_up_qtr[1:]).max()))
            worst = max(worst, float(np.abs(
                self.lam_own_qbr[:-1] + self.lam_up_qbr[1:]).max()))
        worst = max(worst, float(np.abs(self.lam_own_qtr[-1]).max()))
        worst = max(worst, float(np.abs(self.lam_own_qbr[-1]).max()))
        worst = max(worst, float(np.abs(self.lam_tilde_p + self.lam_bar_p).max()))
        return worst


# ---------------------------------------------------------------------------
# subproblem construction
# ---------------------------------------------------------------------------

@dataclass
class HydroSubproblem:
    """Frozen constraint set of one (plant, scenario) block plus the
    column ids of its consensus components."""

    n: int
    w: int
    base: ModelBuilder
    hv: hy.HydroVars
    up_qtr_cols: Optional[list[int]]
    up_qbr_cols: Optional[list[int]]

    def components(self, state_slices: dict) -> list[tuple[int, float, float]]:
        """(column, dual, center) triples for the five owned blocks."""
        T = len(self.hv.qtr)
        comps = []
        for t in range(T):
            comps.append((self.hv.qtr[t], state_slices["lam_own_qtr"][t],
                          state_slices["g_own_qtr"][t]))
            comps.append((self.hv.qbr[t], state_slices["lam_own_qbr"][t],
                          state_slices["g_own_qbr"][t]))
            comps.append((self.hv.p[t], state_slices["lam_tilde_p"][t],
                          state_slices["g_own_p"][t]))
            if self.up_qtr_cols is not None:
                comps.append((self.up_qtr_cols[t], state_slices["lam_up_qtr"][t],
                              state_slices["g_up_qtr"][t]))
                comps.append((self.up_qbr_cols[t], state_slices["lam_up_qbr"][t],
                              state_slices["g_up_qbr"][t]))
        return comps


def build_hydro_subproblem(cascade: hy.CascadeData, scenarios: mk.ScenarioSet,
                           n: int, w: int) -> HydroSubproblem:
    """One plant/scenario feasible block with local upstream copies.

    Upstream copies take the upstream plant's physical box — the
    monolith's optimum satisfies those, so the block still relaxes it.
    """
    mb = ModelBuilder()
    ext = scenarios.inflow_matrix(cascade.topology.plant_ids)
    max_ext = float(ext.max())
    T = cascade.horizon
    up_qtr_cols = up_qbr_cols = None
    if n > 0:
        up = cascade.plants[n - 1]
        up_qtr_cols = [mb.add_var(("uqtr", w, t), up.q_turbine_min,
                                  up.q_turbine_max) for t in range(T)]
        up_qbr_cols = [mb.add_var(("uqbr", w, t), 0.0, up.m_br(max_ext))
                       for t in range(T)]
    surf = scenarios.surface.get(cascade.plants[n].plant_id)
    hv = hy.add_plant_block(
        mb, cascade, n, w, ext[n, w],
        upstream_qtr=up_qtr_cols, upstream_qbr=up_qbr_cols,
        max_external_inflow=max_ext,
        surface=surf[w] if surf is not None else None,
    )
    return HydroSubproblem(n, w, mb, hv, up_qtr_cols, up_qbr_cols)


@dataclass
class BalancingSubproblem:
    """Frozen market block: offers, imbalances and an output copy per
    plant/scenario."""

    base: ModelBuilder
    mv: mk.MarketVars
    pbal: list[list[list[int]]]      # [n][w][t]


def build_balancing_subproblem(cascade: hy.CascadeData,
                               scenarios: mk.ScenarioSet) -> BalancingSubproblem:
    mb = ModelBuilder()
    W, T = scenarios.n_scenarios, scenarios.horizon
    mv = mk.allocate_market_vars(mb, W, T)
    pbal = []
    for n, plant in enumerate(cascade.plants):
        per_w = []
        for w in range(W):
            per_w.append([mb.add_var(("pbal", n, w, t), 0.0, plant.capacity_mw)
                          for t in range(T)])
        pbal.append(per_w)
    for w in range(W):
        mk.build_power_balance(mb, mv, [pbal[n][w] for n in range(cascade.n_plants)],
                               scenarios, w, cascade.topology.delta_t_s)
    mk.build_bid_monotonicity(mb, mv, scenarios)
    return BalancingSubproblem(mb, mv, pbal)


# ---------------------------------------------------------------------------
# step I solves
# ---------------------------------------------------------------------------

def _tangent_points(center: float, lb: float, ub: float, levels: int) -> list[float]:
    span = ub - lb
    pts = {min(max(center, lb), ub)}
    step = span / 64.0 if span > 0 else 1.0
    for k in range(levels):
        off = step * (2.0 ** k)
        pts.add(min(max(center + off, lb), ub))
        pts.add(min(max(center - off, lb), ub))
    pts.add(lb)
    pts.add(ub)
    return sorted(pts)


def solve_hydro_step(sub: HydroSubproblem, slices: dict, rho: float,
                     penalty: PenaltyConfig, options: SolveOptions) -> dict:
    """Local primal update: dual-priced feasible dispatch of one block.

    Minimizes lam'z + (rho/2)||z - center||^2 over the block.  With the
    tangent-cut mode the MILP sees a lower approximation of the penalty;
    the polish pass then re-solves the continuous part exactly for the
    chosen binaries.
    """
    if penalty.mode == "miqp":
        raise BackendUnsupported("no MIQP backend is available in this "
                                 "environment; use penalty mode 'pwl'")
    comps = sub.components(slices)
    mb = sub.base.clone()
    c0 = 0.0
    for j, (col, lam, center) in enumerate(comps):
        lb, ub = mb.bounds(col)
        s = mb.add_var(("pen", j), 0.0, np.inf)
        mb.obj_linear(col, lam)
        mb.obj_linear(s, 1.0)
        for x0 in _tangent_points(center, lb, ub, penalty.cuts):
            slope = rho * (x0 - center)
            icept = 0.5 * rho * (x0 - center) ** 2 - slope * x0
            mb.add_row([(s, 1.0), (col, -slope)], ">=", icept)
    spec = mb.build()
    res = solve(spec, options)
    if not res.ok:
        raise RuntimeError(
            f"hydro step ({sub.n},{sub.w}) unexpectedly {res.status}")
    x = res.x

    if penalty.polish:
        binaries = {}
        for t in range(len(sub.hv.qtr)):
            binaries[sub.hv.bbr[t]] = round(x[sub.hv.bbr[t]])
            best = int(np.argmax([x[c] for c in sub.hv.boc[t]]))
            for i, col in enumerate(sub.hv.boc[t]):
                binaries[col] = 1.0 if i == best else 0.0
        qb = sub.base.clone()
        for col, lam, center in comps:
            qb.obj_linear(col, lam - rho * center)
            qb.obj_quadratic(col, rho)
            c0 += 0.5 * rho * center * center
        qb.obj_constant(c0)
        qspec = fix_variables(qb.build(), binaries)
        qres = solve(qspec, options)
        if qres.status == OPTIMAL:
            x = qres.x
            res = qres
        else:
            log.warning("polish solve %s for block (%d,%d); keeping the "
                        "cut-approximation point", qres.status, sub.n, sub.w)

    T = len(sub.hv.qtr)
    out = {
        "own_qtr": np.array([x[c] for c in sub.hv.qtr]),
        "own_qbr": np.array([x[c] for c in sub.hv.qbr]),
        "own_p": np.array([x[c] for c in sub.hv.p]),
        "up_qtr": np.array([x[c] for c in sub.up_qtr_cols]) if sub.up_qtr_cols else None,
        "up_qbr": np.array([x[c] for c in sub.up_qbr_cols]) if sub.up_qbr_cols else None,
        "harvest": {},
        "objective": res.objective,
        "wall_time": res.wall_time,
    }
    for t in range(T):
        out["harvest"][("bbr", sub.n, sub.w, t)] = float(round(x[sub.hv.bbr[t]]))
        best = int(np.argmax([x[c] for c in sub.hv.boc[t]]))
        for i, col in enumerate(sub.hv.boc[t]):
            out["harvest"][("boc", sub.n, sub.w, t, i)] = 1.0 if i == best else 0.0
    return out


def solve_balancing_step(sub: BalancingSubproblem, scenarios: mk.ScenarioSet,
                         lam_bar_p: np.ndarray, g_p: np.ndarray, rho: float,
                         options: SolveOptions) -> dict:
    """Offer/imbalance update: expected cost plus dual and penalty terms
    on the plant-output copies (an exact convex QP)."""
    mb = sub.base.clone()
    mk.build_objective(mb, sub.mv, scenarios)
    N, W, T = lam_bar_p.shape
    for n in range(N):
        for w in range(W):
            for t in range(T):
                col = sub.pbal[n][w][t]
                mb.obj_linear(col, lam_bar_p[n, w, t] - rho * g_p[n, w, t])
                mb.obj_quadratic(col, rho)
    mb.obj_constant(0.5 * rho * float((g_p * g_p).sum()))
    res = solve(mb.build(), options)
    if not res.ok:
        raise RuntimeError(f"balancing step unexpectedly {res.status}")
    x = res.x
    bal_p = np.empty((N, W, T))
    offers = np.empty((W, T))
    for n in range(N):
        for w in range(W):
            for t in range(T):
                bal_p[n, w, t] = x[sub.pbal[n][w][t]]
    for w in range(W):
        for t in range(T):
            offers[w, t] = x[sub.mv.e[w][t]]
    return {"bal_p": bal_p, "offers": offers, "objective": res.objective,
            "wall_time": res.wall_time}


# ---------------------------------------------------------------------------
# lower-bound subproblems (Lagrangian pieces)
# ---------------------------------------------------------------------------

def solve_hydro_dual_piece(sub: HydroSubproblem, slices: dict,
                           options: SolveOptions) -> Optional[float]:
    """min over the block of the dual-priced coupling terms.

    Returns a proven lower bound on that minimum (the solver's dual bound
    for the MILP), or None when the piece is unbounded/failed.
    """
    comps = sub.components(slices)
    mb = sub.base.clone()
    for col, lam, _center in comps:
        mb.obj_linear(col, lam)
    res = solve(mb.build(), options)
    if res.status == "unbounded":
        return None
    if res.best_bound is None:
        return None
    return res.best_bound


def solve_balancing_dual_piece(sub: BalancingSubproblem,
                               scenarios: mk.ScenarioSet,
                               lam_bar_p: np.ndarray,
                               options: SolveOptions) -> Optional[float]:
    """min over the market block of J plus the dual terms on the output
    copies (exact LP).

    The iteration prices copies with unweighted duals, so the bound is
    evaluated at the probability-rescaled duals mu = lam / P_w; the P_w
    weights of the bound formula then cancel against the rescaling and
    the raw duals appear unweighted here.
    """
    mb = sub.base.clone()
    mk.build_objective(mb, sub.mv, scenarios)
    N, W, T = lam_bar_p.shape
    for n in range(N):
        for w in range(W):
            for t in range(T):
                mb.obj_linear(sub.pbal[n][w][t], lam_bar_p[n, w, t])
    res = solve(mb.build(), options)
    if res.status != OPTIMAL:
        return None
    return res.objective


# ---------------------------------------------------------------------------
# steps II & III and bookkeeping
# ---------------------------------------------------------------------------

def average_globals(state: ConsensusState) -> None:
    """Each global becomes the mean of its copies (single copies pass
    through); previous globals are kept for the dual residual."""
    N = state.shape[0]
    state.prev_g = (state.g_qtr.copy(), state.g_qbr.copy(), state.g_p.copy())
    state.g_qtr = state.own_qtr.copy()
    state.g_qbr = state.own_qbr.copy()
    if N > 1:
        state.g_qtr[:-1] = 0.5 * (state.own_qtr[:-1] + state.up_qtr[1:])
        state.g_qbr[:-1] = 0.5 * (state.own_qbr[:-1] + state.up_qbr[1:])
    state.g_p = 0.5 * (state.own_p + state.bal_p)


def update_duals(state: ConsensusState) -> None:
    """lam <- lam + rho (copy - global), written as exactly antisymmetric
    half-difference increments so paired duals sum to zero bitwise."""
    N = state.shape[0]
    rho = state.rho
    if N > 1:
        d_qtr = 0.5 * (state.own_qtr[:-1] - state.up_qtr[1:])
        d_qbr = 0.5 * (state.own_qbr[:-1] - state.up_qbr[1:])
        state.lam_own_qtr[:-1] += rho * d_qtr
        state.lam_up_qtr[1:] += -(rho * d_qtr)
        state.lam_own_qbr[:-1] += rho * d_qbr
        state.lam_up_qbr[1:] += -(rho * d_qbr)
    d_p = 0.5 * (state.own_p - state.bal_p)
    state.lam_tilde_p += rho * d_p
    state.lam_bar_p += -(rho * d_p)
    # last plant's own-discharge globals equal their single copy: no update


def consensus_residuals(state: ConsensusState) -> tuple[float, float]:
    """(primal, dual) 2-norms: copy/global mismatch and rho-scaled global
    movement."""
    N = state.shape[0]
    sq = 0.0
    sq += float(((state.own_qtr - state.g_qtr) ** 2).sum())
    sq += float(((state.own_qbr - state.g_qbr) ** 2).sum())
    sq += float(((state.own_p - state.g_p) ** 2).sum())
    sq += float(((state.bal_p - state.g_p) ** 2).sum())
    if N > 1:
        sq += float(((state.up_qtr[1:] - state.g_qtr[:-1]) ** 2).sum())
        sq += float(((state.up_qbr[1:] - state.g_qbr[:-1]) ** 2).sum())
    primal = sq ** 0.5
    if state.prev_g is None:
        dual = float("nan")
    else:
        dsq = 0.0
        for cur, prev in zip((state.g_qtr, state.g_qbr, state.g_p), state.prev_g):
            dsq += float(((cur - prev) ** 2).sum())
        dual = state.rho * dsq ** 0.5
    state.primal_residual = primal
    state.dual_residual = dual
    return primal, dual


def rescale_duals(state: ConsensusState, rho_new: float) -> None:
    """Scale duals with the penalty so the zero-sum pairing is preserved."""
    if rho_new == state.rho:
        return
    f = rho_new / state.rho
    for arr in (state.lam_own_qtr, state.lam_own_qbr, state.lam_tilde_p,
                state.lam_bar_p, state.lam_up_qtr, state.lam_up_qbr):
        arr *= f
    state.rho = rho_new


def state_slices(state: ConsensusState, n: int, w: int,
                 duals: Optional[dict] = None) -> dict:
    """Per-block views handed to a hydro solve (copied, message-safe).

    ``duals`` optionally substitutes a different dual vector set (same
    array names/shapes as the state's) — used by the bound evaluator.
    """
    d = duals if duals is not None else {
        name: getattr(state, name) for name in
        ("lam_own_qtr", "lam_own_qbr", "lam_tilde_p",
         "lam_up_qtr", "lam_up_qbr", "lam_bar_p")}
    out = {
        "lam_own_qtr": d["lam_own_qtr"][n, w].copy(),
        "lam_own_qbr": d["lam_own_qbr"][n, w].copy(),
        "lam_tilde_p": d["lam_tilde_p"][n, w].copy(),
        "g_own_qtr": state.g_qtr[n, w].copy(),
        "g_own_qbr": state.g_qbr[n, w].copy(),
        "g_own_p": state.g_p[n, w].copy(),
    }
    if n > 0:
        out.update({
            "lam_up_qtr": d["lam_up_qtr"][n, w].copy(),
            "lam_up_qbr": d["lam_up_qbr"][n, w].copy(),
            "g_up_qtr": state.g_qtr[n - 1, w].copy(),
            "g_up_qbr": state.g_qbr[n - 1, w].copy(),
        })
    return out


def dual_candidates(state: ConsensusState) -> list[dict]:
    """Dual vectors worth evaluating the lower bound at.

    Both keep the paired zero-sum property, so the bound theorem covers
    them.  Besides the raw iterate duals, a water-fungible repair prices
    barrage flow like turbine flow: a barrage channel that sits at zero
    through consensus has no restoring force on its dual, which can
    ratchet to an arbitrary spread during transients and then lets the
    bound subproblems monetize fictitious spilling; equal water pricing
    on both channels removes exactly that spread.
    """
    raw = {name: getattr(state, name) for name in
           ("lam_own_qtr", "lam_own_qbr", "lam_tilde_p",
            "lam_up_qtr", "lam_up_qbr", "lam_bar_p")}
    rep = dict(raw)
    lam_br = state.lam_own_qtr.copy()
    lam_br[-1] = 0.0                      # single-copy channel stays zero
    lam_up_br = np.zeros_like(state.lam_up_qbr)
    if state.shape[0] > 1:
        lam_up_br[1:] = -lam_br[:-1]
    rep["lam_own_qbr"] = lam_br
    rep["lam_up_qbr"] = lam_up_br
    return [raw, rep]


_STATE_ARRAYS = ("g_qtr", "g_qbr", "g_p", "own_qtr", "own_qbr", "own_p",
                 "bal_p", "up_qtr", "up_qbr", "lam_own_qtr", "lam_own_qbr",
                 "lam_tilde_p", "lam_bar_p", "lam_up_qtr", "lam_up_qbr")


def save_state(state: ConsensusState, path: str) -> None:
    """Checkpoint for restart: all arrays plus the scalar loop state."""
    arrays = {name: getattr(state, name) for name in _STATE_ARRAYS}
    meta = {"rho": state.rho, "k": state.k,
            "primal_residual": state.primal_residual,
            "dual_residual": state.dual_residual,
            "has_prev": state.prev_g is not None}
    if state.prev_g is not None:
        arrays.update(prev_g_qtr=state.prev_g[0], prev_g_qbr=state.prev_g[1],
                      prev_g_p=state.prev_g[2])
    np.savez_compressed(path, meta=np.array(json.dumps(meta)), **arrays)


def load_state(path: str) -> ConsensusState:
    z = np.load(path, allow_pickle=False)
    meta = json.loads(str(z["meta"]))
    kwargs = {name: z[name] for name in _STATE_ARRAYS}
    state = ConsensusState(**kwargs, rho=float(meta["rho"]), k=int(meta["k"]))
    state.primal_residual = float(meta["primal_residual"])
    state.dual_residual = float(meta["dual_residual"])
    if meta["has_prev"]:
        state.prev_g = (z["prev_g_qtr"], z["prev_g_qbr"], z["prev_g_p"])
    return state
