"""Consensus ADMM with certified bounds (CADMMB) and the plain-ADMM baseline.

Each iteration fans out the local primal solves, averages the copies,
updates duals, and maintains two one-sided guarantees on the monolith's
optimum: a Lagrangian lower bound evaluated from the current duals
(valid whenever the paired duals sum to zero, which the antisymmetric
update keeps true) and an upper bound from quasi-projection (fixing the
harvested binaries in the monolith and solving the remaining LP, whose
solution is feasible by construction).  Termination: relative gap below
the tolerance, iteration cap, or wall budget.
"""

from __future__ import annotations

import logging
import time
from dataclasses import dataclass, field, asdict
from typing import Optional

import numpy as np

from . import consensus as cs
from . import market as mk
from .centralized import (CentralizedInstance, assemble_centralized,
                          initial_lower_bound, initial_upper_bound,
                          _run_of_river_routing)
from .hydro import CascadeData
from .model import (OPTIMAL, SolveOptions, fix_variables, solve)
from .runtime import ResultMessage, TaskMessage, WorkerPool

log = logging.getLogger(__name__)

CERTIFIED = "certified"
MAX_ITERATIONS = "max_iterations"
BUDGET_EXHAUSTED = "budget_exhausted"
RESIDUAL_CONVERGED = "residual_converged"

ZERO_SUM_TOL = 1e-8


@dataclass
class AlgorithmParams:
    rho0: float = 0.1
    eps_gap: float = 0.01           # percent, certification threshold
    eps_ub: float = 0.01            # percent, projection trigger
    max_iterations: int = 5000
    lb_every: int = 1               # dual-bound cadence (iterations)
    ub_min_every: int = 10          # projection at least this often
    mu: float = 10.0                # residual-balancing threshold
    tau_incr: float = 2.0
    tau_decr: float = 2.0
    wall_budget_s: float = 4 * 3600.0
    residual_tol: float = 1e-4      # RMS, plain-ADMM termination
    penalty: cs.PenaltyConfig = field(default_factory=cs.PenaltyConfig)
    mip_rel_gap: float = 1e-6
    seed: int = 0

    def __post_init__(self):
        if self.eps_gap <= 0 or self.eps_ub <= 0:
            raise ValueError("tolerances must be positive")
        if self.max_iterations < 1:
            raise ValueError("need at least one iteration")

    def solve_options(self, time_limit: Optional[float] = None) -> SolveOptions:
        return SolveOptions(time_limit=time_limit, mip_rel_gap=self.mip_rel_gap,
                            seed=self.seed)


@dataclass
class TraceRow:
    k: int
    lb: float
    ub: float
    gap: float
    rho: float
    primal_residual: float
    dual_residual: float
    wall_time: float
    lb_candidate: float = float("nan")   # dual value this iteration
    ub_candidate: float = float("nan")   # projection value this iteration


@dataclass
class BoundsTrace:
    rows: list[TraceRow] = field(default_factory=list)
    projection_failures: int = 0
    lb_skips: int = 0

    def append(self, **kw) -> None:
        self.rows.append(TraceRow(**kw))

    @property
    def final(self) -> Optional[TraceRow]:
        return self.rows[-1] if self.rows else None


@dataclass
class RunResult:
    status: str
    lb: float
    ub: float
    gap_percent: float
    objective: Optional[float]          # objective of the returned point
    best_x: Optional[np.ndarray]        # on the monolith's columns
    bid_curves: Optional[list[mk.BidCurve]]
    trace: BoundsTrace
    iterations: int
    wall_time: float
    method: str
    instance: Optional[CentralizedInstance] = None

    @property
    def certified(self) -> bool:
        return self.status == CERTIFIED

    def certificate(self, params: AlgorithmParams) -> dict:
        p = asdict(params)
        p["penalty"] = asdict(params.penalty)
        return {
            "method": self.method,
            "status": self.status,
            "certified": self.certified,
            "lower_bound": None if np.isinf(self.lb) else self.lb,
            "upper_bound": None if np.isinf(self.ub) else self.ub,
            "gap_percent": None if np.isinf(self.gap_percent) else self.gap_percent,
            "objective": self.objective,
            "iterations": self.iterations,
            "wall_time_s": self.wall_time,
            "seed": params.seed,
            "params": p,
        }


def gap_percent(ub: float, lb: float) -> float:
    """100 |ub - lb| / |ub|; +inf when the denominator vanishes or no
    finite upper bound exists yet."""
    if not np.isfinite(ub):
        return float("inf")
    if ub == 0.0:
        log.warning("upper bound is exactly 0; gap undefined, reporting inf")
        return float("inf")
    return 100.0 * abs(ub - lb) / abs(ub)


def update_penalty(primal: float, dual: float, rho: float,
                   params: AlgorithmParams) -> float:
    """Residual balancing: grow rho when the primal residual dominates,
    shrink it when the dual residual does."""
    if not (np.isfinite(primal) and np.isfinite(dual)):
        return rho
    if primal > params.mu * dual:
        return rho * params.tau_incr
    if dual > params.mu * primal:
        return rho / params.tau_decr
    return rho


# ---------------------------------------------------------------------------
# worker side
# ---------------------------------------------------------------------------

class _WorkerContext:
    """Per-process cache of frozen subproblem blocks."""

    def __init__(self, cascade, scenarios, penalty, mip_rel_gap):
        self.cascade = cascade
        self.scenarios = scenarios
        self.penalty = penalty
        self.options = SolveOptions(mip_rel_gap=mip_rel_gap)
        self._hydro: dict[tuple[int, int], cs.HydroSubproblem] = {}
        self._bal: Optional[cs.BalancingSubproblem] = None

    def hydro(self, n: int, w: int) -> cs.HydroSubproblem:
        key = (n, w)
        if key not in self._hydro:
            self._hydro[key] = cs.build_hydro_subproblem(
                self.cascade, self.scenarios, n, w)
        return self._hydro[key]

    def balancing(self) -> cs.BalancingSubproblem:
        if self._bal is None:
            self._bal = cs.build_balancing_subproblem(self.cascade, self.scenarios)
        return self._bal


def _make_worker_context(cascade, scenarios, penalty, mip_rel_gap):
    return _WorkerContext(cascade, scenarios, penalty, mip_rel_gap)


def _execute_task(ctx: _WorkerContext, task: TaskMessage) -> ResultMessage:
    kind = task.task_id[0]
    t0 = time.perf_counter()
    if kind == "hydro":
        _, n, w = task.task_id
        out = cs.solve_hydro_step(ctx.hydro(n, w), task.payload["slices"],
                                  task.payload["rho"], ctx.penalty, ctx.options)
    elif kind == "bal":
        out = cs.solve_balancing_step(
            ctx.balancing(), ctx.scenarios, task.payload["lam_bar_p"],
            task.payload["g_p"], task.payload["rho"], ctx.options)
    elif kind == "lbh":
        n, w = task.task_id[-2], task.task_id[-1]
        bound = cs.solve_hydro_dual_piece(ctx.hydro(n, w),
                                          task.payload["slices"], ctx.options)
        out = {"bound": bound}
    elif kind == "lbb":
        bound = cs.solve_balancing_dual_piece(
            ctx.balancing(), ctx.scenarios, task.payload["lam_bar_p"],
            ctx.options)
        out = {"bound": bound}
    else:
        raise ValueError(f"unknown task kind {kind!r}")
    return ResultMessage(task.task_id, task.iteration, "ok", payload=out,
                         wall_time=time.perf_counter() - t0)


# ---------------------------------------------------------------------------
# coordinator
# ---------------------------------------------------------------------------

def _init_globals_from_x(state: cs.ConsensusState, instance: CentralizedInstance,
                         x: np.ndarray) -> None:
    N, W, T = state.shape
    idx = instance.spec.index
    for n in range(N):
        for w in range(W):
            for t in range(T):
                state.g_qtr[n, w, t] = x[idx[("qtr", n, w, t)]]
                state.g_qbr[n, w, t] = x[idx[("qbr", n, w, t)]]
                state.g_p[n, w, t] = x[idx[("p", n, w, t)]]


def _init_globals_run_of_river(state: cs.ConsensusState, cascade: CascadeData,
                               scenarios: mk.ScenarioSet) -> None:
    ext = scenarios.inflow_matrix(cascade.topology.plant_ids)
    for w in range(state.shape[1]):
        qin = _run_of_river_routing(cascade, ext, w)
        for n, plant in enumerate(cascade.plants):
            qtr = np.clip(qin[n], plant.q_turbine_min, plant.q_turbine_max)
            state.g_qtr[n, w] = qtr
            state.g_qbr[n, w] = np.maximum(qin[n] - qtr, 0.0)
            head = plant.initial_level - plant.tailrace_level
            state.g_p[n, w] = np.minimum(plant.power_coef * qtr * head,
                                         plant.capacity_mw)


def _step_round(pool: WorkerPool, state: cs.ConsensusState, k: int) -> dict:
    """Dispatch Step I (all hydro blocks + balancing) and fold the copies
    back into the state.  Returns the harvested binaries and offers."""
    N, W, _T = state.shape
    tasks = []
    for n in range(N):
        for w in range(W):
            tasks.append(TaskMessage(("hydro", n, w), k, {
                "slices": cs.state_slices(state, n, w), "rho": state.rho}))
    tasks.append(TaskMessage(("bal",), k, {
        "lam_bar_p": state.lam_bar_p.copy(), "g_p": state.g_p.copy(),
        "rho": state.rho}))
    results = pool.dispatch_round(tasks)
    harvest: dict = {}
    offers = None
    for r in results:
        if r.task_id[0] == "hydro":
            _, n, w = r.task_id
            out = r.payload
            state.own_qtr[n, w] = out["own_qtr"]
            state.own_qbr[n, w] = out["own_qbr"]
            state.own_p[n, w] = out["own_p"]
            if out["up_qtr"] is not None:
                state.up_qtr[n, w] = out["up_qtr"]
                state.up_qbr[n, w] = out["up_qbr"]
            harvest.update(out["harvest"])
        elif r.task_id[0] == "bal":
            state.bal_p[:] = r.payload["bal_p"]
            offers = r.payload["offers"]
    return {"harvest": harvest, "offers": offers}


def _lower_bound_round(pool: WorkerPool, state: cs.ConsensusState,
                       scenarios: mk.ScenarioSet, k: int) -> Optional[float]:
    """Best Lagrangian value D over the candidate dual vectors.

    D is evaluated at the probability-rescaled duals mu = lam/P_w, which
    inherit the paired zero-sum property; the bound formula's P_w weights
    cancel the rescaling, so the pieces below add up unweighted.  Each
    candidate dual set (raw and water-fungible-repaired) yields a valid
    bound; the max is kept.  Returns None when every candidate had an
    unbounded or failed piece.
    """
    N, W, _T = state.shape
    candidates = cs.dual_candidates(state)
    tasks = [TaskMessage(("lbb",), k, {"lam_bar_p": state.lam_bar_p.copy()})]
    for v, duals in enumerate(candidates):
        for n in range(N):
            for w in range(W):
                tasks.append(TaskMessage(("lbh", v, n, w), k, {
                    "slices": cs.state_slices(state, n, w, duals)}))
    results = pool.dispatch_round(tasks)
    bal_piece = None
    sums = [0.0] * len(candidates)
    dead = [False] * len(candidates)
    for r in results:
        b = r.payload["bound"]
        if r.task_id[0] == "lbb":
            bal_piece = b
        elif b is None:
            dead[r.task_id[1]] = True
        else:
            sums[r.task_id[1]] += b
    if bal_piece is None:
        log.info("balancing dual piece failed; skipping this lower-bound "
                 "update")
        return None
    values = [s + bal_piece for s, d in zip(sums, dead) if not d]
    if not values:
        log.info("all dual candidates had unbounded pieces; skipping this "
                 "lower-bound update")
        return None
    return max(values)


def evaluate_dual_lower_bound(state: cs.ConsensusState, cascade: CascadeData,
                              scenarios: mk.ScenarioSet,
                              options: Optional[SolveOptions] = None,
                              ) -> Optional[float]:
    """Pool-free bound evaluation at the state's duals (same math as the
    in-loop rounds; builds the blocks on the fly, so meant for small
    instances and tests)."""
    options = options or SolveOptions()
    if state.zero_sum_violation() > ZERO_SUM_TOL:
        log.warning("dual zero-sum violated; no valid bound at this state")
        return None
    N, W, _T = state.shape
    bal = cs.build_balancing_subproblem(cascade, scenarios)
    bal_piece = cs.solve_balancing_dual_piece(bal, scenarios, state.lam_bar_p,
                                              options)
    if bal_piece is None:
        return None
    subs = {(n, w): cs.build_hydro_subproblem(cascade, scenarios, n, w)
            for n in range(N) for w in range(W)}
    best = None
    for duals in cs.dual_candidates(state):
        total = bal_piece
        for (n, w), sub in subs.items():
            piece = cs.solve_hydro_dual_piece(
                sub, cs.state_slices(state, n, w, duals), options)
            if piece is None:
                total = None
                break
            total += piece
        if total is not None and (best is None or total > best):
            best = total
    return best


def run(cascade: CascadeData, scenarios: mk.ScenarioSet,
        params: Optional[AlgorithmParams] = None, method: str = "cadmmb",
        workers: int = 1) -> RunResult:
    """Distributed day-ahead solve.

    method "cadmmb": full loop with certified bounds.  method "admm":
    same iteration without any bound computation (residual-based stop,
    no certificate).
    """
    params = params or AlgorithmParams()
    if method not in ("cadmmb", "admm"):
        raise ValueError(f"unknown method {method!r}")
    t_start = time.perf_counter()
    budget = params.wall_budget_s

    def remaining():
        return budget - (time.perf_counter() - t_start)

    N, W, T = cascade.n_plants, scenarios.n_scenarios, scenarios.horizon
    trace = BoundsTrace()
    state = cs.ConsensusState.zeros(N, W, T, params.rho0)

    instance = None
    lb = -float("inf")
    ub = float("inf")
    best_x = None
    if method == "cadmmb":
        instance = assemble_centralized(cascade, scenarios)
        lb_res = initial_lower_bound(instance, params.solve_options(remaining()))
        if lb_res.status == OPTIMAL:
            lb = lb_res.objective
            _init_globals_from_x(state, instance, lb_res.x)
        elif lb_res.status == "infeasible":
            raise RuntimeError("linear relaxation infeasible: bad input data")
        else:
            log.warning("initial relaxation %s; starting without a finite "
                        "lower bound", lb_res.status)
            _init_globals_run_of_river(state, cascade, scenarios)
        ub_res, ub_x, _restricted = initial_upper_bound(
            instance, params.solve_options(remaining()))
        if ub_res.ok and ub_x is not None:
            ub = ub_res.objective
            best_x = ub_x
        trace.append(k=0, lb=lb, ub=ub, gap=gap_percent(ub, lb), rho=state.rho,
                     primal_residual=float("nan"), dual_residual=float("nan"),
                     wall_time=time.perf_counter() - t_start)
        if gap_percent(ub, lb) <= params.eps_gap:
            return _finish(CERTIFIED, lb, ub, best_x, instance, trace, 0,
                           t_start, method)
    else:
        _init_globals_run_of_river(state, cascade, scenarios)

    dim = (4 * N + 2 * max(N - 1, 0)) * W * T   # consensus component count
    status = MAX_ITERATIONS
    offers = None
    last_prj_residual = None
    last_prj_k = 0

    pool = WorkerPool(_make_worker_context,
                      (cascade, scenarios, params.penalty, params.mip_rel_gap),
                      _execute_task, workers=workers)
    try:
        for k in range(1, params.max_iterations + 1):
            state.k = k
            step = _step_round(pool, state, k)
            offers = step["offers"]
            cs.average_globals(state)
            cs.update_duals(state)
            primal, dual = cs.consensus_residuals(state)

            lb_cand = ub_cand = float("nan")
            if method == "cadmmb":
                zs = state.zero_sum_violation()
                if k % params.lb_every == 0:
                    if zs > ZERO_SUM_TOL:
                        log.warning("dual zero-sum violated (%.2e); skipping "
                                    "the lower-bound update", zs)
                        trace.lb_skips += 1
                    else:
                        cand = _lower_bound_round(pool, state, scenarios, k)
                        if cand is None:
                            trace.lb_skips += 1
                        else:
                            lb_cand = cand
                            lb = max(lb, cand)

                project = (k - last_prj_k) >= params.ub_min_every
                if last_prj_residual is None:
                    project = True
                elif last_prj_residual > 0:
                    rel = abs(primal - last_prj_residual) / last_prj_residual
                    project = project or rel > params.eps_ub / 100.0
                if project:
                    last_prj_k = k
                    last_prj_residual = primal
                    cand = _quasi_projection(instance, step["harvest"],
                                             params, remaining())
                    if cand is None:
                        trace.projection_failures += 1
                    else:
                        ub_cand, cand_x = cand
                        if ub_cand < ub:
                            ub, best_x = ub_cand, cand_x

            rho_new = update_penalty(primal, dual, state.rho, params)
            cs.rescale_duals(state, rho_new)

            g = gap_percent(ub, lb)
            trace.append(k=k, lb=lb, ub=ub, gap=g, rho=state.rho,
                         primal_residual=primal, dual_residual=dual,
                         wall_time=time.perf_counter() - t_start,
                         lb_candidate=lb_cand, ub_candidate=ub_cand)
            if method == "cadmmb" and g <= params.eps_gap:
                status = CERTIFIED
                break
            if method == "admm":
                rms_p = primal / dim ** 0.5
                rms_d = (dual / dim ** 0.5) if np.isfinite(dual) else float("inf")
                if rms_p <= params.residual_tol and rms_d <= params.residual_tol:
                    status = RESIDUAL_CONVERGED
                    break
            if remaining() <= 0:
                status = BUDGET_EXHAUSTED
                break
    finally:
        pool.close()

    k_done = state.k
    if method == "admm":
        return _finish_admm(status, offers, scenarios, trace, k_done,
                            t_start, state)
    return _finish(status, lb, ub, best_x, instance, trace, k_done,
                   t_start, method)


def _quasi_projection(instance: CentralizedInstance, harvest: dict,
                      params: AlgorithmParams, time_left: float,
                      ) -> Optional[tuple[float, np.ndarray]]:
    """Fix the harvested binaries in the monolith and solve the LP; a
    feasible solution is feasible for the original problem, so its
    objective upper-bounds the optimum.  Inconsistent binaries can make
    the LP infeasible; that projection is skipped."""
    assignments = {instance.spec.index[key]: val for key, val in harvest.items()}
    lp = fix_variables(instance.spec, assignments)
    res = solve(lp, params.solve_options(max(time_left, 1.0)))
    if res.status != OPTIMAL:
        log.info("quasi-projection LP %s; no upper-bound update", res.status)
        return None
    return res.objective, res.x


def _finish(status, lb, ub, best_x, instance, trace, iterations, t_start,
            method) -> RunResult:
    curves = None
    objective = None
    if best_x is not None and instance is not None:
        objective = instance.spec.objective_at(best_x)
        curves = mk.extract_bid_curves(instance.scenarios,
                                       instance.offers(best_x))
    return RunResult(
        status=status, lb=lb, ub=ub, gap_percent=gap_percent(ub, lb),
        objective=objective, best_x=best_x, bid_curves=curves, trace=trace,
        iterations=iterations, wall_time=time.perf_counter() - t_start,
        method=method, instance=instance)


def _finish_admm(status, offers, scenarios, trace, iterations, t_start,
                 state) -> RunResult:
    curves = None
    if offers is not None:
        # heuristic iterate: snap tiny ordering violations before extraction
        curves = mk.extract_bid_curves(scenarios, offers, tol=1e-5)
    return RunResult(
        status=status, lb=-float("inf"), ub=float("inf"),
        gap_percent=float("inf"), objective=None, best_x=None,
        bid_curves=curves, trace=trace, iterations=iterations,
        wall_time=time.perf_counter() - t_start, method="admm")
