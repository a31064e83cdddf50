"""Solver-agnostic LP/MILP/QP container and the backends that solve it.

Every optimization in this package is phrased as a :class:`ProblemSpec`:
variables with bounds and integrality flags, sparse linear rows with
two-sided bounds, and a linear objective with an optional *diagonal*
quadratic term (enough for ADMM penalty subproblems).  The rest of the
package never talks to a solver directly.

Backends:

* LP / MILP  -> HiGHS through ``scipy.optimize.milp``.  For MILPs the
  solver's proven dual bound is surfaced, which downstream bound logic
  relies on.
* continuous QP (diagonal PSD Hessian) -> Clarabel.
* MIQP -> unsupported here; callers that need a quadratic objective over
  integers must linearize first (see ``consensus.penalty_cuts``).
"""

from __future__ import annotations

import json
import logging
import time
from dataclasses import dataclass, field, replace
from typing import Iterable, Mapping, Optional, Sequence

import numpy as np
import scipy.sparse as sp
from scipy.optimize import Bounds, LinearConstraint, milp

log = logging.getLogger(__name__)

# Statuses a solve can end in.
OPTIMAL = "optimal"
FEASIBLE_LIMIT = "feasible_limit"   # stopped at a limit with an incumbent
TIME_LIMIT = "time_limit"           # stopped at a limit, no incumbent
INFEASIBLE = "infeasible"
UNBOUNDED = "unbounded"
ERROR = "error"

DEFAULT_MIP_REL_GAP = 1e-6


class BackendUnsupported(RuntimeError):
    """Raised when a problem class has no available backend (e.g. MIQP)."""


class SolveError(RuntimeError):
    """Backend failure with diagnostics; never returns stale values."""


def key_name(key: tuple) -> str:
    """Render an index key ('qtr', n, w, t[, i]) as qtr[n][w][t][i]."""
    return key[0] + "".join(f"[{k}]" for k in key[1:])


@dataclass
class SolveOptions:
    time_limit: Optional[float] = None      # seconds
    mip_rel_gap: float = DEFAULT_MIP_REL_GAP
    seed: int = 0                           # recorded for reproducibility
    verbose: bool = False


@dataclass
class SolveResult:
    status: str
    x: Optional[np.ndarray]
    objective: Optional[float]
    best_bound: Optional[float]     # proven bound on the optimum (<= obj for min)
    wall_time: float
    message: str = ""

    @property
    def ok(self) -> bool:
        return self.status in (OPTIMAL, FEASIBLE_LIMIT)


@dataclass(frozen=True)
class ProblemSpec:
    """Immutable LP/MILP/QP instance.

    Rows are stored as ``row_lo <= A x <= row_hi`` (equalities have
    ``row_lo == row_hi``).  Objective is ``c . x + 0.5 x' diag(qdiag) x
    + c0``, always minimized.  ``index`` maps symbolic keys
    ``(symbol, n, w, t[, i])`` to column ids; it is a bijection over the
    allocated columns.
    """

    col_lb: np.ndarray
    col_ub: np.ndarray
    integer: np.ndarray            # bool per column
    keys: tuple                    # tuple of key-tuples, position = column id
    A: sp.csr_matrix
    row_lo: np.ndarray
    row_hi: np.ndarray
    c: np.ndarray
    c0: float = 0.0
    qdiag: Optional[np.ndarray] = None
    index: Mapping[tuple, int] = field(default_factory=dict)

    @property
    def ncols(self) -> int:
        return self.c.shape[0]

    @property
    def nrows(self) -> int:
        return self.A.shape[0]

    @property
    def nbin(self) -> int:
        return int(self.integer.sum())

    def names(self) -> list[str]:
        return [key_name(k) for k in self.keys]

    def value(self, x: np.ndarray, key: tuple) -> float:
        return float(x[self.index[key]])

    def objective_at(self, x: np.ndarray) -> float:
        v = float(self.c @ x) + self.c0
        if self.qdiag is not None:
            v += 0.5 * float((self.qdiag * x) @ x)
        return v

    def stats(self) -> dict:
        return {
            "variables": int(self.ncols),
            "binaries": int(self.nbin),
            "rows": int(self.nrows),
            "nonzeros": int(self.A.nnz),
            "quadratic": self.qdiag is not None,
        }


class ModelBuilder:
    """Accumulates variables and sparse rows, then freezes a ProblemSpec.

    Build order is deterministic: identical input sequences produce
    identical column/row ordering, which reproducible ADMM traces need.
    """

    def __init__(self) -> None:
        self._lb: list[float] = []
        self._ub: list[float] = []
        self._int: list[bool] = []
        self._keys: list[tuple] = []
        self._index: dict[tuple, int] = {}
        # flat CSR-style triplets
        self._entries_col: list[int] = []
        self._entries_val: list[float] = []
        self._row_ptr: list[int] = [0]
        self._row_lo: list[float] = []
        self._row_hi: list[float] = []
        self._c: dict[int, float] = {}
        self._c0: float = 0.0
        self._q: dict[int, float] = {}

    # -- variables ---------------------------------------------------------

    def add_var(self, key: tuple, lb: float, ub: float, integer: bool = False) -> int:
        if key in self._index:
            raise ValueError(f"duplicate variable key {key}")
        if lb > ub:
            raise ValueError(f"empty bounds for {key}: [{lb}, {ub}]")
        if integer and not (np.isfinite(lb) and np.isfinite(ub)):
            raise ValueError(f"integer variable {key} needs finite bounds")
        vid = len(self._lb)
        self._lb.append(float(lb))
        self._ub.append(float(ub))
        self._int.append(bool(integer))
        self._keys.append(key)
        self._index[key] = vid
        return vid

    def __getitem__(self, key: tuple) -> int:
        return self._index[key]

    def bounds(self, vid: int) -> tuple[float, float]:
        return self._lb[vid], self._ub[vid]

    @property
    def nvars(self) -> int:
        return len(self._lb)

    @property
    def nrows(self) -> int:
        return len(self._row_lo)

    # -- rows ---------------------------------------------------------------

    def add_row(self, coefs: Iterable[tuple[int, float]], sense: str, rhs: float) -> int:
        """Append one row.  sense is '<=', '>=' or '=='."""
        n0 = len(self._entries_col)
        for vid, c in coefs:
            if c != 0.0:
                self._entries_col.append(vid)
                self._entries_val.append(float(c))
        if len(self._entries_col) == n0:
            # constant row: still record it so counts stay honest, but check it
            if (sense == "<=" and 0.0 > rhs + 1e-12) or \
               (sense == ">=" and 0.0 < rhs - 1e-12) or \
               (sense == "==" and abs(rhs) > 1e-12):
                raise ValueError(f"constant row violates {sense} {rhs}")
        self._row_ptr.append(len(self._entries_col))
        if sense == "<=":
            self._row_lo.append(-np.inf)
            self._row_hi.append(float(rhs))
        elif sense == ">=":
            self._row_lo.append(float(rhs))
            self._row_hi.append(np.inf)
        elif sense == "==":
            self._row_lo.append(float(rhs))
            self._row_hi.append(float(rhs))
        else:
            raise ValueError(f"unknown sense {sense!r}")
        return len(self._row_lo) - 1

    def add_expr_row(self, expr: "LinExpr", sense: str, rhs: float) -> int:
        """Row from a LinExpr; the expression's constant moves to the RHS."""
        return self.add_row(list(expr.coefs.items()), sense, rhs - expr.const)

    # -- objective ----------------------------------------------------------

    def obj_linear(self, vid: int, coef: float) -> None:
        self._c[vid] = self._c.get(vid, 0.0) + coef

    def obj_constant(self, c0: float) -> None:
        self._c0 += c0

    def obj_quadratic(self, vid: int, qcoef: float) -> None:
        """Adds 0.5 * qcoef * x^2; qcoef must be >= 0 (convexity)."""
        if qcoef < 0:
            raise ValueError("negative quadratic coefficient")
        self._q[vid] = self._q.get(vid, 0.0) + qcoef

    def clear_objective(self) -> None:
        self._c = {}
        self._c0 = 0.0
        self._q = {}

    # -- lifecycle ----------------------------------------------------------

    def clone(self) -> "ModelBuilder":
        """Cheap copy for per-iteration objective/row extensions."""
        other = ModelBuilder.__new__(ModelBuilder)
        other._lb = list(self._lb)
        other._ub = list(self._ub)
        other._int = list(self._int)
        other._keys = list(self._keys)
        other._index = dict(self._index)
        other._entries_col = list(self._entries_col)
        other._entries_val = list(self._entries_val)
        other._row_ptr = list(self._row_ptr)
        other._row_lo = list(self._row_lo)
        other._row_hi = list(self._row_hi)
        other._c = dict(self._c)
        other._c0 = self._c0
        other._q = dict(self._q)
        return other

    def build(self) -> ProblemSpec:
        n = self.nvars
        c = np.zeros(n)
        for vid, coef in self._c.items():
            c[vid] = coef
        qdiag = None
        if self._q:
            qdiag = np.zeros(n)
            for vid, coef in self._q.items():
                qdiag[vid] = coef
        A = sp.csr_matrix(
            (np.asarray(self._entries_val, dtype=float),
             np.asarray(self._entries_col, dtype=np.int32),
             np.asarray(self._row_ptr, dtype=np.int64)),
            shape=(len(self._row_lo), n),
        )
        return ProblemSpec(
            col_lb=np.asarray(self._lb, dtype=float),
            col_ub=np.asarray(self._ub, dtype=float),
            integer=np.asarray(self._int, dtype=bool),
            keys=tuple(self._keys),
            A=A,
            row_lo=np.asarray(self._row_lo, dtype=float),
            row_hi=np.asarray(self._row_hi, dtype=float),
            c=c,
            c0=self._c0,
            qdiag=qdiag,
            index=dict(self._index),
        )


class LinExpr:
    """Sparse affine expression: sum(coef * var) + const.

    Used for quantities that are definitional (reservoir inflow/outflow)
    and therefore never allocated as columns.
    """

    __slots__ = ("coefs", "const")

    def __init__(self, coefs: Optional[dict[int, float]] = None, const: float = 0.0):
        self.coefs = dict(coefs) if coefs else {}
        self.const = float(const)

    def add(self, vid: int, coef: float = 1.0) -> "LinExpr":
        self.coefs[vid] = self.coefs.get(vid, 0.0) + coef
        return self

    def add_const(self, c: float) -> "LinExpr":
        self.const += c
        return self

    def value(self, x: np.ndarray) -> float:
        return self.const + sum(c * x[v] for v, c in self.coefs.items())

    def scaled(self, s: float) -> "LinExpr":
        return LinExpr({v: c * s for v, c in self.coefs.items()}, self.const * s)

    def minus(self, other: "LinExpr") -> "LinExpr":
        out = LinExpr(self.coefs, self.const)
        for v, c in other.coefs.items():
            out.add(v, -c)
        out.const -= other.const
        return out


# ---------------------------------------------------------------------------
# transforms
# ---------------------------------------------------------------------------

def relax_integrality(spec: ProblemSpec) -> ProblemSpec:
    """Same rows, all integrality flags cleared (binaries keep their box)."""
    return replace(spec, integer=np.zeros_like(spec.integer))


def fix_variables(spec: ProblemSpec, assignments: Mapping[int, float]) -> ProblemSpec:
    """Pin columns to values (lb = ub = value) and drop their integrality.

    Values must respect bounds; integer columns must get integral values.
    """
    lb = spec.col_lb.copy()
    ub = spec.col_ub.copy()
    integer = spec.integer.copy()
    for vid, val in assignments.items():
        if val < spec.col_lb[vid] - 1e-9 or val > spec.col_ub[vid] + 1e-9:
            raise ValueError(
                f"assignment {val} outside bounds "
                f"[{spec.col_lb[vid]}, {spec.col_ub[vid]}] for column {vid} "
                f"({key_name(spec.keys[vid])})")
        if spec.integer[vid] and abs(val - round(val)) > 1e-6:
            raise ValueError(f"non-integral assignment {val} for integer column {vid}")
        v = round(val) if spec.integer[vid] else float(val)
        lb[vid] = ub[vid] = v
        integer[vid] = False
    return replace(spec, col_lb=lb, col_ub=ub, integer=integer)


# ---------------------------------------------------------------------------
# solving
# ---------------------------------------------------------------------------

_MILP_STATUS = {0: OPTIMAL, 1: TIME_LIMIT, 2: INFEASIBLE, 3: UNBOUNDED, 4: ERROR}


def solve(spec: ProblemSpec, options: Optional[SolveOptions] = None) -> SolveResult:
    """Dispatch to the right backend for the spec's problem class."""
    options = options or SolveOptions()
    if spec.qdiag is not None and np.any(spec.qdiag != 0.0):
        if spec.integer.any():
            raise BackendUnsupported(
                "no MIQP backend available; linearize the quadratic term")
        return _solve_qp_clarabel(spec, options)
    return _solve_highs(spec, options)


def _solve_highs(spec: ProblemSpec, options: SolveOptions) -> SolveResult:
    opts = {"presolve": True, "mip_rel_gap": options.mip_rel_gap,
            "disp": options.verbose}
    if options.time_limit is not None:
        opts["time_limit"] = float(options.time_limit)
    constraints = []
    if spec.nrows:
        constraints.append(LinearConstraint(spec.A, spec.row_lo, spec.row_hi))
    t0 = time.perf_counter()
    try:
        res = milp(
            c=spec.c,
            constraints=constraints,
            integrality=spec.integer.astype(np.uint8),
            bounds=Bounds(spec.col_lb, spec.col_ub),
            options=opts,
        )
    except Exception as exc:  # backend blew up: surface, never return stale
        raise SolveError(f"HiGHS failure: {exc}") from exc
    wall = time.perf_counter() - t0

    status = _MILP_STATUS.get(res.status, ERROR)
    x = np.asarray(res.x, dtype=float) if res.x is not None else None
    if status == TIME_LIMIT and x is not None:
        status = FEASIBLE_LIMIT
    objective = None
    best_bound = None
    if x is not None:
        objective = float(res.fun) + spec.c0
    if spec.integer.any():
        db = getattr(res, "mip_dual_bound", None)
        if db is not None and np.isfinite(db):
            best_bound = float(db) + spec.c0
    elif objective is not None and status == OPTIMAL:
        best_bound = objective
    return SolveResult(status=status, x=x, objective=objective,
                       best_bound=best_bound, wall_time=wall,
                       message=str(res.message))


def _solve_qp_clarabel(spec: ProblemSpec, options: SolveOptions) -> SolveResult:
    import clarabel

    n = spec.ncols
    eq = spec.row_lo == spec.row_hi
    A_eq = spec.A[eq]
    b_eq = spec.row_hi[eq]
    # inequalities: upper rows A x <= hi, lower rows -A x <= -lo
    ineq = ~eq
    A_in = spec.A[ineq]
    lo = spec.row_lo[ineq]
    hi = spec.row_hi[ineq]
    blocks = []
    rhs = []
    fin_hi = np.isfinite(hi)
    if fin_hi.any():
        blocks.append(A_in[fin_hi])
        rhs.append(hi[fin_hi])
    fin_lo = np.isfinite(lo)
    if fin_lo.any():
        blocks.append(-A_in[fin_lo])
        rhs.append(-lo[fin_lo])
    # variable bounds as rows
    eye = sp.identity(n, format="csr")
    fub = np.isfinite(spec.col_ub)
    if fub.any():
        blocks.append(eye[fub])
        rhs.append(spec.col_ub[fub])
    flb = np.isfinite(spec.col_lb)
    if flb.any():
        blocks.append(-eye[flb])
        rhs.append(-spec.col_lb[flb])

    m_eq = A_eq.shape[0]
    if blocks:
        A_all = sp.vstack([A_eq] + blocks, format="csc")
        b_all = np.concatenate([b_eq] + rhs)
    else:
        A_all = sp.csc_matrix(A_eq)
        b_all = b_eq
    m_in = A_all.shape[0] - m_eq
    cones = []
    if m_eq:
        cones.append(clarabel.ZeroConeT(m_eq))
    if m_in:
        cones.append(clarabel.NonnegativeConeT(m_in))

    P = sp.diags(spec.qdiag, format="csc")
    settings = clarabel.DefaultSettings()
    settings.verbose = options.verbose
    if options.time_limit is not None:
        settings.time_limit = float(options.time_limit)
    t0 = time.perf_counter()
    solver = clarabel.DefaultSolver(P, spec.c, A_all, b_all, cones, settings)
    sol = solver.solve()
    wall = time.perf_counter() - t0

    s = str(sol.status)
    if s in ("SolverStatus.Solved", "Solved"):
        status = OPTIMAL
    elif "AlmostSolved" in s:
        status = FEASIBLE_LIMIT
    elif "PrimalInfeasible" in s:
        status = INFEASIBLE
    elif "DualInfeasible" in s:
        status = UNBOUNDED
    elif "MaxTime" in s or "MaxIterations" in s:
        status = TIME_LIMIT
    else:
        status = ERROR
    x = np.asarray(sol.x, dtype=float) if status in (OPTIMAL, FEASIBLE_LIMIT) else None
    objective = spec.objective_at(x) if x is not None else None
    best_bound = objective if status == OPTIMAL else None
    return SolveResult(status=status, x=x, objective=objective,
                       best_bound=best_bound, wall_time=wall, message=s)


# ---------------------------------------------------------------------------
# persistence / export
# ---------------------------------------------------------------------------

def save_spec(spec: ProblemSpec, path: str) -> None:
    """Round-trippable .npz snapshot (arrays + JSON-encoded keys)."""
    coo = spec.A.tocoo()
    meta = {
        "keys": [list(k) for k in spec.keys],
        "c0": spec.c0,
        "has_q": spec.qdiag is not None,
    }
    np.savez_compressed(
        path,
        col_lb=spec.col_lb, col_ub=spec.col_ub,
        integer=spec.integer.astype(np.uint8),
        a_row=coo.row, a_col=coo.col, a_val=coo.data,
        shape=np.array(spec.A.shape),
        row_lo=spec.row_lo, row_hi=spec.row_hi,
        c=spec.c,
        qdiag=spec.qdiag if spec.qdiag is not None else np.zeros(0),
        meta=np.array(json.dumps(meta)),
    )


def load_spec(path: str) -> ProblemSpec:
    z = np.load(path, allow_pickle=False)
    meta = json.loads(str(z["meta"]))
    keys = tuple(tuple(k) for k in meta["keys"])
    shape = tuple(int(v) for v in z["shape"])
    A = sp.csr_matrix((z["a_val"], (z["a_row"], z["a_col"])), shape=shape)
    qdiag = z["qdiag"] if meta["has_q"] else None
    return ProblemSpec(
        col_lb=z["col_lb"], col_ub=z["col_ub"],
        integer=z["integer"].astype(bool),
        keys=keys, A=A, row_lo=z["row_lo"], row_hi=z["row_hi"],
        c=z["c"], c0=float(meta["c0"]), qdiag=qdiag,
        index={k: i for i, k in enumerate(keys)},
    )


def _lp_safe(name: str) -> str:
    return name.replace("[", "_").replace("]", "").replace(",", "_")


def export_lp(spec: ProblemSpec, path: str) -> None:
    """Write the instance in CPLEX LP text format for external checking."""
    if spec.qdiag is not None:
        raise ValueError("LP export only covers linear objectives")
    names = [_lp_safe(n) for n in spec.names()]
    A = spec.A.tocsr()
    with open(path, "w") as f:
        f.write("Minimize\n obj:")
        terms = [f" {c:+.17g} {names[i]}" for i, c in enumerate(spec.c) if c != 0.0]
        f.write("".join(terms) if terms else " 0 " + names[0])
        f.write("\nSubject To\n")
        for r in range(spec.nrows):
            lo, hi = spec.row_lo[r], spec.row_hi[r]
            row = A.getrow(r)
            body = "".join(
                f" {v:+.17g} {names[j]}" for j, v in zip(row.indices, row.data))
            if lo == hi:
                f.write(f" r{r}:{body} = {lo:.17g}\n")
            else:
                if np.isfinite(hi):
                    f.write(f" r{r}u:{body} <= {hi:.17g}\n")
                if np.isfinite(lo):
                    f.write(f" r{r}l:{body} >= {lo:.17g}\n")
        f.write("Bounds\n")
        for i in range(spec.ncols):
            lo, hi = spec.col_lb[i], spec.col_ub[i]
            lo_s = f"{lo:.17g}" if np.isfinite(lo) else "-inf"
            hi_s = f"{hi:.17g}" if np.isfinite(hi) else "+inf"
            f.write(f" {lo_s} <= {names[i]} <= {hi_s}\n")
        if spec.integer.any():
            f.write("Generals\n")
            for i in np.flatnonzero(spec.integer):
                f.write(f" {names[i]}\n")
        f.write("End\n")
