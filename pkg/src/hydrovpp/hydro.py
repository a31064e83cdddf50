"""Physical model of the hydropower cascade.

Domain types (operational curves, plant specs, topology) and the
constraint builders that emit one plant/scenario block: forebay level
dynamics with a cyclic boundary, delay-shifted routing between plants,
piecewise operational-curve bands with segment-selector binaries, ramped
turbine discharge, barrage gating, and the convex envelope of the
bilinear head*flow power term.

Units: flows m3/s, levels/heads m, surface m2, power MW, time steps of
``delta_t`` seconds.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from .model import LinExpr, ModelBuilder

log = logging.getLogger(__name__)

WATER_DENSITY = 1000.0   # kg/m3
GRAVITY = 9.81           # m/s2
EPS_STRICT = 1e-6        # m3/s, closes the strict segment-top inequality


def power_coefficient(efficiency: float) -> float:
    """MW per (m3/s * m): 1e-6 * rho * g * eta."""
    return 1e-6 * WATER_DENSITY * GRAVITY * efficiency


@dataclass(frozen=True)
class OperationalCurve:
    """Admissible forebay band per inflow segment.

    ``segments`` is an ordered list of (inflow breakpoint, min level,
    max level).  Segment i covers inflows [Q_i, Q_{i+1}); the last
    segment is open-ended up to the big-M cap.
    """

    segments: tuple[tuple[float, float, float], ...]

    def __post_init__(self):
        if not self.segments:
            raise ValueError("operational curve needs at least one segment")
        qs = [s[0] for s in self.segments]
        if any(b >= a for a, b in zip(qs[1:], qs[:-1])):
            raise ValueError(f"breakpoints not strictly increasing: {qs}")
        for q, zlo, zhi in self.segments:
            if zlo > zhi:
                raise ValueError(f"segment at {q}: z_lo {zlo} > z_hi {zhi}")

    @property
    def nseg(self) -> int:
        return len(self.segments)

    @property
    def breakpoints(self) -> list[float]:
        return [s[0] for s in self.segments]

    def max_level(self) -> float:
        return max(s[2] for s in self.segments)

    def segment_of(self, inflow: float) -> int:
        """Bracketing segment index for an inflow (last one is open-ended)."""
        idx = self.nseg - 1
        for i in range(self.nseg - 1):
            if self.segments[i][0] <= inflow < self.segments[i + 1][0]:
                idx = i
                break
        if inflow < self.segments[0][0]:
            raise ValueError(f"inflow {inflow} below first breakpoint "
                             f"{self.segments[0][0]}")
        return idx

    def pinched(self, level: float) -> "OperationalCurve":
        """Bands collapsed to the point of each band nearest ``level``."""
        segs = tuple((q, min(max(level, zlo), zhi), min(max(level, zlo), zhi))
                     for q, zlo, zhi in self.segments)
        return OperationalCurve(segs)


@dataclass(frozen=True)
class PlantSpec:
    plant_id: str
    capacity_mw: float
    head_min: float
    head_max: float
    q_turbine_min: float
    q_turbine_max: float
    ramp_q_turbine: float          # m3/s change allowed per step
    q_barrage_min: float           # minimum discharge once the barrage opens
    efficiency: float
    tailrace_level: float
    initial_level: float           # forebay level at both horizon ends
    surface_m2: float
    curve: OperationalCurve
    big_m_oc: Optional[float] = None
    big_m_br: Optional[float] = None
    inflow_fraction: float = 1.0   # share of the river inflow entering here

    def __post_init__(self):
        if not (0.0 <= self.q_turbine_min <= self.q_turbine_max):
            raise ValueError(f"{self.plant_id}: bad turbine bounds")
        if self.head_min > self.head_max:
            raise ValueError(f"{self.plant_id}: head_min > head_max")
        if self.ramp_q_turbine <= 0:
            raise ValueError(f"{self.plant_id}: ramp must be positive")
        if self.surface_m2 <= 0:
            raise ValueError(f"{self.plant_id}: surface must be positive")
        if not (0.0 < self.efficiency <= 1.0):
            raise ValueError(f"{self.plant_id}: efficiency outside (0, 1]")
        if self.big_m_oc is not None and self.big_m_oc <= max(self.curve.breakpoints):
            raise ValueError(f"{self.plant_id}: big_m_oc below last breakpoint")

    @property
    def power_coef(self) -> float:
        return power_coefficient(self.efficiency)

    def m_oc(self) -> float:
        if self.big_m_oc is not None:
            return self.big_m_oc
        top = max(self.curve.breakpoints)
        return 1.5 * top if top > 0 else 1000.0

    def m_br(self, max_external_inflow: float = 0.0) -> float:
        if self.big_m_br is not None:
            return self.big_m_br
        return 2.0 * self.q_turbine_max + max(max_external_inflow, 0.0)


@dataclass(frozen=True)
class CascadeTopology:
    """Linear upstream-to-downstream chain with water travel times."""

    plant_ids: tuple[str, ...]
    tau_barrage_s: tuple[float, ...]   # len N-1, link (n-1 -> n)
    tau_turbine_s: tuple[float, ...]
    delta_t_s: float
    horizon: int

    def __post_init__(self):
        n = len(self.plant_ids)
        if len(self.tau_barrage_s) != max(n - 1, 0) or \
           len(self.tau_turbine_s) != max(n - 1, 0):
            raise ValueError("need one travel time per upstream link")
        if self.delta_t_s <= 0:
            raise ValueError("delta_t must be positive")
        if any(t < 0 for t in self.tau_barrage_s + self.tau_turbine_s):
            raise ValueError("travel times must be non-negative")
        for tau in self.tau_barrage_s + self.tau_turbine_s:
            if round(tau / self.delta_t_s) >= self.horizon:
                raise ValueError("travel delay spans the whole horizon")

    @property
    def n_plants(self) -> int:
        return len(self.plant_ids)

    def delay_steps(self, link: int) -> tuple[int, int]:
        """(barrage, turbine) delays of link n-1 -> n in whole steps."""
        return (round(self.tau_barrage_s[link] / self.delta_t_s),
                round(self.tau_turbine_s[link] / self.delta_t_s))

    @property
    def delta_hours(self) -> float:
        return self.delta_t_s / 3600.0


@dataclass(frozen=True)
class CascadeData:
    """Plants plus chain topology; the full physical description.

    ``boundary`` optionally carries pre-horizon conditions per plant id:
    ``{"qtr": [...], "qbr": [...], "q0": float}`` — upstream discharges
    for delayed indices before the first step (latest value last) and the
    turbine discharge the first ramp row anchors to.  Missing entries
    fall back to zeros / the turbine minimum.
    """

    plants: tuple[PlantSpec, ...]
    topology: CascadeTopology
    boundary: Optional[dict] = None

    def __post_init__(self):
        if not self.plants:
            raise ValueError("cascade has no plants")
        ids = tuple(p.plant_id for p in self.plants)
        if ids != self.topology.plant_ids:
            raise ValueError("plant order disagrees with topology")

    @property
    def n_plants(self) -> int:
        return len(self.plants)

    @property
    def horizon(self) -> int:
        return self.topology.horizon

    def boundary_of(self, plant_id: str) -> dict:
        return (self.boundary or {}).get(plant_id, {})


@dataclass
class HydroVars:
    """Column ids of one (plant, scenario) block.

    ``z`` has horizon+1 entries (index 0 is the boundary state).  Inflow
    and outflow are definitional and therefore affine expressions, not
    columns.
    """

    qtr: list[int] = field(default_factory=list)
    qbr: list[int] = field(default_factory=list)
    z: list[int] = field(default_factory=list)
    h: list[int] = field(default_factory=list)
    p: list[int] = field(default_factory=list)
    bbr: list[int] = field(default_factory=list)
    boc: list[list[int]] = field(default_factory=list)   # [t][segment]
    qin: list[LinExpr] = field(default_factory=list)
    qout: list[LinExpr] = field(default_factory=list)


def allocate_hydro_vars(mb: ModelBuilder, plant: PlantSpec, n: int, w: int,
                        horizon: int, m_br: float) -> HydroVars:
    """Columns for one plant/scenario, named symbol[n][w][t](+segment)."""
    hv = HydroVars()
    nseg = plant.curve.nseg
    zmax = plant.curve.max_level()
    zmin = min(s[1] for s in plant.curve.segments)
    for t in range(horizon + 1):
        hv.z.append(mb.add_var(("zfbl", n, w, t), min(zmin, plant.initial_level),
                               max(zmax, plant.initial_level)))
    for t in range(horizon):
        hv.qtr.append(mb.add_var(("qtr", n, w, t), plant.q_turbine_min,
                                 plant.q_turbine_max))
        hv.qbr.append(mb.add_var(("qbr", n, w, t), 0.0, m_br))
        hv.h.append(mb.add_var(("h", n, w, t), plant.head_min, plant.head_max))
        hv.p.append(mb.add_var(("p", n, w, t), 0.0, plant.capacity_mw))
        hv.bbr.append(mb.add_var(("bbr", n, w, t), 0.0, 1.0, integer=True))
        hv.boc.append([mb.add_var(("boc", n, w, t, i), 0.0, 1.0, integer=True)
                       for i in range(nseg)])
    return hv


def build_inflow_links(hv: HydroVars, horizon: int,
                       q_external: Sequence[float],
                       upstream_qtr: Optional[Sequence[int]] = None,
                       upstream_qbr: Optional[Sequence[int]] = None,
                       delay_br: int = 0, delay_tr: int = 0,
                       history_qtr: Optional[Sequence[float]] = None,
                       history_qbr: Optional[Sequence[float]] = None) -> None:
    """Define inflow/outflow expressions with delay-shifted upstream terms.

    For steps whose delayed index precedes the horizon a boundary history
    supplies the upstream discharge (zeros by default).  The head plant
    passes no upstream handles and receives external inflow only.
    """
    q_external = np.asarray(q_external, dtype=float)
    if q_external.shape[0] != horizon:
        raise ValueError("external inflow length != horizon")
    if np.any(q_external < 0):
        raise ValueError("negative external inflow")

    def hist(series, k):
        # k < 0: steps before the horizon; series[-1] is the latest one
        if series is None:
            return 0.0
        if -k > len(series):
            return 0.0
        return float(series[k])

    for t in range(horizon):
        e = LinExpr(const=float(q_external[t]))
        if upstream_qtr is not None:
            tt = t - delay_tr
            if tt >= 0:
                e.add(upstream_qtr[tt])
            else:
                e.add_const(hist(history_qtr, tt))
            tb = t - delay_br
            if tb >= 0:
                e.add(upstream_qbr[tb])
            else:
                e.add_const(hist(history_qbr, tb))
        hv.qin.append(e)
        hv.qout.append(LinExpr({hv.qtr[t]: 1.0, hv.qbr[t]: 1.0}))


def build_forebay_dynamics(mb: ModelBuilder, plant: PlantSpec, hv: HydroVars,
                           horizon: int, delta_t: float,
                           surface: Optional[Sequence[float]] = None) -> int:
    """Level recursion z_t = z_{t-1} + (qin - qout) dt / S, cyclic boundary.

    Returns the number of rows emitted (horizon dynamics + 2 boundary).
    """
    if surface is None:
        surface = [plant.surface_m2] * horizon
    rows = 0
    for t in range(horizon):
        s = float(surface[t])
        if s <= 0:
            raise ValueError(f"{plant.plant_id}: surface <= 0 at step {t}")
        k = delta_t / s
        e = LinExpr({hv.z[t + 1]: 1.0, hv.z[t]: -1.0})
        e = e.minus(hv.qin[t].scaled(k))
        net = hv.qout[t].scaled(k)
        for v, c in net.coefs.items():
            e.add(v, c)
        e.add_const(net.const)
        mb.add_expr_row(e, "==", 0.0)
        rows += 1
    mb.add_row([(hv.z[0], 1.0)], "==", plant.initial_level)
    mb.add_row([(hv.z[horizon], 1.0)], "==", plant.initial_level)
    return rows + 2


def build_operational_curve(mb: ModelBuilder, plant: PlantSpec, hv: HydroVars,
                            horizon: int, eps_strict: float = EPS_STRICT) -> int:
    """Segment selection and the level band it activates.

    Per step: qin >= b_i Q_i; qin <= b_i Q_{i+1} + (1-b_i) M - eps
    (strict top closed by eps); exactly one active segment; level inside
    the active band.
    """
    segs = plant.curve.segments
    nseg = len(segs)
    m_oc = plant.m_oc()
    rows = 0
    for t in range(horizon):
        qin = hv.qin[t]
        for i in range(nseg):
            q_lo = segs[i][0]
            q_hi = segs[i + 1][0] if i + 1 < nseg else m_oc
            b = hv.boc[t][i]
            # qin - b*q_lo >= 0
            e = LinExpr(qin.coefs, qin.const).add(b, -q_lo)
            mb.add_expr_row(e, ">=", 0.0)
            # qin - b*(q_hi - M) <= M - eps
            e = LinExpr(qin.coefs, qin.const).add(b, -(q_hi - m_oc))
            mb.add_expr_row(e, "<=", m_oc - eps_strict)
            rows += 2
        mb.add_row([(b, 1.0) for b in hv.boc[t]], "==", 1.0)
        rows += 1
        z = hv.z[t + 1]
        mb.add_row([(z, 1.0)] + [(hv.boc[t][i], -segs[i][1]) for i in range(nseg)],
                   ">=", 0.0)
        mb.add_row([(z, 1.0)] + [(hv.boc[t][i], -segs[i][2]) for i in range(nseg)],
                   "<=", 0.0)
        rows += 2
    return rows


def build_discharge_limits(mb: ModelBuilder, plant: PlantSpec, hv: HydroVars,
                           horizon: int,
                           initial_discharge: Optional[float] = None) -> int:
    """Ramp rows |qtr_t - qtr_{t-1}| <= ramp; box bounds live on the columns.

    The first step ramps against ``initial_discharge`` (defaults to the
    turbine minimum).
    """
    q0 = plant.q_turbine_min if initial_discharge is None else float(initial_discharge)
    r = plant.ramp_q_turbine
    rows = 0
    for t in range(horizon):
        if t == 0:
            mb.add_row([(hv.qtr[0], 1.0)], "<=", q0 + r)
            mb.add_row([(hv.qtr[0], 1.0)], ">=", q0 - r)
        else:
            mb.add_row([(hv.qtr[t], 1.0), (hv.qtr[t - 1], -1.0)], "<=", r)
            mb.add_row([(hv.qtr[t], 1.0), (hv.qtr[t - 1], -1.0)], ">=", -r)
        rows += 2
    return rows


def build_barrage_safety(mb: ModelBuilder, plant: PlantSpec, hv: HydroVars,
                         horizon: int, m_br: float,
                         include_gate: bool = True) -> int:
    """Barrage opens only at the top of the active band.

    b*Qmin <= qbr <= b*M, and (when ``include_gate``)
    b <= 1 - (sum Zhi_i b_i - z)/max_i Zhi_i.
    """
    zmax = plant.curve.max_level()
    if include_gate and zmax == 0:
        raise ValueError(f"{plant.plant_id}: curve max level is 0, "
                         "barrage gate is ill-defined")
    segs = plant.curve.segments
    rows = 0
    for t in range(horizon):
        mb.add_row([(hv.qbr[t], 1.0), (hv.bbr[t], -plant.q_barrage_min)], ">=", 0.0)
        mb.add_row([(hv.qbr[t], 1.0), (hv.bbr[t], -m_br)], "<=", 0.0)
        rows += 2
        if include_gate:
            coefs = [(hv.bbr[t], 1.0), (hv.z[t + 1], -1.0 / zmax)]
            coefs += [(hv.boc[t][i], segs[i][2] / zmax) for i in range(len(segs))]
            mb.add_row(coefs, "<=", 1.0)
            rows += 1
    return rows


def build_power_envelope(mb: ModelBuilder, plant: PlantSpec, hv: HydroVars,
                         horizon: int) -> int:
    """Head link h = z - Ztlr and the four-plane envelope of C*q*h."""
    c = plant.power_coef
    ql, qu = plant.q_turbine_min, plant.q_turbine_max
    hl, hu = plant.head_min, plant.head_max
    rows = 0
    for t in range(horizon):
        mb.add_row([(hv.h[t], 1.0), (hv.z[t + 1], -1.0)], "==",
                   -plant.tailrace_level)
        p, q, h = hv.p[t], hv.qtr[t], hv.h[t]
        mb.add_row([(p, 1.0), (h, -c * ql), (q, -c * hl)], ">=", -c * ql * hl)
        mb.add_row([(p, 1.0), (h, -c * qu), (q, -c * hu)], ">=", -c * qu * hu)
        mb.add_row([(p, 1.0), (h, -c * ql), (q, -c * hu)], "<=", -c * ql * hu)
        mb.add_row([(p, 1.0), (h, -c * qu), (q, -c * hl)], "<=", -c * qu * hl)
        rows += 5
    return rows


def eval_bilinear_power(plant: PlantSpec, q_turbine: float, head: float) -> float:
    """Exact (nonlinear) power in MW; the oracle the envelope approximates."""
    if q_turbine < 0 or head < 0:
        raise ValueError("negative flow or head")
    return plant.power_coef * q_turbine * head


def envelope_error_report(plant: PlantSpec, grid: int = 21) -> dict:
    """Measured envelope-vs-bilinear deviation on a (q, h) grid.

    Reports the worst one-sided gaps and where they occur; the analytic
    center gap is C (Qmax-Qmin)(Hmax-Hmin)/4.
    """
    c = plant.power_coef
    ql, qu = plant.q_turbine_min, plant.q_turbine_max
    hl, hu = plant.head_min, plant.head_max
    qs = np.linspace(ql, qu, grid)
    hs = np.linspace(hl, hu, grid)
    worst_hi = worst_lo = 0.0
    arg_hi = arg_lo = (ql, hl)
    for q in qs:
        for h in hs:
            true = c * q * h
            lo = max(c * (ql * h + hl * q - ql * hl),
                     c * (qu * h + hu * q - qu * hu))
            hi = min(c * (ql * h + hu * q - ql * hu),
                     c * (qu * h + hl * q - qu * hl))
            if hi - true > worst_hi:
                worst_hi, arg_hi = hi - true, (q, h)
            if true - lo > worst_lo:
                worst_lo, arg_lo = true - lo, (q, h)
    return {
        "max_over_true": worst_hi,
        "max_under_true": worst_lo,
        "argmax_over": arg_hi,
        "argmax_under": arg_lo,
        "center_gap_analytic": c * (qu - ql) * (hu - hl) / 4.0,
        "capacity_mw": plant.capacity_mw,
    }


def add_plant_block(mb: ModelBuilder, cascade: CascadeData, n: int, w: int,
                    q_external: Sequence[float],
                    upstream_qtr: Optional[Sequence[int]] = None,
                    upstream_qbr: Optional[Sequence[int]] = None,
                    history_qtr: Optional[Sequence[float]] = None,
                    history_qbr: Optional[Sequence[float]] = None,
                    max_external_inflow: float = 0.0,
                    surface: Optional[Sequence[float]] = None,
                    initial_discharge: Optional[float] = None,
                    include_barrage_gate: bool = True) -> HydroVars:
    """Allocate and constrain one full (plant, scenario) block.

    ``upstream_qtr``/``upstream_qbr`` are the column ids the inflow should
    reference — the true upstream columns in the monolith, local copies in
    a decomposed subproblem, or None for the head plant.
    """
    plant = cascade.plants[n]
    topo = cascade.topology
    T = topo.horizon
    m_br = plant.m_br(max_external_inflow)
    if initial_discharge is None:
        initial_discharge = cascade.boundary_of(plant.plant_id).get("q0")
    hv = allocate_hydro_vars(mb, plant, n, w, T, m_br)
    if n == 0 or upstream_qtr is None:
        build_inflow_links(hv, T, q_external)
    else:
        up_boundary = cascade.boundary_of(cascade.plants[n - 1].plant_id)
        if history_qtr is None:
            history_qtr = up_boundary.get("qtr")
        if history_qbr is None:
            history_qbr = up_boundary.get("qbr")
        d_br, d_tr = topo.delay_steps(n - 1)
        build_inflow_links(hv, T, q_external, upstream_qtr, upstream_qbr,
                           d_br, d_tr, history_qtr, history_qbr)
    build_forebay_dynamics(mb, plant, hv, T, topo.delta_t_s, surface)
    build_operational_curve(mb, plant, hv, T)
    build_discharge_limits(mb, plant, hv, T, initial_discharge)
    build_barrage_safety(mb, plant, hv, T, m_br, include_barrage_gate)
    build_power_envelope(mb, plant, hv, T)
    return hv


def plant_block_row_count(plant: PlantSpec, horizon: int,
                          include_barrage_gate: bool = True) -> int:
    """Rows one block emits; kept next to the builders so it can't drift."""
    T = horizon
    gate = 3 if include_barrage_gate else 2
    return (T + 2) + T * (2 * plant.curve.nseg + 3) + 2 * T + gate * T + 5 * T


def check_curve_coverage(cascade: CascadeData, q_external: np.ndarray) -> list[str]:
    """Pre-solve diagnostic: inflows each curve can never bracket.

    ``q_external`` has shape (n_plants, n_scenarios, horizon).  Head-plant
    violations are hard (its inflow is exogenous); downstream ones are
    reported when even zero upstream discharge overruns the last segment.
    """
    problems = []
    for n, plant in enumerate(cascade.plants):
        first_bp = plant.curve.breakpoints[0]
        m_oc = plant.m_oc()
        ext = q_external[n]
        if n == 0:
            bad_lo = np.argwhere(ext < first_bp)
            for w, t in bad_lo:
                problems.append(
                    f"plant {plant.plant_id} (n={n}, w={w}, t={t}): external "
                    f"inflow {ext[w, t]:.3f} below first breakpoint {first_bp}")
            bad_hi = np.argwhere(ext >= m_oc)
            for w, t in bad_hi:
                problems.append(
                    f"plant {plant.plant_id} (n={n}, w={w}, t={t}): external "
                    f"inflow {ext[w, t]:.3f} at or above big-M {m_oc}")
        else:
            bad_hi = np.argwhere(ext >= m_oc)
            for w, t in bad_hi:
                problems.append(
                    f"plant {plant.plant_id} (n={n}, w={w}, t={t}): external "
                    f"inflow alone {ext[w, t]:.3f} overruns big-M {m_oc}")
    return problems
