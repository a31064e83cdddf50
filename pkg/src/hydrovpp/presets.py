"""Built-in cascades and uncertainty statistics.

The synthetic generator is calibrated against published aggregate
figures for a large French run-of-river portfolio: 12 cascaded plants
totaling ~2.2 GW, 278.4 MW of wind, 60.8 MW of solar, and monthly
hourly means/stds for prices, river inflow and renewable output.
"""

from __future__ import annotations

import numpy as np

from .hydro import CascadeData, CascadeTopology, OperationalCurve, PlantSpec

WIND_CAPACITY_MW = 278.4
SOLAR_CAPACITY_MW = 60.8

# (capacity MW, rated head m) for the 12-plant synthetic chain
TWELVE_PLANT_SHAPE = (
    (80.0, 9.0), (72.0, 6.7), (160.0, 12.2), (120.0, 11.5),
    (180.0, 11.7), (192.0, 11.8), (192.0, 11.7), (275.0, 16.5),
    (349.0, 22.5), (187.0, 8.6), (186.0, 9.5), (210.0, 11.3),
)

# hourly mean (std) per month, one row per uncertainty source
MONTHLY_STATS = {
    "february": {
        "price_da": (51.1, 12.4), "price_up": (58.1, 13.9),
        "price_down": (49.1, 12.8), "inflow": (1367.8, 456.1),
        "solar": (6.2, 10.7), "wind": (91.5, 61.9),
    },
    "march": {
        "price_da": (35.4, 9.8), "price_up": (38.6, 10.7),
        "price_down": (32.3, 8.4), "inflow": (1932.2, 549.3),
        "solar": (9.6, 14.1), "wind": (84.6, 57.1),
    },
    "april": {
        "price_da": (34.7, 8.8), "price_up": (38.6, 9.7),
        "price_down": (28.5, 8.3), "inflow": (798.68, 219.0),
        "solar": (13.5, 17.4), "wind": (52.8, 29.5),
    },
}

# normalized diurnal shapes (mean 1.0 for price, peak 1.0 for solar mask)
PRICE_SHAPE_24 = np.array([
    0.82, 0.78, 0.76, 0.75, 0.78, 0.86, 1.00, 1.12, 1.18, 1.12, 1.05, 1.00,
    0.96, 0.93, 0.92, 0.95, 1.02, 1.12, 1.22, 1.25, 1.18, 1.08, 0.96, 0.89,
])
SOLAR_SHAPE_24 = np.array([
    0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.05, 0.20, 0.45, 0.70, 0.88, 0.98,
    1.00, 0.95, 0.82, 0.62, 0.38, 0.15, 0.03, 0.0, 0.0, 0.0, 0.0, 0.0,
])


def _mid_band_curve(z0: float, inflow_scale: float, nseg: int,
                    band: float = 0.5, stepped: bool = False) -> OperationalCurve:
    """Regulated-profile curve with every band anchored at the full-pool
    level z0: storage is drawdown below z0, and the width varies with the
    inflow segment (narrow when kept high at low flow, wide storage bands
    in the middle, near-zero during floods).

    Anchoring all band tops at z0 keeps two structural facts true for any
    inflow path: spilling (which requires the level at the active band
    top) is always compatible with the cyclic end-of-day level, and
    neighbouring bands overlap so the level never has to jump when the
    inflow crosses a breakpoint.  With ``stepped`` the storage widths
    differ per segment, which forces genuine segment decisions; otherwise
    they are identical, which keeps the LP relaxation tight.
    """
    if nseg < 3:
        raise ValueError("need at least 3 segments")
    bps = np.linspace(0.0, 2.4 * inflow_scale, nseg)
    segs = []
    for i, q in enumerate(bps):
        if i == 0:
            width = 0.25 * band                              # kept high
        elif i == nseg - 1:
            width = 0.15 * band                              # flood, no storage
        elif stepped:
            width = band * (1.0 + 0.18 * (i - (nseg - 1) / 2.0))
        else:
            width = band
        segs.append((float(q), z0 - width, z0))
    return OperationalCurve(tuple(segs))


def _steady_boundary(plants, inflow_scale: float, depth: int = 4) -> dict:
    """Pre-horizon discharges assuming the chain has been passing the
    nominal river flow through (barrage closed unless turbines saturate)."""
    boundary = {}
    qin = 0.0
    for p in plants:
        qin = qin + inflow_scale * p.inflow_fraction
        qtr = min(qin, p.q_turbine_max)
        qbr = max(qin - p.q_turbine_max, 0.0)
        boundary[p.plant_id] = {
            "qtr": [qtr] * depth,
            "qbr": [qbr] * depth,
            "q0": qtr,
        }
        qin = qtr + qbr
    return boundary


def desk_cascade(n_plants: int = 3, horizon: int = 24, nseg: int = 5,
                 delta_t_s: float = 3600.0, stepped_bands: bool = False,
                 inflow_scale: float = 700.0) -> CascadeData:
    """Small cascade for bench runs: capacities and heads follow the first
    plants of the 12-plant shape, curves sized to the inflow scale."""
    plants = []
    cum_share = 0.0
    for n in range(n_plants):
        cap, head = TWELVE_PLANT_SHAPE[n % len(TWELVE_PLANT_SHAPE)]
        cum_share += 1.0 if n == 0 else 0.05
        z_tlr = 100.0 + 10.0 * n
        z0 = z_tlr + head    # full pool; bands draw down from here
        band = 0.6
        q_rated = cap / (1e-6 * 1000.0 * 9.81 * 0.92 * head)
        plants.append(PlantSpec(
            plant_id=f"plant-{n + 1:02d}",
            capacity_mw=cap,
            head_min=head - band - 0.2,
            head_max=head,
            q_turbine_min=0.0,
            q_turbine_max=float(round(1.15 * q_rated)),
            ramp_q_turbine=0.35 * q_rated,
            q_barrage_min=40.0,
            efficiency=0.92,
            tailrace_level=z_tlr,
            initial_level=z0,
            surface_m2=6.0e6,
            curve=_mid_band_curve(z0, inflow_scale * cum_share, nseg,
                                  band=band, stepped=stepped_bands),
            inflow_fraction=1.0 if n == 0 else 0.05,
        ))
    topo = CascadeTopology(
        plant_ids=tuple(p.plant_id for p in plants),
        tau_barrage_s=tuple(5400.0 for _ in range(n_plants - 1)),
        tau_turbine_s=tuple(3600.0 for _ in range(n_plants - 1)),
        delta_t_s=delta_t_s,
        horizon=horizon,
    )
    return CascadeData(tuple(plants), topo,
                       boundary=_steady_boundary(plants, inflow_scale))


def twelve_plant_cascade(horizon: int = 24, nseg: int = 40,
                         delta_t_s: float = 3600.0,
                         inflow_scale: float = 1400.0) -> CascadeData:
    """Full-size synthetic cascade: 12 plants, ~2.2 GW installed."""
    plants = []
    cum_share = 0.0
    for n, (cap, head) in enumerate(TWELVE_PLANT_SHAPE):
        cum_share += 1.0 if n == 0 else 0.04
        z_tlr = 100.0 + 12.0 * n
        z0 = z_tlr + head
        band = 0.8
        q_rated = cap / (1e-6 * 1000.0 * 9.81 * 0.92 * head)
        plants.append(PlantSpec(
            plant_id=f"plant-{n + 1:02d}",
            capacity_mw=cap,
            head_min=head - band - 0.3,
            head_max=head,
            q_turbine_min=0.0,
            q_turbine_max=float(round(1.15 * q_rated)),
            ramp_q_turbine=0.3 * q_rated,
            q_barrage_min=50.0,
            efficiency=0.92,
            tailrace_level=z_tlr,
            initial_level=z0,
            surface_m2=8.0e6,
            curve=_mid_band_curve(z0, inflow_scale * cum_share, nseg,
                                  band=band),
            inflow_fraction=1.0 if n == 0 else 0.04,
        ))
    topo = CascadeTopology(
        plant_ids=tuple(p.plant_id for p in plants),
        tau_barrage_s=tuple(5400.0 for _ in range(11)),
        tau_turbine_s=tuple(3600.0 for _ in range(11)),
        delta_t_s=delta_t_s,
        horizon=horizon,
    )
    return CascadeData(tuple(plants), topo,
                       boundary=_steady_boundary(plants, inflow_scale))


def certification_cascade(n_plants: int = 3, horizon: int = 24,
                          inflow_scale: float = 700.0) -> CascadeData:
    """Bench preset for certified runs: the three storage bands share one
    width and the pinched bands sit outside the synthetic generator's
    reachable inflow range, so the LP relaxation of the bidding problem
    is essentially tight while the restriction that seeds the upper bound
    still leaves a multi-percent initial gap for the loop to close."""
    plants = []
    cum = 0.0
    for n in range(n_plants):
        cap, head = TWELVE_PLANT_SHAPE[n % len(TWELVE_PLANT_SHAPE)]
        cum += 1.0 if n == 0 else 0.05
        z_tlr = 100.0 + 10.0 * n
        z0 = z_tlr + head
        band = 0.6
        s = inflow_scale * cum
        segs = (
            (0.0, z0 - 0.15 * band, z0),
            (0.2 * s, z0 - band, z0),
            (1.3 * s, z0 - band, z0),
            (2.4 * s, z0 - band, z0),
            (3.5 * s, z0 - 0.1 * band, z0),
        )
        q_rated = cap / (1e-6 * 1000.0 * 9.81 * 0.92 * head)
        plants.append(PlantSpec(
            plant_id=f"plant-{n + 1:02d}",
            capacity_mw=cap,
            head_min=head - band - 0.2,
            head_max=head,
            q_turbine_min=0.0,
            q_turbine_max=float(round(1.15 * q_rated)),
            ramp_q_turbine=0.35 * q_rated,
            q_barrage_min=40.0,
            efficiency=0.92,
            tailrace_level=z_tlr,
            initial_level=z0,
            surface_m2=6.0e6,
            curve=OperationalCurve(segs),
            inflow_fraction=1.0 if n == 0 else 0.05,
        ))
    topo = CascadeTopology(
        plant_ids=tuple(p.plant_id for p in plants),
        tau_barrage_s=tuple(5400.0 for _ in range(n_plants - 1)),
        tau_turbine_s=tuple(3600.0 for _ in range(n_plants - 1)),
        delta_t_s=3600.0,
        horizon=horizon,
    )
    return CascadeData(tuple(plants), topo,
                       boundary=_steady_boundary(plants, inflow_scale))


def toy_cascade(n_plants: int = 1, horizon: int = 4, nseg: int = 2,
                delta_t_s: float = 3600.0) -> CascadeData:
    """Tiny cascade with genuinely distinct level bands per segment, small
    enough for exhaustive binary enumeration."""
    plants = []
    inflow_scale = 500.0
    for n in range(n_plants):
        head = 8.0
        z_tlr = 50.0 + 10.0 * n
        z0 = z_tlr + head
        bps = np.linspace(0.0, 1.6 * inflow_scale, nseg)
        widths = [1.0, 0.3, 0.8, 0.15, 0.55]
        segs = tuple((float(q), z0 - widths[i % len(widths)], z0)
                     for i, q in enumerate(bps))
        q_rated = 60.0 / (1e-6 * 1000.0 * 9.81 * 0.9 * head)
        plants.append(PlantSpec(
            plant_id=f"toy-{n + 1}",
            capacity_mw=60.0,
            head_min=head - 1.2,
            head_max=head,
            q_turbine_min=0.0,
            q_turbine_max=float(round(1.15 * q_rated)),
            ramp_q_turbine=0.5 * q_rated,
            q_barrage_min=30.0,
            efficiency=0.9,
            tailrace_level=z_tlr,
            initial_level=z0,
            surface_m2=2.0e6,
            curve=OperationalCurve(segs),
            inflow_fraction=1.0 if n == 0 else 0.1,
        ))
    topo = CascadeTopology(
        plant_ids=tuple(p.plant_id for p in plants),
        tau_barrage_s=tuple(3600.0 for _ in range(n_plants - 1)),
        tau_turbine_s=tuple(0.0 for _ in range(n_plants - 1)),
        delta_t_s=delta_t_s,
        horizon=horizon,
    )
    return CascadeData(tuple(plants), topo,
                       boundary=_steady_boundary(plants, inflow_scale))
