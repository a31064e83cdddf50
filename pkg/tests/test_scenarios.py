import numpy as np
import pytest

from hydrovpp import presets
from hydrovpp import scenarios as sg
from hydrovpp.hydro import OperationalCurve
from hydrovpp.model import SolveOptions

from .conftest import make_scenarios


@pytest.fixture(scope="module")
def feb_stats():
    return sg.UncertaintyStats.for_month("february")


def test_stats_table_values(feb_stats):
    assert feb_stats.price_da == (51.1, 12.4)
    assert feb_stats.price_up == (58.1, 13.9)
    assert feb_stats.price_down == (49.1, 12.8)
    assert feb_stats.inflow == (1367.8, 456.1)
    march = sg.UncertaintyStats.for_month("march")
    assert march.inflow == (1932.2, 549.3)


def test_stats_ordering_enforced():
    with pytest.raises(ValueError):
        sg.UncertaintyStats(price_da=(50.0, 1.0), price_up=(45.0, 1.0),
                            price_down=(40.0, 1.0), inflow=(100.0, 10.0),
                            solar=(5.0, 5.0), wind=(50.0, 30.0))


def test_price_calibration_2000_draws(feb_stats):
    cascade = presets.twelve_plant_cascade(horizon=24, nseg=6)
    sc = sg.generate_synthetic(feb_stats.with_inflow_mean(1400.0), cascade,
                               2000, seed=123)
    mean = float(sc.price_da.mean())
    assert abs(mean - 51.1) / 51.1 <= 0.10


def test_solar_zero_outside_daylight(feb_stats):
    cascade = presets.desk_cascade(2, horizon=24)
    sc = make_scenarios(cascade, 50, seed=9)
    shape = presets.SOLAR_SHAPE_24
    night = shape == 0.0
    assert np.all(sc.solar[:, night] == 0.0)


def test_wind_capped_at_installed(feb_stats):
    cascade = presets.desk_cascade(2, horizon=24)
    sc = make_scenarios(cascade, 200, seed=10)
    assert float(sc.wind.max()) <= 278.4 + 1e-9
    assert float(sc.wind.min()) >= 0.0


def test_seeded_determinism(feb_stats):
    cascade = presets.desk_cascade(2, horizon=24)
    a = make_scenarios(cascade, 10, seed=77)
    b = make_scenarios(cascade, 10, seed=77)
    assert np.array_equal(a.price_da, b.price_da)
    assert np.array_equal(a.wind, b.wind)
    for pid in a.inflow:
        assert np.array_equal(a.inflow[pid], b.inflow[pid])


def test_reduction_basics(feb_stats):
    cascade = presets.desk_cascade(2, horizon=12)
    full = make_scenarios(cascade, 20, seed=3, horizon=12)
    sub = sg.reduce_scenarios(full, 5, seed=1)
    assert sub.n_scenarios == 5
    assert sub.probabilities.sum() == pytest.approx(1.0)
    assert np.all(sub.probabilities == 0.2)
    same = sg.reduce_scenarios(full, 20, seed=4)
    assert same.n_scenarios == 20
    assert np.array_equal(np.sort(same.price_da, axis=0),
                          np.sort(full.price_da, axis=0))
    with pytest.raises(ValueError):
        sg.reduce_scenarios(full, 0)
    with pytest.raises(ValueError):
        sg.reduce_scenarios(full, 21)


def test_reduction_seeds_differ(feb_stats):
    cascade = presets.desk_cascade(2, horizon=12)
    full = make_scenarios(cascade, 30, seed=3, horizon=12)
    picks = set()
    for seed in range(100):
        sub = sg.reduce_scenarios(full, 5, seed=seed)
        picks.add(tuple(map(tuple, np.round(sub.price_da[:, :2], 6))))
    assert len(picks) > 50     # collisions are overwhelmingly unlikely


def test_reduction_unbiased(feb_stats):
    cascade = presets.desk_cascade(2, horizon=6)
    full = make_scenarios(cascade, 10, seed=3, horizon=6)
    m, rounds = 4, 1000
    counts = np.zeros(10)
    fingerprint = {round(float(full.price_da[i, 0]), 9): i for i in range(10)}
    for seed in range(rounds):
        sub = sg.reduce_scenarios(full, m, seed=seed)
        for w in range(m):
            counts[fingerprint[round(float(sub.price_da[w, 0]), 9)]] += 1
    expect = rounds * m / 10
    sigma = np.sqrt(rounds * (m / 10) * (1 - m / 10))
    assert np.all(np.abs(counts - expect) <= 3.0 * sigma)


# -- regimes -----------------------------------------------------------------

def test_regime_classification_geometry():
    z0 = 100.0
    curve = OperationalCurve((
        (0.0, z0 - 0.1, z0),       # pinched, below the wide zone: low-flow
        (100.0, z0 - 1.0, z0),     # wide: energetic
        (200.0, z0 - 1.0, z0),     # wide: energetic
        (300.0, z0 - 0.05, z0),    # pinched, above: flood
    ))
    labels = sg.regime_classify([10.0, 150.0, 250.0, 310.0, 5000.0], curve)
    assert labels == [sg.LOW_FLOW, sg.ENERGETIC, sg.ENERGETIC, sg.FLOOD,
                      sg.FLOOD]


def test_regime_above_last_breakpoint_is_flood():
    curve = OperationalCurve(((0.0, 99.0, 100.0), (100.0, 99.9, 100.0)))
    assert sg.regime_classify([1e6], curve) == [sg.FLOOD]


def test_regime_wide_band_is_energetic():
    curve = OperationalCurve(((0.0, 99.0, 100.0), (50.0, 99.95, 100.0)))
    assert sg.regime_classify([10.0], curve) == [sg.ENERGETIC]


# -- validation ----------------------------------------------------------------

def test_in_sample_error_negligible(desk2):
    cascade, _ = desk2
    train = make_scenarios(cascade, 3, seed=21, horizon=8)
    out = sg.out_of_sample_validate(train, train, cascade, "milp")
    assert out["error"] <= 1e-6 * abs(out["train_objective"])
    assert out["excluded"] == 0


def test_validation_lp_variant(desk2):
    cascade, _ = desk2
    train = make_scenarios(cascade, 3, seed=22, horizon=8)
    test = make_scenarios(cascade, 4, seed=23, horizon=8)
    out = sg.out_of_sample_validate(train, test, cascade, "lp")
    assert np.isfinite(out["error"])


def test_run_validation_rows(desk2):
    cascade, _ = desk2
    pool = make_scenarios(cascade, 8, seed=31, horizon=8)
    test = make_scenarios(cascade, 4, seed=32, horizon=8)
    rows = sg.run_validation(cascade, pool, test, sizes=(2, 4), rounds=2,
                             variants=("milp", "lp"), seed=5)
    assert len(rows) == 4
    assert {(r.size, r.variant) for r in rows} == \
        {(2, "milp"), (4, "milp"), (2, "lp"), (4, "lp")}
    assert all(np.isfinite(r.mean_error) for r in rows)


def test_bidding_mode_experiment_shape(desk2):
    cascade, _ = desk2
    stats = sg.UncertaintyStats.for_month("february").with_inflow_mean(700.0)
    days = sg.bidding_mode_experiment(cascade, stats, days=2, train_count=3,
                                      test_draws=2, seed=4)
    assert len(days) == 2
    for d in days:
        assert np.isfinite(d.curve_profit) and np.isfinite(d.fixed_profit)
        assert d.regime_profit
