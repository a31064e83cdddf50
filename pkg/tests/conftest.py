import numpy as np
import pytest

from hydrovpp import presets
from hydrovpp import scenarios as sg
from hydrovpp.market import ScenarioSet


def make_scenarios(cascade, count, seed, month="february", inflow_mean=700.0,
                   horizon=None):
    stats = sg.UncertaintyStats.for_month(month).with_inflow_mean(inflow_mean)
    return sg.generate_synthetic(stats, cascade, count, horizon=horizon,
                                 seed=seed)


def toy_scenarios(cascade, count, seed, horizon=None):
    """Hand-scaled scenarios for the tiny enumeration cascades."""
    stats = sg.UncertaintyStats.for_month("february").with_inflow_mean(450.0)
    return sg.generate_synthetic(stats, cascade, count, horizon=horizon,
                                 seed=seed)


@pytest.fixture(scope="session")
def desk2():
    cascade = presets.desk_cascade(n_plants=2, horizon=8, nseg=4)
    return cascade, make_scenarios(cascade, 2, seed=3)


@pytest.fixture(scope="session")
def cert_preset():
    cascade = presets.certification_cascade()
    return cascade, make_scenarios(cascade, 5, seed=11)
