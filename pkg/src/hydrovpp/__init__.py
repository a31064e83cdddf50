"""Day-ahead bidding for a cascaded-hydro + wind/solar virtual power plant.

Centralized stochastic MILP plus a consensus-ADMM distributed solver that
maintains certified lower/upper bounds on the global optimum.
"""

from .hydro import (CascadeData, CascadeTopology, OperationalCurve, PlantSpec,
                    eval_bilinear_power)
from .market import BidCurve, ScenarioSet, extract_bid_curves, settle_ex_post
from .model import (ModelBuilder, ProblemSpec, SolveOptions, SolveResult,
                    fix_variables, relax_integrality, solve)

__all__ = [
    "CascadeData", "CascadeTopology", "OperationalCurve", "PlantSpec",
    "eval_bilinear_power", "BidCurve", "ScenarioSet", "extract_bid_curves",
    "settle_ex_post", "ModelBuilder", "ProblemSpec", "SolveOptions",
    "SolveResult", "fix_variables", "relax_integrality", "solve",
]

__version__ = "0.1.0"
