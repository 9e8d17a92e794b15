"""Robust social control of mean-field LQG populations with a common
adversarial drift: Riccati synthesis, convexity certificates, consistency
systems, closed-loop simulation and small-N oracles."""

from .errors import *  # noqa: F401,F403
from .model import (
    DerivedWeights,
    Horizon,
    ModelParams,
    ValidatedModel,
    derived_weights,
    dump_scenario,
    load_scenario,
    shipped_scenario,
    validate_params,
)
from .numerics import MatrixPath, TimeGrid

__version__ = "0.1.0"
