"""Accelerated evaluation of automated-vehicle driving policies by importance sampling."""
from .behavior_models import ThreatModel
from .estimator import CEConfig, Estimate, StoppingRule, ce_optimize, crude_mc, importance_sampling
from .sim_engine import AEBOverlay, IDMPolicy, ScenarioSimulator, SimConfig

__all__ = [
    "AEBOverlay",
    "CEConfig",
    "Estimate",
    "IDMPolicy",
    "ScenarioSimulator",
    "SimConfig",
    "StoppingRule",
    "ThreatModel",
    "ce_optimize",
    "crude_mc",
    "importance_sampling",
]
__version__ = "0.1.0"
