"""Reference scenarios and threat models used by tests, scripts and example configs."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .behavior_models import SYNTHETIC, DiscreteEmpirical, Exponential, ThreatModel, TruncatedNormal
from .sim_engine import CRASH, SAFE, IDMPolicy, OutcomeArrays, ScenarioSimulator, SimConfig


@dataclass(frozen=True)
class ThresholdScenario:
    """Synthetic scenario: a "crash" is ``x[variable] > threshold``.

    ``min_gap`` and ``min_ttc`` are both the distance to the threshold so that
    the CE ranking has a graded score before any event is seen.
    """

    threshold: float
    column: int = 0
    scenario: str = SYNTHETIC
    policy_id: str = "threshold-oracle"
    deterministic: bool = True

    def evaluate(self, x: np.ndarray) -> OutcomeArrays:
        x = np.atleast_2d(np.asarray(x, dtype=float))[:, self.column]
        margin = self.threshold - x
        kind = np.where(x > self.threshold, CRASH, SAFE).astype(np.int8)
        zeros = np.zeros_like(x)
        return OutcomeArrays(kind, margin.copy(), margin, zeros, np.where(kind == CRASH, 0.0, np.nan), zeros)


def exponential_model(rate: float = 1.0) -> ThreatModel:
    return ThreatModel(SYNTHETIC, {"x": Exponential(rate)})


# speeds are binned as in speed-histogram data; keeps the warm-up cache small
SPEED_BINS = (20.0, 25.0, 30.0, 35.0)


def inflated_car_following() -> ThreatModel:
    """Car-following threats with braking inflated until IDM crashes on roughly 1% of episodes."""
    return ThreatModel(
        "car_following",
        {
            "v0": DiscreteEmpirical(SPEED_BINS, (0.2, 0.3, 0.3, 0.2)),
            "d": TruncatedNormal(4.5, 1.5, 0.0, 12.0),
            "tau": Exponential(0.5),
        },
    )


def inflated_simulator(policy=None, config: SimConfig | None = None) -> ScenarioSimulator:
    return ScenarioSimulator(policy or IDMPolicy(), "car_following", config or SimConfig(horizon=20.0))


def enumerable_car_following() -> ThreatModel:
    """4 x 4 x 4 all-discrete model for exact-enumeration checks."""
    return ThreatModel(
        "car_following",
        {
            "v0": DiscreteEmpirical(SPEED_BINS, (0.25, 0.25, 0.25, 0.25)),
            "d": DiscreteEmpirical((2.0, 4.0, 6.5, 8.5), (0.4, 0.3, 0.2, 0.1)),
            "tau": DiscreteEmpirical((1.0, 2.0, 3.5, 5.0), (0.3, 0.3, 0.2, 0.2)),
        },
    )


def always_crash_cut_in() -> ThreatModel:
    """Degenerate cut-in at 1 m with 10 m/s closing: no braking system can avoid contact."""
    return ThreatModel(
        "cut_in",
        {
            "R": DiscreteEmpirical((1.0,), (1.0,)),
            "closing": DiscreteEmpirical((10.0,), (1.0,)),
            "vL": DiscreteEmpirical((15.0,), (1.0,)),
        },
    )


def cut_in_model() -> ThreatModel:
    return ThreatModel(
        "cut_in",
        {
            "R": TruncatedNormal(20.0, 8.0, 0.5, 150.0),
            "closing": TruncatedNormal(2.0, 2.0, 0.0, 20.0),
            "vL": TruncatedNormal(25.0, 5.0, 0.0, 45.0),
        },
    )
