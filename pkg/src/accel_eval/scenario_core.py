"""Longitudinal kinematics, outcome classification and injury severity."""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Union

import numpy as np

# closing speeds below this are treated as "not closing" in TTC denominators
TTC_EPS = 1e-9


class InvalidStateError(ValueError):
    pass


@dataclass(frozen=True)
class VehicleState:
    position: float
    speed: float
    accel: float = 0.0

    def __post_init__(self):
        if not (math.isfinite(self.position) and math.isfinite(self.speed) and math.isfinite(self.accel)):
            raise InvalidStateError(f"non-finite vehicle state {self!r}")
        if self.speed < 0:
            raise InvalidStateError(f"negative speed {self.speed}")


@dataclass(frozen=True)
class SafetyThresholds:
    conflict_ttc: float = 1.5
    vehicle_length: float = 5.0
    crash_gap: float = 0.0

    def __post_init__(self):
        if self.conflict_ttc <= 0 or self.vehicle_length <= 0:
            raise ValueError("conflict_ttc and vehicle_length must be positive")


@dataclass(frozen=True)
class InjuryCurve:
    """Logistic probability of a moderate-or-worse injury as a function of delta-v."""

    midpoint_delta_v: float = 12.0
    slope: float = 0.4

    def __post_init__(self):
        if self.slope <= 0:
            raise ValueError("injury curve slope must be positive")


@dataclass(frozen=True)
class Safe:
    min_ttc: float
    min_gap: float
    name = "safe"


@dataclass(frozen=True)
class Conflict:
    min_ttc: float
    min_gap: float
    name = "conflict"


@dataclass(frozen=True)
class Crash:
    delta_v: float
    time_of_impact: float
    name = "crash"

    def __post_init__(self):
        if self.delta_v < 0:
            raise ValueError("delta_v must be nonnegative")


OutcomeEvent = Union[Safe, Conflict, Crash]


@dataclass(frozen=True)
class Trajectory:
    """Sampled two-vehicle trajectory; ``ego`` and ``lead`` are parallel sequences."""

    dt: float
    ego: tuple[VehicleState, ...]
    lead: tuple[VehicleState, ...]
    vehicle_length: float = 5.0
    gap: np.ndarray = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        if self.dt <= 0:
            raise ValueError("dt must be positive")
        if len(self.ego) < 1 or len(self.ego) != len(self.lead):
            raise ValueError("trajectory needs >= 1 sample and matching ego/lead lengths")
        gap = np.array([l.position - e.position - self.vehicle_length for e, l in zip(self.ego, self.lead)])
        object.__setattr__(self, "gap", gap)

    def __len__(self):
        return len(self.ego)

    @property
    def times(self) -> np.ndarray:
        return np.arange(len(self)) * self.dt

    def arrays(self) -> dict[str, np.ndarray]:
        return {
            "ego_pos": np.array([s.position for s in self.ego]),
            "ego_v": np.array([s.speed for s in self.ego]),
            "ego_a": np.array([s.accel for s in self.ego]),
            "lead_pos": np.array([s.position for s in self.lead]),
            "lead_v": np.array([s.speed for s in self.lead]),
            "lead_a": np.array([s.accel for s in self.lead]),
        }


def _advance(state: VehicleState, accel: float, dt: float) -> VehicleState:
    v = state.speed + accel * dt
    if v < 0.0:
        v = 0.0
        if accel < 0:
            accel = 0.0
    return VehicleState(state.position + v * dt, v, accel)


def step_longitudinal(
    ego: VehicleState, lead: VehicleState, ego_accel_cmd: float, lead_accel: float, dt: float
) -> tuple[VehicleState, VehicleState]:
    """One semi-implicit Euler step for both vehicles (speed first, then position)."""
    if not (math.isfinite(ego_accel_cmd) and math.isfinite(lead_accel) and math.isfinite(dt)):
        raise InvalidStateError("non-finite acceleration or timestep")
    if dt <= 0:
        raise InvalidStateError("dt must be positive")
    return _advance(ego, ego_accel_cmd, dt), _advance(lead, lead_accel, dt)


def time_to_collision(gap, ego_speed, lead_speed):
    """TTC where closing, ``inf`` elsewhere. Works on scalars and arrays."""
    closing = np.subtract(ego_speed, lead_speed)
    with np.errstate(divide="ignore", invalid="ignore"):
        ttc = np.where(closing > 0, np.divide(gap, np.maximum(closing, TTC_EPS)), np.inf)
    return ttc if np.ndim(ttc) else float(ttc)


def detect_outcome(traj: Trajectory, thresholds: SafetyThresholds = SafetyThresholds()) -> OutcomeEvent:
    a = traj.arrays()
    gap = traj.gap
    hit = np.flatnonzero(gap <= thresholds.crash_gap)
    if hit.size:
        k = int(hit[0])
        return Crash(max(0.0, float(a["ego_v"][k] - a["lead_v"][k])), k * traj.dt)
    ttc = time_to_collision(gap, a["ego_v"], a["lead_v"])
    min_ttc = float(np.min(ttc))
    min_gap = float(np.min(gap))
    if min_ttc <= thresholds.conflict_ttc:
        return Conflict(min_ttc, min_gap)
    return Safe(min_ttc, min_gap)


def injury_probability(delta_v, curve: InjuryCurve = InjuryCurve()):
    """P(moderate-to-fatal injury | delta_v); vectorized over ``delta_v``."""
    dv = np.asarray(delta_v, dtype=float)
    if np.any(dv < 0) or np.any(np.isnan(dv)):
        raise ValueError("delta_v must be nonnegative")
    z = -curve.slope * (dv - curve.midpoint_delta_v)
    # exp overflow for tiny delta_v is harmless: 1/(1+inf) = 0
    with np.errstate(over="ignore"):
        p = 1.0 / (1.0 + np.exp(z))
    return p if p.ndim else float(p)
