"""Episode simulation: ego policy (the car behind) against a lead-vehicle maneuver.

The kernel is vectorized over episodes.  Every operation in it is elementwise,
so an episode's result does not depend on which other episodes share its
batch; ``run_episode`` is the same kernel on a batch of one.
"""
from __future__ import annotations

import csv
import json
import math
import selectors
import subprocess
from dataclasses import dataclass, field
from typing import Callable, Mapping, NamedTuple, Sequence

import numpy as np

from .behavior_models import SCENARIO_SCHEMAS, ThreatModel, check_compatible
from .scenario_core import (
    TTC_EPS,
    Conflict,
    Crash,
    InjuryCurve,
    OutcomeEvent,
    Safe,
    SafetyThresholds,
    Trajectory,
    VehicleState,
    injury_probability,
)

SAFE, CONFLICT, CRASH, INVALID = 0, 1, 2, -1
MAX_STEPS = 10**6


class PolicyFaultError(RuntimeError):
    def __init__(self, policy_id: str, message: str):
        super().__init__(f"policy {policy_id!r}: {message}")
        self.policy_id = policy_id
        self.message = message

    def __reduce__(self):
        # survives the trip back from a worker process
        return type(self), (self.policy_id, self.message)


class SceneError(ValueError):
    pass


class Observation(NamedTuple):
    speed: float
    gap: float
    lead_speed: float


# ---------------------------------------------------------------- policies


class EgoPolicy:
    """Controller under test. Subclasses implement ``decide_array`` or ``decide``."""

    policy_id: str = "policy"
    deterministic = True

    def decide(self, obs: Observation) -> float:
        out = self.decide_array(np.array([obs.speed]), np.array([obs.gap]), np.array([obs.lead_speed]))
        return float(out[0])

    def decide_array(self, speed: np.ndarray, gap: np.ndarray, lead_speed: np.ndarray) -> np.ndarray:
        return np.array([self.decide(Observation(*o)) for o in zip(speed, gap, lead_speed)], dtype=float)


@dataclass(frozen=True)
class IDMPolicy(EgoPolicy):
    """Intelligent Driver Model, ``a[1 - (v/v0)^4 - (s*/s)^2]``."""

    desired_speed: float = 40.0
    time_headway: float = 1.0
    min_gap: float = 2.0
    max_accel: float = 1.0
    comfortable_decel: float = 1.5
    # ACC-style braking authority; also the output for a non-positive gap
    decel_limit: float = 5.0

    def __post_init__(self):
        for name in ("desired_speed", "time_headway", "min_gap", "max_accel", "comfortable_decel", "decel_limit"):
            if not getattr(self, name) > 0:
                raise ValueError(f"IDM parameter {name} must be positive")

    @property
    def policy_id(self) -> str:
        return (
            f"idm(v0={self.desired_speed!r},T={self.time_headway!r},s0={self.min_gap!r},"
            f"a={self.max_accel!r},b={self.comfortable_decel!r},bmax={self.decel_limit!r})"
        )

    def decide_array(self, speed, gap, lead_speed):
        v = np.asarray(speed, dtype=float)
        s = np.asarray(gap, dtype=float)
        dv = v - np.asarray(lead_speed, dtype=float)
        s_star = self.min_gap + v * self.time_headway + v * dv / (2.0 * math.sqrt(self.max_accel * self.comfortable_decel))
        r = v / self.desired_speed
        r2 = r * r
        with np.errstate(divide="ignore", invalid="ignore"):
            q = s_star / s
            acc = self.max_accel * (1.0 - r2 * r2 - q * q)
        return np.where(s > 0, np.maximum(acc, -self.decel_limit), -self.decel_limit)


def idm_policy(params: Mapping[str, float] | None = None) -> IDMPolicy:
    return IDMPolicy(**(params or {}))


@dataclass(frozen=True)
class AEBOverlay(EgoPolicy):
    """Emergency-braking layer: ``min(base, -brake)`` once closing TTC drops to ``trigger_ttc``."""

    base: EgoPolicy
    trigger_ttc: float = 1.5
    brake: float = 8.0

    def __post_init__(self):
        if not (self.trigger_ttc > 0 and self.brake > 0):
            raise ValueError("AEB trigger_ttc and brake must be positive")

    @property
    def policy_id(self) -> str:
        return f"{self.base.policy_id}+aeb(ttc={self.trigger_ttc!r},brake={self.brake!r})"

    @property
    def deterministic(self):
        return self.base.deterministic

    def decide_array(self, speed, gap, lead_speed):
        base = self.base.decide_array(speed, gap, lead_speed)
        closing = np.asarray(speed, dtype=float) - np.asarray(lead_speed, dtype=float)
        with np.errstate(divide="ignore", invalid="ignore"):
            ttc = np.asarray(gap, dtype=float) / np.maximum(closing, TTC_EPS)
        fire = (closing > 0) & (ttc <= self.trigger_ttc)
        return np.where(fire, np.minimum(base, -self.brake), base)


def aeb_overlay(base: EgoPolicy, trigger_ttc: float, brake: float) -> AEBOverlay:
    return AEBOverlay(base, trigger_ttc, brake)


class ExternalPolicy(EgoPolicy):
    """Black-box controller behind a line-delimited JSON stdio protocol.

    Each step sends ``{"v":1,"obs":{"speed":..,"gap":..,"lead_speed":..}}`` and
    expects ``{"accel": ..}`` back within ``timeout`` seconds.
    """

    deterministic = False

    def __init__(self, command: Sequence[str], policy_id: str = "external", timeout: float = 0.1):
        self.command = list(command)
        self.policy_id = policy_id
        self.timeout = timeout
        self._proc = None
        self._sel = None

    def __getstate__(self):
        return {"command": self.command, "policy_id": self.policy_id, "timeout": self.timeout}

    def __setstate__(self, state):
        self.__init__(state["command"], state["policy_id"], state["timeout"])

    def _start(self):
        try:
            self._proc = subprocess.Popen(
                self.command, stdin=subprocess.PIPE, stdout=subprocess.PIPE, text=True, bufsize=1
            )
        except OSError as exc:
            raise PolicyFaultError(self.policy_id, f"cannot start plug-in: {exc}") from None
        self._sel = selectors.DefaultSelector()
        self._sel.register(self._proc.stdout, selectors.EVENT_READ)

    def close(self):
        if self._proc is not None:
            self._proc.kill()
            self._proc.wait()
            self._proc = None

    def decide(self, obs: Observation) -> float:
        if self._proc is None or self._proc.poll() is not None:
            self._start()
        msg = {"v": 1, "obs": {"speed": float(obs.speed), "gap": float(obs.gap), "lead_speed": float(obs.lead_speed)}}
        try:
            self._proc.stdin.write(json.dumps(msg) + "\n")
            self._proc.stdin.flush()
        except (BrokenPipeError, OSError):
            self.close()
            raise PolicyFaultError(self.policy_id, "plug-in closed its input") from None
        if not self._sel.select(self.timeout):
            self.close()
            raise PolicyFaultError(self.policy_id, f"no response within {self.timeout} s")
        line = self._proc.stdout.readline()
        try:
            accel = float(json.loads(line)["accel"])
        except (ValueError, KeyError, TypeError):
            self.close()
            raise PolicyFaultError(self.policy_id, f"malformed response {line!r}") from None
        return accel


# ---------------------------------------------------------------- configuration & records


@dataclass(frozen=True)
class SimConfig:
    dt: float = 0.1
    horizon: float = 30.0
    ego_speed: float = 25.0
    initial_gap: float | None = None
    max_brake: float = 8.0
    max_accel: float = 3.0
    thresholds: SafetyThresholds = SafetyThresholds()
    injury: InjuryCurve = InjuryCurve()
    warmup: float = 60.0
    brake_onset: float = 1.0

    def __post_init__(self):
        if not (self.dt > 0 and self.horizon > 0 and self.max_brake > 0 and self.max_accel > 0):
            raise ValueError("dt, horizon, max_brake and max_accel must be positive")
        if self.horizon / self.dt > MAX_STEPS or self.warmup / self.dt > MAX_STEPS:
            raise ValueError(f"horizon/dt exceeds {MAX_STEPS} steps")

    @property
    def n_steps(self) -> int:
        return int(round(self.horizon / self.dt))

    def to_dict(self) -> dict:
        return {
            "dt": self.dt,
            "horizon": self.horizon,
            "ego_speed": self.ego_speed,
            "initial_gap": self.initial_gap,
            "max_brake": self.max_brake,
            "max_accel": self.max_accel,
            "thresholds": vars(self.thresholds),
            "injury": vars(self.injury),
            "warmup": self.warmup,
            "brake_onset": self.brake_onset,
        }

    @classmethod
    def from_dict(cls, data: Mapping) -> "SimConfig":
        data = dict(data)
        if "thresholds" in data:
            data["thresholds"] = SafetyThresholds(**data["thresholds"])
        if "injury" in data:
            data["injury"] = InjuryCurve(**data["injury"])
        return cls(**data)


@dataclass(frozen=True)
class EpisodeParams:
    scenario: str
    values: Mapping[str, float]
    natural_density: float
    proposal_density: float

    @property
    def weight(self) -> float:
        return self.natural_density / self.proposal_density


@dataclass(frozen=True)
class EpisodeResult:
    outcome: OutcomeEvent
    injury_prob: float
    weight: float
    params: EpisodeParams
    episode_index: int = 0
    trajectory: Trajectory | None = field(default=None, compare=False, repr=False)


@dataclass
class OutcomeArrays:
    """Per-episode outcomes of a batch; ``kind`` is SAFE/CONFLICT/CRASH or INVALID."""

    kind: np.ndarray
    min_ttc: np.ndarray
    min_gap: np.ndarray
    delta_v: np.ndarray
    time_of_impact: np.ndarray
    injury: np.ndarray

    @property
    def valid(self) -> np.ndarray:
        return self.kind != INVALID

    def event(self, metric: str) -> np.ndarray:
        if metric == "conflict":
            return self.kind >= CONFLICT
        return self.kind == CRASH

    def metric_values(self, metric: str) -> np.ndarray:
        if metric == "crash":
            return (self.kind == CRASH).astype(float)
        if metric == "conflict":
            return (self.kind >= CONFLICT).astype(float)
        if metric == "injury":
            return np.where(self.kind == CRASH, self.injury, 0.0)
        raise ValueError(f"unknown metric {metric!r}")

    @classmethod
    def concat(cls, parts: Sequence["OutcomeArrays"]) -> "OutcomeArrays":
        return cls(*(np.concatenate([getattr(p, f) for p in parts]) for f in cls.__dataclass_fields__))

    def take(self, idx) -> "OutcomeArrays":
        return OutcomeArrays(*(getattr(self, f)[idx] for f in self.__dataclass_fields__))


# ---------------------------------------------------------------- kernel


def _advance(pos, v, a, dt):
    nv = v + a * dt
    stopped = nv < 0.0
    nv = np.where(stopped, 0.0, nv)
    a = np.where(stopped & (a < 0), 0.0, a)
    return pos + nv * dt, nv, a


def _policy_accel(policy: EgoPolicy, v, gap, lead_v, config: SimConfig):
    cmd = np.asarray(policy.decide_array(v, gap, lead_v), dtype=float)
    if not np.all(np.isfinite(cmd)):
        raise PolicyFaultError(policy.policy_id, "non-finite acceleration command")
    return np.clip(cmd, -config.max_brake, config.max_accel)


_EQUILIBRIUM_CACHE: dict[tuple, float] = {}


def equilibrium_gap(policy: EgoPolicy, v0, config: SimConfig) -> np.ndarray:
    """Gap the policy settles at behind a lead cruising at ``v0`` (warm-up run, cached per v0)."""
    v0 = np.atleast_1d(np.asarray(v0, dtype=float))
    uniq, inverse = np.unique(v0, return_inverse=True)
    cfg_key = (policy.policy_id, config.dt, config.warmup, config.max_brake, config.max_accel,
               config.thresholds.vehicle_length)
    cacheable = policy.deterministic
    out = np.empty(uniq.size)
    todo = []
    for i, v in enumerate(uniq):
        hit = _EQUILIBRIUM_CACHE.get(cfg_key + (float(v),)) if cacheable else None
        if hit is None:
            todo.append(i)
        else:
            out[i] = hit
    if todo:
        vs = uniq[todo]
        ego_pos = np.zeros(vs.size)
        ego_v = vs.copy()
        lead_pos = 2.0 + 2.0 * vs + config.thresholds.vehicle_length
        length = config.thresholds.vehicle_length
        for _ in range(int(round(config.warmup / config.dt))):
            gap = lead_pos - ego_pos - length
            a = _policy_accel(policy, ego_v, gap, vs, config)
            ego_pos, ego_v, _ = _advance(ego_pos, ego_v, a, config.dt)
            lead_pos = lead_pos + vs * config.dt
        gaps = lead_pos - ego_pos - length
        out[todo] = gaps
        if cacheable:
            for v, g in zip(vs, gaps):
                _EQUILIBRIUM_CACHE[cfg_key + (float(v),)] = float(g)
    return out[inverse]


def _brake_schedule(d, tau, config: SimConfig) -> Callable[[int], np.ndarray]:
    """Lead accel at step k: -d scaled by the step's overlap with [onset, onset + tau]."""
    dt = config.dt
    start = round(config.brake_onset / dt, 9)
    end = np.round((config.brake_onset + tau) / dt, 9)

    def accel(k: int) -> np.ndarray:
        frac = np.clip(np.minimum(k + 1.0, end) - max(k, start), 0.0, 1.0)
        return -d * frac

    return accel


def _scene_arrays(scenario: str, x: np.ndarray, config: SimConfig, policy: EgoPolicy):
    """Initial states and lead schedule for an ``(n, 3)`` block of threat values."""
    length = config.thresholds.vehicle_length
    n = x.shape[0]
    if scenario == "car_following":
        v0, d, tau = x[:, 0], x[:, 1], x[:, 2]
        valid = (v0 >= 0) & (d >= 0) & (tau >= 0) & np.isfinite(x).all(axis=1)
        v0s = np.where(valid, v0, 0.0)
        if config.initial_gap is None:
            gap0 = equilibrium_gap(policy, v0s, config)
        else:
            gap0 = np.full(n, float(config.initial_gap))
        valid &= gap0 > config.thresholds.crash_gap
        ego = (np.zeros(n), v0s.copy())
        lead = (gap0 + length, v0s.copy())
        schedule = _brake_schedule(np.where(valid, d, 0.0), np.where(valid, tau, 0.0), config)
    elif scenario == "cut_in":
        r, closing, vl = x[:, 0], x[:, 1], x[:, 2]
        ego_v = vl + closing
        valid = (r > 0) & (vl >= 0) & (ego_v >= 0) & np.isfinite(x).all(axis=1)
        ego = (np.zeros(n), np.where(valid, ego_v, 0.0))
        lead = (np.where(valid, r, 1.0) + length, np.where(valid, vl, 0.0))
        zeros = np.zeros(n)
        schedule = lambda k: zeros  # noqa: E731
    else:
        raise ValueError(f"no scene builder for scenario {scenario!r}")
    return ego, lead, schedule, valid


def _simulate(policy, ego, lead, schedule, valid, config: SimConfig, record=False):
    th = config.thresholds
    dt = config.dt
    ego_pos, ego_v = ego
    lead_pos, lead_v = lead
    n = ego_v.size
    ego_a = np.zeros(n)
    lead_a = np.zeros(n)
    alive = valid.copy()
    crashed = np.zeros(n, dtype=bool)
    min_ttc = np.full(n, np.inf)
    min_gap = np.full(n, np.inf)
    delta_v = np.zeros(n)
    t_hit = np.full(n, np.nan)
    rows = []
    steps = config.n_steps
    for k in range(steps + 1):
        gap = lead_pos - ego_pos - th.vehicle_length
        closing = ego_v - lead_v
        with np.errstate(divide="ignore", invalid="ignore"):
            ttc = np.where(closing > 0, gap / np.maximum(closing, TTC_EPS), np.inf)
        if record:
            rows.append((k * dt, ego_pos.copy(), ego_v.copy(), ego_a.copy(), lead_pos.copy(), lead_v.copy(),
                         lead_a.copy(), gap.copy(), ttc.copy()))
        hit = alive & (gap <= th.crash_gap)
        min_gap = np.where(alive, np.minimum(min_gap, gap), min_gap)
        if hit.any():
            crashed |= hit
            delta_v = np.where(hit, np.maximum(0.0, closing), delta_v)
            t_hit = np.where(hit, k * dt, t_hit)
            alive &= ~hit
        min_ttc = np.where(alive, np.minimum(min_ttc, ttc), min_ttc)
        if k == steps or not alive.any():
            break
        cmd = np.zeros(n)
        cmd[alive] = _policy_accel(policy, ego_v[alive], gap[alive], lead_v[alive], config)
        ego_pos, ego_v, ego_a = _advance(ego_pos, ego_v, cmd, dt)
        lead_pos, lead_v, lead_a = _advance(lead_pos, lead_v, schedule(k), dt)

    kind = np.where(crashed, CRASH, np.where(min_ttc <= th.conflict_ttc, CONFLICT, SAFE))
    kind = np.where(valid, kind, INVALID).astype(np.int8)
    injury = np.zeros(n)
    if crashed.any():
        injury[crashed] = injury_probability(delta_v[crashed], config.injury)
    out = OutcomeArrays(kind, min_ttc, min_gap, delta_v, t_hit, injury)
    return (out, rows) if record else out


@dataclass(frozen=True)
class ScenarioSimulator:
    """Batch evaluator binding a policy, a scenario and a simulation config."""

    policy: EgoPolicy
    scenario: str = "car_following"
    config: SimConfig = SimConfig()

    def __post_init__(self):
        if self.scenario not in SCENARIO_SCHEMAS:
            raise ValueError(f"unknown scenario {self.scenario!r}")

    @property
    def policy_id(self) -> str:
        return self.policy.policy_id

    @property
    def deterministic(self) -> bool:
        return self.policy.deterministic

    def evaluate(self, x: np.ndarray) -> OutcomeArrays:
        x = np.atleast_2d(np.asarray(x, dtype=float))
        ego, lead, schedule, valid = _scene_arrays(self.scenario, x, self.config, self.policy)
        return _simulate(self.policy, ego, lead, schedule, valid, self.config)


# ---------------------------------------------------------------- single-episode API


def sample_episode_params(model: ThreatModel, proposal: ThreatModel | None, rng: np.random.Generator) -> EpisodeParams:
    """Draw one threat vector from ``proposal`` (default: ``model``) and record both densities."""
    proposal = model if proposal is None else proposal
    check_compatible(model, proposal)
    x = proposal.ppf(rng.random(len(model.names)).reshape(1, -1))
    return EpisodeParams(
        model.scenario,
        dict(zip(model.names, (float(v) for v in x[0]))),
        float(model.joint_pdf(x)[0]),
        float(proposal.joint_pdf(x)[0]),
    )


def _values_row(params: EpisodeParams) -> np.ndarray:
    names = SCENARIO_SCHEMAS[params.scenario]
    try:
        return np.array([[params.values[n] for n in names]], dtype=float)
    except KeyError as exc:
        raise ValueError(f"episode params missing variable {exc}") from None


def build_initial_scene(scenario: str, params: EpisodeParams, config: SimConfig, policy: EgoPolicy | None = None):
    """Initial ego/lead states and the lead's time-indexed acceleration schedule."""
    if scenario != params.scenario:
        raise ValueError("params do not match scenario")
    if scenario == "car_following" and config.initial_gap is None and policy is None:
        raise ValueError("car-following equilibrium start needs the policy")
    ego, lead, schedule, valid = _scene_arrays(scenario, _values_row(params), config, policy)
    if not valid[0]:
        raise SceneError(f"physically inconsistent episode parameters {dict(params.values)}")
    ego_state = VehicleState(float(ego[0][0]), float(ego[1][0]))
    lead_state = VehicleState(float(lead[0][0]), float(lead[1][0]))

    def lead_accel(t: float) -> float:
        return float(schedule(int(round(t / config.dt)))[0])

    return ego_state, lead_state, lead_accel


def run_episode(
    policy: EgoPolicy, params: EpisodeParams, config: SimConfig = SimConfig(), episode_index: int = 0,
    record: bool = False,
) -> EpisodeResult:
    ego, lead, schedule, valid = _scene_arrays(params.scenario, _values_row(params), config, policy)
    if not valid[0]:
        raise SceneError(f"physically inconsistent episode parameters {dict(params.values)}")
    res = _simulate(policy, ego, lead, schedule, valid, config, record=record)
    out, rows = res if record else (res, None)
    if out.kind[0] == CRASH:
        outcome = Crash(float(out.delta_v[0]), float(out.time_of_impact[0]))
    elif out.kind[0] == CONFLICT:
        outcome = Conflict(float(out.min_ttc[0]), float(out.min_gap[0]))
    else:
        outcome = Safe(float(out.min_ttc[0]), float(out.min_gap[0]))
    traj = None
    if record:
        traj = Trajectory(
            config.dt,
            tuple(VehicleState(float(r[1][0]), float(r[2][0]), float(r[3][0])) for r in rows),
            tuple(VehicleState(float(r[4][0]), float(r[5][0]), float(r[6][0])) for r in rows),
            config.thresholds.vehicle_length,
        )
    return EpisodeResult(outcome, float(out.injury[0]), params.weight, params, episode_index, traj)


TRAJECTORY_HEADER = ["t", "ego_pos", "ego_v", "ego_a", "lead_pos", "lead_v", "lead_a", "gap", "ttc"]


def write_trajectory_csv(path, traj: Trajectory) -> None:
    a = traj.arrays()
    ttc = np.where(a["ego_v"] > a["lead_v"], traj.gap / np.maximum(a["ego_v"] - a["lead_v"], TTC_EPS), np.inf)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(TRAJECTORY_HEADER)
        for k in range(len(traj)):
            w.writerow([repr(float(v)) for v in (
                traj.times[k], a["ego_pos"][k], a["ego_v"][k], a["ego_a"][k], a["lead_pos"][k],
                a["lead_v"][k], a["lead_a"][k], traj.gap[k], ttc[k],
            )])
