"""Naturalistic-data pipeline: synthetic drive logs, event extraction, threat-model fitting.

Logs are sampled on a uniform grid with columns ``t, lead_speed, gap``.  The
synthetic generator embeds brake and cut-in events at known times and returns
them as ground truth so extraction can be scored.
"""
from __future__ import annotations

import csv
import json
import math
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np

from .behavior_models import (
    SCENARIO_SCHEMAS,
    DistributionSpec,
    ThreatModel,
    TruncatedNormal,
    fit_mle,
)

BRAKE, CUT_IN = "brake_event", "cut_in_event"
KIND_FOR_SCENARIO = {"car_following": BRAKE, "cut_in": CUT_IN}
LOG_HEADER = ["t", "lead_speed", "gap"]
DT_TOL = 1e-9

# physical plausibility bounds used as truncation limits when fitting
DEFAULT_BOUNDS = {
    "v0": (0.0, 45.0),
    "d": (0.0, 12.0),
    "tau": (0.0, 30.0),
    "R": (0.0, 150.0),
    "closing": (0.0, 45.0),
    "vL": (0.0, 45.0),
}
DEFAULT_FAMILIES = {
    "v0": "truncated_normal",
    "d": "truncated_normal",
    "tau": "truncated_normal",
    "R": "truncated_normal",
    "closing": "truncated_normal",
    "vL": "truncated_normal",
}


class LogParseError(ValueError):
    pass


@dataclass(frozen=True)
class DriveLog:
    dt: float
    t: np.ndarray
    lead_speed: np.ndarray
    gap: np.ndarray
    meta: Mapping = field(default_factory=dict)

    def __post_init__(self):
        t, v, g = (np.asarray(a, dtype=float) for a in (self.t, self.lead_speed, self.gap))
        if not (t.ndim == 1 and t.shape == v.shape == g.shape and t.size >= 2):
            raise ValueError("log needs >= 2 samples with matching columns")
        if self.dt <= 0 or np.any(np.abs(np.diff(t) - self.dt) > DT_TOL):
            raise ValueError("log time stamps must be strictly increasing with uniform dt")
        if np.any(v < 0) or np.any(g <= 0):
            raise ValueError("log speeds must be >= 0 and gaps > 0")
        for name, arr in (("t", t), ("lead_speed", v), ("gap", g)):
            object.__setattr__(self, name, arr)
        object.__setattr__(self, "meta", dict(self.meta))

    @property
    def log_id(self) -> str:
        return str(self.meta.get("log_id", "log"))

    def __len__(self):
        return self.t.size


@dataclass(frozen=True)
class ExtractedEvent:
    kind: str
    params: Mapping[str, float]
    source: tuple[str, float]

    def to_dict(self) -> dict:
        return {"kind": self.kind, "params": dict(self.params),
                "source": {"log_id": self.source[0], "t_start": self.source[1]}}

    @classmethod
    def from_dict(cls, data: Mapping) -> "ExtractedEvent":
        return cls(data["kind"], dict(data["params"]), (data["source"]["log_id"], float(data["source"]["t_start"])))


@dataclass(frozen=True)
class LogProfile:
    duration: float = 3600.0
    dt: float = 0.1
    base_speed: DistributionSpec = TruncatedNormal(28.0, 3.0, 20.0, 35.0)
    brake_rate: float = 1 / 60
    brake_decel: DistributionSpec = TruncatedNormal(3.5, 1.0, 2.5, 6.0)
    brake_duration: DistributionSpec = TruncatedNormal(1.5, 0.5, 0.6, 3.0)
    cut_in_rate: float = 1 / 120
    cut_in_gap: DistributionSpec = TruncatedNormal(15.0, 5.0, 5.0, 30.0)
    cut_in_closing: DistributionSpec = TruncatedNormal(3.0, 1.5, 0.5, 8.0)
    cut_in_lead_speed: DistributionSpec = TruncatedNormal(25.0, 4.0, 15.0, 35.0)
    # lead speed changes between events stay below any braking threshold
    transition_accel: float = 1.5
    recovery_accel: float = 3.0
    # gap = standstill + headway * trailing mean lead speed while cruising
    standstill_gap: float = 10.0
    headway: float = 1.5

    def __post_init__(self):
        if self.duration <= 0 or self.dt <= 0:
            raise ValueError("duration and dt must be positive")
        if self.brake_rate < 0 or self.cut_in_rate < 0:
            raise ValueError("event rates must be nonnegative")


@dataclass
class SyntheticLog:
    log: DriveLog
    truth: list[ExtractedEvent]
    dropped: int = 0


def _draw(dist: DistributionSpec, rng) -> float:
    return float(dist.ppf(rng.random()))


def generate_synthetic_log(profile: LogProfile = LogProfile(), seed: int = 0, log_id: str | None = None) -> SyntheticLog:
    """Piecewise-linear lead-speed log with embedded brake and cut-in events.

    Event counts are Poisson in ``rate * duration``.  Events are laid out in
    random order on non-overlapping slots; if the slots do not fit into the
    duration the surplus events are dropped and counted.
    """
    rng = np.random.default_rng(seed)
    log_id = log_id or f"synthetic-{seed}"
    dt = profile.dt
    n_brake = int(rng.poisson(profile.brake_rate * profile.duration))
    n_cut = int(rng.poisson(profile.cut_in_rate * profile.duration))
    kinds = np.array([BRAKE] * n_brake + [CUT_IN] * n_cut)
    rng.shuffle(kinds)

    ramp = profile.transition_accel
    cur = _draw(profile.base_speed, rng)
    plan = []
    for kind in kinds:
        if kind == BRAKE:
            v0 = _draw(profile.base_speed, rng)
            d = _draw(profile.brake_decel, rng)
            tau = min(_draw(profile.brake_duration, rng), v0 / d)
            lead_in = abs(v0 - cur) / ramp + 1.0
            busy = tau + 1.0
            plan.append((kind, {"v0": v0, "d": d, "tau": tau}, cur, lead_in, busy))
            cur = v0 - d * tau
        else:
            target = _draw(profile.base_speed, rng)
            r = _draw(profile.cut_in_gap, rng)
            closing = _draw(profile.cut_in_closing, rng)
            vl = _draw(profile.cut_in_lead_speed, rng)
            lead_in = abs(target - cur) / ramp + profile.headway + 1.0
            decel = max(2.0, closing**2 / (2.0 * max(r - 3.0, 1.0)))
            g_min = r - closing**2 / (2.0 * decel)
            busy = closing / decel + max(0.0, profile.standstill_gap + profile.headway * vl - g_min) / ramp + 2.0
            plan.append((kind, {"R": r, "closing": closing, "vL": vl, "_target": target, "_decel": decel},
                         cur, lead_in, busy))
            cur = vl
    # slots are rounded up to whole steps so layout arithmetic stays on the grid
    need = [math.ceil((li + b) / dt) + 2 for *_, li, b in plan]
    total = int(round(profile.duration / dt))
    dropped = 0
    while need and sum(need) + 1 > total:
        need.pop()
        plan.pop()
        dropped += 1
    free = total - 1 - sum(need)
    offsets = np.sort(rng.integers(0, free + 1, size=len(plan)))

    n = total + 1
    t = np.arange(n) * dt
    lead = np.empty(n)
    gap_override = np.full(n, np.nan)
    truth = []
    k = 0
    speed = plan[0][2] if plan else _draw(profile.base_speed, rng)
    used = 0
    for (kind, p, _, lead_in, busy), slot, off in zip(plan, need, offsets):
        start = int(off) + used
        used += slot
        lead[k:start + 1] = speed
        k = start
        if kind == BRAKE:
            target = p["v0"]
        else:
            target = p["_target"]
        # ramp to the target speed, then hold
        steps = np.arange(0, int(round((lead_in - 1.0) / dt)) + int(1.0 / dt) + 1)
        seg = speed + np.sign(target - speed) * np.minimum(steps * dt * ramp, abs(target - speed))
        lead[k:k + steps.size] = seg
        k0 = k + steps.size - 1
        lead[k0] = target
        if kind == BRAKE:
            m = np.arange(0, int(math.ceil(p["tau"] / dt - 1e-9)) + 1)
            lead[k0:k0 + m.size] = p["v0"] - p["d"] * np.minimum(m * dt, p["tau"])
            k = k0 + m.size
            speed = p["v0"] - p["d"] * p["tau"]
            truth.append(ExtractedEvent(BRAKE, {"v0": p["v0"], "d": p["d"], "tau": p["tau"]}, (log_id, float(t[k0]))))
        else:
            lead[k0] = target
            kc = k0 + 1
            lead[kc:start + slot] = p["vL"]
            g = [p["R"]]
            c = p["closing"]
            while c > 0:
                g.append(g[-1] - c * dt)
                c = max(0.0, c - p["_decel"] * dt)
            steady = profile.standstill_gap + profile.headway * p["vL"]
            while g[-1] < steady:
                g.append(min(steady, g[-1] + ramp * dt))
            # hold until the trailing speed window only sees the new lead
            g += [g[-1]] * max(0, int(round(profile.headway / dt)) + 2 - len(g))
            end = min(kc + len(g), n)
            gap_override[kc:end] = g[: end - kc]
            k = kc
            speed = p["vL"]
            truth.append(ExtractedEvent(CUT_IN, {"R": p["R"], "closing": p["closing"], "vL": p["vL"]},
                                        (log_id, float(t[kc]))))
        k = max(k, start + slot) if kind == CUT_IN else k
    lead[k:] = speed
    lead = np.maximum(lead, 0.0)

    window = max(1, int(round(profile.headway / dt)))
    padded = np.concatenate([np.full(window - 1, lead[0]), lead])
    trailing = np.convolve(padded, np.ones(window) / window, mode="valid")
    gap = profile.standstill_gap + profile.headway * trailing
    gap = np.where(np.isnan(gap_override), gap, gap_override)
    meta = {"log_id": log_id, "source": f"generate_synthetic_log(seed={seed})", "dropped_events": dropped}
    return SyntheticLog(DriveLog(dt, t, lead, gap, meta), truth, dropped)


def extract_events(log: DriveLog, min_decel: float = 2.0, min_duration: float = 0.5,
                   cut_in_gap_jump: float = 5.0) -> list[ExtractedEvent]:
    """Brake events (sustained lead deceleration) and cut-ins (one-step gap drops), in time order."""
    dt = log.dt
    v, g, t = log.lead_speed, log.gap, log.t
    decel = (v[:-1] - v[1:]) / dt
    events = []

    strong = decel >= min_decel
    edges = np.flatnonzero(np.diff(np.concatenate([[0], strong.astype(np.int8), [0]])))
    for a, b in zip(edges[::2], edges[1::2]):
        if (b - a) * dt < min_duration - 1e-9:
            continue
        # extend over partially covered boundary steps
        while a > 0 and decel[a - 1] > 1e-9:
            a -= 1
        while b < decel.size and decel[b] > 1e-9:
            b += 1
        run = decel[a:b]
        core = run[run >= max(min_decel, 0.9 * run.max())]
        d = float(core.mean())
        dv = float(v[a] - v[b])
        events.append(ExtractedEvent(BRAKE, {"v0": float(v[a]), "d": d, "tau": dv / d}, (log.log_id, float(t[a]))))

    drops = np.flatnonzero(g[:-1] - g[1:] >= cut_in_gap_jump)
    for k in drops:
        kc = k + 1
        if kc + 1 >= g.size:
            continue
        closing = float((g[kc] - g[kc + 1]) / dt)
        events.append(ExtractedEvent(CUT_IN, {"R": float(g[kc]), "closing": closing, "vL": float(v[kc])},
                                     (log.log_id, float(t[kc]))))
    events.sort(key=lambda e: (e.source[1], e.kind))
    return events


def match_events(found: Sequence[ExtractedEvent], truth: Sequence[ExtractedEvent],
                 tolerance: float = 0.5) -> tuple[float, float]:
    """(precision, recall) of ``found`` against ``truth`` by kind and start time."""
    unmatched = list(truth)
    hits = 0
    for e in found:
        for i, g in enumerate(unmatched):
            if g.kind == e.kind and g.source[0] == e.source[0] and abs(g.source[1] - e.source[1]) <= tolerance:
                hits += 1
                del unmatched[i]
                break
    precision = hits / len(found) if found else 1.0
    recall = hits / len(truth) if truth else 1.0
    return precision, recall


def build_threat_model(events: Iterable[ExtractedEvent], scenario: str,
                       families: Mapping[str, str] | None = None,
                       bounds: Mapping[str, tuple[float, float]] | None = None,
                       min_events: int = 10) -> ThreatModel:
    """Fit each schema variable of ``scenario`` independently by maximum likelihood."""
    if scenario not in KIND_FOR_SCENARIO:
        raise ValueError(f"unknown scenario {scenario!r}")
    kind = KIND_FOR_SCENARIO[scenario]
    events = list(events)
    matching = [e for e in events if e.kind == kind]
    if not matching and events:
        raise ValueError(f"no {kind} events for scenario {scenario!r} (got {sorted({e.kind for e in events})})")
    if len(matching) < min_events:
        raise ValueError(f"need >= {min_events} {kind} events, got {len(matching)}")
    families = {**DEFAULT_FAMILIES, **(families or {})}
    bounds = {**DEFAULT_BOUNDS, **(bounds or {})}
    variables = {}
    for name in SCENARIO_SCHEMAS[scenario]:
        xs = [e.params[name] for e in matching]
        fam = families[name]
        lo, hi = bounds[name]
        variables[name] = fit_mle(fam, xs, lo=lo, hi=hi) if fam == "truncated_normal" else fit_mle(fam, xs)
    meta = {"sample_counts": {name: len(matching) for name in variables}, "source": "build_threat_model"}
    return ThreatModel(scenario, variables, meta)


# ---------------------------------------------------------------- file formats


def write_log_csv(log: DriveLog, path: os.PathLike) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(LOG_HEADER)
        for row in zip(log.t, log.lead_speed, log.gap):
            w.writerow([repr(float(x)) for x in row])


def read_log_csv(path: os.PathLike) -> DriveLog:
    path = Path(path)
    rows = []
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None or [h.strip() for h in header] != LOG_HEADER:
            raise LogParseError(f"{path}:1: expected header {','.join(LOG_HEADER)}")
        for lineno, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != 3:
                raise LogParseError(f"{path}:{lineno}: expected 3 fields, got {len(row)}")
            try:
                vals = [float(x) for x in row]
            except ValueError:
                raise LogParseError(f"{path}:{lineno}: non-numeric field in {row}") from None
            if not all(math.isfinite(x) for x in vals):
                raise LogParseError(f"{path}:{lineno}: non-finite value")
            if rows and vals[0] <= rows[-1][0]:
                raise LogParseError(f"{path}:{lineno}: time not strictly increasing")
            if vals[1] < 0 or vals[2] <= 0:
                raise LogParseError(f"{path}:{lineno}: negative speed or non-positive gap")
            rows.append(vals)
    if len(rows) < 2:
        raise LogParseError(f"{path}: need at least 2 samples")
    arr = np.array(rows)
    steps = np.diff(arr[:, 0])
    dt = float(steps[0])
    bad = np.flatnonzero(np.abs(steps - dt) > DT_TOL)
    if bad.size:
        raise LogParseError(f"{path}:{int(bad[0]) + 3}: non-uniform time step")
    return DriveLog(dt, arr[:, 0], arr[:, 1], arr[:, 2], {"log_id": path.stem, "source": str(path)})


def events_to_json(events: Sequence[ExtractedEvent]) -> str:
    return json.dumps([e.to_dict() for e in events], indent=2)


def events_from_json(text: str) -> list[ExtractedEvent]:
    return [ExtractedEvent.from_dict(d) for d in json.loads(text)]
