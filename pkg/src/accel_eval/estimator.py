"""Crude Monte Carlo, importance sampling, cross-entropy proposal search and stopping rules.

Every estimate is a weighted mean of per-episode metric values.  Episode ``i``
draws from ``streams.stream(master_seed, i, tag)``; per-episode results are
assembled in index order before any reduction, so the floating-point sums do
not depend on how many workers produced them.
"""
from __future__ import annotations

import itertools
import logging
import math
import multiprocessing
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field
from statistics import NormalDist
from typing import Callable, Mapping, Sequence

import numpy as np

from . import streams
from .behavior_models import (
    DiscreteEmpirical,
    Exponential,
    FitError,
    ThreatModel,
    TruncatedNormal,
    check_compatible,
    fit_like,
    smooth,
)
from .sim_engine import OutcomeArrays

log = logging.getLogger(__name__)

METRICS = ("crash", "conflict", "injury")
CHUNK = 8192
MAX_ENUMERATION = 10**6


class EstimationError(RuntimeError):
    pass


@dataclass
class Estimate:
    metric: str
    method: str
    p_hat: float
    variance: float
    ci: tuple[float, float]
    confidence: float
    n: int
    ess: float
    invalid_count: int = 0
    seed: int | None = None
    converged: bool | None = None
    diagnostics: list[str] = field(default_factory=list)
    # IS estimate of E_natural[metric^2]; gives the crude per-sample variance
    second_moment: float | None = None
    trace: list[tuple[int, float, float, float]] = field(default_factory=list, repr=False)

    @property
    def per_sample_variance(self) -> float:
        return self.variance * self.n

    @property
    def natural_variance(self) -> float:
        """Estimated per-sample variance a crude Monte Carlo run would have."""
        if self.second_moment is None:
            raise ValueError("estimate carries no second moment")
        return max(0.0, self.second_moment - self.p_hat * self.p_hat)

    @property
    def std_error(self) -> float:
        return math.sqrt(self.variance)

    def to_dict(self) -> dict:
        out = asdict(self)
        out["ci"] = list(self.ci)
        del out["trace"]
        return out

    @classmethod
    def from_dict(cls, data: Mapping) -> "Estimate":
        data = dict(data)
        data["ci"] = tuple(data["ci"])
        return cls(**{k: v for k, v in data.items() if k in cls.__dataclass_fields__})


@dataclass(frozen=True)
class CEConfig:
    iterations: int = 5
    samples_per_iter: int = 2000
    elite_fraction: float = 0.1
    smoothing: float = 0.7
    # per-variable (lo, hi) bounds on the location shift, in natural-parameter (tilt) units
    tilt_bounds: Mapping[str, tuple[float, float]] | None = None

    def __post_init__(self):
        if not 0 < self.elite_fraction < 1:
            raise ValueError("elite_fraction must be in (0, 1)")
        if not 0 < self.smoothing <= 1:
            raise ValueError("smoothing must be in (0, 1]")
        if self.iterations < 1 or self.samples_per_iter < 2:
            raise ValueError("need iterations >= 1 and samples_per_iter >= 2")


@dataclass(frozen=True)
class StoppingRule:
    confidence: float = 0.80
    max_relative_half_width: float = 0.2
    batch_size: int = 1000
    max_episodes: int = 1_000_000

    def __post_init__(self):
        if not 0 < self.max_relative_half_width < 1:
            raise ValueError("max_relative_half_width must be in (0, 1)")
        if self.batch_size < 1 or self.max_episodes < 1:
            raise ValueError("batch_size and max_episodes must be >= 1")
        if not 0 < self.confidence < 1:
            raise ValueError("confidence must be in (0, 1)")


# ---------------------------------------------------------------- episode batches


@dataclass
class EpisodeBatch:
    indices: np.ndarray
    x: np.ndarray
    natural_density: np.ndarray
    proposal_density: np.ndarray
    outcomes: OutcomeArrays

    @property
    def weights(self) -> np.ndarray:
        with np.errstate(divide="ignore", invalid="ignore"):
            return self.natural_density / self.proposal_density

    def __len__(self):
        return self.indices.size

    @classmethod
    def concat(cls, parts: Sequence["EpisodeBatch"]) -> "EpisodeBatch":
        return cls(
            np.concatenate([p.indices for p in parts]),
            np.concatenate([p.x for p in parts]),
            np.concatenate([p.natural_density for p in parts]),
            np.concatenate([p.proposal_density for p in parts]),
            OutcomeArrays.concat([p.outcomes for p in parts]),
        )


def _run_chunk(args) -> EpisodeBatch:
    simulator, natural, proposal, indices, master_seed, tag = args
    u = streams.uniforms(master_seed, indices, len(natural.names), tag)
    x = proposal.ppf(u)
    return EpisodeBatch(indices, x, natural.joint_pdf(x), proposal.joint_pdf(x), simulator.evaluate(x))


def run_batch(simulator, natural: ThreatModel, proposal: ThreatModel, indices, master_seed: int,
              tag: int = streams.ESTIMATION_TAG, workers: int = 1) -> EpisodeBatch:
    """Sample and simulate episodes ``indices`` from ``proposal``; results in index order."""
    check_compatible(natural, proposal)
    if getattr(simulator, "scenario", natural.scenario) != natural.scenario:
        raise ValueError(f"simulator scenario {simulator.scenario!r} does not match model {natural.scenario!r}")
    indices = np.asarray(indices, dtype=np.int64)
    size = CHUNK if workers <= 1 else max(1, min(CHUNK, math.ceil(indices.size / workers)))
    jobs = [(simulator, natural, proposal, indices[i:i + size], master_seed, tag)
            for i in range(0, indices.size, size)] or [(simulator, natural, proposal, indices, master_seed, tag)]
    if workers <= 1 or len(jobs) == 1:
        parts = [_run_chunk(j) for j in jobs]
    else:
        ctx = multiprocessing.get_context("fork")
        with ProcessPoolExecutor(max_workers=workers, mp_context=ctx) as pool:
            parts = list(pool.map(_run_chunk, jobs))
    return EpisodeBatch.concat(parts)


# ---------------------------------------------------------------- statistics


def z_value(confidence: float) -> float:
    return NormalDist().inv_cdf((1.0 + confidence) / 2.0)


def confidence_interval(p_hat: float, variance: float, confidence: float = 0.80) -> tuple[float, float]:
    """Normal-approximation interval clamped to [0, 1]."""
    if variance < 0 or not 0 < confidence < 1:
        raise ValueError("need variance >= 0 and 0 < confidence < 1")
    half = z_value(confidence) * math.sqrt(variance)
    return max(0.0, p_hat - half), min(1.0, p_hat + half)


def effective_sample_size(weights) -> float:
    w = np.asarray(weights, dtype=float)
    if np.any(w < 0):
        raise ValueError("weights must be nonnegative")
    top = float(w.max()) if w.size else 0.0
    if top == 0:
        raise ValueError("effective sample size undefined for all-zero weights")
    w = w / top  # scale-free; avoids underflow of w**2 for tiny weights
    s = float(np.sum(w))
    return s * s / float(np.sum(w * w))


def estimate_from_batch(batch: EpisodeBatch, metric: str, confidence: float = 0.80, method: str = "importance",
                        seed: int | None = None) -> Estimate:
    if metric not in METRICS:
        raise ValueError(f"unknown metric {metric!r}")
    valid = batch.outcomes.valid
    invalid = int(np.count_nonzero(~valid))
    if not valid.any():
        raise EstimationError(f"all {invalid} episodes were invalid")
    w = batch.weights[valid]
    m = batch.outcomes.metric_values(metric)[valid]
    y = w * m
    n = y.size
    p_hat = float(np.sum(y)) / n
    second = float(np.sum(y * m)) / n
    variance = float(np.var(y, ddof=1)) / n if n > 1 else 0.0
    diagnostics = []
    if invalid:
        diagnostics.append(f"{invalid} invalid episodes excluded")
    if np.sum(w * w) == 0:
        ess = 0.0
        diagnostics.append("all likelihood-ratio weights are zero")
        log.warning("all likelihood-ratio weights are zero; estimate is 0")
    else:
        ess = min(float(n), effective_sample_size(w))
    if p_hat == 0:
        diagnostics.append("no events observed")
    return Estimate(metric, method, p_hat, variance, confidence_interval(p_hat, variance, confidence), confidence,
                    n, ess, invalid, seed, None, diagnostics, second)


def importance_sampling(simulator, natural: ThreatModel, proposal: ThreatModel, metric: str, n: int,
                        master_seed: int, confidence: float = 0.80, workers: int = 1,
                        method: str = "importance") -> Estimate:
    """IS estimate of E_natural[metric]: mean of likelihood ratio times metric over proposal draws."""
    if n < 1:
        raise ValueError("n must be >= 1")
    batch = run_batch(simulator, natural, proposal, np.arange(n), master_seed, workers=workers)
    return estimate_from_batch(batch, metric, confidence, method, master_seed)


def crude_mc(simulator, natural: ThreatModel, metric: str, n: int, master_seed: int, confidence: float = 0.80,
             workers: int = 1) -> Estimate:
    return importance_sampling(simulator, natural, natural, metric, n, master_seed, confidence, workers, "crude")


def enumerate_exact(simulator, natural: ThreatModel, metric: str) -> float:
    """Exact expectation over an all-discrete threat model (test oracle)."""
    dists = list(natural.variables.values())
    if not all(isinstance(d, DiscreteEmpirical) for d in dists):
        raise ValueError("enumerate_exact needs every variable to be discrete_empirical")
    supports = [[(v, p) for v, p in zip(d.values, d.probs) if p > 0] for d in dists]
    size = math.prod(len(s) for s in supports)
    if size > MAX_ENUMERATION:
        raise ValueError(f"joint support of {size} points exceeds {MAX_ENUMERATION}")
    combos = list(itertools.product(*supports))
    x = np.array([[v for v, _ in c] for c in combos])
    mass = [math.prod(p for _, p in c) for c in combos]
    out = simulator.evaluate(x)
    if not out.valid.all():
        raise EstimationError("enumeration hit invalid episodes")
    values = out.metric_values(metric)
    return math.fsum(m * v for m, v in zip(mass, values))


# ---------------------------------------------------------------- cross-entropy


def _clamp_location(prop, nat, bounds):
    lo, hi = bounds
    if isinstance(nat, Exponential):
        theta = min(max(nat.rate - prop.rate, lo), hi)
        return Exponential(nat.rate - theta) if nat.rate - theta > 0 else prop
    if isinstance(nat, TruncatedNormal):
        theta = min(max((prop.mean - nat.mean) / nat.sd**2, lo), hi)
        return TruncatedNormal(nat.mean + theta * nat.sd**2, prop.sd, prop.lo, prop.hi)
    return prop


def ce_optimize(simulator, natural: ThreatModel, ce: CEConfig = CEConfig(), metric: str = "crash",
                master_seed: int = 0, workers: int = 1) -> ThreatModel:
    """Cross-entropy search for an importance-sampling proposal within the natural families.

    Episodes are ranked by (event, min_gap ascending, min_ttc ascending).  The
    elite set is the top ``elite_fraction``, or every event once events are
    that common.  Each variable is refit by likelihood-ratio-weighted MLE on the
    elites and blended with the previous proposal.
    """
    proposal = natural
    history = []
    diagnostics = []
    for j in range(ce.iterations):
        batch = run_batch(simulator, natural, proposal, np.arange(ce.samples_per_iter), master_seed,
                          tag=j + 1, workers=workers)
        valid = batch.outcomes.valid
        out = batch.outcomes.take(valid)
        x = batch.x[valid]
        if x.shape[0] < 2:
            diagnostics.append(f"iteration {j}: fewer than 2 valid episodes")
            break
        event = out.event(metric)
        n_events = int(event.sum())
        if j == 0 and n_events >= ce.elite_fraction * x.shape[0]:
            diagnostics.append("event is not rare under the natural model; natural proposal kept")
            break
        if np.all(event == event[0]) and np.ptp(out.min_gap) == 0 and np.all(out.min_ttc == out.min_ttc[0]):
            diagnostics.append(f"iteration {j}: no elite separation; natural model returned")
            proposal = natural
            break
        order = np.lexsort((out.min_ttc, out.min_gap, ~event))
        m = max(math.ceil(ce.elite_fraction * x.shape[0]), n_events)
        elite = order[:m]
        w = batch.weights[valid][elite]
        new_vars = {}
        for col, (name, nat) in enumerate(natural.variables.items()):
            old = proposal.variables[name]
            try:
                fitted = fit_like(nat, x[elite, col], w)
            except FitError as exc:
                diagnostics.append(f"iteration {j}: {name} kept ({exc})")
                new_vars[name] = old
                continue
            new = smooth(fitted, old, ce.smoothing)
            if ce.tilt_bounds and name in ce.tilt_bounds:
                new = _clamp_location(new, nat, ce.tilt_bounds[name])
            new_vars[name] = new
        proposal = ThreatModel(natural.scenario, new_vars)
        level = float(out.min_gap[elite[-1]])
        history.append({"iteration": j, "events": n_events, "elite": int(m), "level_min_gap": level})
        log.debug("CE iteration %d: %d events, elite level %.4g", j, n_events, level)
    meta = {"ce": {"history": history, "diagnostics": diagnostics, "seed": master_seed}}
    return ThreatModel(natural.scenario, proposal.variables, meta)


# ---------------------------------------------------------------- sequential estimation


def run_until_converged(draw: Callable[[int, int], EpisodeBatch], rule: StoppingRule, metric: str,
                        method: str = "importance", seed: int | None = None) -> Estimate:
    """Grow the sample in batches until the CI half-width is within ``β·p_hat`` or the cap is hit.

    ``draw(start, stop)`` returns the episodes with indices ``start..stop-1``.
    """
    parts: list[EpisodeBatch] = []
    trace = []
    z = z_value(rule.confidence)
    total = 0
    while total < rule.max_episodes:
        stop = min(total + rule.batch_size, rule.max_episodes)
        parts.append(draw(total, stop))
        total = stop
        est = estimate_from_batch(EpisodeBatch.concat(parts), metric, rule.confidence, method, seed)
        trace.append((total, est.p_hat, est.ci[0], est.ci[1]))
        if est.p_hat > 0 and z * math.sqrt(est.variance) <= rule.max_relative_half_width * est.p_hat:
            est.converged = True
            break
    else:
        est.converged = False
        est.diagnostics.append(f"episode cap {rule.max_episodes} reached before convergence")
    est.trace = trace
    return est


def sequential_estimate(simulator, natural: ThreatModel, proposal: ThreatModel, metric: str, rule: StoppingRule,
                        master_seed: int, workers: int = 1, method: str = "importance") -> Estimate:
    def draw(start, stop):
        return run_batch(simulator, natural, proposal, np.arange(start, stop), master_seed, workers=workers)

    return run_until_converged(draw, rule, metric, method, master_seed)


def acceleration_factor(crude: Estimate | float, accelerated: Estimate) -> float:
    """Ratio of per-sample variances: how many crude episodes one accelerated episode is worth.

    ``crude`` may be an analytic per-sample variance such as ``p * (1 - p)``.
    """
    base = crude if isinstance(crude, (int, float)) else crude.per_sample_variance
    acc = accelerated.per_sample_variance
    if crude is accelerated:
        return 1.0
    if acc == 0:
        if accelerated.p_hat > 0:
            return math.inf
        if base == 0:
            return 1.0
        raise ValueError("accelerated estimate has zero variance and zero p_hat")
    return base / acc
