"""Parametric threat-variable distributions.

All families sample by inverse CDF from a single uniform, so a scalar
``sample(dist, rng)`` and a batch ``dist.ppf(u)`` over pre-drawn uniforms give
identical values.
"""
from __future__ import annotations

import json
import math
from dataclasses import dataclass, field, replace
from typing import Mapping, Sequence, Union

import numpy as np
from scipy import optimize, special

SCENARIO_SCHEMAS: dict[str, tuple[str, ...]] = {
    "car_following": ("v0", "d", "tau"),
    "cut_in": ("R", "closing", "vL"),
}
# free-form schema for synthetic oracle scenarios
SYNTHETIC = "synthetic"


class DistributionError(ValueError):
    pass


class UnsupportedTiltError(DistributionError):
    pass


class InvalidTiltError(DistributionError):
    pass


class AbsoluteContinuityError(DistributionError):
    pass


class FitError(ValueError):
    pass


def _log_mass(alpha, beta):
    """log(Phi(beta) - Phi(alpha)) without cancellation in either tail."""
    alpha = np.asarray(alpha, dtype=float)
    beta = np.asarray(beta, dtype=float)
    right = alpha > 0
    # mirror right-tail intervals into the left tail
    a = np.where(right, -beta, alpha)
    b = np.where(right, -alpha, beta)
    la, lb = special.log_ndtr(a), special.log_ndtr(b)
    with np.errstate(divide="ignore"):
        return lb + np.log1p(-np.exp(la - lb))


@dataclass(frozen=True)
class Exponential:
    rate: float
    family = "exponential"

    def __post_init__(self):
        if not self.rate > 0 or not math.isfinite(self.rate):
            raise DistributionError(f"exponential rate must be positive, got {self.rate}")

    @property
    def support(self):
        return (0.0, math.inf)

    @property
    def params(self):
        return {"rate": self.rate}

    @property
    def mean(self):
        return 1.0 / self.rate

    def ppf(self, u):
        return -np.log1p(-np.asarray(u, dtype=float)) / self.rate

    def pdf(self, x):
        x = np.asarray(x, dtype=float)
        return np.where(x >= 0, self.rate * np.exp(-self.rate * np.maximum(x, 0.0)), 0.0)


@dataclass(frozen=True)
class TruncatedNormal:
    mean: float
    sd: float
    lo: float
    hi: float
    family = "truncated_normal"

    def __post_init__(self):
        if not self.sd > 0:
            raise DistributionError("truncated normal sd must be positive")
        if not self.lo < self.hi:
            raise DistributionError("truncated normal needs lo < hi")
        if not np.isfinite(self.log_mass):
            raise DistributionError(f"truncation interval carries no mass: {self!r}")

    @property
    def support(self):
        return (self.lo, self.hi)

    @property
    def params(self):
        return {"mean": self.mean, "sd": self.sd, "lo": self.lo, "hi": self.hi}

    @property
    def _ab(self):
        return (self.lo - self.mean) / self.sd, (self.hi - self.mean) / self.sd

    @property
    def log_mass(self) -> float:
        a, b = (self.lo - self.mean) / self.sd, (self.hi - self.mean) / self.sd
        return float(_log_mass(a, b))

    def ppf(self, u):
        u = np.asarray(u, dtype=float)
        a, b = self._ab
        if a > 0:
            sa, sb = special.ndtr(-a), special.ndtr(-b)
            z = -special.ndtri(sa - u * (sa - sb))
        else:
            ca, cb = special.ndtr(a), special.ndtr(b)
            z = special.ndtri(ca + u * (cb - ca))
        return np.clip(self.mean + self.sd * z, self.lo, self.hi)

    def logpdf(self, x):
        x = np.asarray(x, dtype=float)
        z = (x - self.mean) / self.sd
        lp = -0.5 * z * z - 0.5 * math.log(2 * math.pi) - math.log(self.sd) - self.log_mass
        return np.where((x >= self.lo) & (x <= self.hi), lp, -np.inf)

    def pdf(self, x):
        return np.exp(self.logpdf(x))

    @property
    def mean_value(self) -> float:
        """Mean of the truncated distribution (not the location parameter)."""
        a, b = self._ab
        ratio = (math.exp(-0.5 * a * a) - math.exp(-0.5 * b * b)) / math.sqrt(2 * math.pi) / math.exp(self.log_mass)
        return self.mean + self.sd * ratio


@dataclass(frozen=True)
class Pareto:
    scale: float
    shape: float
    family = "pareto"

    def __post_init__(self):
        if not (self.scale > 0 and self.shape > 0):
            raise DistributionError("pareto scale and shape must be positive")

    @property
    def support(self):
        return (self.scale, math.inf)

    @property
    def params(self):
        return {"scale": self.scale, "shape": self.shape}

    def ppf(self, u):
        return self.scale * (1.0 - np.asarray(u, dtype=float)) ** (-1.0 / self.shape)

    def pdf(self, x):
        x = np.asarray(x, dtype=float)
        safe = np.maximum(x, self.scale)
        return np.where(x >= self.scale, self.shape * self.scale**self.shape / safe ** (self.shape + 1), 0.0)


@dataclass(frozen=True)
class Uniform:
    lo: float
    hi: float
    family = "uniform"

    def __post_init__(self):
        if not self.lo < self.hi:
            raise DistributionError("uniform needs lo < hi")

    @property
    def support(self):
        return (self.lo, self.hi)

    @property
    def params(self):
        return {"lo": self.lo, "hi": self.hi}

    def ppf(self, u):
        return self.lo + np.asarray(u, dtype=float) * (self.hi - self.lo)

    def pdf(self, x):
        x = np.asarray(x, dtype=float)
        return np.where((x >= self.lo) & (x <= self.hi), 1.0 / (self.hi - self.lo), 0.0)


@dataclass(frozen=True)
class DiscreteEmpirical:
    values: tuple
    probs: tuple
    family = "discrete_empirical"

    def __post_init__(self):
        values = tuple(float(v) for v in self.values)
        probs = tuple(float(p) for p in self.probs)
        if len(values) == 0 or len(values) != len(probs):
            raise DistributionError("discrete distribution needs matching nonempty values/probs")
        if len(set(values)) != len(values):
            raise DistributionError("discrete support values must be distinct")
        if any(p < 0 for p in probs) or abs(math.fsum(probs) - 1.0) > 1e-12:
            raise DistributionError(f"discrete probs must be >= 0 and sum to 1, got sum {math.fsum(probs)!r}")
        order = np.argsort(values, kind="stable")
        object.__setattr__(self, "values", tuple(values[i] for i in order))
        object.__setattr__(self, "probs", tuple(probs[i] for i in order))

    @property
    def support(self):
        return tuple(v for v, p in zip(self.values, self.probs) if p > 0)

    @property
    def params(self):
        return {"values": list(self.values), "probs": list(self.probs)}

    def ppf(self, u):
        cum = np.cumsum(self.probs)
        idx = np.searchsorted(cum, np.asarray(u, dtype=float), side="right")
        return np.asarray(self.values)[np.minimum(idx, len(self.values) - 1)]

    def pdf(self, x):
        x = np.asarray(x, dtype=float)
        vals = np.asarray(self.values)
        idx = np.clip(np.searchsorted(vals, x), 0, len(vals) - 1)
        return np.where(vals[idx] == x, np.asarray(self.probs)[idx], 0.0)


DistributionSpec = Union[Exponential, TruncatedNormal, Pareto, Uniform, DiscreteEmpirical]
FAMILIES = {cls.family: cls for cls in (Exponential, TruncatedNormal, Pareto, Uniform, DiscreteEmpirical)}


def sample(dist: DistributionSpec, rng: np.random.Generator) -> float:
    return float(dist.ppf(rng.random()))


def pdf(dist: DistributionSpec, x):
    p = dist.pdf(x)
    return p if np.ndim(p) else float(p)


def mean_of(dist: DistributionSpec) -> float:
    if isinstance(dist, Exponential):
        return 1.0 / dist.rate
    if isinstance(dist, TruncatedNormal):
        return dist.mean_value
    if isinstance(dist, Pareto):
        return math.inf if dist.shape <= 1 else dist.shape * dist.scale / (dist.shape - 1)
    if isinstance(dist, Uniform):
        return 0.5 * (dist.lo + dist.hi)
    return float(np.dot(dist.values, dist.probs))


def tilt(dist: DistributionSpec, theta: float) -> DistributionSpec:
    """Exponential tilt ``g(x) ∝ exp(theta * x) f(x)`` inside the same family."""
    if theta == 0:
        return dist
    if isinstance(dist, Exponential):
        rate = dist.rate - theta
        if rate <= 0:
            raise InvalidTiltError(f"tilt {theta} leaves exponential rate {rate} <= 0")
        return Exponential(rate)
    if isinstance(dist, TruncatedNormal):
        return replace(dist, mean=dist.mean + theta * dist.sd**2)
    if isinstance(dist, DiscreteEmpirical):
        logits = np.log(np.asarray(dist.probs)) + theta * np.asarray(dist.values)
        with np.errstate(divide="ignore"):
            probs = np.exp(logits - special.logsumexp(logits))
        return DiscreteEmpirical(dist.values, tuple(_renormalize(probs)))
    raise UnsupportedTiltError(
        f"{dist.family} has no in-family exponential tilt; supply an explicit replacement proposal distribution"
    )


def _renormalize(probs) -> list[float]:
    """Scale to sum 1 and push the fsum rounding residue into the largest entry."""
    probs = np.asarray(probs, dtype=float)
    probs = probs / probs.sum()
    out = [float(p) for p in probs]
    out[int(np.argmax(probs))] += 1.0 - math.fsum(out)
    return out


def _covers(natural: DistributionSpec, proposal: DistributionSpec) -> bool:
    nat_discrete = isinstance(natural, DiscreteEmpirical)
    if nat_discrete != isinstance(proposal, DiscreteEmpirical):
        return False
    if nat_discrete:
        return set(natural.support) <= set(proposal.support)
    (nlo, nhi), (plo, phi) = natural.support, proposal.support
    return plo <= nlo and phi >= nhi


@dataclass(frozen=True)
class ThreatModel:
    scenario: str
    variables: Mapping[str, DistributionSpec]
    metadata: Mapping = field(default_factory=dict, compare=False)

    def __post_init__(self):
        object.__setattr__(self, "variables", dict(self.variables))
        object.__setattr__(self, "metadata", dict(self.metadata))
        if self.scenario in SCENARIO_SCHEMAS:
            if tuple(self.variables) != SCENARIO_SCHEMAS[self.scenario]:
                raise ValueError(
                    f"{self.scenario} threat model needs variables {SCENARIO_SCHEMAS[self.scenario]}, "
                    f"got {tuple(self.variables)}"
                )
        elif self.scenario != SYNTHETIC:
            raise ValueError(f"unknown scenario tag {self.scenario!r}")
        if not self.variables:
            raise ValueError("threat model needs at least one variable")

    @property
    def names(self) -> tuple[str, ...]:
        return tuple(self.variables)

    def ppf(self, u: np.ndarray) -> np.ndarray:
        """Map an ``(n, k)`` block of uniforms to variable values column by column."""
        u = np.atleast_2d(u)
        return np.column_stack([d.ppf(u[:, j]) for j, d in enumerate(self.variables.values())])

    def joint_pdf(self, x: np.ndarray) -> np.ndarray:
        x = np.atleast_2d(x)
        out = np.ones(x.shape[0])
        for j, d in enumerate(self.variables.values()):
            out = out * d.pdf(x[:, j])
        return out

    def tilted(self, thetas: Mapping[str, float]) -> "ThreatModel":
        unknown = set(thetas) - set(self.variables)
        if unknown:
            raise ValueError(f"tilt for unknown variables {sorted(unknown)}")
        return ThreatModel(
            self.scenario, {k: tilt(d, thetas.get(k, 0.0)) for k, d in self.variables.items()}, self.metadata
        )

    def to_dict(self) -> dict:
        out = {
            "scenario": self.scenario,
            "variables": {
                name: {"family": d.family, "params": d.params, "support": _support_json(d)}
                for name, d in self.variables.items()
            },
        }
        if self.metadata:
            out["metadata"] = self.metadata
        return out

    @classmethod
    def from_dict(cls, data: Mapping) -> "ThreatModel":
        try:
            variables = {name: dist_from_dict(v) for name, v in data["variables"].items()}
            return cls(data["scenario"], variables, data.get("metadata", {}))
        except KeyError as exc:
            raise ValueError(f"threat model JSON missing key {exc}") from None

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2)

    @classmethod
    def from_json(cls, text: str) -> "ThreatModel":
        return cls.from_dict(json.loads(text))


def _support_json(d: DistributionSpec):
    if isinstance(d, DiscreteEmpirical):
        return list(d.support)
    lo, hi = d.support
    return [lo, hi if math.isfinite(hi) else None]


def dist_from_dict(data: Mapping) -> DistributionSpec:
    family = data.get("family")
    if family not in FAMILIES:
        raise ValueError(f"unknown distribution family {family!r}")
    params = dict(data["params"])
    if family == "discrete_empirical":
        return DiscreteEmpirical(tuple(params["values"]), tuple(params["probs"]))
    return FAMILIES[family](**params)


def check_compatible(natural: ThreatModel, proposal: ThreatModel) -> None:
    if natural.scenario != proposal.scenario or natural.names != proposal.names:
        raise ValueError("natural and proposal models must share scenario and variable names")
    for name in natural.names:
        if not _covers(natural.variables[name], proposal.variables[name]):
            raise AbsoluteContinuityError(
                f"proposal for {name!r} does not cover the natural support "
                f"({natural.variables[name].support} vs {proposal.variables[name].support})"
            )


def likelihood_ratio(x, natural: ThreatModel, proposal: ThreatModel) -> float:
    """Product over variables of natural/proposal density at ``x`` (mapping or sequence)."""
    check_compatible(natural, proposal)
    if isinstance(x, Mapping):
        x = [x[n] for n in natural.names]
    w = 1.0
    for xi, nd, pd in zip(x, natural.variables.values(), proposal.variables.values()):
        num, den = float(nd.pdf(xi)), float(pd.pdf(xi))
        if num == 0.0:
            return 0.0
        w *= num / den
    return w


# ---------------------------------------------------------------- fitting


def _weights(samples, weights):
    x = np.asarray(samples, dtype=float)
    w = np.ones_like(x) if weights is None else np.asarray(weights, dtype=float)
    if x.ndim != 1 or w.shape != x.shape:
        raise FitError("samples and weights must be 1-d and the same length")
    if x.size < 2:
        raise FitError("need at least 2 samples")
    if np.any(w < 0) or not np.any(w > 0):
        raise FitError("weights must be nonnegative and not all zero")
    if not np.all(np.isfinite(x)):
        raise FitError("samples must be finite")
    return x, w / w.sum()


def _require_spread(x, w, family):
    if np.ptp(x[w > 0]) == 0:
        raise FitError(f"degenerate samples: {family} fit needs spread")


def fit_mle(
    family: str,
    samples: Sequence[float],
    weights: Sequence[float] | None = None,
    *,
    lo: float | None = None,
    hi: float | None = None,
    scale: float | None = None,
    values: Sequence[float] | None = None,
) -> DistributionSpec:
    """Maximum-likelihood fit within ``family``; optional weights give the weighted MLE.

    Fixed parameters: ``lo``/``hi`` truncation bounds for ``truncated_normal``;
    ``scale`` for ``pareto`` (default: sample minimum); ``values`` support for
    ``discrete_empirical`` (default: observed values).
    """
    if family not in FAMILIES:
        raise ValueError(f"unknown distribution family {family!r}")
    x, w = _weights(samples, weights)

    if family == "discrete_empirical":
        support = sorted(set(x.tolist())) if values is None else sorted(float(v) for v in values)
        vals = np.asarray(support)
        idx = np.searchsorted(vals, x)
        if np.any(idx >= vals.size) or np.any(vals[np.minimum(idx, vals.size - 1)] != x):
            raise FitError("samples outside the requested discrete support")
        probs = np.bincount(idx, weights=w, minlength=vals.size)
        return DiscreteEmpirical(tuple(support), tuple(_renormalize(probs)))

    _require_spread(x, w, family)
    if family == "exponential":
        if np.any(x < 0):
            raise FitError("exponential samples must be nonnegative")
        return Exponential(1.0 / float(np.dot(w, x)))
    if family == "uniform":
        used = x[w > 0]
        return Uniform(float(used.min()), float(used.max()))
    if family == "pareto":
        scale = float(x[w > 0].min()) if scale is None else float(scale)
        if np.any(x[w > 0] < scale):
            raise FitError("pareto samples below the fixed scale")
        mean_log = float(np.dot(w, np.log(x / scale)))
        if mean_log <= 0:
            raise FitError("degenerate samples: pareto fit needs spread above scale")
        return Pareto(scale, 1.0 / mean_log)
    # truncated normal: numeric maximization over (mean, log sd) with fixed bounds
    if lo is None or hi is None:
        raise FitError("truncated_normal fit needs fixed lo and hi bounds")
    if np.any((x < lo) | (x > hi)):
        raise FitError("samples outside the truncation bounds")
    return _fit_truncated_normal(x, w, float(lo), float(hi))


def _fit_truncated_normal(x, w, lo, hi) -> TruncatedNormal:
    m0 = float(np.dot(w, x))
    s0 = math.sqrt(float(np.dot(w, (x - m0) ** 2)))
    span = hi - lo

    def nll(p):
        mu, log_sd = p
        sd = math.exp(log_sd)
        z = (x - mu) / sd
        lm = float(_log_mass((lo - mu) / sd, (hi - mu) / sd))
        if not math.isfinite(lm):
            return 1e300
        return float(np.dot(w, 0.5 * z * z)) + log_sd + lm

    res = optimize.minimize(
        nll,
        x0=[m0, math.log(s0)],
        method="Nelder-Mead",
        options={"xatol": 1e-10 * max(1.0, span), "fatol": 1e-13, "maxiter": 4000},
    )
    mu, log_sd = res.x
    if not res.success and not np.all(np.isfinite(res.x)):
        raise FitError(f"truncated normal fit failed: {res.message}")
    return TruncatedNormal(float(mu), float(math.exp(log_sd)), lo, hi)


def fit_like(template: DistributionSpec, samples, weights=None) -> DistributionSpec:
    """Weighted MLE in ``template``'s family keeping its support-defining parameters fixed."""
    if isinstance(template, TruncatedNormal):
        return fit_mle(template.family, samples, weights, lo=template.lo, hi=template.hi)
    if isinstance(template, Pareto):
        return fit_mle(template.family, samples, weights, scale=template.scale)
    if isinstance(template, DiscreteEmpirical):
        return fit_mle(template.family, samples, weights, values=template.values)
    if isinstance(template, Uniform):
        # refitting [min, max] would shrink the support below the natural one
        return template
    return fit_mle(template.family, samples, weights)


def smooth(new: DistributionSpec, old: DistributionSpec, alpha: float) -> DistributionSpec:
    """Parameter-space blend ``alpha * new + (1 - alpha) * old`` (same family and fixed params)."""
    if type(new) is not type(old):
        raise TypeError("can only smooth within one family")
    mix = lambda a, b: alpha * a + (1.0 - alpha) * b  # noqa: E731
    if isinstance(new, Exponential):
        return Exponential(mix(new.rate, old.rate))
    if isinstance(new, TruncatedNormal):
        return TruncatedNormal(mix(new.mean, old.mean), mix(new.sd, old.sd), old.lo, old.hi)
    if isinstance(new, Pareto):
        return Pareto(old.scale, mix(new.shape, old.shape))
    if isinstance(new, DiscreteEmpirical):
        probs = [mix(a, b) for a, b in zip(new.probs, old.probs)]
        return DiscreteEmpirical(old.values, tuple(_renormalize(probs)))
    return old
