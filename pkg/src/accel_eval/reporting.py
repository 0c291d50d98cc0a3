"""Per-event probabilities to per-mile rates, baseline comparison, and report files."""
from __future__ import annotations

import csv
import json
import math
import os
from dataclasses import asdict, dataclass
from pathlib import Path
from statistics import NormalDist
from typing import Mapping, Sequence

import numpy as np

from .estimator import Estimate, confidence_interval

SAFER = "SAFER_AT_CONFIDENCE"
NOT_ESTABLISHED = "NOT_ESTABLISHED"
EQUIVALENT_MILES_DEFINITION = (
    "equivalent_miles = (episodes / events_per_mile) * acceleration_factor; "
    "test miles are scenario-exposure miles, not odometer distance"
)

# initiating-event exposure per mile when no measured rate is configured
DEFAULT_EXPOSURE = {"car_following": 1.0, "cut_in": 0.2}


@dataclass(frozen=True)
class ExposureModel:
    events_per_mile: float
    source_tag: str = "synthetic-default"

    def __post_init__(self):
        if not self.events_per_mile > 0:
            raise ValueError("events_per_mile must be positive")

    @classmethod
    def default_for(cls, scenario: str) -> "ExposureModel":
        return cls(DEFAULT_EXPOSURE.get(scenario, 1.0), "synthetic-default")


@dataclass(frozen=True)
class HumanBaseline:
    police_reported_crash_rate: float = 1 / 530_000
    fatal_rate: float = 1 / 100_000_000
    incident_data_rate: float = 1 / 100_000

    def __post_init__(self):
        if min(self.police_reported_crash_rate, self.fatal_rate, self.incident_data_rate) <= 0:
            raise ValueError("baseline rates must be positive")
        if self.fatal_rate > self.police_reported_crash_rate:
            raise ValueError("fatal rate cannot exceed the police-reported crash rate")

    def for_metric(self, metric: str) -> float:
        return {
            "crash": self.police_reported_crash_rate,
            "injury": self.fatal_rate,
            "conflict": self.incident_data_rate,
        }[metric]


@dataclass(frozen=True)
class PerMileRate:
    rate: float
    ci: tuple[float, float]
    miles_per_event: float


@dataclass(frozen=True)
class Verdict:
    verdict: str
    improvement: float
    upper_bound: float
    threshold: float
    baseline: float


def per_event_to_per_mile(p_event: float | Estimate, exposure: ExposureModel) -> PerMileRate:
    if isinstance(p_event, Estimate):
        p, (lo, hi) = p_event.p_hat, p_event.ci
    else:
        p, lo, hi = float(p_event), float(p_event), float(p_event)
    k = exposure.events_per_mile
    rate = p * k
    return PerMileRate(rate, (lo * k, hi * k), 1.0 / rate if rate > 0 else math.inf)


def safety_comparison(av_rate: PerMileRate | tuple[float, tuple[float, float]], baseline: float,
                      required_improvement: float = 0.9) -> Verdict:
    """SAFER_AT_CONFIDENCE iff the rate's upper CI bound is at most ``(1 - improvement) * baseline``."""
    if baseline <= 0:
        raise ValueError("baseline must be positive")
    rate, (_, hi) = (av_rate.rate, av_rate.ci) if isinstance(av_rate, PerMileRate) else av_rate
    threshold = (1.0 - required_improvement) * baseline
    # boundary is inclusive; the slack absorbs rounding in 1 - improvement (1 - 0.9 != 0.1)
    safe = hi <= threshold * (1.0 + 1e-12)
    return Verdict(SAFER if safe else NOT_ESTABLISHED, 1.0 - rate / baseline, hi, threshold, baseline)


def required_naturalistic_miles(baseline_rate: float, required_improvement: float, confidence: float,
                                method: str = "demonstration") -> float:
    """Naturalistic miles needed to support the improvement claim at ``confidence``.

    ``demonstration``: failure-free mileage after which the one-sided Poisson
    upper bound on the AV rate, ``-ln(1 - confidence) / M``, drops to
    ``(1 - improvement) * baseline``.

    ``normal``: one-sided normal test separating an AV at
    ``(1 - improvement) * baseline`` from the baseline with Poisson variance
    ``baseline * M``, i.e. ``M = z^2 / (improvement^2 * baseline)``.
    """
    if not 0 < required_improvement < 1:
        raise ValueError("required_improvement must be in (0, 1)")
    if not 0 < confidence < 1 or baseline_rate <= 0:
        raise ValueError("need 0 < confidence < 1 and baseline_rate > 0")
    if method == "demonstration":
        return -math.log1p(-confidence) / ((1.0 - required_improvement) * baseline_rate)
    if method == "normal":
        if confidence <= 0.5:
            raise ValueError("one-sided normal test needs confidence > 0.5")
        z = NormalDist().inv_cdf(confidence)
        return z * z * baseline_rate / (required_improvement * baseline_rate) ** 2
    raise ValueError(f"unknown method {method!r}")


def equivalent_miles(n_episodes: int, exposure: ExposureModel, acceleration_factor: float) -> float:
    if n_episodes <= 0 or acceleration_factor <= 0:
        raise ValueError("n_episodes and acceleration_factor must be positive")
    return n_episodes / exposure.events_per_mile * acceleration_factor


def weight_histogram(weights, bin_width: float = 0.5) -> list[tuple[float, float, int]]:
    """Counts of log10(weight) in bins of ``bin_width`` decades; zero weights are skipped."""
    w = np.asarray(weights, dtype=float)
    w = w[w > 0]
    if w.size == 0:
        return []
    idx = np.floor(np.log10(w) / bin_width).astype(np.int64)
    bins, counts = np.unique(idx, return_counts=True)
    return [(float(b * bin_width), float((b + 1) * bin_width), int(c)) for b, c in zip(bins, counts)]


def convergence_trace(y, confidence: float, batch_size: int) -> list[tuple[int, float, float, float]]:
    """Cumulative estimate after each batch of per-episode contributions ``y = w * m``."""
    y = np.asarray(y, dtype=float)
    rows = []
    for stop in list(range(batch_size, y.size, batch_size)) + [y.size]:
        head = y[:stop]
        p = float(np.sum(head)) / stop
        var = float(np.var(head, ddof=1)) / stop if stop > 1 else 0.0
        lo, hi = confidence_interval(p, var, confidence)
        rows.append((stop, p, lo, hi))
    return rows


def build_report(estimates: Sequence[Estimate], exposure: ExposureModel, baseline: HumanBaseline,
                 factors: Mapping[str, float], metadata: Mapping, required_improvement: float = 0.9) -> dict:
    """Assemble the report dictionary (the JSON document, before serialization)."""
    if not estimates:
        raise ValueError("report needs at least one estimate")
    rows = []
    for est in estimates:
        rate = per_event_to_per_mile(est, exposure)
        verdict = safety_comparison(rate, baseline.for_metric(est.metric), required_improvement)
        factor = factors.get(est.metric, 1.0)
        rows.append({
            **est.to_dict(),
            "per_mile_rate": rate.rate,
            "per_mile_ci": list(rate.ci),
            "miles_per_event": rate.miles_per_event,
            "acceleration_factor": factor,
            "verdict": asdict(verdict),
        })
    primary = rows[0]
    n_total = sum(e.n + e.invalid_count for e in estimates[:1])
    factor = primary["acceleration_factor"]
    return {
        "run_id": metadata.get("run_id", "run"),
        "seed": metadata.get("seed"),
        "scenario": metadata.get("scenario"),
        "policy_id": metadata.get("policy_id"),
        "method": metadata.get("method", estimates[0].method),
        "deterministic": bool(metadata.get("deterministic", True)),
        "estimates": rows,
        "exposure": asdict(exposure),
        "baseline": asdict(baseline),
        "required_improvement": required_improvement,
        "acceleration_factor": factor,
        "equivalent_miles": equivalent_miles(n_total, exposure, factor) if math.isfinite(factor) else math.inf,
        "equivalent_miles_definition": EQUIVALENT_MILES_DEFINITION,
        "verdict": primary["verdict"]["verdict"],
        "non_converged": any(e.converged is False for e in estimates),
        "proposal": metadata.get("proposal"),
        "convergence": [list(r) for r in metadata.get("convergence", [])],
        "weights_histogram": [list(r) for r in metadata.get("weights_histogram", [])],
        "timing": {"wall_s": float(metadata.get("wall_s", 0.0))},
    }


def report_to_json(report: Mapping) -> str:
    # float repr is the shortest string that round-trips to the same double
    return json.dumps(report, indent=2, sort_keys=False)


def summary_text(report: Mapping) -> str:
    lines = [
        f"run {report['run_id']}  scenario={report['scenario']}  method={report['method']}  seed={report['seed']}",
        f"policy {report['policy_id']}",
        f"exposure {report['exposure']['events_per_mile']:.6g} events/mile ({report['exposure']['source_tag']})",
    ]
    if not report.get("deterministic", True):
        lines.append("external policy plug-in: results are not bit-reproducible")
    for e in report["estimates"]:
        lo, hi = e["ci"]
        conf = e["confidence"]
        lines += [
            "",
            f"[{e['metric']}] p_event = {e['p_hat']:.6g}  ({conf:.0%} CI {lo:.6g} .. {hi:.6g})  n={e['n']}"
            f"  ess={e['ess']:.1f}  invalid={e['invalid_count']}",
            f"  per-mile rate {e['per_mile_rate']:.6g}  (CI {e['per_mile_ci'][0]:.6g} .. {e['per_mile_ci'][1]:.6g})"
            f"  = one per {e['miles_per_event']:.6g} miles",
            f"  vs baseline {e['verdict']['baseline']:.6g}/mile: improvement {e['verdict']['improvement']:.3f}"
            f" -> {e['verdict']['verdict']}",
        ]
        if e.get("converged") is False:
            lines.append("  NOT CONVERGED")
        for d in e.get("diagnostics", []):
            lines.append(f"  note: {d}")
    lines += [
        "",
        f"acceleration factor {report['acceleration_factor']:.6g}",
        f"equivalent miles {report['equivalent_miles']:.6g}",
        f"  ({report['equivalent_miles_definition']})",
        f"wall time {report['timing']['wall_s']:.2f} s",
    ]
    return "\n".join(lines) + "\n"


def _write(path: Path, text: str):
    try:
        path.write_text(text)
    except OSError as exc:
        raise OSError(f"cannot write {path}: {exc}") from exc


def write_plot_csvs(report: Mapping, out_dir: os.PathLike) -> None:
    out = Path(out_dir)
    try:
        with open(out / "convergence.csv", "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["n", "p_hat", "ci_lo", "ci_hi"])
            for n, p, lo, hi in report["convergence"]:
                w.writerow([int(n), repr(float(p)), repr(float(lo)), repr(float(hi))])
        with open(out / "weights.csv", "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["log10_bin_lo", "log10_bin_hi", "count"])
            for lo, hi, c in report["weights_histogram"]:
                w.writerow([repr(float(lo)), repr(float(hi)), int(c)])
    except OSError as exc:
        raise OSError(f"cannot write plot data in {out}: {exc}") from exc


def render_report(estimates: Sequence[Estimate], exposure: ExposureModel, baseline: HumanBaseline,
                  factors: Mapping[str, float], metadata: Mapping, out_dir: os.PathLike,
                  required_improvement: float = 0.9) -> dict:
    """Write ``report.json``, ``summary.txt``, ``convergence.csv`` and ``weights.csv``."""
    report = build_report(estimates, exposure, baseline, factors, metadata, required_improvement)
    out = Path(out_dir)
    try:
        out.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise OSError(f"cannot create output directory {out}: {exc}") from exc
    _write(out / "report.json", report_to_json(report))
    _write(out / "summary.txt", summary_text(report))
    write_plot_csvs(report, out)
    return report


def load_report(path: os.PathLike) -> dict:
    with open(path) as fh:
        return json.load(fh)
