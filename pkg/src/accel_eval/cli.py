"""Command-line entry point: ``accel-eval {fit,run,compare,report}``.

Exit codes: 0 ok, 2 config error, 3 data error, 4 non-converged,
5 policy fault, 6 disagreement between compared reports.
"""
from __future__ import annotations

import argparse
import json
import logging
import math
import os
import sys
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np

from . import data_ingest, reporting
from .behavior_models import FAMILIES, DistributionError, FitError, ThreatModel
from .estimator import (
    METRICS,
    CEConfig,
    EpisodeBatch,
    EstimationError,
    StoppingRule,
    ce_optimize,
    estimate_from_batch,
    run_batch,
    run_until_converged,
)
from .sim_engine import (
    EpisodeParams,
    ExternalPolicy,
    PolicyFaultError,
    ScenarioSimulator,
    SimConfig,
    aeb_overlay,
    idm_policy,
    run_episode,
    write_trajectory_csv,
)

EXIT_OK, EXIT_CONFIG, EXIT_DATA, EXIT_NONCONVERGED, EXIT_POLICY, EXIT_DISAGREE = 0, 2, 3, 4, 5, 6
METHODS = ("crude", "is", "is_ce")
POLICY_KINDS = ("idm", "idm_aeb", "external")
AGREEMENT_Z = 3.0
DUMP_LIMIT = 5

log = logging.getLogger("accel_eval")


class ConfigError(ValueError):
    pass


class DataError(ValueError):
    pass


# ---------------------------------------------------------------- run configuration


@dataclass
class RunConfig:
    scenario: str
    policy: Mapping
    threat_model: ThreatModel
    method: str
    master_seed: int
    n: int | None = None
    stopping_rule: StoppingRule | None = None
    proposal: ThreatModel | None = None
    metrics: tuple[str, ...] = ("crash",)
    confidence: float = 0.80
    sim: SimConfig = field(default_factory=SimConfig)
    ce: CEConfig = field(default_factory=CEConfig)
    exposure: reporting.ExposureModel | None = None
    baseline: reporting.HumanBaseline = field(default_factory=reporting.HumanBaseline)
    required_improvement: float = 0.9
    output_dir: str = "out"
    run_id: str = "run"
    workers: int = 1

    KEYS = {"scenario", "policy", "threat_model", "method", "master_seed", "n", "stopping_rule", "proposal",
            "metrics", "confidence", "sim", "ce", "exposure", "baseline", "required_improvement", "output_dir",
            "run_id", "workers"}

    @classmethod
    def from_dict(cls, data: Mapping, base_dir: os.PathLike = ".") -> "RunConfig":
        """Validate a config document; relative file paths resolve against ``base_dir``."""
        if not isinstance(data, Mapping):
            raise ConfigError("config must be a JSON object")
        unknown = set(data) - cls.KEYS
        if unknown:
            raise ConfigError(f"unknown config keys {sorted(unknown)}")
        for key in ("scenario", "policy", "threat_model", "method", "master_seed"):
            if key not in data:
                raise ConfigError(f"missing config key {key!r}")
        base = Path(base_dir)
        try:
            method = data["method"]
            if method not in METHODS:
                raise ConfigError(f"method must be one of {METHODS}, got {method!r}")
            if ("n" in data) == ("stopping_rule" in data):
                raise ConfigError("give exactly one of 'n' and 'stopping_rule'")
            n = data.get("n")
            if n is not None and (not isinstance(n, int) or isinstance(n, bool) or n < 2):
                raise ConfigError("n must be an integer >= 2")
            rule = StoppingRule(**data["stopping_rule"]) if "stopping_rule" in data else None
            seed = data["master_seed"]
            if not isinstance(seed, int) or isinstance(seed, bool) or seed < 0:
                raise ConfigError("master_seed must be a nonnegative integer")
            model = _load_model(data["threat_model"], base, "threat_model")
            scenario = data["scenario"]
            if model.scenario != scenario:
                raise ConfigError(f"threat model scenario {model.scenario!r} != config scenario {scenario!r}")
            proposal = _load_model(data["proposal"], base, "proposal") if "proposal" in data else None
            if method == "is" and proposal is None:
                raise ConfigError("method 'is' needs a 'proposal' threat model")
            metrics = tuple(data.get("metrics", ("crash",)))
            if not metrics or any(m not in METRICS for m in metrics):
                raise ConfigError(f"metrics must be a nonempty subset of {METRICS}")
            policy = dict(data["policy"])
            _build_policy(policy)
            exposure = reporting.ExposureModel(**data["exposure"]) if "exposure" in data else None
            workers = int(data.get("workers", 1))
            if workers < 1:
                raise ConfigError("workers must be >= 1")
            return cls(
                scenario=scenario,
                policy=policy,
                threat_model=model,
                method=method,
                master_seed=seed,
                n=n,
                stopping_rule=rule,
                proposal=proposal,
                metrics=metrics,
                confidence=float(data.get("confidence", rule.confidence if rule else 0.80)),
                sim=SimConfig.from_dict(data.get("sim", {})),
                ce=CEConfig(**{k: (v if k != "tilt_bounds" else {n_: tuple(b) for n_, b in v.items()})
                               for k, v in data.get("ce", {}).items()}),
                exposure=exposure,
                baseline=reporting.HumanBaseline(**data.get("baseline", {})),
                required_improvement=float(data.get("required_improvement", 0.9)),
                output_dir=str(base / data.get("output_dir", "out")),
                run_id=str(data.get("run_id", "run")),
                workers=workers,
            )
        except ConfigError:
            raise
        except (TypeError, ValueError, KeyError) as exc:
            raise ConfigError(f"invalid config: {exc}") from exc


def _load_model(entry: Mapping, base: Path, what: str) -> ThreatModel:
    if not isinstance(entry, Mapping) or len(entry) != 1 or not {"inline", "file"} >= set(entry):
        raise ConfigError(f"{what} must be {{'inline': {{...}}}} or {{'file': path}}")
    if "inline" in entry:
        return ThreatModel.from_dict(entry["inline"])
    path = base / entry["file"]
    if not path.is_file():
        raise ConfigError(f"{what} file {path} does not exist")
    return ThreatModel.from_json(path.read_text())


def _build_policy(entry: Mapping):
    kind = entry.get("kind")
    params = dict(entry.get("params", {}))
    if kind == "idm":
        return idm_policy(params)
    if kind == "idm_aeb":
        aeb = {k: params.pop(k) for k in ("trigger_ttc", "brake") if k in params}
        return aeb_overlay(idm_policy(params), aeb.get("trigger_ttc", 1.5), aeb.get("brake", 8.0))
    if kind == "external":
        cmd = entry.get("command")
        if not cmd or not isinstance(cmd, list):
            raise ConfigError("external policy needs a 'command' list")
        return ExternalPolicy(cmd, str(entry.get("policy_id", "external")), float(entry.get("timeout", 0.1)))
    raise ConfigError(f"policy kind must be one of {POLICY_KINDS}, got {kind!r}")


def load_run_config(path: os.PathLike) -> RunConfig:
    path = Path(path)
    try:
        data = json.loads(path.read_text())
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config {path} is not valid JSON: {exc}") from exc
    return RunConfig.from_dict(data, path.parent)


# ---------------------------------------------------------------- subcommands


def _parse_families(text: str | None) -> dict[str, str]:
    if not text:
        return {}
    out = {}
    for item in text.split(","):
        name, sep, fam = item.partition("=")
        if not sep:
            raise ConfigError(f"--families entries look like var=family, got {item!r}")
        if fam.strip() not in FAMILIES:
            raise ConfigError(f"unknown family {fam.strip()!r}; choose from {sorted(FAMILIES)}")
        out[name.strip()] = fam.strip()
    return out


def cmd_fit(args) -> int:
    if args.scenario not in data_ingest.KIND_FOR_SCENARIO:
        raise ConfigError(f"unknown scenario {args.scenario!r}")
    families = _parse_families(args.families)
    schema = set(data_ingest.SCENARIO_SCHEMAS[args.scenario])
    if set(families) - schema:
        raise ConfigError(f"--families names {sorted(set(families) - schema)} not in {sorted(schema)}")
    logs_dir = Path(args.logs)
    if not logs_dir.is_dir():
        raise ConfigError(f"--logs {logs_dir} is not a directory")
    events = []
    for path in sorted(logs_dir.glob("*.csv")):
        try:
            log_ = data_ingest.read_log_csv(path)
        except (data_ingest.LogParseError, ValueError) as exc:
            raise DataError(str(exc)) from exc
        events += data_ingest.extract_events(log_, args.min_decel, args.min_duration, args.gap_jump)
    if not events:
        raise DataError("no events extracted")
    try:
        model = data_ingest.build_threat_model(events, args.scenario, families)
    except (ValueError, FitError) as exc:
        raise DataError(str(exc)) from exc
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    out.write_text(model.to_json())
    if args.events_out:
        Path(args.events_out).write_text(data_ingest.events_to_json(events))
    for name, count in model.metadata["sample_counts"].items():
        print(f"{name}: {count} events")
    return EXIT_OK


def _estimate(cfg: RunConfig, simulator, proposal: ThreatModel, workers: int):
    """Estimates for every metric plus the concatenated episode batch."""
    natural = cfg.threat_model
    method = "crude" if cfg.method == "crude" else "importance"
    parts: list[EpisodeBatch] = []
    if cfg.n is not None:
        parts.append(run_batch(simulator, natural, proposal, np.arange(cfg.n), cfg.master_seed, workers=workers))
        batch = parts[0]
        primary = estimate_from_batch(batch, cfg.metrics[0], cfg.confidence, method, cfg.master_seed)
        y = _contributions(batch, cfg.metrics[0])
        primary.trace = reporting.convergence_trace(y, cfg.confidence, max(1, cfg.n // 20))
    else:
        def draw(start, stop):
            parts.append(run_batch(simulator, natural, proposal, np.arange(start, stop), cfg.master_seed,
                                   workers=workers))
            return parts[-1]

        primary = run_until_converged(draw, cfg.stopping_rule, cfg.metrics[0], method, cfg.master_seed)
        batch = EpisodeBatch.concat(parts)
    rest = [estimate_from_batch(batch, m, cfg.confidence, method, cfg.master_seed) for m in cfg.metrics[1:]]
    for e in rest:
        e.converged = primary.converged
    return [primary, *rest], batch


def _contributions(batch: EpisodeBatch, metric: str) -> np.ndarray:
    valid = batch.outcomes.valid
    return batch.weights[valid] * batch.outcomes.metric_values(metric)[valid]


def _factor(est, crude: bool) -> float:
    if crude:
        return 1.0
    psv = est.per_sample_variance
    if psv == 0:
        return math.inf if est.p_hat > 0 else 1.0
    return est.natural_variance / psv


def _dump_trajectories(cfg: RunConfig, policy, batch: EpisodeBatch, out_dir: Path) -> int:
    valid = batch.outcomes.valid
    event = batch.outcomes.event(cfg.metrics[0]) & valid
    picks = np.flatnonzero(event)[:DUMP_LIMIT]
    if picks.size == 0:
        picks = np.flatnonzero(valid)[:DUMP_LIMIT]
    target = out_dir / "trajectories"
    target.mkdir(parents=True, exist_ok=True)
    names = cfg.threat_model.names
    for i in picks:
        params = EpisodeParams(cfg.scenario, dict(zip(names, map(float, batch.x[i]))),
                               float(batch.natural_density[i]), float(batch.proposal_density[i]))
        res = run_episode(policy, params, cfg.sim, int(batch.indices[i]), record=True)
        write_trajectory_csv(target / f"episode_{int(batch.indices[i]):08d}.csv", res.trajectory)
    return int(picks.size)


def execute_run(cfg: RunConfig, workers: int | None = None, dump_trajectories: bool = False) -> tuple[dict, int]:
    """Run the configured estimation and write the report; returns (report, exit code)."""
    t0 = time.perf_counter()
    workers = cfg.workers if workers is None else workers
    policy = _build_policy(cfg.policy)
    simulator = ScenarioSimulator(policy, cfg.scenario, cfg.sim)
    natural = cfg.threat_model
    if cfg.method == "crude":
        proposal = natural
    elif cfg.method == "is":
        proposal = cfg.proposal
    else:
        proposal = ce_optimize(simulator, natural, cfg.ce, cfg.metrics[0], cfg.master_seed, workers)
    estimates, batch = _estimate(cfg, simulator, proposal, workers)
    crude = cfg.method == "crude"
    factors = {e.metric: _factor(e, crude) for e in estimates}
    exposure = cfg.exposure or reporting.ExposureModel.default_for(cfg.scenario)
    valid = batch.outcomes.valid
    meta = {
        "run_id": cfg.run_id,
        "seed": cfg.master_seed,
        "scenario": cfg.scenario,
        "policy_id": simulator.policy_id,
        "method": cfg.method,
        "deterministic": simulator.deterministic,
        "proposal": proposal.to_dict(),
        "convergence": estimates[0].trace,
        "weights_histogram": reporting.weight_histogram(batch.weights[valid]),
        "wall_s": time.perf_counter() - t0,
    }
    out_dir = Path(cfg.output_dir)
    report = reporting.render_report(estimates, exposure, cfg.baseline, factors, meta, out_dir,
                                     cfg.required_improvement)
    if dump_trajectories:
        _dump_trajectories(cfg, policy, batch, out_dir)
    code = EXIT_NONCONVERGED if report["non_converged"] else EXIT_OK
    return report, code


def _resolve_workers(flag: int | None, cfg: RunConfig) -> int:
    if flag is not None:
        workers = flag
    elif os.environ.get("ACCEL_EVAL_WORKERS"):
        try:
            workers = int(os.environ["ACCEL_EVAL_WORKERS"])
        except ValueError:
            raise ConfigError("ACCEL_EVAL_WORKERS must be an integer") from None
    else:
        workers = cfg.workers
    if workers < 1:
        raise ConfigError("worker count must be >= 1")
    return workers


def cmd_run(args) -> int:
    cfg = load_run_config(args.config)
    if os.environ.get("ACCEL_EVAL_OUT"):
        cfg.output_dir = os.environ["ACCEL_EVAL_OUT"]
    workers = _resolve_workers(args.workers, cfg)
    try:
        report, code = execute_run(cfg, workers, args.dump_trajectories)
    except EstimationError as exc:
        raise DataError(str(exc)) from exc
    print(reporting.summary_text(report), end="")
    print(f"report written to {Path(cfg.output_dir) / 'report.json'}")
    return code


def compare_reports(a: Mapping, b: Mapping) -> dict:
    """z-score of the difference of two reports' primary estimates and their variance ratio."""
    if a.get("scenario") != b.get("scenario"):
        raise ConfigError(f"scenario mismatch: {a.get('scenario')!r} vs {b.get('scenario')!r}")
    ea, eb = a["estimates"][0], b["estimates"][0]
    if ea["metric"] != eb["metric"]:
        raise ConfigError(f"metric mismatch: {ea['metric']!r} vs {eb['metric']!r}")
    diff = ea["p_hat"] - eb["p_hat"]
    se = math.sqrt(ea["variance"] + eb["variance"])
    if se > 0:
        z = diff / se
    else:
        z = 0.0 if diff == 0 else math.copysign(math.inf, diff)
    psv_a, psv_b = ea["variance"] * ea["n"], eb["variance"] * eb["n"]
    if psv_b > 0:
        factor = psv_a / psv_b
    else:
        factor = 1.0 if psv_a == 0 else math.inf
    return {
        "scenario": a["scenario"],
        "metric": ea["metric"],
        "a": {"run_id": a.get("run_id"), "method": a.get("method"), "p_hat": ea["p_hat"], "ci": ea["ci"],
              "std_error": math.sqrt(ea["variance"]), "n": ea["n"]},
        "b": {"run_id": b.get("run_id"), "method": b.get("method"), "p_hat": eb["p_hat"], "ci": eb["ci"],
              "std_error": math.sqrt(eb["variance"]), "n": eb["n"]},
        "z": z,
        "agree": abs(z) <= AGREEMENT_Z,
        "acceleration_factor": factor,
    }


def _read_report(path: str) -> dict:
    try:
        return reporting.load_report(path)
    except OSError as exc:
        raise DataError(f"cannot read report {path}: {exc}") from exc
    except json.JSONDecodeError as exc:
        raise DataError(f"report {path} is not valid JSON: {exc}") from exc


def cmd_compare(args) -> int:
    a, b = _read_report(args.report_a), _read_report(args.report_b)
    try:
        cmp = compare_reports(a, b)
    except KeyError as exc:
        raise DataError(f"report is missing field {exc}") from exc
    out = Path(args.out or Path(os.environ.get("ACCEL_EVAL_OUT", ".")) / "comparison.json")
    out.parent.mkdir(parents=True, exist_ok=True)
    out.write_text(json.dumps(cmp, indent=2))
    print(f"{cmp['metric']} ({cmp['scenario']})")
    for side in ("a", "b"):
        r = cmp[side]
        print(f"  {side}: {r['method']:<6} p_hat={r['p_hat']:.6g}  se={r['std_error']:.3g}  n={r['n']}")
    print(f"  z = {cmp['z']:.3f}  -> {'AGREE' if cmp['agree'] else 'DISAGREE'} (|z| <= {AGREEMENT_Z:g})")
    print(f"  acceleration factor a/b = {cmp['acceleration_factor']:.6g}")
    return EXIT_OK if cmp["agree"] else EXIT_DISAGREE


def cmd_report(args) -> int:
    report = _read_report(args.report)
    out = Path(args.out) if args.out else Path(args.report).parent
    out.mkdir(parents=True, exist_ok=True)
    try:
        (out / "summary.txt").write_text(reporting.summary_text(report))
        reporting.write_plot_csvs(report, out)
    except KeyError as exc:
        raise DataError(f"report is missing field {exc}") from exc
    print(reporting.summary_text(report), end="")
    return EXIT_OK


# ---------------------------------------------------------------- argument parsing


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(
        prog="accel-eval",
        description="Accelerated (importance-sampled) safety evaluation of driving policies.",
        epilog="exit codes: 0 ok, 2 config error, 3 data error, 4 non-converged, 5 policy fault, "
               "6 disagreement. Environment: ACCEL_EVAL_WORKERS, ACCEL_EVAL_OUT.",
    )
    p.add_argument("-v", "--verbose", action="store_true", help="debug logging")
    sub = p.add_subparsers(dest="command", required=True)

    f = sub.add_parser("fit", help="extract events from drive logs and fit a threat model")
    f.add_argument("--logs", required=True, help="directory of CSV drive logs (t,lead_speed,gap)")
    f.add_argument("--scenario", required=True, choices=sorted(data_ingest.KIND_FOR_SCENARIO))
    f.add_argument("--families", default=None, help="per-variable families, e.g. d=truncated_normal,tau=exponential")
    f.add_argument("--out", required=True, help="output threat model JSON")
    f.add_argument("--events-out", default=None, help="also write the extracted events JSON here")
    f.add_argument("--min-decel", type=float, default=2.0, help="brake-event deceleration threshold, m/s^2")
    f.add_argument("--min-duration", type=float, default=0.5, help="brake-event minimum duration, s")
    f.add_argument("--gap-jump", type=float, default=5.0, help="cut-in one-step gap drop, m")
    f.set_defaults(func=cmd_fit)

    r = sub.add_parser("run", help="run an estimation from a JSON run config")
    r.add_argument("--config", required=True, help="run config JSON")
    r.add_argument("--workers", type=int, default=None, help="worker processes (overrides ACCEL_EVAL_WORKERS)")
    r.add_argument("--dump-trajectories", action="store_true",
                   help=f"write up to {DUMP_LIMIT} event-episode trajectories as CSV")
    r.set_defaults(func=cmd_run)

    c = sub.add_parser("compare", help="compare the primary estimates of two reports")
    c.add_argument("--report-a", required=True, help="first report JSON (e.g. crude)")
    c.add_argument("--report-b", required=True, help="second report JSON (e.g. accelerated)")
    c.add_argument("--out", default=None, help="comparison JSON path (default: $ACCEL_EVAL_OUT or ./comparison.json)")
    c.set_defaults(func=cmd_compare)

    rp = sub.add_parser("report", help="re-render summary text and plot CSVs from a report JSON")
    rp.add_argument("--report", required=True, help="report JSON")
    rp.add_argument("--out", default=None, help="output directory (default: the report's directory)")
    rp.set_defaults(func=cmd_report)
    return p


def main(argv: Sequence[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        # argparse uses 2 for usage errors and 0 for --help
        return int(exc.code or 0)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (DataError, EstimationError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except PolicyFaultError as exc:
        print(f"policy fault [{exc.policy_id}]: {exc}", file=sys.stderr)
        return EXIT_POLICY
    except (DistributionError, ValueError, OSError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
