"""Synthetic logs -> extracted events -> fitted threat models, scored against the generator.

    python3 scripts/pipeline_closure.py --logs 10 --duration 66000 --out fitted/
"""
import argparse
from pathlib import Path

from accel_eval.behavior_models import mean_of
from accel_eval.data_ingest import (
    LogProfile,
    build_threat_model,
    events_to_json,
    extract_events,
    generate_synthetic_log,
    match_events,
    write_log_csv,
)


def main():
    ap = argparse.ArgumentParser(description=__doc__, formatter_class=argparse.RawDescriptionHelpFormatter)
    ap.add_argument("--logs", type=int, default=10)
    ap.add_argument("--duration", type=float, default=66_000.0)
    ap.add_argument("--out", type=Path, default=None, help="also write logs, events and models here")
    args = ap.parse_args()

    prof = LogProfile(duration=args.duration, brake_rate=1 / 30, cut_in_rate=1 / 60)
    found, truth = [], []
    for seed in range(args.logs):
        synth = generate_synthetic_log(prof, seed)
        found += extract_events(synth.log)
        truth += synth.truth
        if args.out:
            args.out.mkdir(parents=True, exist_ok=True)
            write_log_csv(synth.log, args.out / f"log_{seed:03d}.csv")
    precision, recall = match_events(found, truth)
    print(f"{len(truth)} embedded events, {len(found)} extracted: precision {precision:.4f} recall {recall:.4f}")

    generating = {
        "v0": prof.base_speed, "d": prof.brake_decel, "tau": prof.brake_duration,
        "R": prof.cut_in_gap, "closing": prof.cut_in_closing, "vL": prof.cut_in_lead_speed,
    }
    for scenario in ("car_following", "cut_in"):
        model = build_threat_model(found, scenario)
        for name, dist in model.variables.items():
            truth_mean = mean_of(generating[name])
            print(f"  {scenario:<14}{name:<8} fitted mean {mean_of(dist):8.4f}  generating {truth_mean:8.4f}"
                  f"  ({mean_of(dist) / truth_mean - 1:+.2%})")
        if args.out:
            (args.out / f"{scenario}.json").write_text(model.to_json())
    if args.out:
        (args.out / "events.json").write_text(events_to_json(found))


if __name__ == "__main__":
    main()
