"""Naturalistic-mileage requirements under both formulas for each human baseline.

    python3 scripts/required_miles.py --improvement 0.9 --confidence 0.8
"""
import argparse

from accel_eval.reporting import HumanBaseline, required_naturalistic_miles


def main():
    ap = argparse.ArgumentParser(description=__doc__, formatter_class=argparse.RawDescriptionHelpFormatter)
    ap.add_argument("--improvement", type=float, default=0.9)
    ap.add_argument("--confidence", type=float, default=0.8)
    args = ap.parse_args()
    base = HumanBaseline()
    for label, rate in (("police-reported crash", base.police_reported_crash_rate),
                        ("fatal", base.fatal_rate), ("incident", base.incident_data_rate)):
        demo = required_naturalistic_miles(rate, args.improvement, args.confidence, "demonstration")
        normal = required_naturalistic_miles(rate, args.improvement, args.confidence, "normal")
        print(f"{label:<22} rate {rate:.3g}/mile   zero-failure demonstration {demo:.3g} mi"
              f"   one-sided normal {normal:.3g} mi")


if __name__ == "__main__":
    main()
