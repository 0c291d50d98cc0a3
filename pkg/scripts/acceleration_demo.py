"""Measured acceleration factors on the analytic threshold toy and the inflated car-following fixture.

    python3 scripts/acceleration_demo.py --n 20000 --workers 4
"""
import argparse
import math
import time

from accel_eval.estimator import CEConfig, acceleration_factor, ce_optimize, importance_sampling
from accel_eval.fixtures import ThresholdScenario, exponential_model, inflated_car_following, inflated_simulator
from accel_eval.reporting import ExposureModel, equivalent_miles


def main():
    ap = argparse.ArgumentParser(description=__doc__, formatter_class=argparse.RawDescriptionHelpFormatter)
    ap.add_argument("--n", type=int, default=20_000)
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--workers", type=int, default=1)
    args = ap.parse_args()

    print(f"{'scenario':<28}{'p_hat':>12}{'rel.SE':>9}{'factor':>11}{'equiv. miles':>15}{'wall':>8}")
    for threshold in (6.0, 10.0, 13.8, 18.0):
        t0 = time.perf_counter()
        sc, nat = ThresholdScenario(threshold), exponential_model()
        prop = ce_optimize(sc, nat, CEConfig(), "crash", args.seed)
        est = importance_sampling(sc, nat, prop, "crash", args.n, args.seed + 1)
        p = math.exp(-threshold)
        f = acceleration_factor(p * (1 - p), est)
        miles = equivalent_miles(args.n, ExposureModel(1.0), f)
        print(f"{'X>' + str(threshold):<28}{est.p_hat:>12.4g}{est.std_error / est.p_hat:>9.3f}{f:>11.4g}"
              f"{miles:>15.4g}{time.perf_counter() - t0:>7.1f}s")

    t0 = time.perf_counter()
    sim, nat = inflated_simulator(), inflated_car_following()
    prop = ce_optimize(sim, nat, CEConfig(), "crash", args.seed, args.workers)
    est = importance_sampling(sim, nat, prop, "crash", args.n, args.seed + 1, workers=args.workers)
    f = est.natural_variance / est.per_sample_variance
    miles = equivalent_miles(args.n, ExposureModel.default_for("car_following"), f)
    print(f"{'inflated car-following':<28}{est.p_hat:>12.4g}{est.std_error / est.p_hat:>9.3f}{f:>11.4g}"
          f"{miles:>15.4g}{time.perf_counter() - t0:>7.1f}s")


if __name__ == "__main__":
    main()
