"""Crude Monte Carlo against CE-accelerated importance sampling on the inflated fixture.

    python3 scripts/estimator_agreement.py --crude-n 200000 --is-n 20000 --workers 8
"""
import argparse
import math
import time

from accel_eval.estimator import CEConfig, ce_optimize, crude_mc, importance_sampling
from accel_eval.fixtures import inflated_car_following, inflated_simulator
from accel_eval.sim_engine import IDMPolicy, aeb_overlay


def main():
    ap = argparse.ArgumentParser(description=__doc__, formatter_class=argparse.RawDescriptionHelpFormatter)
    ap.add_argument("--crude-n", type=int, default=200_000)
    ap.add_argument("--is-n", type=int, default=20_000)
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--workers", type=int, default=8)
    ap.add_argument("--aeb", action="store_true", help="evaluate IDM with the emergency-braking layer")
    args = ap.parse_args()

    policy = aeb_overlay(IDMPolicy(), 1.5, 8.0) if args.aeb else IDMPolicy()
    sim, nat = inflated_simulator(policy), inflated_car_following()
    for metric in ("crash", "conflict", "injury"):
        t0 = time.perf_counter()
        crude = crude_mc(sim, nat, metric, args.crude_n, args.seed, workers=args.workers)
        prop = ce_optimize(sim, nat, CEConfig(), metric, args.seed + 1, args.workers)
        acc = importance_sampling(sim, nat, prop, metric, args.is_n, args.seed + 2, workers=args.workers)
        se = math.sqrt(crude.variance + acc.variance)
        z = (crude.p_hat - acc.p_hat) / se if se > 0 else 0.0
        ratio = crude.per_sample_variance / acc.per_sample_variance if acc.variance > 0 else math.inf
        print(f"{metric:<9} crude {crude.p_hat:.5g} +- {crude.std_error:.2g}   IS {acc.p_hat:.5g} +- "
              f"{acc.std_error:.2g}   z={z:+.2f}  variance ratio {ratio:.1f}  ({time.perf_counter() - t0:.1f}s)")


if __name__ == "__main__":
    main()
