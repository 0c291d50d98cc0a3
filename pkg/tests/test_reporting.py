import csv
import json
import math

import pytest
from hypothesis import given, strategies as st

from accel_eval.estimator import Estimate, confidence_interval
from accel_eval.reporting import (
    NOT_ESTABLISHED,
    SAFER,
    ExposureModel,
    HumanBaseline,
    PerMileRate,
    build_report,
    convergence_trace,
    equivalent_miles,
    load_report,
    per_event_to_per_mile,
    render_report,
    required_naturalistic_miles,
    safety_comparison,
    weight_histogram,
)


def _est(p=1e-4, var=1e-10, n=1000, metric="crash"):
    return Estimate(metric, "importance", p, var, confidence_interval(p, var), 0.8, n, 500.0, seed=3,
                    converged=None, second_moment=p)


class TestPerMile:
    def test_example(self):
        r = per_event_to_per_mile(1e-4, ExposureModel(0.5))
        assert r.rate == 5e-5 and r.miles_per_event == pytest.approx(20_000)

    def test_zero(self):
        r = per_event_to_per_mile(0.0, ExposureModel(0.5))
        assert r.rate == 0 and r.miles_per_event == math.inf

    def test_contrived(self):
        r = per_event_to_per_mile(5.3e-1, ExposureModel(1e-6))
        assert r.rate == pytest.approx(5.3e-7) and r.miles_per_event == pytest.approx(1.887e6, rel=1e-3)

    def test_ci_scaled(self):
        e = _est()
        r = per_event_to_per_mile(e, ExposureModel(0.25))
        assert r.ci == (e.ci[0] * 0.25, e.ci[1] * 0.25)

    @given(st.floats(0, 1), st.floats(1e-6, 1e3))
    def test_scaling_exact(self, p, k):
        assert per_event_to_per_mile(p, ExposureModel(k)).rate == p * k
        # with a power-of-two exposure the round trip is exact for normal floats
        k2 = 2.0 ** round(math.log2(k))
        if p == 0 or p > 1e-290:
            assert per_event_to_per_mile(p, ExposureModel(k2)).rate / k2 == p

    def test_exposure_validated(self):
        with pytest.raises(ValueError):
            ExposureModel(0.0)


class TestVerdict:
    def test_boundary_inclusive(self):
        v = safety_comparison(PerMileRate(0.05, (0.01, 0.1), 20.0), 1.0, 0.9)
        assert v.verdict == SAFER

    def test_equal_rate(self):
        v = safety_comparison(PerMileRate(1.0, (0.9, 1.1), 1.0), 1.0)
        assert v.improvement == 0 and v.verdict == NOT_ESTABLISHED

    def test_fatal_baseline_example(self):
        base = HumanBaseline().police_reported_crash_rate
        v = safety_comparison((2e-7, (1e-7, 3e-7)), base)
        assert v.verdict == NOT_ESTABLISHED and v.improvement == pytest.approx(0.894, abs=1e-3)

    @given(st.floats(1e-9, 1e-3), st.floats(1e-9, 1e-3), st.floats(1e-9, 1e-3))
    def test_monotone(self, hi1, hi2, base):
        lo_hi, hi_hi = sorted((hi1, hi2))
        a = safety_comparison((0.0, (0.0, lo_hi)), base)
        b = safety_comparison((0.0, (0.0, hi_hi)), base)
        if b.verdict == SAFER:
            assert a.verdict == SAFER

    def test_baseline_defaults(self):
        b = HumanBaseline()
        assert b.police_reported_crash_rate == 1 / 530_000
        assert b.fatal_rate == 1e-8 and b.incident_data_rate == 1e-5
        with pytest.raises(ValueError):
            HumanBaseline(fatal_rate=1e-3)


class TestRequiredMiles:
    def test_z_squared_scaling(self):
        # quantile 1.281552 at 0.80; doubling it needs the confidence with z = 2.563
        from statistics import NormalDist

        c2 = NormalDist().cdf(2 * NormalDist().inv_cdf(0.8))
        a = required_naturalistic_miles(1e-8, 0.9, 0.8, method="normal")
        b = required_naturalistic_miles(1e-8, 0.9, c2, method="normal")
        assert b / a == pytest.approx(4.0, rel=1e-9)

    def test_improvement_ratio(self):
        a = required_naturalistic_miles(1e-8, 0.5, 0.8, method="normal")
        b = required_naturalistic_miles(1e-8, 0.9, 0.8, method="normal")
        assert a / b == pytest.approx((0.9 / 0.5) ** 2)

    def test_fatal_order_of_magnitude(self):
        m = required_naturalistic_miles(1e-8, 0.9, 0.8)
        assert 11e9 / 10 <= m <= 11e9 * 10

    @given(st.floats(1e-10, 1e-3), st.floats(0.05, 0.95), st.floats(0.51, 0.99), st.floats(0.51, 0.99),
           st.sampled_from(["demonstration", "normal"]))
    def test_monotone(self, rate, imp, c1, c2, method):
        lo, hi = sorted((c1, c2))
        if hi - lo > 1e-6:
            assert (required_naturalistic_miles(rate, imp, lo, method)
                    < required_naturalistic_miles(rate, imp, hi, method))
        assert (required_naturalistic_miles(rate * 2, imp, hi, method)
                < required_naturalistic_miles(rate, imp, hi, method))

    def test_validation(self):
        with pytest.raises(ValueError):
            required_naturalistic_miles(1e-8, 1.0, 0.8)
        with pytest.raises(ValueError):
            required_naturalistic_miles(1e-8, 0.9, 0.4, method="normal")


class TestEquivalentMiles:
    def test_identity(self):
        assert equivalent_miles(500, ExposureModel(0.5), 1.0) == 1000

    def test_endpoints(self):
        assert equivalent_miles(1000, ExposureModel(1.0), 300) == 300_000
        assert equivalent_miles(1000, ExposureModel(1.0), 100_000) == 100_000_000


class TestRender:
    def test_empty(self, tmp_path):
        with pytest.raises(ValueError):
            render_report([], ExposureModel(1.0), HumanBaseline(), {}, {}, tmp_path)

    def test_schema_and_files(self, tmp_path):
        trace = convergence_trace([0.0, 1.0] * 50, 0.8, 10)
        meta = {"run_id": "r1", "seed": 3, "scenario": "car_following", "policy_id": "idm", "method": "is",
                "convergence": trace, "weights_histogram": weight_histogram([0.01, 0.02, 1.0, 30.0]),
                "wall_s": 1.5}
        rep = render_report([_est()], ExposureModel(1.0), HumanBaseline(), {"crash": 400.0}, meta, tmp_path)
        row = rep["estimates"][0]
        assert {"metric", "p_hat", "per_mile_rate", "miles_per_event", "ci", "verdict"} <= set(row)
        assert {"run_id", "seed", "scenario", "policy_id", "method", "estimates", "exposure", "baseline",
                "acceleration_factor", "equivalent_miles", "verdict", "non_converged", "timing"} <= set(rep)
        assert rep["equivalent_miles"] == pytest.approx(1000 * 400.0)
        with open(tmp_path / "convergence.csv") as fh:
            rows = list(csv.reader(fh))
        assert rows[0] == ["n", "p_hat", "ci_lo", "ci_hi"] and len(rows) - 1 == len(trace) == 10
        with open(tmp_path / "weights.csv") as fh:
            assert next(csv.reader(fh)) == ["log10_bin_lo", "log10_bin_hi", "count"]
        assert (tmp_path / "summary.txt").read_text().startswith("run r1")

    def test_round_trip_exact(self, tmp_path):
        e = _est(p=0.1 + 0.2, var=1 / 3 * 1e-7)
        rep = render_report([e], ExposureModel(0.3), HumanBaseline(), {"crash": 2 / 3}, {"run_id": "x"}, tmp_path)
        back = load_report(tmp_path / "report.json")
        assert back == json.loads(json.dumps(rep))
        assert back["estimates"][0]["p_hat"] == e.p_hat and back["estimates"][0]["variance"] == e.variance

    def test_unwritable(self, tmp_path):
        blocker = tmp_path / "file"
        blocker.write_text("x")
        with pytest.raises(OSError, match="file"):
            render_report([_est()], ExposureModel(1.0), HumanBaseline(), {}, {}, blocker / "sub")


def test_weight_histogram_bins():
    h = weight_histogram([1.0, 2.0, 0.05, 0.0], bin_width=0.5)
    assert sum(c for *_, c in h) == 3
    assert (0.0, 0.5, 2) in h


def test_non_converged_flag():
    e = _est()
    e.converged = False
    rep = build_report([e], ExposureModel(1.0), HumanBaseline(), {}, {})
    assert rep["non_converged"] is True
