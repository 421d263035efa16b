import json
from fractions import Fraction

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from perfnoise.analyzer import (
    DEFAULT_THRESHOLDS,
    AbsorptionFit,
    ClassifierThresholds,
    RegionModeResult,
    TimingSeries,
    absorption_percent,
    build_report,
    classify,
    decan_saturation,
    emit_report,
    fit_three_phase,
    relative_payload,
    scenario_interpret,
)
from perfnoise.errors import TooFewPoints, ZeroLoopSize, ZeroReference
from perfnoise.sim import IdealModelParams, simulate_series

GRID = list(range(6)) + list(range(10, 55, 5)) + list(range(60, 110, 10))


# --- independent reference implementation of the same objective ----------

def brute_fit(samples):
    ks = sorted(samples)
    med = {k: float(np.median(samples[k])) for k in ks}
    t0 = med[ks[0]]
    q75, q25 = np.percentile(np.asarray(samples[ks[0]], float), [75, 25])
    band = float(q75 - q25)
    best = None
    for k1 in ks:
        for k2 in (k for k in ks if k >= k1):
            sse = 0.0
            for k in (k for k in ks if k <= k1):
                sse += max(0.0, abs(med[k] - t0) - band) ** 2
            seg2 = [k for k in ks if k1 < k <= k2]
            if seg2:
                A = np.array([[k - k1] for k in seg2], float)
                y = np.array([med[k] - t0 for k in seg2], float)
                coef, *_ = np.linalg.lstsq(A, y, rcond=None)
                s_t = max(0.0, float(coef[0]))
            else:
                s_t = 0.0
            sse += sum((med[k] - t0 - s_t * (k - k1)) ** 2 for k in seg2)
            t2 = t0 + s_t * (k2 - k1)
            seg3 = [k for k in ks if k > k2]
            if seg3:
                A = np.array([[k - k2] for k in seg3], float)
                y = np.array([med[k] - t2 for k in seg3], float)
                coef, *_ = np.linalg.lstsq(A, y, rcond=None)
                s_s = max(0.0, float(coef[0]))
            else:
                s_s = 0.0
            sse += sum((med[k] - t2 - s_s * (k - k2)) ** 2 for k in seg3)
            cand = (sse, k1, k2, s_t, s_s)
            if best is None:
                best = cand
            else:
                eps = 1e-12 * (1.0 + best[0])
                if sse < best[0] - eps:
                    best = cand
                elif abs(sse - best[0]) <= eps and (
                        k1 > best[1] or (k1 == best[1] and k2 < best[2])):
                    best = cand
    return best


def test_fit_recovers_reference_geometry_exactly():
    p = IdealModelParams(t0=5.0, k1=5, k2=10, slope_transient=0.5,
                         slope_saturated=1.0)
    fit = fit_three_phase(simulate_series(p, GRID, reps=3))
    assert (fit.k1, fit.k2) == (5, 10)
    assert fit.t0 == 5.0
    assert fit.slope_transient == pytest.approx(0.5)
    assert fit.slope_saturated == pytest.approx(1.0)
    assert fit.sse == pytest.approx(0.0, abs=1e-18)
    assert not fit.no_saturation
    assert fit.absorption_raw == 5
    assert fit.predict(10) == pytest.approx(7.5)
    assert fit.predict(15) == pytest.approx(12.5)


def test_fit_matches_brute_force_on_random_series():
    rng = np.random.default_rng(7)
    for _ in range(25):
        ks = sorted(rng.choice(np.arange(0, 40), size=7, replace=False))
        samples = {int(k): list(1.0 + 4.0 * rng.random(3)) for k in ks}
        fit = fit_three_phase(samples)
        sse, k1, k2, s_t, s_s = brute_fit(samples)
        assert (fit.k1, fit.k2) == (k1, k2)
        assert fit.sse == pytest.approx(sse, abs=1e-9)
        assert fit.slope_transient == pytest.approx(s_t, abs=1e-9)
        assert fit.slope_saturated == pytest.approx(s_s, abs=1e-9)


@settings(max_examples=60, deadline=None)
@given(st.lists(st.floats(0.5, 50.0), min_size=5, max_size=5),
       st.integers(0, 10_000))
def test_fit_is_never_beaten_by_any_candidate(values, seed_gap):
    ks = [0, 2 + seed_gap % 3, 7, 13, 21]
    samples = {k: [v] for k, v in zip(ks, values)}
    fit = fit_three_phase(samples)
    best_sse = brute_fit(samples)[0]
    assert fit.sse <= best_sse + 1e-9 * (1 + best_sse)


def test_fit_flat_series_flags_no_saturation():
    fit = fit_three_phase({k: [5.0, 5.0] for k in GRID})
    assert fit.k1 == fit.k2 == GRID[-1]
    assert fit.no_saturation
    assert fit.slope_transient == fit.slope_saturated == 0.0
    assert fit.predict(1000) == 5.0


def test_fit_single_slope_rise_goes_to_saturation_line():
    # one linear regime after the flat: the tie-break (larger k1, then
    # smaller k2) collapses the transient and puts the rise in the
    # saturated segment
    samples = {k: [5.0] for k in [0, 1, 2, 3, 4, 5, 10]}
    samples[15] = [9.0]
    fit = fit_three_phase(samples)
    assert (fit.k1, fit.k2) == (10, 10)
    assert fit.slope_transient == 0.0
    assert fit.slope_saturated == pytest.approx(0.8)
    assert not fit.no_saturation


def test_fit_deadband_absorbs_baseline_jitter():
    # medians of the early points wobble inside the baseline IQR
    base = [4.8, 4.95, 5.0, 5.05, 5.2]
    samples = {0: base, 1: [5.1], 2: [4.9], 3: [5.05], 4: [4.95], 5: [5.0]}
    samples[10], samples[15] = [7.5], [10.0]   # transient, slope 0.5
    samples[20], samples[25] = [20.0], [30.0]  # saturated, slope 2.0
    fit = fit_three_phase(samples)
    assert (fit.k1, fit.k2) == (5, 15)
    assert fit.slope_transient == pytest.approx(0.5, rel=1e-6)
    assert fit.slope_saturated == pytest.approx(2.0, rel=1e-6)


def test_fit_requires_enough_points():
    with pytest.raises(TooFewPoints):
        fit_three_phase({0: [1.0], 5: [1.0], 10: [2.0]})


def test_timing_series_medians():
    s = TimingSeries("r", "fp_add64", {0: [3.0, 1.0, 2.0], 5: [4.0]})
    assert s.medians() == {0: 2.0, 5: 4.0}


# --- metric arithmetic ----------------------------------------------------

def test_relative_payload_examples():
    assert relative_payload(10, 20) == 0.5
    assert relative_payload(10, 20) == float(Fraction(10, 20))
    assert relative_payload(0, 7) == 0.0
    assert absorption_percent(10, 20) == 50.0
    with pytest.raises(ZeroLoopSize):
        relative_payload(3, 0)
    with pytest.raises(ValueError):
        relative_payload(-1, 5)


@given(st.integers(0, 10_000), st.integers(1, 5_000), st.integers(1, 64))
def test_relative_payload_unroll_invariance(k, body, unroll):
    # scaling counts and body size together must not move the ratio
    assert relative_payload(k * unroll, body * unroll) == \
        relative_payload(k, body)


def test_decan_saturation_examples():
    assert decan_saturation(81.0, 100.0) == 0.81
    assert decan_saturation(12.0, 100.0) == 0.12
    with pytest.raises(ZeroReference):
        decan_saturation(5.0, 0.0)
    with pytest.raises(ValueError):
        decan_saturation(-1.0, 10.0)


# --- classification -------------------------------------------------------

def test_default_thresholds():
    th = DEFAULT_THRESHOLDS
    assert (th.latency, th.data, th.mid, th.core) == (5.0, 20.0, 5.0, 2.0)


@pytest.mark.parametrize("triple,expected", [
    ((65, 26, 0), "bandwidth"),
    ((250, 240, 15), "latency"),
    ((0, 13, 0), "compute"),
    ((0, 1, 0), "core"),
    ((11, 1, 0), "data-access-core"),
])
def test_classifier_reference_triples(triple, expected):
    assert classify(*triple) == expected


def test_classifier_rule_order_and_custom_thresholds():
    # memory wins over everything else
    assert classify(90, 90, 5) == "latency"
    # moderate fp and l1 with no clean rule
    assert classify(4, 4, 0) == "ambiguous"
    th = ClassifierThresholds(latency=50.0)
    assert classify(90, 90, 5, th) == "bandwidth"


def test_scenario_interpretation():
    assert scenario_interpret(1.0, 30.0).label == "compute-bound"
    assert scenario_interpret(30.0, 1.0).label == "data-bound"
    assert scenario_interpret(10.0, 10.0).label == "limited-overlap"
    r = scenario_interpret(0.5, 0.3)
    assert r.label == "full-overlap" and "ambiguous" in r.note
    assert scenario_interpret(0.5, 0.3, 0.95, 0.97).label == "full-overlap"
    r = scenario_interpret(0.5, 0.3, 0.81, 0.12)
    assert r.label == "frontend-suspect"


# --- reporting ------------------------------------------------------------

def _result(region, mode, k1, body=20):
    ks = [0, 1, 2, 3, 4, 5, 10, 15, 20]
    p = IdealModelParams(t0=5.0, k1=k1, k2=max(k1 + 5, 10))
    samples = simulate_series(p, ks, reps=2)
    series = TimingSeries(region, mode, samples)
    return RegionModeResult(region, mode, body, series,
                            fit_three_phase(samples),
                            audits=[{"k": 4, "payload_count": 4}])


def test_build_report_classifies_when_all_modes_present():
    results = [_result("r1", "fp_add64", k1=0),
               _result("r1", "l1_ld64", k1=3),
               _result("r1", "memory_ld64", k1=0)]
    report = build_report(results)
    assert len(report["entries"]) == 3
    by_mode = {e["mode"]: e for e in report["entries"]}
    # 3/20 of the body absorbed on l1, nothing elsewhere: compute-bound
    assert by_mode["l1_ld64"]["class"] == "compute"
    assert by_mode["l1_ld64"]["absorption_raw"] == 3
    assert by_mode["l1_ld64"]["absorption_rel"] == pytest.approx(0.15)
    assert by_mode["fp_add64"]["label"] == "compute-bound"
    expected_keys = {"region", "mode", "class", "t0", "k1", "k2",
                     "absorption_raw", "absorption_rel", "label",
                     "thresholds", "audits"}
    assert set(report["entries"][0]) == expected_keys


def test_build_report_partial_modes_leaves_class_null():
    report = build_report([_result("r1", "fp_add64", k1=0)])
    assert report["entries"][0]["class"] is None
    assert report["entries"][0]["label"] is None


def test_emit_report_is_byte_deterministic(tmp_path):
    results = [_result("r1", "fp_add64", k1=0),
               _result("r1", "l1_ld64", k1=3)]
    emit_report(results, tmp_path / "a")
    emit_report(results, tmp_path / "b")
    ja = (tmp_path / "a" / "report.json").read_bytes()
    jb = (tmp_path / "b" / "report.json").read_bytes()
    assert ja == jb
    json.loads(ja)  # well-formed
    pa = tmp_path / "a" / "plots" / "r1__fp_add64.csv"
    pb = tmp_path / "b" / "plots" / "r1__fp_add64.csv"
    assert pa.read_bytes() == pb.read_bytes()
    header = pa.read_text().splitlines()[0]
    assert header == "k,median,fitted"
