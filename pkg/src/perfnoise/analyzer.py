"""Fit absorption curves, derive metrics, and classify loop bottlenecks.

The central object is the three-phase fit: loop time stays flat while
injected instructions hide in existing stalls, rises linearly through a
transient once slack runs out, then follows a steeper saturated line.
The flat extent, normalized by loop body size, measures how much spare
capacity the targeted unit had; comparing that across units names the
bottleneck.
"""

from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping, Optional, Sequence

import numpy as np

from .errors import TooFewPoints, ZeroLoopSize, ZeroReference

MIN_FIT_POINTS = 4


@dataclass(frozen=True)
class TimingSeries:
    """Measured loop times for one region under one noise mode.

    ``samples`` maps injected-instruction count to the per-repetition
    durations observed at that count.
    """

    region_id: str
    mode: str
    samples: Mapping[int, Sequence[float]]

    def medians(self) -> dict[int, float]:
        return {k: float(np.median(v)) for k, v in sorted(self.samples.items())}


@dataclass(frozen=True)
class AbsorptionFit:
    """Piecewise-linear fit of loop time against injected count.

    ``k1`` is the largest count still absorbed, ``k2`` the saturation
    onset; both lie on the sampled grid.  ``no_saturation`` is set when
    the series never left the flat phase (or had no points past ``k2``),
    so the saturated slope is not evidenced by data.
    """

    t0: float
    k1: int
    k2: int
    slope_transient: float
    slope_saturated: float
    sse: float
    no_saturation: bool = False

    @property
    def absorption_raw(self) -> int:
        return self.k1

    def predict(self, k: float) -> float:
        if k <= self.k1:
            return self.t0
        if k <= self.k2:
            return self.t0 + self.slope_transient * (k - self.k1)
        plateau = self.t0 + self.slope_transient * (self.k2 - self.k1)
        return plateau + self.slope_saturated * (k - self.k2)


def _anchored_slope(xs: np.ndarray, ys: np.ndarray) -> float:
    # least squares for y = s*x through the origin, slope clamped to >= 0
    denom = float(np.dot(xs, xs))
    if denom == 0.0:
        return 0.0
    return max(0.0, float(np.dot(xs, ys)) / denom)


def fit_three_phase(samples: Mapping[int, Sequence[float]]) -> AbsorptionFit:
    """Fit the flat/transient/saturated model to median times per count.

    Knees are found by exhaustive search over the sampled counts.  Flat
    -phase residuals get a deadband of one baseline interquartile range,
    so repetition jitter at the baseline level never charges the flat
    segment.  Ties prefer the larger ``k1``, then the smaller ``k2``.
    """
    ks = sorted(int(k) for k in samples)
    if len(ks) < MIN_FIT_POINTS:
        raise TooFewPoints(
            f"need at least {MIN_FIT_POINTS} distinct counts, got {len(ks)}")
    med = {k: float(np.median(samples[k])) for k in ks}
    base = np.asarray(samples[ks[0]], dtype=float)
    t0 = med[ks[0]]
    band = float(np.percentile(base, 75) - np.percentile(base, 25))

    karr = np.asarray(ks, dtype=float)
    yarr = np.asarray([med[k] for k in ks], dtype=float)
    flat_excess = np.maximum(0.0, np.abs(yarr - t0) - band)

    best: Optional[tuple] = None  # (sse, k1, k2, s_t, s_s)
    for i, k1 in enumerate(ks):
        sse1 = float(np.dot(flat_excess[: i + 1], flat_excess[: i + 1]))
        for j in range(i, len(ks)):
            k2 = ks[j]
            xs2 = karr[i + 1: j + 1] - k1
            ys2 = yarr[i + 1: j + 1] - t0
            s_t = _anchored_slope(xs2, ys2)
            r2 = ys2 - s_t * xs2
            t2 = t0 + s_t * (k2 - k1)
            xs3 = karr[j + 1:] - k2
            ys3 = yarr[j + 1:] - t2
            s_s = _anchored_slope(xs3, ys3)
            r3 = ys3 - s_s * xs3
            sse = sse1 + float(np.dot(r2, r2)) + float(np.dot(r3, r3))
            if best is None:
                best = (sse, k1, k2, s_t, s_s)
                continue
            eps = 1e-12 * (1.0 + best[0])
            if sse < best[0] - eps:
                best = (sse, k1, k2, s_t, s_s)
            elif abs(sse - best[0]) <= eps:
                if k1 > best[1] or (k1 == best[1] and k2 < best[2]):
                    best = (min(sse, best[0]), k1, k2, s_t, s_s)

    sse, k1, k2, s_t, s_s = best
    no_sat = k2 == ks[-1]
    if k1 == ks[-1]:  # never left the flat phase
        return AbsorptionFit(t0, ks[-1], ks[-1], 0.0, 0.0, sse,
                             no_saturation=True)
    return AbsorptionFit(t0, k1, k2, s_t, s_s, sse, no_saturation=no_sat)


def fit_series(series: TimingSeries) -> AbsorptionFit:
    return fit_three_phase(series.samples)


# --- metrics -------------------------------------------------------------

def relative_payload(k: int, loop_body_size: int) -> float:
    """Injected count as a fraction of the loop body's instruction count."""
    if loop_body_size <= 0:
        raise ZeroLoopSize("loop body size must be positive")
    if k < 0:
        raise ValueError("k must be non-negative")
    return k / loop_body_size


def absorption_percent(k1: int, loop_body_size: int) -> float:
    """Absorbed count as a percentage of the loop body size."""
    return 100.0 * relative_payload(k1, loop_body_size)


def decan_saturation(t_variant: float, t_reference: float) -> float:
    """Throughput ratio of a stripped-down loop variant to its reference.

    Near 1.0 the unit kept in the variant was already running at full
    tilt in the reference; well below 1.0 it had idle capacity.
    """
    if t_reference == 0:
        raise ZeroReference("reference time must be non-zero")
    if t_variant < 0 or t_reference < 0:
        raise ValueError("times must be non-negative")
    return t_variant / t_reference


# --- classification ------------------------------------------------------

@dataclass(frozen=True)
class ClassifierThresholds:
    """Cutoffs on absorption percentages, in percent of loop body size."""

    latency: float = 5.0   # memory absorption at or above this: latency-bound
    data: float = 20.0     # fp or l1 absorption this high: bandwidth-bound
    mid: float = 5.0       # "clearly absorbing" level for fp/l1
    core: float = 2.0      # "essentially nothing absorbed" level

    def as_dict(self) -> dict:
        return {"latency": self.latency, "data": self.data,
                "mid": self.mid, "core": self.core}


DEFAULT_THRESHOLDS = ClassifierThresholds()


def classify(abs_fp: float, abs_l1: float, abs_mem: float,
             thresholds: ClassifierThresholds = DEFAULT_THRESHOLDS) -> str:
    """Name the bottleneck from the three absorption percentages.

    Rules are checked in order; the first that matches wins.
    """
    th = thresholds
    if abs_mem >= th.latency:
        return "latency"
    if max(abs_fp, abs_l1) >= th.data:
        return "bandwidth"
    if abs_fp <= th.core and abs_l1 >= th.mid:
        return "compute"
    if abs_l1 <= th.core and abs_fp >= th.mid:
        return "data-access-core"
    if abs_fp <= th.core and abs_l1 <= th.core:
        return "core"
    return "ambiguous"


@dataclass(frozen=True)
class ScenarioReading:
    label: str
    note: str = ""


def scenario_interpret(abs_fp: float, abs_ls: float,
                       sat_fp: Optional[float] = None,
                       sat_ls: Optional[float] = None,
                       low: float = 2.0,
                       sat_high: float = 0.9) -> ScenarioReading:
    """Interpret fp vs load/store absorption, using saturation ratios to
    split the case where neither side absorbs anything.

    When both absorptions are low, a pair of near-1.0 saturation ratios
    confirms genuinely full overlap of both pipelines; a low ratio on
    either side means the loop is slow for some other reason (front-end
    pressure is the usual suspect).
    """
    fp_low = abs_fp < low
    ls_low = abs_ls < low
    if not (fp_low and ls_low):
        if fp_low:
            return ScenarioReading("compute-bound")
        if ls_low:
            return ScenarioReading("data-bound")
        return ScenarioReading("limited-overlap")
    if sat_fp is None or sat_ls is None:
        return ScenarioReading(
            "full-overlap",
            note="ambiguous: no saturation ratios to confirm; could be "
                 "front-end bound instead")
    if sat_fp >= sat_high and sat_ls >= sat_high:
        return ScenarioReading("full-overlap")
    return ScenarioReading(
        "frontend-suspect",
        note="neither unit absorbs, yet at least one runs far below "
             "saturation; the limiter is outside both pipelines")


# --- reporting -----------------------------------------------------------

# canonical mode -> classifier slot
_CLASS_SLOTS = {"fp_add64": "fp", "l1_ld64": "l1", "memory_ld64": "mem"}


@dataclass
class RegionModeResult:
    """Everything learned about one (region, mode) pair."""

    region_id: str
    mode: str
    loop_body_size: int
    series: TimingSeries
    fit: AbsorptionFit
    audits: list = field(default_factory=list)

    @property
    def absorption_rel(self) -> float:
        return relative_payload(self.fit.k1, self.loop_body_size)

    @property
    def absorption_pct(self) -> float:
        return absorption_percent(self.fit.k1, self.loop_body_size)


def _region_class(results: Sequence[RegionModeResult],
                  thresholds: ClassifierThresholds) -> Optional[str]:
    pct = {_CLASS_SLOTS[r.mode]: r.absorption_pct
           for r in results if r.mode in _CLASS_SLOTS}
    if set(pct) != {"fp", "l1", "mem"}:
        return None
    return classify(pct["fp"], pct["l1"], pct["mem"], thresholds)


def build_report(results: Sequence[RegionModeResult],
                 thresholds: ClassifierThresholds = DEFAULT_THRESHOLDS) -> dict:
    """Assemble the machine-readable analysis record.

    One entry per (region, mode).  ``class`` is the cross-mode bottleneck
    verdict for the region (null until fp, l1, and memory runs all
    exist); ``label`` is the fp-vs-l1 overlap reading.
    """
    by_region: dict[str, list[RegionModeResult]] = {}
    for r in results:
        by_region.setdefault(r.region_id, []).append(r)

    entries = []
    for region in sorted(by_region):
        group = by_region[region]
        verdict = _region_class(group, thresholds)
        pct = {_CLASS_SLOTS[r.mode]: r.absorption_pct
               for r in group if r.mode in _CLASS_SLOTS}
        label = None
        if "fp" in pct and "l1" in pct:
            label = scenario_interpret(pct["fp"], pct["l1"]).label
        for r in sorted(group, key=lambda r: r.mode):
            entries.append({
                "region": r.region_id,
                "mode": r.mode,
                "class": verdict,
                "t0": r.fit.t0,
                "k1": r.fit.k1,
                "k2": r.fit.k2,
                "absorption_raw": r.fit.absorption_raw,
                "absorption_rel": r.absorption_rel,
                "label": label,
                "thresholds": thresholds.as_dict(),
                "audits": list(r.audits),
            })
    return {"entries": entries}


def emit_report(results: Sequence[RegionModeResult], out_dir,
                thresholds: ClassifierThresholds = DEFAULT_THRESHOLDS) -> dict:
    """Write ``report.json`` plus one plottable CSV per (region, mode).

    Output is byte-deterministic for identical inputs: keys are sorted
    and no timestamps or environment details are recorded.
    """
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    report = build_report(results, thresholds)
    (out / "report.json").write_text(
        json.dumps(report, indent=2, sort_keys=True) + "\n")
    plots = out / "plots"
    plots.mkdir(exist_ok=True)
    for r in sorted(results, key=lambda r: (r.region_id, r.mode)):
        path = plots / f"{r.region_id}__{r.mode}.csv"
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["k", "median", "fitted"])
            for k, m in sorted(r.series.medians().items()):
                w.writerow([k, repr(m), repr(r.fit.predict(k))])
    return report
