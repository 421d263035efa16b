"""Bottleneck analysis by controlled noise injection into compiled loops.

The toolchain injects known quantities of resource-specific "noise"
instructions into a target loop, measures how run time responds as the
quantity k grows, fits a three-phase response model, and turns the
breakpoints into absorption metrics that classify the loop as compute,
bandwidth, or latency bound.
"""

from .analyzer import (
    AbsorptionFit,
    ClassifierThresholds,
    RegionModeResult,
    ScenarioReading,
    TimingSeries,
    absorption_percent,
    build_report,
    classify,
    decan_saturation,
    emit_report,
    fit_series,
    fit_three_phase,
    relative_payload,
    scenario_interpret,
)
from .controller import (
    ExperimentPlan,
    cluster_samples,
    default_k_schedule,
    load_plan,
    load_results,
    online_stop,
    run_experiment,
)
from .errors import (
    AnchorMissing,
    AuditMismatch,
    BuildFailure,
    NoiseError,
    PlanError,
    RegisterPressureTooHigh,
    RunFailure,
    TooFewPoints,
)
from .injector import InjectionReport, InjectionSite, audit, inject, locate_anchors
from .kernels import bench_plan, generate_csr, read_csr, write_csr
from .patterns import NoisePattern, available_modes, get_pattern
from .probe import TimingSample, build_runtime, durations_by_region, read_samples
from .sim import IdealModelParams, ideal_time, simulate_series

__version__ = "0.1.0"

__all__ = [
    "AbsorptionFit",
    "AnchorMissing",
    "AuditMismatch",
    "BuildFailure",
    "ClassifierThresholds",
    "ExperimentPlan",
    "IdealModelParams",
    "InjectionReport",
    "InjectionSite",
    "NoiseError",
    "NoisePattern",
    "PlanError",
    "RegionModeResult",
    "RegisterPressureTooHigh",
    "RunFailure",
    "ScenarioReading",
    "TimingSample",
    "TimingSeries",
    "TooFewPoints",
    "absorption_percent",
    "audit",
    "available_modes",
    "bench_plan",
    "build_report",
    "build_runtime",
    "classify",
    "cluster_samples",
    "decan_saturation",
    "default_k_schedule",
    "durations_by_region",
    "emit_report",
    "fit_series",
    "fit_three_phase",
    "generate_csr",
    "get_pattern",
    "ideal_time",
    "inject",
    "load_plan",
    "load_results",
    "locate_anchors",
    "online_stop",
    "read_csr",
    "read_samples",
    "relative_payload",
    "run_experiment",
    "scenario_interpret",
    "simulate_series",
    "write_csr",
    "__version__",
]
