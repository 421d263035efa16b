"""Synthetic timing generator for exercising the fit and control logic.

Produces loop times from an idealized three-phase response: flat while
injected work hides under existing stalls, a linear transient once the
slack is used up, and a steeper linear regime after full saturation.
Multiplicative Gaussian noise models run-to-run jitter.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np


@dataclass(frozen=True)
class IdealModelParams:
    """Piecewise-linear response of loop time to injected instruction count.

    ``t0`` is the baseline time, ``k1`` the largest count still fully
    absorbed, ``k2`` the onset of saturation.  Slopes are time units per
    injected instruction.  ``sigma`` scales multiplicative jitter.
    """

    t0: float = 5.0
    k1: int = 5
    k2: int = 10
    slope_transient: float = 0.5
    slope_saturated: float = 1.0
    sigma: float = 0.0
    seed: int = 0

    def __post_init__(self) -> None:
        if self.t0 <= 0:
            raise ValueError("t0 must be positive")
        if not 0 <= self.k1 <= self.k2:
            raise ValueError("need 0 <= k1 <= k2")
        if self.slope_transient < 0 or self.slope_saturated < 0:
            raise ValueError("slopes must be non-negative")
        if self.sigma < 0:
            raise ValueError("sigma must be non-negative")


def ideal_time(params: IdealModelParams, k: int) -> float:
    """Noise-free loop time at injected count ``k``."""
    if k < 0:
        raise ValueError("k must be non-negative")
    if k <= params.k1:
        return params.t0
    if k <= params.k2:
        return params.t0 + params.slope_transient * (k - params.k1)
    plateau = params.t0 + params.slope_transient * (params.k2 - params.k1)
    return plateau + params.slope_saturated * (k - params.k2)


def simulate(params: IdealModelParams, k: int, rep: int) -> float:
    """One simulated measurement; (seed, k, rep) fully determine the value."""
    base = ideal_time(params, k)
    if params.sigma == 0.0:
        return base
    rng = np.random.default_rng([params.seed, k, rep])
    return base * (1.0 + params.sigma * rng.standard_normal())


def simulate_series(params: IdealModelParams, ks, reps: int):
    """Measurements for each count in ``ks``: ``{k: [rep0, rep1, ...]}``."""
    if reps < 1:
        raise ValueError("reps must be at least 1")
    return {int(k): [simulate(params, int(k), r) for r in range(reps)]
            for k in ks}
