"""Training-excitation laser power profiles.

Each profile is a 10-parameter waveform: a short Fourier-style series whose
amplitude, frequency and phase drift linearly in time, plus a linear trend
and one slower seasonal oscillation.  Designs are drawn with a maximin Latin
hypercube so a handful of profiles spans the power envelope densely.
"""

from __future__ import annotations

from dataclasses import dataclass, fields

import numpy as np

from .errors import ConfigError

POWER_BOUNDS = (504.0, 750.0)  # W, actuator envelope shared with the controller


@dataclass(frozen=True)
class ProfileParams:
    amplitude: float         # W
    num_terms: int           # 1..3 harmonics
    frequency: float         # Hz
    phase: float             # rad
    amp_rate: float          # 1/s linear drift of amplitude
    freq_rate: float         # 1/s
    phase_rate: float        # 1/s
    trend_slope: float       # W/s
    seasonal_fluct: float    # Hz
    seasonal_amp: float      # W

    def __post_init__(self):
        if self.num_terms < 1:
            raise ConfigError("num_terms must be at least 1")
        if self.amplitude < 0 or self.seasonal_amp < 0:
            raise ConfigError("amplitudes must be non-negative")


PARAM_ORDER = tuple(f.name for f in fields(ProfileParams))


@dataclass(frozen=True)
class ProfileBounds:
    """Per-parameter (low, high) sampling ranges."""

    amplitude: tuple = (0.0, 80.0)
    num_terms: tuple = (1, 3)
    frequency: tuple = (0.02, 1.0)
    phase: tuple = (0.0, 2 * np.pi)
    amp_rate: tuple = (-0.05, 0.05)
    freq_rate: tuple = (-0.05, 0.05)
    phase_rate: tuple = (-0.05, 0.05)
    trend_slope: tuple = (-8.0, 8.0)
    seasonal_fluct: tuple = (0.02, 0.3)
    seasonal_amp: tuple = (0.0, 60.0)

    def as_rows(self):
        return [(name, getattr(self, name)) for name in PARAM_ORDER]


def evaluate_profile(params: ProfileParams, t, bounds=POWER_BOUNDS) -> np.ndarray:
    """Commanded laser power at time(s) t, clamped to the actuator envelope."""
    t = np.asarray(t, dtype=float)
    lb, ub = bounds
    mid = 0.5 * (lb + ub)
    amp = params.amplitude * (1.0 + params.amp_rate * t)
    freq = params.frequency * (1.0 + params.freq_rate * t)
    phase = params.phase * (1.0 + params.phase_rate * t)
    u = np.full_like(t, mid)
    for n in range(1, params.num_terms + 1):
        u = u + (amp / n) * np.sin(2.0 * np.pi * n * freq * t + phase)
    u = u + params.trend_slope * t
    u = u + params.seasonal_amp * np.sin(2.0 * np.pi * params.seasonal_fluct * t)
    return np.clip(u, lb, ub)


def unit_lhs(n: int, dim: int, rng: np.random.Generator) -> np.ndarray:
    """One Latin hypercube in the unit cube: each column has exactly one
    sample in each of the n equal-width strata."""
    u = np.empty((n, dim))
    for j in range(dim):
        u[:, j] = (rng.permutation(n) + rng.uniform(size=n)) / n
    return u


def maximin_score(design: np.ndarray) -> float:
    """Minimum pairwise euclidean distance (the candidate-selection score)."""
    if design.shape[0] < 2:
        return np.inf
    d2 = ((design[:, None, :] - design[None, :, :]) ** 2).sum(axis=2)
    iu = np.triu_indices(design.shape[0], k=1)
    return float(np.sqrt(d2[iu].min()))


def lhs_sample(n: int, bounds: ProfileBounds, seed: int, budget: int = 32):
    """Draw `budget` Latin hypercube candidates, keep the maximin-best, and
    map it onto the parameter bounds.  Deterministic given the seed."""
    if n < 1:
        raise ConfigError("n must be at least 1")
    if budget < 1:
        raise ConfigError("budget must be at least 1")
    rng = np.random.default_rng(seed)
    rows = bounds.as_rows()
    dim = len(rows)
    best = None
    best_score = -np.inf
    for _ in range(budget):
        cand = unit_lhs(n, dim, rng)
        score = maximin_score(cand)
        if score > best_score:
            best, best_score = cand, score

    out = []
    for i in range(n):
        kwargs = {}
        for j, (name, (lo, hi)) in enumerate(rows):
            u = best[i, j]
            if name == "num_terms":
                kwargs[name] = int(min(int(lo) + int(np.floor(u * (int(hi) - int(lo) + 1))), int(hi)))
            else:
                kwargs[name] = float(lo + u * (hi - lo))
        out.append(ProfileParams(**kwargs))
    return out
