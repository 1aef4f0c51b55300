"""Discrete-time PID benchmark for melt-pool temperature tracking.

Velocity-style update anchored at the previously applied input, with
conditional integration as anti-windup: when the actuator clamp is active in
the direction of the current error, the integral does not accumulate.  A
budgeted random-search tuner picks gains against a caller-supplied
closed-loop evaluator.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, TuningFailedError


@dataclass(frozen=True)
class PidGains:
    kp: float    # W/K
    ki: float    # W/(K*s)
    kd: float    # W*s/K

    def __post_init__(self):
        for name in ("kp", "ki", "kd"):
            v = getattr(self, name)
            if not np.isfinite(v) or v < 0:
                raise ConfigError(f"{name} must be finite and non-negative")


@dataclass
class PidState:
    u_prev: float            # W, last applied input
    e_prev: float | None     # K, previous error (None before the first step)
    integral: float          # K*s, accumulated error
    dt: float                # s, controller period

    def __post_init__(self):
        if self.dt <= 0:
            raise ConfigError("dt must be positive")


def pid_step(gains: PidGains, state: PidState, reference: float, measurement: float,
             bounds=(504.0, 750.0)):
    """One controller update; returns (clamped input, new state)."""
    lb, ub = bounds
    e = reference - measurement
    integral = state.integral + e * state.dt
    derivative = 0.0 if state.e_prev is None else (e - state.e_prev) / state.dt
    u = state.u_prev + gains.kp * e + gains.ki * integral + gains.kd * derivative
    u_clamped = float(np.clip(u, lb, ub))
    windup = (u > ub and e > 0) or (u < lb and e < 0)
    new_state = PidState(
        u_prev=u_clamped,
        e_prev=e,
        integral=state.integral if windup else integral,
        dt=state.dt,
    )
    return u_clamped, new_state


def tune(evaluate, gain_bounds, budget: int, seed: int):
    """Budgeted random search over log-uniform gains.

    `evaluate(gains) -> mse` runs a closed-loop episode and returns the
    tracking mean-square error (non-finite marks a diverged candidate).
    Returns (best gains, best mse); deterministic given the seed.
    """
    if budget < 1:
        raise ConfigError("budget must be at least 1")
    rng = np.random.default_rng(seed)
    (kp_lo, kp_hi), (ki_lo, ki_hi), (kd_lo, kd_hi) = gain_bounds

    def log_uniform(lo, hi):
        if lo <= 0 or hi <= lo:
            raise ConfigError("gain bounds must be positive and increasing")
        return float(np.exp(rng.uniform(np.log(lo), np.log(hi))))

    best = None
    best_mse = np.inf
    for _ in range(budget):
        gains = PidGains(kp=log_uniform(kp_lo, kp_hi),
                         ki=log_uniform(ki_lo, ki_hi),
                         kd=log_uniform(kd_lo, kd_hi))
        mse = evaluate(gains)
        if np.isfinite(mse) and mse < best_mse:
            best, best_mse = gains, mse
    if best is None:
        raise TuningFailedError("every candidate diverged")
    return best, best_mse
