"""Simultaneous multi-step model predictive controller.

Optimizes the whole future power sequence against the forecaster's median
prediction: quadratic temperature-tracking error plus a move-suppression
term on consecutive power differences, subject to melt-depth bounds handled
by an augmented Lagrangian and hard actuator bounds enforced by a logistic
reparameterization (the inner L-BFGS solve stays unconstrained).

A solve runs from the shifted previous solution when available; if the inner
solver terminates unsuccessfully the problem is re-solved once from the
mid-range constant input before giving up.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .errors import ConfigError, SolverAbortError
from .lbfgs import minimize
from .tide import DEPTH_CHANNEL, TEMP_CHANNEL, TideModel

V_CLIP = 12.0  # logit-space clamp for warm starts, avoids sigmoid saturation


@dataclass(frozen=True)
class MpcConfig:
    q_weight: float = 1.0
    r_weight: float = 10.0
    depth_lb: float = 0.075          # mm
    depth_ub: float = 0.225          # mm
    u_lb: float = 504.0              # W
    u_ub: float = 750.0              # W
    constraint_activation_layer: int = 5
    corner_threshold: float = 2.0    # mm
    al_mu0: float = 10.0
    al_growth: float = 5.0
    al_max_outer: int = 4
    al_violation_tol: float = 5e-3   # mm
    lbfgs_memory: int = 10
    lbfgs_max_iterations: int = 200
    lbfgs_gtol: float = 1e-6

    def __post_init__(self):
        if not self.depth_lb < self.depth_ub:
            raise ConfigError("depth_lb must be below depth_ub")
        if not self.u_lb < self.u_ub:
            raise ConfigError("u_lb must be below u_ub")
        if self.al_mu0 <= 0 or self.al_growth <= 1:
            raise ConfigError("need al_mu0 > 0 and al_growth > 1")

    @property
    def u_mid(self) -> float:
        return 0.5 * (self.u_lb + self.u_ub)


@dataclass
class MpcProblem:
    past_targets: np.ndarray         # (w, num_targets)
    past_covariates: np.ndarray      # (w, 4)
    future_geometry: np.ndarray      # (p, 3): d_x, d_y, z
    reference: np.ndarray            # (p,) temperature reference, K
    u_prev: float                    # last applied input, W
    mask: np.ndarray                 # (p,) bool, True = depth constraint active

    def __post_init__(self):
        self.past_targets = np.asarray(self.past_targets, dtype=float)
        self.past_covariates = np.asarray(self.past_covariates, dtype=float)
        self.future_geometry = np.asarray(self.future_geometry, dtype=float)
        self.reference = np.asarray(self.reference, dtype=float)
        self.mask = np.asarray(self.mask, dtype=bool)


@dataclass
class MpcSolution:
    u_opt: np.ndarray
    objective: float
    status: str                      # converged | fallback_used | failed
    outer_iterations: int
    inner_iterations: int
    solve_time: float
    predicted: np.ndarray            # (p, num_targets) median forecast at u_opt
    max_violation: float = 0.0


def warm_start_shift(previous_u: np.ndarray) -> np.ndarray:
    """Receding-horizon shift: drop the first move, repeat the last."""
    previous_u = np.asarray(previous_u, dtype=float)
    return np.concatenate([previous_u[1:], previous_u[-1:]])


def _u_to_v(u: np.ndarray, cfg: MpcConfig) -> np.ndarray:
    frac = (np.asarray(u, dtype=float) - cfg.u_lb) / (cfg.u_ub - cfg.u_lb)
    frac = np.clip(frac, 1e-9, 1 - 1e-9)
    return np.clip(np.log(frac / (1 - frac)), -V_CLIP, V_CLIP)


def _forecast_median(model: TideModel, problem: MpcProblem, u_tensor: Tensor) -> Tensor:
    """Median forecast (p, num_targets) with the power channel differentiable."""
    p = model.config.horizon
    geom = Tensor(problem.future_geometry[None, :, :])
    fut = ad.concat([geom, u_tensor.reshape(1, p, 1)], axis=2)
    out = model.forward(problem.past_targets[None], problem.past_covariates[None], fut)
    return out[0, :, :, model.config.median_index]


def _objective_terms(pred_temp: Tensor, u_tensor: Tensor, problem: MpcProblem,
                     cfg: MpcConfig) -> Tensor:
    err = pred_temp - Tensor(problem.reference)
    track = (err * err).sum() * cfg.q_weight
    du_first = u_tensor[0:1] - problem.u_prev
    du_rest = u_tensor[1:] - u_tensor[:-1]
    du = ad.concat([du_first, du_rest], axis=0)
    return track + (du * du).sum() * cfg.r_weight


def _penalty(depth: Tensor, lam_lb, lam_ub, mu: float, problem: MpcProblem,
             cfg: MpcConfig) -> Tensor:
    mask = Tensor(problem.mask.astype(float))
    g_lb = cfg.depth_lb - depth
    g_ub = depth - cfg.depth_ub
    t_lb = ad.maximum(Tensor(lam_lb) + g_lb * mu, 0.0)
    t_ub = ad.maximum(Tensor(lam_ub) + g_ub * mu, 0.0)
    term = (t_lb * t_lb - Tensor(lam_lb ** 2)) + (t_ub * t_ub - Tensor(lam_ub ** 2))
    return (mask * term).sum() * (1.0 / (2.0 * mu))


def objective(problem: MpcProblem, u_candidate: np.ndarray, model: TideModel,
              cfg: MpcConfig) -> float:
    """Tracking + move-suppression cost of a candidate input sequence."""
    u_t = Tensor(np.asarray(u_candidate, dtype=float))
    with model.frozen():
        pred = _forecast_median(model, problem, u_t)
    if not np.isfinite(pred.data).all():
        raise SolverAbortError("non-finite forecast in objective")
    temp = pred[:, TEMP_CHANNEL]
    return _objective_terms(temp, u_t, problem, cfg).item()


def augmented_lagrangian(problem: MpcProblem, u_candidate: np.ndarray,
                         lam_lb: np.ndarray, lam_ub: np.ndarray, mu: float,
                         model: TideModel, cfg: MpcConfig) -> float:
    """Objective plus the quadratic-penalty multiplier terms on masked steps."""
    u_t = Tensor(np.asarray(u_candidate, dtype=float))
    with model.frozen():
        pred = _forecast_median(model, problem, u_t)
    value = _objective_terms(pred[:, TEMP_CHANNEL], u_t, problem, cfg)
    if problem.mask.any():
        value = value + _penalty(pred[:, DEPTH_CHANNEL], np.asarray(lam_lb, dtype=float),
                                 np.asarray(lam_ub, dtype=float), mu, problem, cfg)
    return value.item()


def solve(problem: MpcProblem, model: TideModel, cfg: MpcConfig,
          warm_start: Optional[np.ndarray] = None) -> MpcSolution:
    """Full constrained solve with the warm-start/default-restart policy."""
    p = model.config.horizon
    if problem.reference.shape != (p,):
        raise ConfigError(f"reference must have length {p}")
    if problem.mask.any() and model.config.num_targets <= DEPTH_CHANNEL:
        raise ConfigError("depth constraints need a model that predicts depth")
    start = time.perf_counter()
    span = cfg.u_ub - cfg.u_lb

    def u_of_v(v: np.ndarray) -> np.ndarray:
        return cfg.u_lb + span / (1.0 + np.exp(-np.clip(v, -500, 500)))

    def al_value_and_grad(v: np.ndarray, lam_lb, lam_ub, mu):
        v_t = Tensor(v, requires_grad=True)
        u_t = v_t.sigmoid() * span + cfg.u_lb
        with model.frozen():
            pred = _forecast_median(model, problem, u_t)
        if not np.isfinite(pred.data).all():
            raise SolverAbortError("non-finite forecast during solve")
        value = _objective_terms(pred[:, TEMP_CHANNEL], u_t, problem, cfg)
        if problem.mask.any():
            value = value + _penalty(pred[:, DEPTH_CHANNEL], lam_lb, lam_ub, mu,
                                     problem, cfg)
        value.backward()
        return value.item(), v_t.grad.copy()

    def run_al(v0: np.ndarray):
        """One augmented-Lagrangian pass; returns (ok, v, outer, inner, viol)."""
        lam_lb = np.zeros(p)
        lam_ub = np.zeros(p)
        mu = cfg.al_mu0
        v = v0.copy()
        inner = 0
        outer = 0
        viol = 0.0
        for outer in range(1, cfg.al_max_outer + 1):
            res = minimize(lambda x: al_value_and_grad(x, lam_lb, lam_ub, mu), v,
                           memory=cfg.lbfgs_memory, gtol=cfg.lbfgs_gtol,
                           max_iterations=cfg.lbfgs_max_iterations)
            inner += res.iterations
            v = res.x
            if not res.converged:
                return False, v, outer, inner, viol
            if not problem.mask.any():
                return True, v, outer, inner, 0.0
            depth = _predict(v)[:, DEPTH_CHANNEL]
            g_lb = cfg.depth_lb - depth
            g_ub = depth - cfg.depth_ub
            viol = float(np.maximum(np.maximum(g_lb, g_ub)[problem.mask], 0.0).max())
            if viol <= cfg.al_violation_tol:
                return True, v, outer, inner, viol
            lam_lb = np.where(problem.mask, np.maximum(0.0, lam_lb + mu * g_lb), 0.0)
            lam_ub = np.where(problem.mask, np.maximum(0.0, lam_ub + mu * g_ub), 0.0)
            mu *= cfg.al_growth
        return True, v, outer, inner, viol

    def _predict(v: np.ndarray) -> np.ndarray:
        u = u_of_v(v)
        geom = problem.future_geometry
        fut = np.concatenate([geom, u[:, None]], axis=1)
        return model.predict_median(problem.past_targets, problem.past_covariates, fut)

    attempts = []
    if warm_start is not None:
        attempts.append(_u_to_v(warm_start, cfg))
    attempts.append(np.zeros(p))  # constant mid-range input

    status = "failed"
    v_final = attempts[0]
    outer_total = 0
    inner_total = 0
    viol = 0.0
    for i, v0 in enumerate(attempts):
        ok, v, outer, inner, viol = run_al(v0)
        outer_total += outer
        inner_total += inner
        v_final = v
        if ok:
            status = "converged" if i == 0 else "fallback_used"
            break
        if warm_start is None:
            break  # the default point was the only attempt

    u_opt = u_of_v(v_final)
    predicted = _predict(v_final)
    obj = objective(problem, u_opt, model, cfg)
    return MpcSolution(
        u_opt=u_opt, objective=obj, status=status,
        outer_iterations=outer_total, inner_iterations=inner_total,
        solve_time=time.perf_counter() - start, predicted=predicted,
        max_violation=viol)
