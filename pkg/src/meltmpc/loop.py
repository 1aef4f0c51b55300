"""Closed-loop execution: plant stepping, measurement, control, logging.

One sampling step covers `steps_per_sample` plant steps.  The loop warms up
open-loop until the controller has a full history window, then each sampling
step: smooth the recent per-step feature extractions into the measurement,
ask the controller for the next input, hold it for the sampling interval,
extract features, and log.  The beam-off dwell between layers idles the
controller while history keeps recording, matching how the training data
generator sees the process.

The same driver runs data generation (open-loop profiles, extraction at
sampling instants only) and control runs (per-step extraction feeding the
measurement average), so an open-loop control run reproduces the data
generator's trajectory exactly.
"""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass, field
from typing import List, Optional

import numpy as np

from . import mpc as mpc_mod
from .artifacts import sha256_bytes, write_tensors
from .config import (
    WorkbenchConfig,
    build_feature_config,
    build_material,
    build_mpc_config,
    build_path_spec,
    build_plant,
    reference_function,
)
from .errors import (
    DegenerateGeometryError,
    InsufficientSupportError,
    MeltMpcError,
    RunAbortedError,
)
from .features import extract_depth, extract_temperature
from .pid import PidGains, PidState, pid_step
from .plant import LaserState
from .profiles import ProfileParams, evaluate_profile
from .tide import DEPTH_CHANNEL, TEMP_CHANNEL, TideModel
from .toolpath import covariates_at, laser_pose, near_corner

COLUMNS = [
    "step", "time", "laser_on", "meas_clean", "layer", "d_x", "d_y", "z", "u",
    "raw_temp", "raw_depth", "meas_temp", "meas_depth", "reference",
    "constraint_mask", "controller_active", "solver_status", "objective",
    "outer_iterations", "inner_iterations", "solve_time",
]
TIMING_COLUMNS = {"solve_time"}
STATUS_CODES = {"warmup": 0, "idle": 1, "open_loop": 2, "pid": 3,
                "converged": 4, "fallback_used": 5, "failed": 6}


@dataclass
class RunLog:
    """Column-oriented log, one row per sampling step."""

    data: dict
    metrics: dict = field(default_factory=dict)
    aborted: bool = False
    abort_reason: str = ""

    def __len__(self):
        return len(self.data["step"])

    def column(self, name) -> np.ndarray:
        return np.asarray(self.data[name])

    def to_csv_bytes(self, include_timing: bool = True) -> bytes:
        cols = [c for c in COLUMNS if include_timing or c not in TIMING_COLUMNS]
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(cols)
        for i in range(len(self)):
            row = []
            for c in cols:
                v = self.data[c][i]
                if isinstance(v, (int, np.integer)):
                    row.append(str(int(v)))
                elif isinstance(v, str):
                    row.append(v)
                else:
                    row.append(format(float(v), ".17g"))
            writer.writerow(row)
        return buf.getvalue().encode("utf-8")

    def deterministic_hash(self) -> str:
        """Hash of everything except wall-clock timing columns."""
        return sha256_bytes(self.to_csv_bytes(include_timing=False))

    def save_csv(self, path) -> None:
        with open(path, "wb") as fh:
            fh.write(self.to_csv_bytes())


# ----------------------------------------------------------------------
# controllers

class OpenLoopSource:
    """Commanded power from a waveform (or constant) regardless of feedback.

    Optional iid dither decorrelates consecutive commands so the training
    data carries persistent excitation at every lag.
    """

    def __init__(self, params: Optional[ProfileParams], constant: float, bounds,
                 noise_std: float = 0.0, noise_seed: int = 0):
        self.params = params
        self.constant = float(np.clip(constant, *bounds))
        self.bounds = bounds
        self.noise_std = noise_std
        self.rng = np.random.default_rng(noise_seed)

    def decide(self, t: float, ctx) -> tuple:
        if self.params is None:
            u = self.constant
        else:
            u = float(evaluate_profile(self.params, np.array([t]), self.bounds)[0])
        if self.noise_std > 0.0:
            u += self.noise_std * self.rng.standard_normal()
        return float(np.clip(u, *self.bounds)), {"status": "open_loop"}


class PidController:
    def __init__(self, gains: PidGains, dt: float, u0: float, bounds):
        self.gains = gains
        self.bounds = bounds
        self.state = PidState(u_prev=u0, e_prev=None, integral=0.0, dt=dt)

    def decide(self, t: float, ctx) -> tuple:
        u, self.state = pid_step(self.gains, self.state, ctx["reference"],
                                 ctx["measurement"][TEMP_CHANNEL], self.bounds)
        return u, {"status": "pid"}


class MpcController:
    def __init__(self, model: TideModel, cfg, constrained: bool, warm_start: bool,
                 solver_log_path: Optional[str] = None):
        self.model = model
        self.cfg = cfg
        self.constrained = constrained
        self.warm_start_enabled = warm_start
        self.previous_solution: Optional[np.ndarray] = None
        self.solver_log_path = solver_log_path

    def _log_solve(self, problem, sol) -> None:
        if self.solver_log_path is None:
            return
        import json

        blob = b"".join(np.ascontiguousarray(a).tobytes() for a in (
            problem.past_targets, problem.past_covariates,
            problem.future_geometry, problem.reference,
            np.array([problem.u_prev]), problem.mask))
        record = {
            "problem_hash": sha256_bytes(blob)[:16],
            "status": sol.status,
            "objective": sol.objective,
            "outer_iterations": sol.outer_iterations,
            "inner_iterations": sol.inner_iterations,
            "solve_time": sol.solve_time,
            "max_violation": sol.max_violation,
            "u_opt": sol.u_opt.tolist(),
            "predicted": sol.predicted.tolist(),
            "constraint_mask": problem.mask.astype(int).tolist(),
        }
        with open(self.solver_log_path, "a", encoding="utf-8") as fh:
            fh.write(json.dumps(record, sort_keys=True) + "\n")

    def decide(self, t: float, ctx) -> tuple:
        problem = mpc_mod.MpcProblem(
            past_targets=ctx["past_targets"],
            past_covariates=ctx["past_covariates"],
            future_geometry=ctx["future_geometry"],
            reference=ctx["future_reference"],
            u_prev=ctx["u_prev"],
            mask=ctx["future_mask"] if self.constrained
            else np.zeros(len(ctx["future_mask"]), dtype=bool),
        )
        warm = None
        if self.warm_start_enabled and self.previous_solution is not None:
            warm = mpc_mod.warm_start_shift(self.previous_solution)
        sol = mpc_mod.solve(problem, self.model, self.cfg, warm_start=warm)
        self._log_solve(problem, sol)
        info = {"status": sol.status, "objective": sol.objective,
                "outer_iterations": sol.outer_iterations,
                "inner_iterations": sol.inner_iterations,
                "solve_time": sol.solve_time}
        if sol.status == "failed":
            return ctx["u_prev"], info
        self.previous_solution = sol.u_opt
        return float(sol.u_opt[0]), info


# ----------------------------------------------------------------------

def run(cfg: WorkbenchConfig, model: Optional[TideModel] = None,
        profile: Optional[ProfileParams] = None,
        snapshot_dir: Optional[str] = None,
        sampled_extraction: Optional[bool] = None,
        solver_log_path: Optional[str] = None,
        noise_std: float = 0.0, noise_seed: int = 0) -> RunLog:
    """Execute one run per the configured controller kind.

    `profile` overrides the open-loop constant power (data generation).
    `sampled_extraction=True` extracts features only at sampling instants
    (the data-generation cadence); the default is per-plant-step extraction
    for controller kinds that need the smoothed measurement.
    """
    kind = cfg.run.controller
    plant = build_plant(cfg)
    path = build_path_spec(cfg)
    feat = build_feature_config(cfg)
    material = build_material(cfg)
    mpc_cfg = build_mpc_config(cfg)
    ref_fn = reference_function(cfg)
    bounds = (mpc_cfg.u_lb, mpc_cfg.u_ub)

    n_sub = cfg.run.steps_per_sample
    dt = cfg.plant.dt
    sample_dt = n_sub * dt
    total_steps = int(np.floor(path.total_time / sample_dt))
    if cfg.run.max_sampling_steps > 0:
        total_steps = min(total_steps, cfg.run.max_sampling_steps)

    window = cfg.datagen.window
    horizon = cfg.datagen.horizon
    if sampled_extraction is None:
        sampled_extraction = kind == "open_loop"

    if kind in ("mpc", "mpc_unconstrained"):
        if model is None:
            raise MeltMpcError("MPC run needs a trained model")
        controller = MpcController(model, mpc_cfg, constrained=(kind == "mpc"),
                                   warm_start=cfg.mpc.warm_start,
                                   solver_log_path=solver_log_path)
    elif kind == "pid":
        controller = PidController(PidGains(cfg.pid.kp, cfg.pid.ki, cfg.pid.kd),
                                   dt=sample_dt, u0=cfg.run.warmup_u, bounds=bounds)
    else:
        controller = OpenLoopSource(profile, cfg.run.open_loop_u, bounds,
                                    noise_std=noise_std, noise_seed=noise_seed)

    target_channels = (0, 1)
    if model is not None and model.config.num_targets == 1:
        target_channels = (0,)

    data = {c: [] for c in COLUMNS}
    recent: List[tuple] = []   # per-plant-step (temp, depth) extractions
    recent_on: List[bool] = []  # beam state per extraction in `recent`
    meas_hist: List[np.ndarray] = []
    cov_hist: List[np.ndarray] = []
    last_sample = (cfg.plant.ambient_T0 * cfg.plant.calibration_scale,
                   -path.layer_height)
    u_prev = float(np.clip(cfg.run.warmup_u, *bounds))
    consecutive_failures = 0
    aborted = False
    abort_reason = ""

    def extract_at(t_now: float) -> tuple:
        nonlocal last_sample
        pose = laser_pose(path, t_now)
        laser = LaserState(pose.position, u_prev if pose.enabled else 0.0, pose.enabled)
        try:
            temp = extract_temperature(plant.grid, laser, feat, plant.cfg)
            depth = extract_depth(plant.grid, laser, material, feat)
            last_sample = (temp, depth)
        except (InsufficientSupportError, DegenerateGeometryError):
            pass  # keep the previous sample
        return last_sample

    def future_context(k: int):
        """Geometry, reference and constraint mask for samples k..k+p-1."""
        geom = np.empty((horizon, 3))
        refs = np.empty(horizon)
        mask = np.zeros(horizon, dtype=bool)
        for i in range(horizon):
            t_i = (k + i) * sample_dt
            pose = laser_pose(path, t_i)
            cov = covariates_at(path, pose.position)
            geom[i] = (cov.d_x, cov.d_y, cov.z)
            refs[i] = ref_fn(t_i)
            mask[i] = (pose.enabled
                       and pose.layer >= mpc_cfg.constraint_activation_layer
                       and not near_corner(cov, mpc_cfg.corner_threshold))
        return geom, refs, mask

    for k in range(1, total_steps + 1):
        t_start = (k - 1) * sample_dt
        pose_start = laser_pose(path, t_start)
        info = {"status": "warmup"}
        if len(meas_hist) < window or kind == "open_loop":
            if kind == "open_loop":
                u_k, info = controller.decide(t_start, None)
            else:
                u_k = u_prev
        elif not pose_start.enabled:
            u_k = float(np.clip(cfg.run.warmup_u, *bounds)) \
                if cfg.run.reset_u_at_dwell else u_prev
            info = {"status": "idle"}
        else:
            geom, refs, mask = future_context(k)
            ctx = {
                "reference": ref_fn(k * sample_dt),
                "measurement": meas_hist[-1],
                "past_targets": np.stack(meas_hist[-window:])[:, list(target_channels)],
                "past_covariates": np.stack(cov_hist[-window:]),
                "future_geometry": geom,
                "future_reference": refs,
                "future_mask": mask,
                "u_prev": u_prev,
            }
            u_k, info = controller.decide(t_start, ctx)
            if info["status"] == "failed":
                consecutive_failures += 1
                if consecutive_failures >= cfg.run.consecutive_failure_limit:
                    aborted = True
                    abort_reason = (f"{consecutive_failures} consecutive controller "
                                    f"failures at sampling step {k}")
            else:
                consecutive_failures = 0

        # advance the plant through the sampling interval
        try:
            for j in range(n_sub):
                t_sub = t_start + j * dt
                pose = laser_pose(path, t_sub)
                laser = LaserState(pose.position, u_k if pose.enabled else 0.0,
                                   pose.enabled)
                if pose.enabled:
                    plant.activate_elements(laser, path.layer_height)
                plant.step(laser)
                if not sampled_extraction:
                    recent.append(extract_at(t_sub + dt))
                    recent_on.append(laser_pose(path, t_sub + dt).enabled)
                    if len(recent) > cfg.run.smoothing_steps:
                        recent.pop(0)
                        recent_on.pop(0)
        except MeltMpcError as exc:
            aborted = True
            abort_reason = f"plant divergence: {exc}"

        t_k = k * sample_dt
        if sampled_extraction:
            raw = extract_at(t_k)
            meas = raw
            meas_clean = bool(laser_pose(path, t_k).enabled)
        else:
            raw = recent[-1] if recent else last_sample
            window_vals = recent[-cfg.run.smoothing_steps:]
            meas = tuple(np.mean([v[i] for v in window_vals]) for i in range(2))
            # a measurement is "clean" when its whole averaging window saw
            # the beam on; transition-phase samples are excluded from metrics
            meas_clean = bool(recent_on) and all(recent_on)

        pose_k = laser_pose(path, t_k)
        cov_k = covariates_at(path, pose_k.position)
        mask_k = (pose_k.enabled
                  and pose_k.layer >= mpc_cfg.constraint_activation_layer
                  and not near_corner(cov_k, mpc_cfg.corner_threshold))
        meas_hist.append(np.array(meas))
        cov_hist.append(np.array([cov_k.d_x, cov_k.d_y, cov_k.z, u_k]))
        u_prev = u_k

        data["step"].append(k)
        data["time"].append(t_k)
        data["laser_on"].append(int(pose_k.enabled))
        data["meas_clean"].append(int(pose_k.enabled and meas_clean))
        data["layer"].append(pose_k.layer)
        data["d_x"].append(cov_k.d_x)
        data["d_y"].append(cov_k.d_y)
        data["z"].append(cov_k.z)
        data["u"].append(u_k)
        data["raw_temp"].append(raw[0])
        data["raw_depth"].append(raw[1])
        data["meas_temp"].append(meas[0])
        data["meas_depth"].append(meas[1])
        data["reference"].append(ref_fn(t_k))
        data["constraint_mask"].append(int(mask_k))
        data["controller_active"].append(int(info["status"] not in ("warmup", "idle", "open_loop")))
        data["solver_status"].append(info["status"])
        data["objective"].append(float(info.get("objective", np.nan)))
        data["outer_iterations"].append(int(info.get("outer_iterations", 0)))
        data["inner_iterations"].append(int(info.get("inner_iterations", 0)))
        data["solve_time"].append(float(info.get("solve_time", 0.0)))

        if snapshot_dir is not None:
            snap = plant.snapshot()
            snap["laser"] = np.array([*pose_k.position, float(pose_k.enabled), u_k])
            write_tensors(f"{snapshot_dir}/snapshot_{k:06d}.bin", snap)

        if aborted:
            break

    log = RunLog(data=data, aborted=aborted, abort_reason=abort_reason)
    log.metrics = metrics(log, mpc_cfg)
    if aborted:
        raise RunAbortedError(abort_reason, partial_log=log)
    return log


# ----------------------------------------------------------------------

def metrics(log: RunLog, mpc_cfg=None, strict_r2: bool = False) -> dict:
    """Tracking and smoothness metrics over beam-on samples.

    R^2 needs a non-constant reference; with `strict_r2` a zero-variance
    reference raises, otherwise the entry is simply omitted.
    """
    if len(log) == 0:
        raise MeltMpcError("empty run log")
    # beam-on samples whose measurement window did not straddle a beam-off
    # phase (transition samples mix in cool-down readings); closed-loop runs
    # are judged from controller takeover
    on = log.column("meas_clean").astype(bool)
    active = log.column("controller_active").astype(bool)
    if active.any():
        on &= np.arange(len(log)) >= int(np.argmax(active))
    ref = log.column("reference")[on]
    meas = log.column("meas_temp")[on]
    out: dict = {"n_samples": int(len(log)),
                 "n_laser_on": int(log.column("laser_on").sum()),
                 "n_metric_samples": int(on.sum())}
    if on.sum() >= 2:
        ss_tot = float(np.sum((ref - ref.mean()) ** 2))
        if ss_tot <= 0 and strict_r2:
            raise MeltMpcError("zero-variance reference: R^2 undefined")
        err = meas - ref
        if ss_tot > 0:
            out["r2"] = 1.0 - float(np.sum(err ** 2)) / ss_tot
        out["mape"] = float(np.mean(np.abs(err) / np.abs(ref)))
        out["rrmse"] = float(np.sqrt(np.mean(err ** 2)) / np.sqrt(np.mean(ref ** 2)))
        u = log.column("u")
        both_on = on[1:] & on[:-1]
        out["total_variation_u"] = float(np.abs(np.diff(u))[both_on].sum())
    masked = log.column("constraint_mask").astype(bool) & on
    if mpc_cfg is not None and masked.any():
        depth = log.column("meas_depth")[masked]
        bad = (depth < mpc_cfg.depth_lb) | (depth > mpc_cfg.depth_ub)
        out["depth_violation_fraction"] = float(bad.mean())
        out["n_masked"] = int(masked.sum())
    solved = log.column("solve_time") > 0
    if solved.any():
        st = log.column("solve_time")[solved]
        out["solve_time_mean"] = float(st.mean())
        out["solve_time_max"] = float(st.max())
        out["inner_iterations_mean"] = float(log.column("inner_iterations")[solved].mean())
        statuses = [s for s, f in zip(log.data["solver_status"], solved) if f]
        out["solver_failures"] = int(sum(1 for s in statuses if s == "failed"))
        out["solver_fallbacks"] = int(sum(1 for s in statuses if s == "fallback_used"))
    return out


def solve_time_histogram(log: RunLog, n_bins: int = 20):
    """(bin_edges, counts) over steps where the solver actually ran."""
    st = log.column("solve_time")
    st = st[st > 0]
    if st.size == 0:
        return np.array([0.0, 1.0]), np.array([0])
    counts, edges = np.histogram(st, bins=n_bins)
    return edges, counts
