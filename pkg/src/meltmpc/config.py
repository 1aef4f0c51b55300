"""Workbench configuration: one JSON file, dataclass-backed defaults.

Every tunable lives here so a run is reproducible from its manifest alone.
`load_config` overlays a JSON document onto the defaults and rejects unknown
keys with a field-level message.
"""

from __future__ import annotations

import dataclasses
import json
import math
from dataclasses import dataclass, field
from typing import List, Optional

import numpy as np

from .errors import ConfigError
from .features import FeatureConfig
from .mpc import MpcConfig
from .plant import MaterialProps, PlantConfig, ThermalPlant, make_grid
from .profiles import ProfileBounds
from .tide import TideConfig, TrainConfig
from .toolpath import SquarePathSpec


@dataclass
class MaterialSection:
    density: float = 7.95e-3            # g/mm^3
    cp_table: list = field(default_factory=lambda: [[300.0, 0.5]])
    k_table: list = field(default_factory=lambda: [[300.0, 0.018]])
    emissivity: float = 0.3
    absorption: float = 0.35
    solidus_T: float = 1658.0
    liquidus_T: float = 1723.0


@dataclass
class PlantSection:
    dt: float = 0.00714                 # s
    ambient_T0: float = 300.0           # K
    h_conv: float = 2.0e-5              # W/mm^2/K
    beam_radius: float = 0.9            # mm
    calibration_scale: float = 0.5
    spacing: float = 0.5                # mm voxel edge
    margin: float = 2.0                 # mm substrate beyond the track
    substrate_height: float = 3.0       # mm
    material: MaterialSection = field(default_factory=MaterialSection)


@dataclass
class PathSection:
    side_length: float = 8.0            # mm
    track_width: float = 1.5            # mm
    layer_height: float = 0.5           # mm
    num_layers: int = 3
    scan_speed: float = 7.0             # mm/s
    interlayer_dwell: float = 0.4       # s


@dataclass
class FeatureSection:
    window_half: float = 3.0
    sensing_radius: float = 0.9
    fine_spacing: float = 0.2
    depth_box_half: float = 0.75
    depth_box_depth: float = 4.0
    min_support_2d: int = 4
    min_support_3d: int = 5


@dataclass
class DatagenSection:
    n_profiles: int = 10
    seed: int = 1234
    lhs_budget: int = 32
    window: int = 20
    horizon: int = 20
    val_fraction: float = 0.1
    steps_per_sample: int = 5
    save_snapshots: bool = False
    # iid per-sample power dither superposed on the waveforms; uncorrelated
    # excitation keeps the forecaster from leaning on anti-causal waveform
    # correlations, which a power-sequence optimizer would exploit
    excitation_noise_std: float = 12.0
    profile_bounds: dict = field(default_factory=lambda: {
        name: list(getattr(ProfileBounds(), name)) for name in
        ("amplitude", "num_terms", "frequency", "phase", "amp_rate", "freq_rate",
         "phase_rate", "trend_slope", "seasonal_fluct", "seasonal_amp")})


@dataclass
class TideSection:
    num_encoder_layers: int = 1
    num_decoder_layers: int = 1
    decoder_output_dim: int = 16
    hidden_size: int = 128
    decoder_hidden_size: int = 32
    feature_projection_dim: int = 4
    dropout: float = 0.2
    layer_norm: bool = True
    quantiles: list = field(default_factory=lambda: [0.1, 0.5, 0.9])


@dataclass
class TrainSection:
    epochs: int = 100
    batch_size: int = 128
    learning_rate: float = 1e-3
    lr_decay: float = 0.95
    lr_decay_every: int = 2
    l2: float = 1e-3
    seed: int = 99
    init_seed: int = 7
    univariate: bool = False
    tide: TideSection = field(default_factory=TideSection)


@dataclass
class MpcSection:
    q_weight: float = 1.0
    r_weight: float = 10.0
    # desk-scale dilution band; the 0.75 mm-layer print uses [0.075, 0.225]
    depth_lb: float = 0.10
    depth_ub: float = 0.45
    u_lb: float = 504.0
    u_ub: float = 750.0
    constraint_activation_layer: int = 2
    corner_threshold: float = 1.0
    al_mu0: float = 10.0
    al_growth: float = 5.0
    al_max_outer: int = 4
    al_violation_tol: float = 5e-3
    lbfgs_memory: int = 10
    lbfgs_max_iterations: int = 200
    lbfgs_gtol: float = 1e-6
    warm_start: bool = True


@dataclass
class PidSection:
    kp: float = 0.4
    ki: float = 8.0
    kd: float = 0.002
    tune_budget: int = 16
    tune_seed: int = 3
    tune_bounds: list = field(default_factory=lambda: [[0.01, 5.0], [0.1, 50.0], [1e-4, 0.1]])


@dataclass
class ReferenceSection:
    mode: str = "hold"                  # hold | linear
    # steps around the open-loop operating levels; the staircases after each
    # beam-off transition follow the physical melt-pool re-formation ramp
    # the post-dwell staircases trace the measured mid-power melt-pool
    # re-formation ramp, so the recovery is trackable without overdriving
    knots: list = field(default_factory=lambda: [
        [0.0, 1150.0], [0.45, 1250.0],
        [1.7, 1390.0],
        [3.3, 1220.0],
        [4.99, 700.0], [5.06, 860.0], [5.13, 1050.0], [5.20, 1190.0],
        [5.27, 1260.0], [5.38, 1300.0], [5.55, 1330.0],
        [6.3, 1400.0],
        [8.0, 1240.0],
        [9.96, 700.0], [10.03, 860.0], [10.10, 1090.0], [10.17, 1220.0],
        [10.24, 1285.0], [10.35, 1330.0], [10.55, 1355.0],
        [11.3, 1430.0],
        [13.2, 1270.0]])


@dataclass
class RunSection:
    controller: str = "mpc"             # mpc | mpc_unconstrained | pid | open_loop
    warmup_u: float = 627.0
    steps_per_sample: int = 5
    smoothing_steps: int = 10
    seed: int = 0
    max_sampling_steps: int = 0         # 0 = full toolpath
    consecutive_failure_limit: int = 10
    open_loop_u: float = 627.0
    # park the commanded power at warmup_u while the beam is off between
    # layers, so a restart never inherits an end-of-layer extreme
    reset_u_at_dwell: bool = True
    reference: ReferenceSection = field(default_factory=ReferenceSection)


@dataclass
class WorkbenchConfig:
    plant: PlantSection = field(default_factory=PlantSection)
    path: PathSection = field(default_factory=PathSection)
    features: FeatureSection = field(default_factory=FeatureSection)
    datagen: DatagenSection = field(default_factory=DatagenSection)
    train: TrainSection = field(default_factory=TrainSection)
    mpc: MpcSection = field(default_factory=MpcSection)
    pid: PidSection = field(default_factory=PidSection)
    run: RunSection = field(default_factory=RunSection)


def _overlay(obj, data: dict, path: str):
    for key, value in data.items():
        if not hasattr(obj, key):
            raise ConfigError(f"unknown config key: {path}{key}")
        current = getattr(obj, key)
        if dataclasses.is_dataclass(current) and isinstance(value, dict):
            _overlay(current, value, f"{path}{key}.")
        else:
            if current is not None and not isinstance(value, type(current)) \
                    and not (isinstance(current, float) and isinstance(value, int)):
                raise ConfigError(
                    f"bad type for {path}{key}: expected {type(current).__name__},"
                    f" got {type(value).__name__}")
            setattr(obj, key, float(value) if isinstance(current, float) else value)


def load_config(path: Optional[str] = None, overrides: Optional[dict] = None) -> WorkbenchConfig:
    cfg = WorkbenchConfig()
    if path is not None:
        with open(path, "r", encoding="utf-8") as fh:
            try:
                data = json.load(fh)
            except json.JSONDecodeError as exc:
                raise ConfigError(f"{path}: invalid JSON: {exc}") from exc
        _overlay(cfg, data, "")
    if overrides:
        _overlay(cfg, overrides, "")
    validate_config(cfg)
    return cfg


def config_to_dict(cfg) -> dict:
    return dataclasses.asdict(cfg)


def validate_config(cfg: WorkbenchConfig) -> None:
    m = math.fmod(cfg.path.layer_height, cfg.plant.spacing)
    if min(m, cfg.plant.spacing - m) > 1e-9:
        raise ConfigError("path.layer_height must be a multiple of plant.spacing")
    if cfg.run.controller not in ("mpc", "mpc_unconstrained", "pid", "open_loop"):
        raise ConfigError(f"unknown controller kind: {cfg.run.controller}")
    if cfg.run.steps_per_sample < 1:
        raise ConfigError("run.steps_per_sample must be at least 1")
    if cfg.datagen.val_fraction < 0 or cfg.datagen.val_fraction >= 1:
        raise ConfigError("datagen.val_fraction must lie in [0, 1)")
    if cfg.run.reference.mode not in ("hold", "linear"):
        raise ConfigError("run.reference.mode must be 'hold' or 'linear'")
    if not cfg.run.reference.knots:
        raise ConfigError("run.reference.knots must not be empty")


# ----------------------------------------------------------------------
# builders: config sections -> domain objects

def build_material(cfg: WorkbenchConfig) -> MaterialProps:
    m = cfg.plant.material
    return MaterialProps(
        density=m.density, cp_table=np.asarray(m.cp_table),
        k_table=np.asarray(m.k_table), emissivity=m.emissivity,
        absorption=m.absorption, solidus_T=m.solidus_T, liquidus_T=m.liquidus_T)


def build_plant_config(cfg: WorkbenchConfig) -> PlantConfig:
    p = cfg.plant
    return PlantConfig(dt=p.dt, ambient_T0=p.ambient_T0, h_conv=p.h_conv,
                       beam_radius=p.beam_radius, calibration_scale=p.calibration_scale)


def build_path_spec(cfg: WorkbenchConfig) -> SquarePathSpec:
    p = cfg.path
    return SquarePathSpec(side_length=p.side_length, track_width=p.track_width,
                          layer_height=p.layer_height, num_layers=p.num_layers,
                          scan_speed=p.scan_speed, interlayer_dwell=p.interlayer_dwell)


def build_plant(cfg: WorkbenchConfig) -> ThermalPlant:
    p = cfg.plant
    path = cfg.path
    substrate_layers = int(round(p.substrate_height / p.spacing))
    layers_z = int(round(path.num_layers * path.layer_height / p.spacing))
    nx = int(math.ceil((path.side_length + 2 * p.margin) / p.spacing))
    nz = substrate_layers + layers_z
    origin = (-p.margin, -p.margin, -p.substrate_height)
    grid = make_grid(nx, nx, nz, p.spacing, origin, substrate_layers, p.ambient_T0)
    return ThermalPlant(grid, build_material(cfg), build_plant_config(cfg))


def build_feature_config(cfg: WorkbenchConfig) -> FeatureConfig:
    f = cfg.features
    return FeatureConfig(window_half=f.window_half, sensing_radius=f.sensing_radius,
                         fine_spacing=f.fine_spacing, depth_box_half=f.depth_box_half,
                         depth_box_depth=f.depth_box_depth,
                         layer_height=cfg.path.layer_height,
                         min_support_2d=f.min_support_2d, min_support_3d=f.min_support_3d)


def build_mpc_config(cfg: WorkbenchConfig) -> MpcConfig:
    m = cfg.mpc
    return MpcConfig(q_weight=m.q_weight, r_weight=m.r_weight,
                     depth_lb=m.depth_lb, depth_ub=m.depth_ub,
                     u_lb=m.u_lb, u_ub=m.u_ub,
                     constraint_activation_layer=m.constraint_activation_layer,
                     corner_threshold=m.corner_threshold,
                     al_mu0=m.al_mu0, al_growth=m.al_growth,
                     al_max_outer=m.al_max_outer, al_violation_tol=m.al_violation_tol,
                     lbfgs_memory=m.lbfgs_memory,
                     lbfgs_max_iterations=m.lbfgs_max_iterations,
                     lbfgs_gtol=m.lbfgs_gtol)


def build_tide_config(cfg: WorkbenchConfig) -> TideConfig:
    t = cfg.train.tide
    return TideConfig(window=cfg.datagen.window, horizon=cfg.datagen.horizon,
                      num_targets=1 if cfg.train.univariate else 2,
                      covariate_dim=4,
                      num_encoder_layers=t.num_encoder_layers,
                      num_decoder_layers=t.num_decoder_layers,
                      decoder_output_dim=t.decoder_output_dim,
                      hidden_size=t.hidden_size,
                      decoder_hidden_size=t.decoder_hidden_size,
                      feature_projection_dim=t.feature_projection_dim,
                      dropout=t.dropout, layer_norm=t.layer_norm,
                      quantiles=tuple(t.quantiles))


def build_train_config(cfg: WorkbenchConfig) -> TrainConfig:
    t = cfg.train
    return TrainConfig(epochs=t.epochs, batch_size=t.batch_size,
                       learning_rate=t.learning_rate, lr_decay=t.lr_decay,
                       lr_decay_every=t.lr_decay_every, l2=t.l2, seed=t.seed)


def build_profile_bounds(cfg: WorkbenchConfig) -> ProfileBounds:
    raw = cfg.datagen.profile_bounds
    return ProfileBounds(**{k: tuple(v) for k, v in raw.items()})


def reference_function(cfg: WorkbenchConfig):
    """Reference temperature r(t) from the knot list."""
    ref = cfg.run.reference
    knots = sorted((float(t), float(v)) for t, v in ref.knots)
    times = np.array([k[0] for k in knots])
    values = np.array([k[1] for k in knots])
    if ref.mode == "linear":
        return lambda t: float(np.interp(t, times, values))

    def hold(t):
        idx = int(np.searchsorted(times, t, side="right")) - 1
        return float(values[max(idx, 0)])

    return hold
