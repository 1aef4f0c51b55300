"""Single-track square scan path and its geometric covariates.

The beam traverses the square perimeter counterclockwise from the origin
corner at constant speed, one lap per deposited layer, with the beam off
during a fixed dwell while the nozzle indexes up to the next layer.  The
geometric covariates are the distances from the beam to the nearest geometry
boundary along x and y, plus the nozzle height.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ConfigError


@dataclass(frozen=True)
class SquarePathSpec:
    side_length: float           # mm
    track_width: float = 1.5     # mm
    layer_height: float = 0.75   # mm
    num_layers: int = 10
    scan_speed: float = 7.0      # mm/s
    interlayer_dwell: float = 1.0  # s, beam off

    def __post_init__(self):
        if self.side_length <= 0:
            raise ConfigError("side_length must be positive")
        if self.scan_speed <= 0:
            raise ConfigError("scan_speed must be positive")
        if self.num_layers < 1:
            raise ConfigError("num_layers must be at least 1")
        if self.interlayer_dwell < 0:
            raise ConfigError("interlayer_dwell must be non-negative")

    @property
    def perimeter(self) -> float:
        return 4.0 * self.side_length

    @property
    def lap_time(self) -> float:
        return self.perimeter / self.scan_speed

    @property
    def total_time(self) -> float:
        """Time of the final lap's completion (no trailing dwell)."""
        return self.num_layers * self.lap_time + (self.num_layers - 1) * self.interlayer_dwell


@dataclass(frozen=True)
class LaserPose:
    position: np.ndarray         # (3,) mm
    enabled: bool
    layer: int


@dataclass(frozen=True)
class Covariates:
    d_x: float                   # mm, distance to nearest x boundary
    d_y: float                   # mm
    z: float                     # mm


def _perimeter_point(side: float, s: float) -> np.ndarray:
    """Point at arclength s (counterclockwise from the origin corner)."""
    s = s % (4.0 * side)
    if s <= side:
        return np.array([s, 0.0])
    if s <= 2 * side:
        return np.array([side, s - side])
    if s <= 3 * side:
        return np.array([3 * side - s, side])
    return np.array([0.0, 4 * side - s])


def laser_pose(spec: SquarePathSpec, t: float) -> LaserPose:
    """Beam position, enable flag and layer index at time t >= 0.

    During an interlayer dwell the beam is parked at the start corner,
    disabled, and already reports the upcoming layer's height.  Past the
    final lap the beam stays disabled at the last layer's height.
    """
    if t < 0:
        raise ConfigError("t must be non-negative")
    cycle = spec.lap_time + spec.interlayer_dwell
    layer = int(t // cycle) + 1
    if layer > spec.num_layers:
        pos = np.array([0.0, 0.0, spec.num_layers * spec.layer_height])
        return LaserPose(pos, False, spec.num_layers)
    t_in = t - (layer - 1) * cycle
    if t_in < spec.lap_time:
        xy = _perimeter_point(spec.side_length, spec.scan_speed * t_in)
        pos = np.array([xy[0], xy[1], layer * spec.layer_height])
        return LaserPose(pos, True, layer)
    # dwell: nozzle indexed up to the next layer, beam off at the corner
    nxt = min(layer + 1, spec.num_layers)
    pos = np.array([0.0, 0.0, nxt * spec.layer_height])
    return LaserPose(pos, False, nxt)


def covariates_at(spec: SquarePathSpec, position) -> Covariates:
    """Boundary distances d_x, d_y and nozzle height for a perimeter point."""
    x, y, z = (float(v) for v in position)
    return Covariates(
        d_x=min(x, spec.side_length - x),
        d_y=min(y, spec.side_length - y),
        z=z,
    )


def near_corner(cov: Covariates, threshold: float = 2.0) -> bool:
    """True when the beam is within `threshold` of a corner in both axes."""
    return cov.d_x <= threshold and cov.d_y <= threshold
