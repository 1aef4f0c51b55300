"""Explicit transient heat conduction on a uniform voxel grid.

Units are mm-g-s-K throughout: density g/mm^3, conductivity W/mm/K, fluxes
W/mm^2.  The Stefan-Boltzmann constant in this system is 5.67e-14
W/mm^2/K^4.

Deposition is modeled with inactive elements: every voxel exists from the
start, substrate voxels participate from t=0, and part voxels join the solve
once the beam passes over them.  Faces towards inactive voxels are insulated
except for the convective/radiative surface losses applied on every exposed
face other than the substrate bottom, which holds a Dirichlet condition.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional, Tuple

import numpy as np

from .errors import ConfigError, InvalidMaterialError, NumericalDivergenceError

SIGMA_SB = 5.67e-14  # W/mm^2/K^4
LASER_CUTOFF_RADII = 3.0  # beam flux beyond 3 radii is < 2e-8 of peak


@dataclass(frozen=True)
class MaterialProps:
    """Temperature-dependent material data as piecewise-linear tables.

    Tables are (T, value) breakpoint arrays; a single row means a constant
    property.  Evaluation clamps outside the table range.
    """

    density: float                       # g/mm^3
    cp_table: np.ndarray                 # (n, 2): T [K] -> J/g/K
    k_table: np.ndarray                  # (n, 2): T [K] -> W/mm/K
    emissivity: float
    absorption: float
    solidus_T: float
    liquidus_T: float

    def __post_init__(self):
        object.__setattr__(self, "cp_table", np.atleast_2d(np.asarray(self.cp_table, dtype=float)))
        object.__setattr__(self, "k_table", np.atleast_2d(np.asarray(self.k_table, dtype=float)))
        for name, table in (("cp_table", self.cp_table), ("k_table", self.k_table)):
            if table.ndim != 2 or table.shape[1] != 2:
                raise InvalidMaterialError(f"{name} must have shape (n, 2)")
            if np.any(table[:, 1] <= 0):
                raise InvalidMaterialError(f"{name} values must be strictly positive")
            if np.any(np.diff(table[:, 0]) <= 0):
                raise InvalidMaterialError(f"{name} breakpoints must be strictly increasing")
        if self.density <= 0:
            raise InvalidMaterialError("density must be positive")
        if not 0.0 <= self.emissivity <= 1.0:
            raise InvalidMaterialError("emissivity must lie in [0, 1]")
        if not 0.0 <= self.absorption <= 1.0:
            raise InvalidMaterialError("absorption must lie in [0, 1]")
        if not self.solidus_T < self.liquidus_T:
            raise InvalidMaterialError("solidus_T must be below liquidus_T")

    def cp_at(self, T):
        if self.cp_table.shape[0] == 1:
            return np.full_like(np.asarray(T, dtype=float), self.cp_table[0, 1])
        return np.interp(T, self.cp_table[:, 0], self.cp_table[:, 1])

    def k_at(self, T):
        if self.k_table.shape[0] == 1:
            return np.full_like(np.asarray(T, dtype=float), self.k_table[0, 1])
        return np.interp(T, self.k_table[:, 0], self.k_table[:, 1])


@dataclass(frozen=True)
class PlantConfig:
    dt: float                            # s
    ambient_T0: float = 300.0            # K
    h_conv: float = 2.0e-5               # W/mm^2/K
    stefan_boltzmann: float = SIGMA_SB
    beam_radius: float = 0.9             # mm
    calibration_scale: float = 0.5

    def __post_init__(self):
        if self.dt <= 0:
            raise ConfigError("dt must be positive")
        if self.ambient_T0 <= 0:
            raise ConfigError("ambient_T0 must be positive")
        if self.beam_radius <= 0:
            raise ConfigError("beam_radius must be positive")
        if self.h_conv < 0:
            raise ConfigError("h_conv must be non-negative")


@dataclass
class LaserState:
    position: np.ndarray                 # (3,) mm
    power: float                         # W
    enabled: bool

    def __post_init__(self):
        self.position = np.asarray(self.position, dtype=float)
        if self.power < 0:
            raise ConfigError("laser power must be non-negative")
        if not self.enabled:
            self.power = 0.0


@dataclass
class VoxelGrid:
    """Temperatures and activation state of all part + substrate voxels."""

    spacing: float
    origin: np.ndarray                   # (3,) mm, corner of voxel (0,0,0)
    temperature: np.ndarray              # (nx, ny, nz) K
    active: np.ndarray                   # (nx, ny, nz) bool
    substrate_layers: int

    @property
    def dims(self) -> Tuple[int, int, int]:
        return self.temperature.shape

    def axis_centers(self, axis: int) -> np.ndarray:
        n = self.temperature.shape[axis]
        return self.origin[axis] + (np.arange(n) + 0.5) * self.spacing

    def top_active_layer(self) -> int:
        """Index of the highest z-layer containing any active voxel."""
        layers = np.flatnonzero(self.active.any(axis=(0, 1)))
        return int(layers[-1])

    def copy(self) -> "VoxelGrid":
        return VoxelGrid(self.spacing, self.origin.copy(), self.temperature.copy(),
                         self.active.copy(), self.substrate_layers)


def make_grid(nx: int, ny: int, nz: int, spacing: float, origin,
              substrate_layers: int, T0: float) -> VoxelGrid:
    """Fresh grid with an active substrate slab at ambient temperature."""
    if substrate_layers < 1 or substrate_layers > nz:
        raise ConfigError("substrate_layers must lie in [1, nz]")
    temperature = np.full((nx, ny, nz), float(T0))
    active = np.zeros((nx, ny, nz), dtype=bool)
    active[:, :, :substrate_layers] = True
    return VoxelGrid(float(spacing), np.asarray(origin, dtype=float),
                     temperature, active, int(substrate_layers))


def stability_limit(props: MaterialProps, spacing: float) -> float:
    """Largest stable explicit step: min over T of rho*Cp(T)*h^2 / (6*k(T)).

    The Cp/k ratio is monotone between shared breakpoints, so sampling the
    union of both tables' breakpoints gives the exact minimum.
    """
    temps = np.union1d(props.cp_table[:, 0], props.k_table[:, 0])
    cp = props.cp_at(temps)
    k = props.k_at(temps)
    return float(np.min(props.density * cp * spacing ** 2 / (6.0 * k)))


def gaussian_laser_flux(power: float, eta: float, r_beam: float, d) -> np.ndarray:
    """Beam heat flux magnitude at horizontal distance d from the beam axis.

    Positive values heat the surface; the outward-normal sign convention is
    absorbed here.
    """
    if r_beam <= 0:
        raise ConfigError("beam radius must be positive")
    d = np.asarray(d, dtype=float)
    return 2.0 * eta * power / (np.pi * r_beam ** 2) * np.exp(-2.0 * d ** 2 / r_beam ** 2)


def boundary_fluxes(T, T0: float, h_conv: float, emissivity: float,
                    sigma: float = SIGMA_SB) -> np.ndarray:
    """Total convective + radiative heat-loss flux for an exposed surface."""
    T = np.asarray(T, dtype=float)
    return h_conv * (T - T0) + sigma * emissivity * (T ** 4 - T0 ** 4)


class ThermalPlant:
    """Owns one grid and advances it with an explicit 7-point stencil."""

    def __init__(self, grid: VoxelGrid, props: MaterialProps, cfg: PlantConfig):
        dt_max = stability_limit(props, grid.spacing)
        if cfg.dt > dt_max:
            raise ConfigError(f"dt={cfg.dt:g} s exceeds stability limit {dt_max:g} s")
        self.grid = grid
        self.props = props
        self.cfg = cfg
        self.step_index = 0
        self._xc = grid.axis_centers(0)
        self._yc = grid.axis_centers(1)
        self._zc = grid.axis_centers(2)

    # ------------------------------------------------------------------
    def activate_elements(self, laser: LaserState, layer_height: float) -> int:
        """Activate current-layer voxels within the beam radius of the laser.

        New voxels start at ambient temperature; activation is irreversible.
        Returns the number of voxels activated.
        """
        if not laser.enabled:
            return 0
        g = self.grid
        m = layer_height / g.spacing
        if abs(m - round(m)) > 1e-9:
            raise ConfigError("layer_height must be an integer multiple of the voxel spacing")
        m = int(round(m))
        layer = int(round(laser.position[2] / layer_height))
        if layer < 1:
            return 0
        k_lo = g.substrate_layers + (layer - 1) * m
        k_hi = min(k_lo + m, g.dims[2])
        if k_lo >= g.dims[2]:
            return 0
        dx = self._xc - laser.position[0]
        dy = self._yc - laser.position[1]
        within = (dx[:, None] ** 2 + dy[None, :] ** 2) <= self.cfg.beam_radius ** 2
        newly = 0
        for k in range(k_lo, k_hi):
            sel = within & ~g.active[:, :, k]
            n = int(np.count_nonzero(sel))
            if n:
                g.active[sel, k] = True
                g.temperature[sel, k] = self.cfg.ambient_T0
                newly += n
        return newly

    # ------------------------------------------------------------------
    def step(self, laser: Optional[LaserState] = None) -> None:
        """Advance all active voxels by one explicit step."""
        g = self.grid
        cfg = self.cfg
        h = g.spacing
        T = g.temperature
        act = g.active

        k_arr = self.props.k_at(T)
        cp_arr = self.props.cp_at(T)

        # 7-point Laplacian restricted to active-active face pairs
        lap = np.zeros_like(T)
        for axis in range(3):
            lo = [slice(None)] * 3
            hi = [slice(None)] * 3
            lo[axis] = slice(None, -1)
            hi[axis] = slice(1, None)
            lo, hi = tuple(lo), tuple(hi)
            pair = act[lo] & act[hi]
            diff = np.where(pair, T[hi] - T[lo], 0.0)
            lap[lo] += diff
            lap[hi] -= diff

        # count exposed faces (grid boundary or inactive neighbor), excluding
        # the substrate bottom which is Dirichlet
        exposed = np.zeros_like(T)
        for axis in range(3):
            lo = [slice(None)] * 3
            hi = [slice(None)] * 3
            lo[axis] = slice(None, -1)
            hi[axis] = slice(1, None)
            lo, hi = tuple(lo), tuple(hi)
            # interior faces facing an inactive neighbor
            exposed[lo] += act[lo] & ~act[hi]
            exposed[hi] += act[hi] & ~act[lo]
            # grid-boundary faces
            first = [slice(None)] * 3
            last = [slice(None)] * 3
            first[axis] = 0
            last[axis] = -1
            if not (axis == 2):
                exposed[tuple(first)] += act[tuple(first)]
            exposed[tuple(last)] += act[tuple(last)]

        # top faces exposed upward receive the beam flux
        top_exposed = act.copy()
        top_exposed[:, :, :-1] &= ~act[:, :, 1:]
        source = np.zeros_like(T)
        if laser is not None and laser.enabled and laser.power > 0:
            dx = self._xc - laser.position[0]
            dy = self._yc - laser.position[1]
            d2 = dx[:, None] ** 2 + dy[None, :] ** 2
            footprint = d2 <= (LASER_CUTOFF_RADII * cfg.beam_radius) ** 2
            if footprint.any():
                q = gaussian_laser_flux(laser.power, self.props.absorption,
                                        cfg.beam_radius, np.sqrt(d2))
                q = np.where(footprint, q, 0.0)
                source += q[:, :, None] * top_exposed

        with np.errstate(over="ignore", invalid="ignore"):
            q_loss = boundary_fluxes(T, cfg.ambient_T0, cfg.h_conv,
                                     self.props.emissivity, cfg.stefan_boltzmann)
            source -= q_loss * exposed
            dT = cfg.dt / (self.props.density * cp_arr) * (k_arr * lap / h ** 2 + source / h)
            g.temperature = np.where(act, T + dT, T)
        g.temperature[:, :, 0] = np.where(act[:, :, 0], cfg.ambient_T0,
                                          g.temperature[:, :, 0])
        self.step_index += 1
        active_T = g.temperature[act]
        if active_T.size and not np.isfinite(active_T).all():
            raise NumericalDivergenceError(self.step_index)

    # ------------------------------------------------------------------
    def snapshot(self) -> dict:
        """Arrays describing the full thermal state (for debug dumps/replay)."""
        g = self.grid
        return {
            "temperature": g.temperature.copy(),
            "active": g.active.astype(np.uint8),
        }
