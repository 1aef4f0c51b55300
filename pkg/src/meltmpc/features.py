"""Melt-pool temperature and depth extraction from a voxel temperature field.

Emulates in-situ sensing: scattered active-voxel temperatures around the beam
are interpolated with a multiquadric radial basis function (plus a linear
polynomial tail so affine fields are reproduced exactly), resampled on a fine
grid, and reduced to the two scalar features driving the controller:

* temperature: fine-grid average within the sensing radius of the beam axis,
  scaled by the conduction-model calibration factor;
* depth: deepest fine-grid point at or above the solidus temperature, minus
  the clad layer height (may be negative while the pool is shallow).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import DegenerateGeometryError, InsufficientSupportError
from .plant import LaserState, MaterialProps, PlantConfig, VoxelGrid


@dataclass(frozen=True)
class FeatureConfig:
    window_half: float = 3.0        # mm, +-x/y window for the surface fit
    sensing_radius: float = 0.9     # mm, averaging disc radius
    fine_spacing: float = 0.2       # mm, resampling grid pitch (2-D and 3-D)
    depth_box_half: float = 0.75    # mm, +-x/y extent of the depth probe box
    depth_box_depth: float = 4.0    # mm, probe depth below the top surface
    layer_height: float = 0.75      # mm, clad height subtracted from melt extent
    min_support_2d: int = 4
    min_support_3d: int = 5


@dataclass(frozen=True)
class MeltPoolSample:
    x_temp: float                   # K (calibrated)
    x_depth: float                  # mm (may be negative)
    step_index: int


class RbfInterpolant:
    """Exact scattered-data interpolant: multiquadric kernel + linear tail.

    The shape parameter defaults to the mean nearest-neighbor spacing of the
    support points.  A small Tikhonov jitter keeps the kernel block well
    conditioned; the fit is verified to reproduce the training values.
    """

    JITTER = 1e-10

    def __init__(self, points: np.ndarray, values: np.ndarray, shape_param: float | None = None):
        points = np.atleast_2d(np.asarray(points, dtype=float))
        values = np.asarray(values, dtype=float)
        n, dim = points.shape
        if n < dim + 2:
            raise InsufficientSupportError(
                f"need at least {dim + 2} points for a {dim}-D fit, got {n}")
        if values.shape != (n,):
            raise ValueError("values must be one per point")

        if shape_param is None:
            d2 = ((points[:, None, :] - points[None, :, :]) ** 2).sum(axis=2)
            np.fill_diagonal(d2, np.inf)
            nearest = np.sqrt(d2.min(axis=1))
            shape_param = float(nearest.mean())
        if not np.isfinite(shape_param) or shape_param <= 0:
            raise DegenerateGeometryError("coincident support points")

        self.centers = points
        self.c = shape_param
        a = self._kernel_matrix(points, points)
        a[np.diag_indices(n)] += self.JITTER
        tail = np.hstack([np.ones((n, 1)), points])     # 1, x, y[, z]
        q = tail.shape[1]
        system = np.zeros((n + q, n + q))
        system[:n, :n] = a
        system[:n, n:] = tail
        system[n:, :n] = tail.T
        rhs = np.concatenate([values, np.zeros(q)])
        try:
            coef = np.linalg.solve(system, rhs)
        except np.linalg.LinAlgError as exc:
            raise DegenerateGeometryError(f"singular interpolation system: {exc}") from exc

        self.weights = coef[:n]
        self.tail_coef = coef[n:]
        residual = np.abs(a @ self.weights + tail @ self.tail_coef - values)
        scale = max(np.abs(values).max(), 1.0)
        if residual.max() > 1e-8 * scale:
            raise DegenerateGeometryError(
                f"interpolant failed to reproduce node values (residual {residual.max():.3e})")

    def _kernel_matrix(self, a: np.ndarray, b: np.ndarray) -> np.ndarray:
        d2 = ((a[:, None, :] - b[None, :, :]) ** 2).sum(axis=2)
        return np.sqrt(d2 + self.c ** 2)

    def evaluate(self, points) -> np.ndarray:
        points = np.atleast_2d(np.asarray(points, dtype=float))
        k = self._kernel_matrix(points, self.centers)
        tail = np.hstack([np.ones((points.shape[0], 1)), points])
        return k @ self.weights + tail @ self.tail_coef


def rbf_fit(points, values) -> RbfInterpolant:
    return RbfInterpolant(points, values)


def _symmetric_offsets(half_width: float, spacing: float) -> np.ndarray:
    n = int(np.floor(half_width / spacing + 1e-9))
    return np.arange(-n, n + 1) * spacing


def _top_layer_support(grid: VoxelGrid, laser: LaserState, window_half: float):
    """Active voxel centers of the top layer within the x/y window."""
    k_top = grid.top_active_layer()
    xc = grid.axis_centers(0)
    yc = grid.axis_centers(1)
    ix = np.flatnonzero(np.abs(xc - laser.position[0]) <= window_half)
    iy = np.flatnonzero(np.abs(yc - laser.position[1]) <= window_half)
    if ix.size == 0 or iy.size == 0:
        return np.empty((0, 2)), np.empty(0), k_top
    sub_active = grid.active[np.ix_(ix, iy)][:, :, k_top]
    sub_temp = grid.temperature[np.ix_(ix, iy)][:, :, k_top]
    sel = np.nonzero(sub_active)
    pts = np.column_stack([xc[ix][sel[0]], yc[iy][sel[1]]])
    return pts, sub_temp[sel], k_top


def extract_temperature(grid: VoxelGrid, laser: LaserState, cfg: FeatureConfig,
                        plant_cfg: PlantConfig) -> float:
    """Calibrated melt-pool temperature around the beam position."""
    pts, vals, _ = _top_layer_support(grid, laser, cfg.window_half)
    if pts.shape[0] < cfg.min_support_2d:
        raise InsufficientSupportError(
            f"{pts.shape[0]} top-layer nodes in window, need {cfg.min_support_2d}")
    surf = rbf_fit(pts, vals)
    off = _symmetric_offsets(cfg.window_half, cfg.fine_spacing)
    gx, gy = np.meshgrid(laser.position[0] + off, laser.position[1] + off, indexing="ij")
    fine = np.column_stack([gx.ravel(), gy.ravel()])
    temps = surf.evaluate(fine)
    r2 = (fine[:, 0] - laser.position[0]) ** 2 + (fine[:, 1] - laser.position[1]) ** 2
    disc = r2 <= cfg.sensing_radius ** 2
    return float(temps[disc].mean()) * plant_cfg.calibration_scale


def extract_depth(grid: VoxelGrid, laser: LaserState, props: MaterialProps,
                  cfg: FeatureConfig) -> float:
    """Melt penetration below the clad layer (negative when not melted through)."""
    k_top = grid.top_active_layer()
    top_z = grid.origin[2] + (k_top + 1) * grid.spacing
    xc = grid.axis_centers(0)
    yc = grid.axis_centers(1)
    zc = grid.axis_centers(2)
    ix = np.flatnonzero(np.abs(xc - laser.position[0]) <= cfg.depth_box_half)
    iy = np.flatnonzero(np.abs(yc - laser.position[1]) <= cfg.depth_box_half)
    iz = np.flatnonzero((zc <= top_z) & (zc >= top_z - cfg.depth_box_depth))
    if ix.size and iy.size and iz.size:
        box_active = grid.active[np.ix_(ix, iy, iz)]
        box_temp = grid.temperature[np.ix_(ix, iy, iz)]
        sel = np.nonzero(box_active)
        pts = np.column_stack([xc[ix][sel[0]], yc[iy][sel[1]], zc[iz][sel[2]]])
        vals = box_temp[sel]
    else:
        pts, vals = np.empty((0, 3)), np.empty(0)
    if pts.shape[0] < cfg.min_support_3d:
        raise InsufficientSupportError(
            f"{pts.shape[0]} nodes in depth box, need {cfg.min_support_3d}")

    vol = rbf_fit(pts, vals)
    off = _symmetric_offsets(cfg.depth_box_half, cfg.fine_spacing)
    n_down = int(np.floor(cfg.depth_box_depth / cfg.fine_spacing + 1e-9))
    z_fine = top_z - np.arange(n_down + 1) * cfg.fine_spacing
    gx, gy, gz = np.meshgrid(laser.position[0] + off, laser.position[1] + off,
                             z_fine, indexing="ij")
    fine = np.column_stack([gx.ravel(), gy.ravel(), gz.ravel()])
    temps = vol.evaluate(fine)
    molten = temps >= props.solidus_T
    extent = float((top_z - fine[molten, 2]).max()) if molten.any() else 0.0
    return extent - cfg.layer_height


def moving_average(series, window: int) -> np.ndarray:
    """Causal mean over the last `window` samples (shorter prefixes averaged
    over what is available); output length equals input length."""
    if window < 1:
        raise ValueError("window must be at least 1")
    series = np.asarray(series, dtype=float)
    csum = np.cumsum(series, axis=0)
    out = np.empty_like(series)
    n = series.shape[0]
    for i in range(n):
        lo = max(0, i - window + 1)
        total = csum[i] - (csum[lo - 1] if lo > 0 else 0.0)
        out[i] = total / (i - lo + 1)
    return out
