"""Tensor-product phase-space grid and cell-centered density fields.

The phase space is [-Lx, Lx]^2 x [-Vmax, Vmax]^2 discretized into uniform
cells; a density field stores one value per cell in (x1, x2, v1, v2) index
order.  The experiments use Lx = 100 and Vmax = 5.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from ..model import Array


class CFLError(ValueError):
    """Raised when a time step violates the advection stability bound."""


@dataclass(frozen=True)
class PhaseGrid:
    n_x: int
    n_v: int
    x_halfwidth: float = 100.0
    v_halfwidth: float = 5.0

    def __post_init__(self) -> None:
        if self.n_x < 4 or self.n_v < 4:
            raise ValueError("need at least 4 points per direction")
        if self.x_halfwidth <= 0 or self.v_halfwidth <= 0:
            raise ValueError("domain half-widths must be positive")

    @property
    def dx(self) -> float:
        return 2.0 * self.x_halfwidth / self.n_x

    @property
    def dv(self) -> float:
        return 2.0 * self.v_halfwidth / self.n_v

    @property
    def x_centers(self) -> Array:
        return -self.x_halfwidth + self.dx * (np.arange(self.n_x) + 0.5)

    @property
    def v_centers(self) -> Array:
        return -self.v_halfwidth + self.dv * (np.arange(self.n_v) + 0.5)

    @property
    def v_faces(self) -> Array:
        return -self.v_halfwidth + self.dv * np.arange(self.n_v + 1)

    @property
    def cell_volume(self) -> float:
        return self.dx**2 * self.dv**2

    @property
    def cell_area(self) -> float:
        return self.dx**2

    @property
    def shape(self) -> tuple[int, int, int, int]:
        return (self.n_x, self.n_x, self.n_v, self.n_v)

    def max_stable_dt(self, cfl: float = 0.5) -> float:
        """Largest time step with dt * Vmax / dx <= cfl (spatial transport bound)."""
        return cfl * self.dx / self.v_halfwidth

    def check_cfl(self, dt: float, cfl: float = 0.5) -> None:
        limit = self.max_stable_dt(cfl)
        if dt > limit * (1 + 1e-12):
            raise CFLError(
                f"dt={dt:.6g} violates dt*Vmax/dx <= {cfl}: limit is {limit:.6g} "
                f"(dx={self.dx:.6g}, Vmax={self.v_halfwidth:.6g})"
            )

    def spatial_mesh(self) -> tuple[Array, Array]:
        return np.meshgrid(self.x_centers, self.x_centers, indexing="ij")


@dataclass
class DensityField:
    """Nonnegative cell-centered phase-space density with unit mass."""

    grid: PhaseGrid
    values: Array  # (n_x, n_x, n_v, n_v)

    def __post_init__(self) -> None:
        self.values = np.asarray(self.values, dtype=float)
        if self.values.shape != self.grid.shape:
            raise ValueError(f"values must have shape {self.grid.shape}")

    def mass(self) -> float:
        return float(self.values.sum()) * self.grid.cell_volume

    def spatial_marginal(self) -> Array:
        """rho(x) = integral of f over velocity, shape (n_x, n_x)."""
        return self.values.sum(axis=(2, 3)) * self.grid.dv**2

    def moments(self) -> tuple[Array, float]:
        """Center of mass and scalar position variance of the density."""
        rho = self.spatial_marginal()
        mass = float(rho.sum()) * self.grid.cell_area
        if mass <= 0:
            raise ValueError("cannot take moments of a massless field")
        x1, x2 = self.grid.spatial_mesh()
        w = rho * (self.grid.cell_area / mass)
        mean = np.array([float((x1 * w).sum()), float((x2 * w).sum())])
        var = float((((x1 - mean[0]) ** 2 + (x2 - mean[1]) ** 2) * w).sum())
        return mean, var

    def copy(self) -> "DensityField":
        return DensityField(self.grid, self.values.copy())


def sample_initial_density(grid: PhaseGrid, support: Array,
                           velocity_width: float | None = None) -> DensityField:
    """Uniform spatial density over a box, with a narrow velocity bump at v = 0.

    ``support`` is (x1_lo, x1_hi, x2_lo, x2_hi).  Edge cells receive the
    covered fraction of their area, so the discrete field is the exact
    cell-average of the continuous uniform density.  The velocity profile is
    a normalized Gaussian bump of standard width ``velocity_width`` (default:
    one velocity cell).  The total discrete mass is renormalized to 1.
    """
    lo1, hi1, lo2, hi2 = (float(s) for s in np.asarray(support, dtype=float))
    if not (lo1 < hi1 and lo2 < hi2):
        raise ValueError("support box must have positive extent")
    if lo1 < -grid.x_halfwidth or hi1 > grid.x_halfwidth or lo2 < -grid.x_halfwidth or hi2 > grid.x_halfwidth:
        raise ValueError("support box must lie inside the spatial domain")

    def coverage(lo: float, hi: float) -> Array:
        edges = -grid.x_halfwidth + grid.dx * np.arange(grid.n_x + 1)
        left = np.maximum(edges[:-1], lo)
        right = np.minimum(edges[1:], hi)
        return np.clip((right - left) / grid.dx, 0.0, 1.0)

    xprof = np.outer(coverage(lo1, hi1), coverage(lo2, hi2))
    width = grid.dv if velocity_width is None else float(velocity_width)
    if width <= 0:
        raise ValueError("velocity bump width must be positive")
    v = grid.v_centers
    bump1 = np.exp(-0.5 * (v / width) ** 2)
    vprof = np.outer(bump1, bump1)
    values = xprof[:, :, None, None] * vprof[None, None, :, :]
    total = values.sum() * grid.cell_volume
    if total <= 0:
        raise ValueError("support box does not overlap any cell")
    return DensityField(grid, values / total)
