"""Scaled comparison norms, particle histograms, and the convergence study.

Runs at both levels are reduced to a common summary (cost trajectory,
control schedule, density frames) and compared with the scaled norms

    |u - u_ref|   = 1/(T M V)  int ||u - u_ref||        dt
    |J - J_ref|   = 1/T        int |J - J_ref|          dt
    |rho - rho_ref| = 1/T      int sum |rho - rho_ref| (dx/L)^2 dt

with V the velocity-domain half-width and L the spatial domain width.
Particle densities are histogrammed onto the reference grid.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .meanfield.grid import PhaseGrid
from .model import Array, ControlSchedule


class IncompatibleGridsError(ValueError):
    """Raised when a density comparison has no common spatial grid."""


@dataclass
class RunSummary:
    """What a finished run exposes for cross-run comparisons."""

    level: str                      # "micro" or "meanfield"
    times: Array                    # solver time grid
    cost_series: Array              # instantaneous J(t) on `times`
    control: ControlSchedule
    snapshot_times: Array           # times of stored density information
    grid: PhaseGrid | None = None   # grid of `density_frames` (mean-field runs)
    density_frames: list | None = None      # spatial density (n, n) per snapshot
    position_frames: list | None = None     # particle positions per snapshot (micro)
    label: str = ""


@dataclass
class ComparisonReport:
    norm_j: float
    norm_u: float
    norm_rho: float | None
    label: str = ""
    reference: str = ""


def histogram_density(positions: Array, grid: PhaseGrid) -> tuple[Array, float]:
    """Histogram particle positions onto the spatial grid.

    Cell counts are normalized by N dx^2 so the discrete integral equals the
    in-domain fraction; the fraction falling outside the domain is returned
    separately.
    """
    positions = np.atleast_2d(np.asarray(positions, dtype=float))
    n = positions.shape[0]
    half = grid.x_halfwidth
    idx = np.floor((positions + half) / grid.dx).astype(int)
    inside = np.all((idx >= 0) & (idx < grid.n_x), axis=1)
    counts = np.zeros((grid.n_x, grid.n_x))
    np.add.at(counts, (idx[inside, 0], idx[inside, 1]), 1.0)
    overflow = 1.0 - inside.sum() / n
    return counts / (n * grid.cell_area), float(overflow)


def control_l1_distance(a: ControlSchedule, b: ControlSchedule) -> float:
    """Exact integral of ||u_a(t) - u_b(t)|| over the merged slice grid."""
    if a.n_agents != b.n_agents or a.dim != b.dim:
        raise ValueError("schedules must share agent count and dimension")
    knots = np.union1d(a.knots, b.knots)
    total = 0.0
    for lo, hi in zip(knots[:-1], knots[1:]):
        mid = 0.5 * (lo + hi)
        diff = a.value_at(mid) - b.value_at(mid)
        total += (hi - lo) * float(np.linalg.norm(diff))
    return total


def _resample(times_from: Array, series, times_to: Array):
    series = np.asarray(series, dtype=float)
    if series.ndim == 1:
        return np.interp(times_to, times_from, series)
    flat = series.reshape(len(times_from), -1)
    out = np.empty((len(times_to), flat.shape[1]))
    for j in range(flat.shape[1]):
        out[:, j] = np.interp(times_to, times_from, flat[:, j])
    return out.reshape((len(times_to),) + series.shape[1:])


def _density_frames_on(run: RunSummary, grid: PhaseGrid) -> Array:
    if run.level == "meanfield":
        if run.grid is None or run.density_frames is None:
            raise IncompatibleGridsError("mean-field run carries no density frames")
        if (run.grid.n_x, run.grid.x_halfwidth) != (grid.n_x, grid.x_halfwidth):
            raise IncompatibleGridsError(
                f"density grids differ: {run.grid.n_x} vs {grid.n_x} points"
            )
        return np.asarray(run.density_frames)
    if run.position_frames is None:
        raise IncompatibleGridsError("particle run carries no position frames")
    return np.asarray([histogram_density(p, grid)[0] for p in run.position_frames])


def compare_runs(run: RunSummary, reference: RunSummary,
                 scale_velocity: float = 5.0,
                 require_density: bool = False) -> ComparisonReport:
    """Scaled distances of a run to a reference run.

    The reference's grids define the comparison: cost series are linearly
    resampled onto its time grid, and particle runs are histogrammed onto
    its spatial grid.  Density norms between mean-field runs on different
    grids are left out (None, the dash of the norm tables) unless
    ``require_density`` turns the incompatibility into an error.
    """
    horizon = float(reference.times[-1] - reference.times[0])
    t_ref = reference.times
    j_run = _resample(run.times, run.cost_series, t_ref)
    norm_j = float(np.trapezoid(np.abs(j_run - reference.cost_series), t_ref)) / horizon

    m = reference.control.n_agents
    norm_u = control_l1_distance(run.control, reference.control) / (
        horizon * m * scale_velocity
    )

    grid = reference.grid if reference.grid is not None else run.grid
    norm_rho: float | None
    try:
        if grid is None:
            raise IncompatibleGridsError("neither run provides a spatial grid")
        frames_ref = _density_frames_on(reference, grid)
        frames_run = _density_frames_on(run, grid)
        frames_run = _resample(run.snapshot_times, frames_run, reference.snapshot_times)
        width = 2.0 * grid.x_halfwidth
        per_time = np.abs(frames_run - frames_ref).sum(axis=(1, 2)) * (grid.dx / width) ** 2
        norm_rho = float(np.trapezoid(per_time, reference.snapshot_times)) / horizon
    except IncompatibleGridsError:
        if require_density:
            raise
        norm_rho = None
    return ComparisonReport(norm_j, norm_u, norm_rho, label=run.label,
                            reference=reference.label)


@dataclass
class StudyTable:
    """Norm table shaped like the convergence investigations: one column per
    configuration, rows norm_J / norm_u / norm_rho, against a fixed
    mean-field reference."""

    reference_label: str
    columns: list[str] = field(default_factory=list)
    reports: dict = field(default_factory=dict)
    failures: dict = field(default_factory=dict)

    def row(self, name: str) -> list:
        key = {"norm_J": "norm_j", "norm_u": "norm_u", "norm_rho": "norm_rho"}[name]
        out = []
        for col in self.columns:
            rep = self.reports.get(col)
            out.append(getattr(rep, key) if rep is not None else None)
        return out


def convergence_study(runner, n_list, grid_list, scale_velocity: float = 5.0) -> StudyTable:
    """Run mean-field grids and particle counts against the finest grid.

    ``runner(level, size)`` executes one configuration and returns its
    RunSummary; mean-field sizes are grid points per direction and micro
    sizes are particle counts.  The finest grid is the reference; failures
    are recorded per cell and leave the table entry missing.
    """
    grids = sorted(grid_list)
    reference = runner("meanfield", grids[-1])
    reference.label = reference.label or f"M{grids[-1]}"
    table = StudyTable(reference_label=reference.label)
    for g in grids[:-1]:
        label = f"M{g}"
        table.columns.append(label)
        try:
            summary = runner("meanfield", g)
            summary.label = label
            table.reports[label] = compare_runs(summary, reference, scale_velocity)
        except Exception as exc:  # cell failures are reported, not fatal
            table.failures[label] = repr(exc)
    for n in n_list:
        label = f"N{n}"
        table.columns.append(label)
        try:
            summary = runner("micro", n)
            summary.label = label
            table.reports[label] = compare_runs(summary, reference, scale_velocity)
        except Exception as exc:
            table.failures[label] = repr(exc)
    return table
