"""Particle-level forward integration, backward adjoint, and reduced gradient.

The forward system is integrated with classic fixed-step RK4.  The backward
system is the rescaled adjoint (position/velocity multipliers scaled by N so
the equations are particle-count independent); its signs are fixed by the
Lagrangian of the control problem and locked by the finite-difference
gradient tests, which disambiguate the inconsistent conventions floating
around for this system.  With r, s, phi denoting the rescaled multipliers of
x, v, d:

    dr_i/dt  = (1/N) sum_{j!=i} H1(x_i - x_j)(s_i - s_j)
             + (1/M) sum_m H2(x_i - d_m) s_i
             + (1/T) [sigma1 (V - Vbar)(x_i - E) + sigma2 (E - E_des)]
    ds_i/dt  = -r_i + alpha s_i
    dphi_m/dt = -(1/M) sum_i H2(x_i - d_m) s_i

with r(T) = s(T) = phi(T) = 0, and the reduced-cost gradient

    grad(t) = sigma3/(M T) u(t) - phi(t)/N,

slice-averaged onto the piecewise-constant control grid (the discrete-L2
Riesz representative).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .model import (
    Array,
    BlowUpError,
    ControlSchedule,
    CostWeights,
    InteractionModel,
    MicroState,
    assemble_cost,
    hessian_apply,
    micro_drift,
    moments,
)


@dataclass
class ForwardRecordMicro:
    """Uniform-grid snapshots of one forward particle solve."""

    times: Array       # (n+1,)
    x: Array           # (n+1, N, D)
    v: Array           # (n+1, N, D)
    d: Array           # (n+1, M, D)

    @property
    def n_steps(self) -> int:
        return len(self.times) - 1

    def state_at(self, idx: int) -> MicroState:
        return MicroState(self.x[idx], self.v[idx], self.d[idx])

    def interpolate(self, t: float) -> tuple[Array, Array]:
        """Linear-in-time (x, d) between stored snapshots."""
        times = self.times
        if t <= times[0]:
            return self.x[0], self.d[0]
        if t >= times[-1]:
            return self.x[-1], self.d[-1]
        k = int(np.searchsorted(times, t, side="right")) - 1
        w = (t - times[k]) / (times[k + 1] - times[k])
        return (1 - w) * self.x[k] + w * self.x[k + 1], (1 - w) * self.d[k] + w * self.d[k + 1]

    def moment_series(self) -> tuple[Array, Array]:
        means = np.array([m for m, _ in (moments(xk) for xk in self.x)])
        variances = np.array([moments(xk)[1] for xk in self.x])
        return means, variances


@dataclass
class AdjointMicro:
    """Rescaled adjoint trajectories on the forward time grid."""

    times: Array  # (n+1,)
    r: Array      # (n+1, N, D)
    s: Array      # (n+1, N, D)
    phi: Array    # (n+1, M, D)


def _validate_grid(control: ControlSchedule, steps: int) -> float:
    if steps < 1:
        raise ValueError("need at least one step")
    horizon = control.horizon
    dt = horizon / steps
    # every schedule knot must sit on the step grid so each step lies in one slice
    offsets = (control.knots - control.knots[0]) / dt
    if not np.allclose(offsets, np.round(offsets), atol=1e-9):
        raise ValueError("steps per control slice must be an integer")
    return dt


def integrate_forward(initial: MicroState, control: ControlSchedule,
                      model: InteractionModel, steps: int) -> ForwardRecordMicro:
    """RK4 solve of the coupled particle/agent system on a uniform grid.

    The control is held at its slice value through every step; step
    boundaries are required to align with slice boundaries.
    """
    dt = _validate_grid(control, steps)
    n, m, dim = initial.n_particles, initial.n_agents, initial.dim
    times = control.knots[0] + dt * np.arange(steps + 1)
    xs = np.empty((steps + 1, n, dim))
    vs = np.empty((steps + 1, n, dim))
    ds = np.empty((steps + 1, m, dim))
    xs[0], vs[0], ds[0] = initial.x, initial.v, initial.d

    def rhs(x, v, d, u):
        acc = micro_drift(MicroState(x, v, d), model)
        return v, acc, u

    for k in range(steps):
        u = control.value_at(times[k] + 0.5 * dt)
        x, v, d = xs[k], vs[k], ds[k]
        k1 = rhs(x, v, d, u)
        k2 = rhs(x + 0.5 * dt * k1[0], v + 0.5 * dt * k1[1], d + 0.5 * dt * k1[2], u)
        k3 = rhs(x + 0.5 * dt * k2[0], v + 0.5 * dt * k2[1], d + 0.5 * dt * k2[2], u)
        k4 = rhs(x + dt * k3[0], v + dt * k3[1], d + dt * k3[2], u)
        xs[k + 1] = x + dt / 6.0 * (k1[0] + 2 * k2[0] + 2 * k3[0] + k4[0])
        vs[k + 1] = v + dt / 6.0 * (k1[1] + 2 * k2[1] + 2 * k3[1] + k4[1])
        ds[k + 1] = d + dt / 6.0 * (k1[2] + 2 * k2[2] + 2 * k3[2] + k4[2])
        if not (np.isfinite(xs[k + 1]).all() and np.isfinite(vs[k + 1]).all()):
            raise BlowUpError(f"state blew up at t={times[k + 1]:.6g}")
    return ForwardRecordMicro(times, xs, vs, ds)


def _adjoint_rhs(x: Array, d: Array, r: Array, s: Array,
                 model: InteractionModel, weights: CostWeights) -> tuple[Array, Array, Array]:
    n, m = x.shape[0], d.shape[0]
    mean, var = moments(x)
    source = (
        weights.sigma1 * (var - weights.target_variance) * (x - mean)
        + weights.sigma2 * (mean - weights.destination)
    ) / weights.horizon

    dr = source.copy()
    if not model.phi1.is_zero and n > 1:
        delta = x[:, None, :] - x[None, :, :]            # (N, N, D)
        sdiff = s[:, None, :] - s[None, :, :]
        dr += hessian_apply(model.phi1, delta, sdiff).sum(axis=1) / n
    agent_hv = None
    if not model.phi2.is_zero:
        delta = x[:, None, :] - d[None, :, :]            # (N, M, D)
        agent_hv = hessian_apply(model.phi2, delta, s[:, None, :])
        dr += agent_hv.sum(axis=1) / m
    ds = -r + model.alpha * s
    dphi = np.zeros_like(d)
    if agent_hv is not None:
        dphi = -agent_hv.sum(axis=0) / m
    return dr, ds, dphi


def integrate_adjoint(record: ForwardRecordMicro, control: ControlSchedule,
                      model: InteractionModel, weights: CostWeights) -> AdjointMicro:
    """Backward RK4 sweep of the rescaled adjoint from zero terminal data.

    Forward states at the interior RK4 stages come from linear interpolation
    of the recorded snapshots.
    """
    times = record.times
    if not np.isclose(times[-1] - times[0], control.horizon):
        raise ValueError("record and control cover different horizons")
    steps = record.n_steps
    n, m, dim = record.x.shape[1], record.d.shape[1], record.x.shape[2]
    r = np.zeros((steps + 1, n, dim))
    s = np.zeros((steps + 1, n, dim))
    phi = np.zeros((steps + 1, m, dim))

    for k in range(steps, 0, -1):
        h = times[k - 1] - times[k]  # negative
        x1, d1 = record.x[k], record.d[k]
        xm, dm = 0.5 * (record.x[k] + record.x[k - 1]), 0.5 * (record.d[k] + record.d[k - 1])
        x0, d0 = record.x[k - 1], record.d[k - 1]
        y = (r[k], s[k], phi[k])
        k1 = _adjoint_rhs(x1, d1, y[0], y[1], model, weights)
        k2 = _adjoint_rhs(xm, dm, y[0] + 0.5 * h * k1[0], y[1] + 0.5 * h * k1[1], model, weights)
        k3 = _adjoint_rhs(xm, dm, y[0] + 0.5 * h * k2[0], y[1] + 0.5 * h * k2[1], model, weights)
        k4 = _adjoint_rhs(x0, d0, y[0] + h * k3[0], y[1] + h * k3[1], model, weights)
        r[k - 1] = y[0] + h / 6.0 * (k1[0] + 2 * k2[0] + 2 * k3[0] + k4[0])
        s[k - 1] = y[1] + h / 6.0 * (k1[1] + 2 * k2[1] + 2 * k3[1] + k4[1])
        phi[k - 1] = y[2] + h / 6.0 * (k1[2] + 2 * k2[2] + 2 * k3[2] + k4[2])
    return AdjointMicro(times, r, s, phi)


def slice_average(times: Array, series: Array, control: ControlSchedule) -> Array:
    """Trapezoid average of a grid time series over each control slice."""
    out = np.empty((control.n_slices,) + series.shape[1:])
    for k in range(control.n_slices):
        lo, hi = control.knots[k], control.knots[k + 1]
        mask = (times >= lo - 1e-12) & (times <= hi + 1e-12)
        idx = np.where(mask)[0]
        seg_t = times[idx]
        seg = series[idx]
        out[k] = np.trapezoid(seg, seg_t, axis=0) / (hi - lo)
    return out


def reduced_gradient_micro(control: ControlSchedule, initial: MicroState,
                           model: InteractionModel, weights: CostWeights,
                           steps: int, record: ForwardRecordMicro | None = None) -> Array:
    """Riesz representative of the reduced-cost derivative on the control grid."""
    if record is None:
        record = integrate_forward(initial, control, model, steps)
    adj = integrate_adjoint(record, control, model, weights)
    n = initial.n_particles
    m = initial.n_agents
    phi_avg = slice_average(record.times, adj.phi, control)
    return weights.sigma3 / (m * weights.horizon) * control.values - phi_avg / n


def evaluate_cost_micro(record: ForwardRecordMicro, control: ControlSchedule,
                        weights: CostWeights) -> tuple[float, float, float, float]:
    means, variances = record.moment_series()
    return assemble_cost(record.times, means, variances, control, weights)
