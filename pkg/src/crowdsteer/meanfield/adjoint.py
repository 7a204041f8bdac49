"""Backward mean-field adjoint solve and the kinetic reduced gradient.

The multiplier g of the kinetic equation satisfies, with terminal value zero,

    dg/dt + v . grad_x g + S(f) . grad_v g = -D_f(f)[g] + dJ_x
    d(phi_d)/dt = -D_d(f)[g],          grad J(w) = sigma3/(MT) w - phi_d

where D_f couples g back through the interaction kernel and D_d is the
agent-force coupling.  Discretely, this backward system is realized as the
exact adjoint of the forward splitting: one backward step runs the
transposed velocity half-step, the transposed spatial remap, and the
transposed first half-step in reverse order, injects the running-cost
derivative with the forward quadrature weights, and accumulates the force
cotangents through the convolution (the D_f term) and the agent-force
Hessian (the D_d term).  Differentiating the scheme itself, limiters and
all, is what makes the reduced gradient agree with finite differences of
the discrete cost on coarse grids, where a discretization of the continuous
adjoint drifts far outside the gradient-check tolerance.

The forward states inside a step (stage fields of the subcycled sweeps and
of the two remap passes) are recomputed from the recorded snapshots during
the backward sweep, so the memory footprint stays a few fields wide.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from ..model import Array, ControlSchedule, CostWeights, InteractionModel, hessian_apply
from .advection import (
    heun_sweep,
    heun_sweep_vjp,
    remap_axis_vjp,
    remap_fir,
    repair_negatives,
)
from .convolve import convolve_adjoint_source, offset_kernel
from .grid import DensityField, PhaseGrid
from .solver import (
    ForwardRecordMF,
    force_field,
    integrate_mf_forward,
    subcycle_plan,
)


@dataclass
class AdjointFieldTrajectory:
    times: Array                 # (n+1,)
    phi_d: Array                 # (n+1, M, D)
    fields: list | None = None   # optional g snapshots (terminal entry zero)
    control_gradient: Array | None = None  # per-step dJ/du, state part (n, M, D)
    diagnostics: dict = field(default_factory=dict)


def _trapezoid_weights(times: Array) -> Array:
    w = np.empty_like(times)
    w[0] = 0.5 * (times[1] - times[0])
    w[-1] = 0.5 * (times[-1] - times[-2])
    if len(times) > 2:
        w[1:-1] = 0.5 * (times[2:] - times[:-2])
    return w


def cost_field_derivative(values: Array, grid: PhaseGrid, weights: CostWeights) -> Array:
    """d/df of the instantaneous cost integrand, as a spatial field (n, n).

    Uses the discrete normalized moments, so it is the exact derivative of
    the cost the solver reports.  Constant across velocity cells.
    """
    fld = DensityField(grid, values)
    mean, var = fld.moments()
    mass = fld.mass()
    x1, x2 = grid.spatial_mesh()
    d1 = x1 - mean[0]
    d2 = x2 - mean[1]
    spread = d1 * d1 + d2 * d2
    core = 0.5 * weights.sigma1 * (var - weights.target_variance) * (spread - var)
    core += weights.sigma2 * (
        (mean[0] - weights.destination[0]) * d1 + (mean[1] - weights.destination[1]) * d2
    )
    return core * (grid.cell_volume / mass) / weights.horizon


def _halfstep_states(values: Array, a1: Array, a2: Array, n_sub: int, delta: float,
                     dv: float) -> list[tuple[Array, Array]]:
    """Forward subcycle (input, mid) states of a velocity half-step."""
    states = []
    cur = values
    for _ in range(n_sub):
        mid = np.moveaxis(heun_sweep(np.moveaxis(cur, 2, -1), np.moveaxis(a1, 2, -1),
                                     delta, dv), -1, 2)
        states.append((cur, mid))
        cur = np.moveaxis(heun_sweep(np.moveaxis(mid, 3, -1), np.moveaxis(a2, 3, -1),
                                     delta, dv), -1, 3)
    return states


def _halfstep_vjp(values_in: Array, force: Array, model: InteractionModel,
                  grid: PhaseGrid, dt_half: float, cot: Array,
                  substep: float | None) -> tuple[Array, Array]:
    """Cotangents of one velocity half-step wrt its input field and force."""
    a1, a2, n_sub, delta = subcycle_plan(force, grid, model.alpha, dt_half, substep)
    states = _halfstep_states(values_in, a1, a2, n_sub, delta, grid.dv)
    n_x, n_v = grid.n_x, grid.n_v
    cot_f = cot
    cot_a1 = np.zeros((n_x, n_x, n_v + 1, n_v))
    cot_a2 = np.zeros((n_x, n_x, n_v, n_v + 1))
    for inp, mid in reversed(states):
        back, ca2 = heun_sweep_vjp(np.moveaxis(mid, 3, -1), np.moveaxis(a2, 3, -1),
                                   delta, grid.dv, np.moveaxis(cot_f, 3, -1))
        cot_f = np.moveaxis(back, -1, 3)
        cot_a2 += np.moveaxis(ca2, -1, 3)
        back, ca1 = heun_sweep_vjp(np.moveaxis(inp, 2, -1), np.moveaxis(a1, 2, -1),
                                   delta, grid.dv, np.moveaxis(cot_f, 2, -1))
        cot_f = np.moveaxis(back, -1, 2)
        cot_a1 += np.moveaxis(ca1, -1, 2)
    cot_force = np.stack([cot_a1.sum(axis=(2, 3)), cot_a2.sum(axis=(2, 3))], axis=-1)
    return cot_f, cot_force


def _spatial_vjp(values_in: Array, grid: PhaseGrid, dt: float,
                 cot: Array) -> Array:
    """Cotangent of the full spatial remap step (axis 0 then axis 1 passes)."""
    v = grid.v_centers
    # recompute the intermediate state after the axis-0 pass
    mid = values_in.copy()
    for iv, speed in enumerate(v):
        off = speed * dt / grid.dx
        line = np.moveaxis(mid[:, :, iv, :], 0, -1)
        line = repair_negatives(remap_fir(line, off))
        mid[:, :, iv, :] = np.moveaxis(line, -1, 0)
    out = cot.copy()
    for iw, speed in enumerate(v):
        off = speed * dt / grid.dx
        sub = np.moveaxis(mid[:, :, :, iw], 1, -1)
        cot_sub = np.moveaxis(out[:, :, :, iw], 1, -1)
        out[:, :, :, iw] = np.moveaxis(remap_axis_vjp(sub, off, cot_sub), -1, 1)
    for iv, speed in enumerate(v):
        off = speed * dt / grid.dx
        sub = np.moveaxis(values_in[:, :, iv, :], 0, -1)
        cot_sub = np.moveaxis(out[:, :, iv, :], 0, -1)
        out[:, :, iv, :] = np.moveaxis(remap_axis_vjp(sub, off, cot_sub), -1, 0)
    return out


def _spatial_forward(values: Array, grid: PhaseGrid, dt: float) -> Array:
    out = values.copy()
    v = grid.v_centers
    for iv, speed in enumerate(v):
        off = speed * dt / grid.dx
        line = np.moveaxis(out[:, :, iv, :], 0, -1)
        out[:, :, iv, :] = np.moveaxis(repair_negatives(remap_fir(line, off)), -1, 0)
    for iw, speed in enumerate(v):
        off = speed * dt / grid.dx
        line = np.moveaxis(out[:, :, :, iw], 1, -1)
        out[:, :, :, iw] = np.moveaxis(repair_negatives(remap_fir(line, off)), -1, 1)
    return out


def _agent_cotangent(cot_force: Array, agents: Array, grid: PhaseGrid,
                     model: InteractionModel) -> Array:
    """d/d(agents) pairing of a force-field cotangent: the D_d coupling."""
    agents = np.atleast_2d(agents)
    if model.phi2.is_zero:
        return np.zeros_like(agents)
    x1, x2 = grid.spatial_mesh()
    centers = np.stack([x1, x2], axis=-1)
    delta = centers[:, :, None, :] - agents[None, None, :, :]
    hv = hessian_apply(model.phi2, delta, cot_force[:, :, None, :])
    return hv.sum(axis=(0, 1)) / agents.shape[0]


def integrate_mf_adjoint(record: ForwardRecordMF, model: InteractionModel,
                         weights: CostWeights, keep_fields: bool = False,
                         conv_method: str = "direct",
                         substep: float | None = None) -> AdjointFieldTrajectory:
    """Backward sweep of the discrete adjoint; zero terminal data.

    Returns the agent multiplier trajectory phi_d (with phi_d(T) = 0), the
    per-step state part of the control derivative, and optionally the field
    multiplier snapshots.
    """
    grid = record.grid
    steps = record.n_steps
    times = record.times
    w_time = _trapezoid_weights(times)
    kernel = offset_kernel(model.phi1, grid)
    has_crowd_force = not model.phi1.is_zero
    m, dim = record.agents.shape[1:]
    vol = grid.cell_volume

    phi_d = np.zeros((steps + 1, m, dim))
    control_grad = np.zeros((steps, m, dim))
    fields = [np.zeros(grid.shape)] if keep_fields else None

    lam = np.zeros((m, dim))                        # dJ/d(d_k), accumulated
    cot = w_time[steps] * cost_field_derivative(record.snapshots[steps], grid, weights)
    cot = np.broadcast_to(cot[:, :, None, None], grid.shape).copy()

    for k in range(steps - 1, -1, -1):
        tau = times[k + 1] - times[k]
        f_k = record.snapshots[k]
        d_mid = 0.5 * (record.agents[k] + record.agents[k + 1])
        rho_k = DensityField(grid, f_k).spatial_marginal()
        force1 = force_field(rho_k, d_mid, model, grid, kernel=kernel,
                             conv_method=conv_method)
        f_star = _forward_halfstep(f_k, force1, model, grid, 0.5 * tau, substep)
        f_dd = _spatial_forward(f_star, grid, tau)
        rho_dd = DensityField(grid, f_dd).spatial_marginal()
        force2 = force_field(rho_dd, d_mid, model, grid, kernel=kernel,
                             conv_method=conv_method)

        lam_mid = np.zeros((m, dim))
        cot, cot_f2 = _halfstep_vjp(f_dd, force2, model, grid, 0.5 * tau, cot, substep)
        if has_crowd_force:
            cot_rho = convolve_adjoint_source(cot_f2, kernel, grid.dx, method=conv_method)
            cot += cot_rho[:, :, None, None] * grid.dv**2
        lam_mid += _agent_cotangent(cot_f2, d_mid, grid, model)

        cot = _spatial_vjp(f_star, grid, tau, cot)

        cot, cot_f1 = _halfstep_vjp(f_k, force1, model, grid, 0.5 * tau, cot, substep)
        if has_crowd_force:
            cot_rho = convolve_adjoint_source(cot_f1, kernel, grid.dx, method=conv_method)
            cot += cot_rho[:, :, None, None] * grid.dv**2
        lam_mid += _agent_cotangent(cot_f1, d_mid, grid, model)

        control_grad[k] = tau * lam + 0.5 * tau * lam_mid
        lam = lam + lam_mid
        phi_d[k] = -lam
        if fields is not None:
            fields.append(cot / vol)
        cot = cot + w_time[k] * np.broadcast_to(
            cost_field_derivative(f_k, grid, weights)[:, :, None, None], grid.shape
        )

    if fields is not None:
        fields.reverse()
    return AdjointFieldTrajectory(times, phi_d, fields, control_grad)


def _forward_halfstep(values: Array, force: Array, model: InteractionModel,
                      grid: PhaseGrid, dt_half: float, substep: float | None) -> Array:
    a1, a2, n_sub, delta = subcycle_plan(force, grid, model.alpha, dt_half, substep)
    cur = values
    for _ in range(n_sub):
        cur = np.moveaxis(heun_sweep(np.moveaxis(cur, 2, -1), np.moveaxis(a1, 2, -1),
                                     delta, grid.dv), -1, 2)
        cur = np.moveaxis(heun_sweep(np.moveaxis(cur, 3, -1), np.moveaxis(a2, 3, -1),
                                     delta, grid.dv), -1, 3)
    return cur


def reduced_gradient_mf(control: ControlSchedule, f0: DensityField, d0: Array,
                        model: InteractionModel, weights: CostWeights, steps: int,
                        record: ForwardRecordMF | None = None,
                        conv_method: str = "direct",
                        substep: float | None = None) -> Array:
    """Riesz representative of the kinetic reduced-cost derivative."""
    if record is None:
        record = integrate_mf_forward(f0, d0, control, model, steps,
                                      conv_method=conv_method, substep=substep)
    adj = integrate_mf_adjoint(record, model, weights, conv_method=conv_method,
                               substep=substep)
    m = control.n_agents
    grad = weights.sigma3 / (m * weights.horizon) * control.values.copy()
    dt = record.times[1] - record.times[0]
    for k in range(record.n_steps):
        idx = control.slice_index(record.times[k] + 0.5 * dt)
        grad[idx] += adj.control_gradient[k] / control.slice_lengths[idx]
    return grad
