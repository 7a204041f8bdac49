"""Control-space machinery and the two steering strategies.

Both strategies move in the metric of the piecewise-constant control space
(slice-length weighted inner products) using adjoint gradients:

* instantaneous control takes one projected steepest-descent step per time
  slice and chains the slice-final states;
* optimal control iterates nonlinear-CG steps with a projected Armijo line
  search over the full horizon.

The printed Armijo loop condition of the source algorithm cannot terminate
for a descent step (the inequality points the wrong way); the standard
sufficient-decrease form is used instead.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .model import Array, ControlSchedule, control_inner


@dataclass
class ReducedProblem:
    """Reduced cost/gradient interface over a fixed state system.

    ``solve`` maps a control to an opaque forward record, ``cost`` evaluates
    the total cost and its parts (J, J1, J2, J3) from a record, and
    ``gradient`` returns the control-shaped reduced gradient, reusing a
    record when one is supplied.
    """

    solve: Callable[[ControlSchedule], object]
    cost: Callable[[object, ControlSchedule], tuple[float, float, float, float]]
    gradient: Callable[[ControlSchedule, object], Array]

    def evaluate(self, control: ControlSchedule) -> tuple[tuple[float, float, float, float], object]:
        record = self.solve(control)
        return self.cost(record, control), record


@dataclass
class IterationRow:
    iteration: int
    cost: float
    j1: float
    j2: float
    j3: float
    grad_norm: float
    omega: float
    rel_change: float
    note: str = ""


@dataclass
class OptimizerReport:
    strategy: str
    rows: list[IterationRow] = field(default_factory=list)
    status: str = "running"
    wall_time: float = 0.0
    peak_memory_bytes: int = 0
    initial_controls: list[Array] = field(default_factory=list)

    def costs(self) -> list[float]:
        return [row.cost for row in self.rows]


def project_control(control: ControlSchedule) -> ControlSchedule:
    """Radially clip each agent's per-slice velocity to the speed cap."""
    speeds = control.speeds()
    with np.errstate(invalid="ignore", divide="ignore"):
        scale = np.where(speeds > control.u_max, control.u_max / speeds, 1.0)
    return control.with_values(control.values * scale[:, :, None])


def ncg_direction(q_k: Array, q_prev: Array | None, s_prev: Array | None,
                  tol_cg: float, slice_lengths: Array) -> tuple[Array, bool]:
    """Conjugate direction with restart; returns (direction, restarted).

    First call (no history) and any degenerate or non-descent pair fall back
    to steepest descent.
    """
    if q_prev is None or s_prev is None:
        return -q_k, False
    diff = q_k - q_prev
    denom = control_inner(diff, s_prev, slice_lengths)
    if denom == 0.0:
        return -q_k, True
    gamma = control_inner(diff, q_k, slice_lengths) / denom
    s_k = -q_k - gamma * s_prev
    if control_inner(s_k, q_k, slice_lengths) > -tol_cg:
        return -q_k, True
    return s_k, False


def armijo_search(problem: ReducedProblem, control: ControlSchedule, cost_now: float,
                  q_k: Array, s_k: Array, omega0: float, gamma: float,
                  max_halvings: int) -> tuple[ControlSchedule, float, tuple, object | None]:
    """Largest omega0 / 2^j satisfying the sufficient-decrease condition.

    Candidates are projected onto the feasible set before evaluation.
    Returns (control, omega, cost parts, record); omega = 0 signals that all
    halvings failed and the incumbent is kept.
    """
    lengths = control.slice_lengths
    q_norm_sq = control_inner(q_k, q_k, lengths)
    omega = omega0
    for _ in range(max_halvings + 1):
        candidate = project_control(control.with_values(control.values + omega * s_k))
        parts, record = problem.evaluate(candidate)
        if parts[0] <= cost_now - gamma * omega * q_norm_sq:
            return candidate, omega, parts, record
        omega *= 0.5
    return control, 0.0, (cost_now, np.nan, np.nan, np.nan), None


@dataclass
class OCOptions:
    omega0: float = 10.0
    gamma_armijo: float = 1e-4
    tol: float = 0.05
    tol_cg: float = 1e-10
    max_halvings: int = 30
    max_iterations: int = 50


def run_optimal_control(problem: ReducedProblem, initial: ControlSchedule,
                        options: OCOptions | None = None) -> tuple[ControlSchedule, OptimizerReport]:
    """Full-horizon NCG descent with projected Armijo steps.

    Stops when the relative control change between consecutive accepted
    iterates drops below the tolerance, when the iteration cap is reached,
    or after two consecutive stagnant line searches.
    """
    opts = options or OCOptions()
    report = OptimizerReport(strategy="oc")
    start = time.perf_counter()

    control = project_control(initial)
    lengths = control.slice_lengths
    norm0 = control.l2_norm()
    parts, record = problem.evaluate(control)
    report.rows.append(IterationRow(0, *parts, grad_norm=np.nan, omega=np.nan,
                                    rel_change=np.nan, note="initial"))
    q_prev = s_prev = None
    stagnant = 0

    for it in range(1, opts.max_iterations + 1):
        q_k = problem.gradient(control, record)
        s_k, restarted = ncg_direction(q_k, q_prev, s_prev, opts.tol_cg, lengths)
        new_control, omega, parts, new_record = armijo_search(
            problem, control, parts[0], q_k, s_k, opts.omega0, opts.gamma_armijo,
            opts.max_halvings,
        )
        grad_norm = float(np.sqrt(control_inner(q_k, q_k, lengths)))
        change = new_control.values - control.values
        rel_change = float(np.sqrt(control_inner(change, change, lengths)))
        rel_change = rel_change / norm0 if norm0 > 0 else rel_change
        report.rows.append(IterationRow(it, *parts, grad_norm=grad_norm, omega=omega,
                                        rel_change=rel_change,
                                        note="restart" if restarted else ""))
        if omega == 0.0:
            stagnant += 1
            if stagnant >= 2:
                report.status = "stagnated"
                break
            q_prev, s_prev = q_k, s_k
            continue
        stagnant = 0
        control, record = new_control, new_record
        q_prev, s_prev = q_k, s_k
        if rel_change <= opts.tol:
            report.status = "converged"
            break
    else:
        report.status = "iteration_cap"
    if report.status == "running":
        report.status = "converged"
    report.wall_time = time.perf_counter() - start
    return control, report


@dataclass
class ICOptions:
    omega0: float = 1000.0
    gamma_armijo: float = 1e-4
    max_halvings: int = 30
    next_slice_factor: float = 0.1


def run_instantaneous_control(slice_problem: Callable[[object, int], ReducedProblem],
                              advance: Callable[[object, int, ControlSchedule], object],
                              initial_state: object, template: ControlSchedule,
                              options: ICOptions | None = None) -> tuple[ControlSchedule, OptimizerReport]:
    """One projected steepest-descent step per slice, states chained through.

    ``slice_problem(state, k)`` builds the reduced problem of slice k started
    at ``state``; ``advance(state, k, slice_control)`` returns the slice-final
    state under the accepted control.  ``template`` fixes the slice grid and
    the initial control of the first slice; each later slice starts from the
    damped accepted control of its predecessor.
    """
    opts = options or ICOptions()
    report = OptimizerReport(strategy="ic")
    start = time.perf_counter()

    knots = template.knots
    glued = template.values.copy()
    state = initial_state
    slice_control_values = template.values[0].copy()

    for k in range(template.n_slices):
        sub = ControlSchedule(knots[k:k + 2], slice_control_values[None], template.u_max)
        report.initial_controls.append(sub.values.copy())
        problem = slice_problem(state, k)
        parts, record = problem.evaluate(sub)
        q_k = problem.gradient(sub, record)
        s_k = -q_k
        new_sub, omega, new_parts, new_record = armijo_search(
            problem, sub, parts[0], q_k, s_k, opts.omega0, opts.gamma_armijo,
            opts.max_halvings,
        )
        accepted = project_control(new_sub)
        grad_norm = float(np.sqrt(control_inner(q_k, q_k, sub.slice_lengths)))
        note = "stagnant" if omega == 0.0 else ""
        report.rows.append(IterationRow(k, *new_parts, grad_norm=grad_norm, omega=omega,
                                        rel_change=np.nan, note=note))
        glued[k] = accepted.values[0]
        state = advance(state, k, accepted)
        slice_control_values = opts.next_slice_factor * accepted.values[0]

    report.wall_time = time.perf_counter() - start
    report.status = "done"
    return ControlSchedule(knots.copy(), glued, template.u_max), report
