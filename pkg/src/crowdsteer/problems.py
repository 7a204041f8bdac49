"""Reduced-problem factories over the two state systems.

These adapt the particle and kinetic solvers to the optimizer's
solve/cost/gradient interface, both for full-horizon problems and for the
per-slice subproblems of the instantaneous strategy.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .meanfield.adjoint import reduced_gradient_mf
from .meanfield.grid import DensityField
from .meanfield.solver import ForwardRecordMF, integrate_mf_forward
from .micro import (
    ForwardRecordMicro,
    evaluate_cost_micro,
    integrate_forward,
    reduced_gradient_micro,
)
from .model import Array, ControlSchedule, CostWeights, InteractionModel, MicroState, assemble_cost
from .optimize import ReducedProblem


def make_micro_problem(initial: MicroState, model: InteractionModel,
                       weights: CostWeights, steps: int) -> ReducedProblem:
    def solve(control: ControlSchedule) -> ForwardRecordMicro:
        return integrate_forward(initial, control, model, steps)

    def cost(record: ForwardRecordMicro, control: ControlSchedule):
        return evaluate_cost_micro(record, control, weights)

    def gradient(control: ControlSchedule, record: ForwardRecordMicro) -> Array:
        return reduced_gradient_micro(control, initial, model, weights, steps, record=record)

    return ReducedProblem(solve, cost, gradient)


def make_micro_slice_tools(model: InteractionModel, weights: CostWeights,
                           steps_per_slice: int):
    """(slice_problem, advance) pair for the instantaneous strategy."""

    def slice_problem(state: MicroState, k: int) -> ReducedProblem:
        def solve(control: ControlSchedule) -> ForwardRecordMicro:
            return integrate_forward(state, control, model, steps_per_slice)

        def cost(record, control):
            return evaluate_cost_micro(record, control, weights)

        def gradient(control, record):
            return reduced_gradient_micro(control, state, model, weights,
                                          steps_per_slice, record=record)

        return ReducedProblem(solve, cost, gradient)

    def advance(state: MicroState, k: int, control: ControlSchedule) -> MicroState:
        record = integrate_forward(state, control, model, steps_per_slice)
        return record.state_at(record.n_steps)

    return slice_problem, advance


@dataclass
class MeanFieldState:
    """Kinetic state chained between instantaneous-control slices."""

    field: DensityField
    agents: Array


def evaluate_cost_mf(record: ForwardRecordMF, control: ControlSchedule,
                     weights: CostWeights):
    return assemble_cost(record.times, record.means, record.variances, control, weights)


def make_mf_problem(f0: DensityField, d0: Array, model: InteractionModel,
                    weights: CostWeights, steps: int, conv_method: str = "direct",
                    store_factory=None) -> ReducedProblem:
    def solve(control: ControlSchedule) -> ForwardRecordMF:
        store = store_factory() if store_factory is not None else None
        return integrate_mf_forward(f0, d0, control, model, steps,
                                    store=store, conv_method=conv_method)

    def cost(record: ForwardRecordMF, control: ControlSchedule):
        return evaluate_cost_mf(record, control, weights)

    def gradient(control: ControlSchedule, record: ForwardRecordMF) -> Array:
        return reduced_gradient_mf(control, f0, d0, model, weights, steps,
                                   record=record, conv_method=conv_method)

    return ReducedProblem(solve, cost, gradient)


def make_mf_slice_tools(model: InteractionModel, weights: CostWeights,
                        steps_per_slice: int, conv_method: str = "direct"):
    def slice_problem(state: MeanFieldState, k: int) -> ReducedProblem:
        def solve(control: ControlSchedule) -> ForwardRecordMF:
            return integrate_mf_forward(state.field, state.agents, control, model,
                                        steps_per_slice, conv_method=conv_method)

        def cost(record, control):
            return evaluate_cost_mf(record, control, weights)

        def gradient(control, record):
            return reduced_gradient_mf(control, state.field, state.agents, model,
                                       weights, steps_per_slice, record=record,
                                       conv_method=conv_method)

        return ReducedProblem(solve, cost, gradient)

    def advance(state: MeanFieldState, k: int, control: ControlSchedule) -> MeanFieldState:
        record = integrate_mf_forward(state.field, state.agents, control, model,
                                      steps_per_slice, conv_method=conv_method)
        return MeanFieldState(record.field_at(record.n_steps), record.agents[-1])

    return slice_problem, advance
