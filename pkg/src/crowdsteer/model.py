"""Core model: interaction potentials, microscopic drift, moments and running cost.

The crowd is a system of N identical particles with positions ``x`` and
velocities ``v``; M controllable agents at positions ``d`` repel the crowd.
Particle-particle and particle-agent interactions derive from radially
symmetric Morse-type potentials; the control is the agent velocity field.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

Array = np.ndarray


class BlowUpError(RuntimeError):
    """Raised when a state trajectory leaves the finite range."""


@dataclass(frozen=True)
class PotentialParams:
    """Morse potential coefficients.

    phi(rho) = repulsion_strength * exp(-rho / repulsion_radius)
             - attraction_strength * exp(-rho / attraction_radius)

    Strengths may be zero (used to switch an interaction off); radii must be
    positive so the exponentials are well defined.
    """

    attraction_strength: float
    repulsion_strength: float
    attraction_radius: float
    repulsion_radius: float

    def __post_init__(self) -> None:
        if self.attraction_strength < 0 or self.repulsion_strength < 0:
            raise ValueError("potential strengths must be nonnegative")
        if self.attraction_radius <= 0 or self.repulsion_radius <= 0:
            raise ValueError("potential radii must be positive")

    @property
    def is_zero(self) -> bool:
        return self.attraction_strength == 0.0 and self.repulsion_strength == 0.0


# Particle-particle / particle-agent values used throughout the experiments.
CROWD_POTENTIAL = PotentialParams(20.0, 50.0, 100.0, 2.0)
AGENT_POTENTIAL = PotentialParams(5.0, 100.0, 1000.0, 50.0)


@dataclass(frozen=True)
class InteractionModel:
    """Pairwise crowd potential, crowd-agent potential and linear friction."""

    phi1: PotentialParams = CROWD_POTENTIAL
    phi2: PotentialParams = AGENT_POTENTIAL
    alpha: float = 1.0

    def __post_init__(self) -> None:
        if self.alpha < 0:
            raise ValueError("friction coefficient must be nonnegative")


def eval_potential(p: PotentialParams, dist):
    """Potential value at separation ``dist`` (scalar or array, >= 0)."""
    dist = np.asarray(dist, dtype=float)
    return p.repulsion_strength * np.exp(-dist / p.repulsion_radius) - (
        p.attraction_strength * np.exp(-dist / p.attraction_radius)
    )


def radial_slope(p: PotentialParams, dist):
    """d(phi)/d(rho) at separation ``dist``."""
    dist = np.asarray(dist, dtype=float)
    return (
        -p.repulsion_strength / p.repulsion_radius * np.exp(-dist / p.repulsion_radius)
        + p.attraction_strength / p.attraction_radius * np.exp(-dist / p.attraction_radius)
    )


def radial_curvature(p: PotentialParams, dist):
    """d2(phi)/d(rho)2 at separation ``dist``."""
    dist = np.asarray(dist, dtype=float)
    return (
        p.repulsion_strength / p.repulsion_radius**2 * np.exp(-dist / p.repulsion_radius)
        - p.attraction_strength / p.attraction_radius**2 * np.exp(-dist / p.attraction_radius)
    )


def force_from_displacement(p: PotentialParams, delta: Array) -> Array:
    """grad(phi) evaluated at displacement(s) ``delta`` of shape (..., D).

    The gradient of a radial potential is slope(|delta|) * delta/|delta|.
    At delta = 0 the direction is undefined; the zero vector is the unique
    antisymmetric choice and is returned there.
    """
    delta = np.asarray(delta, dtype=float)
    rho = np.linalg.norm(delta, axis=-1)
    safe = np.where(rho > 0.0, rho, 1.0)
    scale = np.where(rho > 0.0, radial_slope(p, rho) / safe, 0.0)
    return scale[..., None] * delta


def eval_force(p: PotentialParams, x: Array, y: Array) -> Array:
    """Interaction force kernel K(x, y) = grad(phi)(x - y)."""
    return force_from_displacement(p, np.asarray(x, dtype=float) - np.asarray(y, dtype=float))


def hessian_apply(p: PotentialParams, delta: Array, w: Array) -> Array:
    """Apply the potential Hessian at displacement ``delta`` to vector(s) ``w``.

    For radial phi:  H(delta) = phi'' * uu^T + (phi'/rho) * (I - uu^T)
    with u = delta/rho.  Consistent with the zero-force convention, the
    product is zero at delta = 0.  Shapes broadcast over leading axes.
    """
    delta = np.asarray(delta, dtype=float)
    w = np.asarray(w, dtype=float)
    rho = np.linalg.norm(delta, axis=-1)
    safe = np.where(rho > 0.0, rho, 1.0)
    u = delta / safe[..., None]
    uw = np.sum(u * w, axis=-1)
    radial = radial_curvature(p, rho) * uw
    tangential = radial_slope(p, rho) / safe
    out = radial[..., None] * u + tangential[..., None] * (w - uw[..., None] * u)
    return np.where(rho[..., None] > 0.0, out, 0.0)


@dataclass
class MicroState:
    """Positions/velocities of N particles and positions of M agents."""

    x: Array  # (N, D)
    v: Array  # (N, D)
    d: Array  # (M, D)

    def __post_init__(self) -> None:
        self.x = np.atleast_2d(np.asarray(self.x, dtype=float))
        self.v = np.atleast_2d(np.asarray(self.v, dtype=float))
        self.d = np.atleast_2d(np.asarray(self.d, dtype=float))
        if self.x.shape != self.v.shape:
            raise ValueError("positions and velocities must share shape")
        if self.x.ndim != 2 or self.d.ndim != 2 or self.x.shape[1] != self.d.shape[1]:
            raise ValueError("states are (N, D) / (M, D) arrays in a common dimension")
        if self.x.shape[0] < 1 or self.d.shape[0] < 1:
            raise ValueError("need at least one particle and one agent")
        if not (np.isfinite(self.x).all() and np.isfinite(self.v).all() and np.isfinite(self.d).all()):
            raise BlowUpError("non-finite state entries")

    @property
    def n_particles(self) -> int:
        return self.x.shape[0]

    @property
    def n_agents(self) -> int:
        return self.d.shape[0]

    @property
    def dim(self) -> int:
        return self.x.shape[1]

    def copy(self) -> "MicroState":
        return MicroState(self.x.copy(), self.v.copy(), self.d.copy())


@dataclass
class ControlSchedule:
    """Piecewise-constant agent velocities on a time grid.

    ``values[k, m]`` is the velocity of agent m on [knots[k], knots[k+1]);
    the final slice is closed on the right.  Feasibility caps per-agent
    Euclidean speed at ``u_max`` on every slice.
    """

    knots: Array  # (K+1,)
    values: Array  # (K, M, D)
    u_max: float = 10.0

    def __post_init__(self) -> None:
        self.knots = np.asarray(self.knots, dtype=float)
        self.values = np.asarray(self.values, dtype=float)
        if self.knots.ndim != 1 or self.knots.size < 2 or np.any(np.diff(self.knots) <= 0):
            raise ValueError("knots must be strictly increasing with at least one slice")
        if self.values.ndim != 3 or self.values.shape[0] != self.knots.size - 1:
            raise ValueError("values must be (K, M, D) matching the knots")
        if self.u_max <= 0:
            raise ValueError("speed cap must be positive")

    @classmethod
    def uniform(cls, horizon: float, slices: int, n_agents: int, dim: int = 2,
                u_max: float = 10.0, values: Array | None = None) -> "ControlSchedule":
        knots = np.linspace(0.0, horizon, slices + 1)
        if values is None:
            values = np.zeros((slices, n_agents, dim))
        else:
            values = np.broadcast_to(np.asarray(values, dtype=float), (slices, n_agents, dim)).copy()
        return cls(knots, values, u_max)

    @property
    def n_slices(self) -> int:
        return self.values.shape[0]

    @property
    def n_agents(self) -> int:
        return self.values.shape[1]

    @property
    def dim(self) -> int:
        return self.values.shape[2]

    @property
    def horizon(self) -> float:
        return float(self.knots[-1] - self.knots[0])

    @property
    def slice_lengths(self) -> Array:
        return np.diff(self.knots)

    def slice_index(self, t: float) -> int:
        k = int(np.searchsorted(self.knots, t, side="right")) - 1
        return min(max(k, 0), self.n_slices - 1)

    def value_at(self, t: float) -> Array:
        return self.values[self.slice_index(t)]

    def speeds(self) -> Array:
        """Per-slice, per-agent Euclidean speeds (K, M)."""
        return np.linalg.norm(self.values, axis=2)

    def is_feasible(self, tol: float = 1e-12) -> bool:
        return bool(np.all(self.speeds() <= self.u_max + tol))

    def with_values(self, values: Array) -> "ControlSchedule":
        return ControlSchedule(self.knots.copy(), np.asarray(values, dtype=float), self.u_max)

    def inner(self, other: Array) -> float:
        """Discrete L2 control-space inner product of this schedule with another value array."""
        return control_inner(self.values, np.asarray(other, dtype=float), self.slice_lengths)

    def l2_norm(self) -> float:
        return float(np.sqrt(self.inner(self.values)))


def control_inner(a: Array, b: Array, slice_lengths: Array) -> float:
    """<a, b> = sum_k dt_k * sum_{m,d} a[k,m,d] b[k,m,d]."""
    return float(np.einsum("kmd,kmd,k->", a, b, slice_lengths))


@dataclass(frozen=True)
class CostWeights:
    """Weights and targets of the tracking cost."""

    sigma1: float
    sigma2: float
    sigma3: float
    target_variance: float
    destination: Array
    horizon: float

    def __post_init__(self) -> None:
        object.__setattr__(self, "destination", np.asarray(self.destination, dtype=float))
        if min(self.sigma1, self.sigma2, self.sigma3) < 0:
            raise ValueError("cost weights must be nonnegative")
        if self.horizon <= 0:
            raise ValueError("horizon must be positive")


def micro_drift(state: MicroState, model: InteractionModel, block: int = 512) -> Array:
    """Acceleration of every particle: pairwise crowd force, agent force, friction.

    a_i = -(1/N) sum_{j != i} K1(x_i, x_j) - (1/M) sum_m K2(x_i, d_m) - alpha v_i

    Pairwise terms are evaluated in row blocks so memory stays O(block * N).
    """
    x, v, d = state.x, state.v, state.d
    n, m = state.n_particles, state.n_agents
    acc = -model.alpha * v
    if not model.phi1.is_zero and n > 1:
        for lo in range(0, n, block):
            hi = min(lo + block, n)
            delta = x[lo:hi, None, :] - x[None, :, :]  # (b, N, D)
            acc[lo:hi] -= force_from_displacement(model.phi1, delta).sum(axis=1) / n
    if not model.phi2.is_zero:
        delta = x[:, None, :] - d[None, :, :]  # (N, M, D)
        acc -= force_from_displacement(model.phi2, delta).sum(axis=1) / m
    return acc


def moments(positions: Array) -> tuple[Array, float]:
    """Center of mass and scalar variance (1/N) sum |x_i - mean|^2."""
    positions = np.atleast_2d(np.asarray(positions, dtype=float))
    mean = positions.mean(axis=0)
    var = float(np.mean(np.sum((positions - mean) ** 2, axis=1)))
    return mean, var


def running_cost(mean: Array, variance: float, control_slice: Array, weights: CostWeights) -> float:
    """Instantaneous cost integrand (without the global 1/T prefactor)."""
    parts = running_cost_parts(mean, variance, control_slice, weights)
    return float(sum(parts))


def running_cost_parts(mean: Array, variance: float, control_slice: Array,
                       weights: CostWeights) -> tuple[float, float, float]:
    """(spread, tracking, energy) parts of the instantaneous cost."""
    m = np.asarray(control_slice, dtype=float).shape[0]
    j1 = 0.25 * weights.sigma1 * (variance - weights.target_variance) ** 2
    j2 = 0.5 * weights.sigma2 * float(np.sum((np.asarray(mean) - weights.destination) ** 2))
    j3 = 0.5 * weights.sigma3 / m * float(np.sum(np.asarray(control_slice) ** 2))
    return float(j1), float(j2), float(j3)


def assemble_cost(times: Array, means: Array, variances: Array, control: ControlSchedule,
                  weights: CostWeights) -> tuple[float, float, float, float]:
    """Total cost (1/T) * integral of the running cost, and its three parts.

    State terms use the composite trapezoid rule on the solver grid; the
    control term is integrated exactly (the schedule is piecewise constant).
    Returns (J, J1, J2, J3).
    """
    times = np.asarray(times, dtype=float)
    means = np.asarray(means, dtype=float)
    variances = np.asarray(variances, dtype=float)
    t_total = weights.horizon
    dev = variances - weights.target_variance
    j1_t = 0.25 * weights.sigma1 * dev**2
    j2_t = 0.5 * weights.sigma2 * np.sum((means - weights.destination) ** 2, axis=1)
    j1 = float(np.trapezoid(j1_t, times)) / t_total
    j2 = float(np.trapezoid(j2_t, times)) / t_total
    m = control.n_agents
    energy = np.einsum("kmd,kmd->k", control.values, control.values)
    j3 = 0.5 * weights.sigma3 / m * float(np.dot(energy, control.slice_lengths)) / t_total
    return j1 + j2 + j3, j1, j2, j3
