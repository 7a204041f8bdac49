import numpy as np
import pytest

from crowdsteer.meanfield.adjoint import integrate_mf_adjoint, reduced_gradient_mf
from crowdsteer.meanfield.convolve import (
    agent_force_field,
    convolve_adjoint_source,
    convolve_force,
    offset_kernel,
)
from crowdsteer.meanfield.grid import CFLError, DensityField, PhaseGrid, sample_initial_density
from crowdsteer.meanfield.solver import (
    force_field,
    integrate_mf_forward,
    strang_forward_step,
)
from crowdsteer.micro import slice_average
from crowdsteer.model import (
    ControlSchedule,
    CostWeights,
    InteractionModel,
    PotentialParams,
    control_inner,
    eval_force,
)
from crowdsteer.model import CROWD_POTENTIAL

ZERO_POT = PotentialParams(0.0, 0.0, 1.0, 1.0)


def zero_model(alpha=0.0):
    return InteractionModel(ZERO_POT, ZERO_POT, alpha=alpha)


class TestGrid:
    def test_paper_domain_spacings(self):
        grid = PhaseGrid(25, 25)
        assert grid.dx == pytest.approx(8.0)
        assert grid.dv == pytest.approx(0.4)

    def test_cfl_guard(self):
        grid = PhaseGrid(25, 25)
        grid.check_cfl(grid.max_stable_dt())
        with pytest.raises(CFLError):
            grid.check_cfl(grid.max_stable_dt() * 1.01)

    def test_rejects_tiny_grid(self):
        with pytest.raises(ValueError):
            PhaseGrid(3, 8)


class TestSampleInitialDensity:
    def test_unit_mass(self):
        grid = PhaseGrid(20, 12)
        fld = sample_initial_density(grid, (-10.0, 55.0, -20.0, 55.0))
        assert fld.mass() == pytest.approx(1.0, abs=1e-14)

    def test_interior_marginal_flat(self):
        grid = PhaseGrid(32, 8)
        fld = sample_initial_density(grid, (-50.0, 50.0, -50.0, 50.0))
        rho = fld.spatial_marginal()
        # strictly interior cells of the box carry a constant density
        x = grid.x_centers
        inside = (x > -50.0 + grid.dx) & (x < 50.0 - grid.dx)
        vals = rho[np.ix_(inside, inside)]
        assert np.ptp(vals) <= 1e-12 * vals.mean()

    def test_mean_position_is_box_center(self):
        grid = PhaseGrid(24, 8)
        fld = sample_initial_density(grid, (-10.0, 55.0, -20.0, 55.0))
        mean, _ = fld.moments()
        np.testing.assert_allclose(mean, [22.5, 17.5], atol=grid.dx / 2)

    def test_rejects_escaping_box(self):
        grid = PhaseGrid(16, 8)
        with pytest.raises(ValueError):
            sample_initial_density(grid, (-10.0, 150.0, 0.0, 10.0))


def brute_force_convolution(rho, grid, p):
    x = grid.x_centers
    out = np.zeros((grid.n_x, grid.n_x, 2))
    for a in range(grid.n_x):
        for b in range(grid.n_x):
            target = np.array([x[a], x[b]])
            for c in range(grid.n_x):
                for d in range(grid.n_x):
                    out[a, b] += eval_force(p, target, np.array([x[c], x[d]])) * rho[c, d]
    return out * grid.dx**2


class TestConvolution:
    def test_matches_double_loop_oracle(self):
        grid = PhaseGrid(16, 4, x_halfwidth=40.0)
        rng = np.random.default_rng(12)
        rho = rng.random((16, 16))
        kernel = offset_kernel(CROWD_POTENTIAL, grid)
        fast = convolve_force(rho, kernel, grid.dx)
        slow = brute_force_convolution(rho, grid, CROWD_POTENTIAL)
        np.testing.assert_allclose(fast, slow, atol=1e-13 * np.abs(slow).max())

    def test_fft_path_matches_direct(self):
        grid = PhaseGrid(20, 4)
        rng = np.random.default_rng(3)
        rho = rng.random((20, 20))
        kernel = offset_kernel(CROWD_POTENTIAL, grid)
        np.testing.assert_allclose(
            convolve_force(rho, kernel, grid.dx, method="fft"),
            convolve_force(rho, kernel, grid.dx, method="direct"),
            atol=1e-12,
        )

    def test_symmetric_density_zero_force_at_center(self):
        grid = PhaseGrid(17, 4, x_halfwidth=34.0)
        x = grid.x_centers
        x1, x2 = np.meshgrid(x, x, indexing="ij")
        rho = np.exp(-((x1 - x[8]) ** 2 + (x2 - x[8]) ** 2) / 50.0)
        kernel = offset_kernel(CROWD_POTENTIAL, grid)
        force = convolve_force(rho, kernel, grid.dx)
        np.testing.assert_allclose(force[8, 8], 0.0, atol=1e-12)

    def test_point_mass_reproduces_kernel(self):
        grid = PhaseGrid(12, 4, x_halfwidth=24.0)
        rho = np.zeros((12, 12))
        rho[4, 7] = 1.0 / grid.cell_area  # unit mass in one cell
        kernel = offset_kernel(CROWD_POTENTIAL, grid)
        force = convolve_force(rho, kernel, grid.dx)
        x = grid.x_centers
        src = np.array([x[4], x[7]])
        for a in (0, 3, 9):
            for b in (1, 5, 11):
                expected = eval_force(CROWD_POTENTIAL, np.array([x[a], x[b]]), src)
                np.testing.assert_allclose(force[a, b], expected, atol=1e-12)

    def test_adjoint_source_matches_double_loop(self):
        grid = PhaseGrid(10, 4, x_halfwidth=20.0)
        rng = np.random.default_rng(8)
        w = rng.normal(size=(10, 10, 2))
        kernel = offset_kernel(CROWD_POTENTIAL, grid)
        fast = convolve_adjoint_source(w, kernel, grid.dx)
        x = grid.x_centers
        slow = np.zeros((10, 10))
        for a in range(10):
            for b in range(10):
                for c in range(10):
                    for d in range(10):
                        k = eval_force(CROWD_POTENTIAL, np.array([x[a], x[b]]), np.array([x[c], x[d]]))
                        slow[a, b] += float(k @ w[c, d])
        slow *= grid.dx**2
        np.testing.assert_allclose(fast, slow, atol=1e-13 * np.abs(slow).max())
        np.testing.assert_allclose(
            convolve_adjoint_source(w, kernel, grid.dx, method="fft"), slow, atol=1e-11
        )

    def test_agent_force_field_matches_pointwise(self):
        grid = PhaseGrid(8, 4)
        agents = np.array([[10.0, -5.0], [-30.0, 40.0]])
        out = agent_force_field(grid, agents, CROWD_POTENTIAL)
        x = grid.x_centers
        expected = 0.5 * (
            eval_force(CROWD_POTENTIAL, np.array([x[2], x[5]]), agents[0])
            + eval_force(CROWD_POTENTIAL, np.array([x[2], x[5]]), agents[1])
        )
        np.testing.assert_allclose(out[2, 5], expected, atol=1e-13)


class TestStrangStep:
    def test_rest_density_is_invariant_without_forces(self):
        # odd velocity count puts a cell exactly at v = 0
        grid = PhaseGrid(16, 5)
        values = np.zeros(grid.shape)
        values[5:9, 6:10, 2, 2] = 1.0
        fld = DensityField(grid, values / (values.sum() * grid.cell_volume))
        out = strang_forward_step(fld, np.array([[0.0, 0.0]]), zero_model(), dt=0.4)
        np.testing.assert_allclose(out.values, fld.values, atol=1e-12)

    def test_uniform_translation_follows_characteristics(self):
        grid = PhaseGrid(40, 8, x_halfwidth=40.0)
        iv = 5  # a positive v1 cell
        speed = grid.v_centers[iv]
        x = grid.x_centers
        x1, x2 = np.meshgrid(x, x, indexing="ij")
        bump = np.exp(-((x1 + 15.0) ** 2 + x2**2) / 40.0)
        values = np.zeros(grid.shape)
        values[:, :, iv, 4] = bump
        v2 = grid.v_centers[4]
        fld = DensityField(grid, values / (values.sum() * grid.cell_volume))
        dt = grid.max_stable_dt() / 2
        steps = 8
        mean0, _ = fld.moments()
        for _ in range(steps):
            fld = strang_forward_step(fld, np.array([[0.0, 0.0]]), zero_model(), dt)
        mean1, _ = fld.moments()
        shift = np.array([speed, v2]) * dt * steps
        np.testing.assert_allclose(mean1 - mean0, shift, atol=grid.dx / 10 * dt * steps)

    def test_mass_conservation_per_step(self):
        grid = PhaseGrid(20, 10)
        fld = sample_initial_density(grid, (-10.0, 55.0, -20.0, 55.0))
        model = InteractionModel()
        diag = {}
        out = strang_forward_step(fld, np.array([[70.0, 70.0]]), model,
                                  dt=grid.max_stable_dt() / 2, diagnostics=diag)
        drift = abs(out.mass() - fld.mass())
        # interior transport telescopes; the only unaccounted change is round-off
        assert drift <= abs(diag["outflow_mass"]) + abs(diag["clipped_mass"]) + 1e-12

    def test_rejects_cfl_violation(self):
        grid = PhaseGrid(16, 8)
        fld = sample_initial_density(grid, (-40.0, 40.0, -40.0, 40.0))
        with pytest.raises(CFLError):
            strang_forward_step(fld, np.zeros((1, 2)), zero_model(), dt=grid.max_stable_dt() * 4)


class TestForwardIntegration:
    def test_agents_hold_position_without_control(self):
        grid = PhaseGrid(12, 6)
        fld = sample_initial_density(grid, (-30.0, 30.0, -30.0, 30.0))
        control = ControlSchedule.uniform(1.0, 1, 2)
        d0 = np.array([[50.0, 0.0], [0.0, 50.0]])
        rec = integrate_mf_forward(fld, d0, control, InteractionModel(), steps=4)
        np.testing.assert_array_equal(rec.agents[-1], d0)

    def test_mass_conserved_over_run(self):
        grid = PhaseGrid(25, 25)
        fld = sample_initial_density(grid, (-10.0, 55.0, -20.0, 55.0))
        control = ControlSchedule.uniform(10.0, 5, 2, values=np.array([1.0, -0.5]))
        d0 = np.array([[70.0, 20.0], [20.0, 70.0]])
        rec = integrate_mf_forward(fld, d0, control, InteractionModel(), steps=25)
        assert abs(rec.masses[-1] - 1.0) <= 1e-3

    def test_positivity_maintained(self):
        grid = PhaseGrid(20, 9)
        fld = sample_initial_density(grid, (-10.0, 55.0, -20.0, 55.0))
        control = ControlSchedule.uniform(2.0, 2, 1, values=np.array([2.0, 0.0]))
        rec = integrate_mf_forward(fld, np.array([[60.0, 20.0]]), control, InteractionModel(), steps=10)
        assert rec.snapshots[len(rec.times) - 1].min() >= -1e-12


class TestSplittingOrder:
    @pytest.mark.slow
    def test_refinement_order(self):
        from convergence_utils import strang_refinement_order

        assert strang_refinement_order(resolutions=(12, 24, 48)) >= 1.8


def mf_cost(control, f0, d0, model, weights, steps):
    from crowdsteer.model import assemble_cost

    rec = integrate_mf_forward(f0, d0, control, model, steps)
    return assemble_cost(rec.times, rec.means, rec.variances, control, weights)[0]


class TestAdjoint:
    def test_zero_weights_give_zero_multipliers(self):
        grid = PhaseGrid(12, 6)
        fld = sample_initial_density(grid, (-30.0, 30.0, -30.0, 30.0))
        control = ControlSchedule.uniform(1.0, 2, 1, values=np.array([1.0, 0.0]))
        model = InteractionModel()
        rec = integrate_mf_forward(fld, np.array([[45.0, 0.0]]), control, model, steps=4)
        weights = CostWeights(0.0, 0.0, 1e-6, 10.0, np.zeros(2), 1.0)
        adj = integrate_mf_adjoint(rec, model, weights, keep_fields=True)
        assert np.all(adj.phi_d == 0.0)
        assert all(np.all(g == 0.0) for g in adj.fields)

    def test_terminal_field_zero(self):
        grid = PhaseGrid(12, 6)
        fld = sample_initial_density(grid, (-30.0, 30.0, -30.0, 30.0))
        control = ControlSchedule.uniform(0.5, 1, 1)
        model = InteractionModel()
        rec = integrate_mf_forward(fld, np.array([[45.0, 0.0]]), control, model, steps=2)
        mean0, var0 = fld.moments()
        weights = CostWeights(0.005, 0.5, 1e-6, 0.9 * var0, np.array([-20.0, -20.0]), 0.5)
        adj = integrate_mf_adjoint(rec, model, weights, keep_fields=True)
        assert np.all(adj.fields[-1] == 0.0)
        assert np.all(adj.phi_d[-1] == 0.0)

    def test_pure_energy_gradient_exact(self):
        grid = PhaseGrid(12, 6)
        fld = sample_initial_density(grid, (-30.0, 30.0, -30.0, 30.0))
        rng = np.random.default_rng(5)
        control = ControlSchedule.uniform(1.0, 2, 2, values=rng.normal(size=(2, 2, 2)))
        model = InteractionModel()
        weights = CostWeights(0.0, 0.0, 0.7, 10.0, np.zeros(2), 1.0)
        grad = reduced_gradient_mf(control, fld, np.array([[45.0, 0.0], [0.0, 45.0]]),
                                   model, weights, steps=4)
        np.testing.assert_allclose(grad, 0.7 / (2 * 1.0) * control.values, atol=1e-15)

    @pytest.mark.slow
    def test_gradient_matches_finite_differences(self):
        grid = PhaseGrid(16, 16)
        fld = sample_initial_density(grid, (-10.0, 55.0, -20.0, 55.0))
        model = InteractionModel()
        horizon, steps = 0.5, 10
        mean0, var0 = fld.moments()
        weights = CostWeights(0.005, 0.5, 1e-6, 0.9 * var0, np.array([-20.0, -20.0]), horizon)
        d0 = np.array([[65.0, 20.0], [20.0, 65.0]])
        rng = np.random.default_rng(77)
        control = ControlSchedule.uniform(horizon, 5, 2, values=rng.normal(size=(5, 2, 2)))
        grad = reduced_gradient_mf(control, fld, d0, model, weights, steps=steps)
        lengths = control.slice_lengths
        eps = 1e-3
        worst = 0.0
        for _ in range(5):
            h = rng.normal(size=control.values.shape)
            h /= np.sqrt(control_inner(h, h, lengths))
            up = mf_cost(control.with_values(control.values + eps * h), fld, d0, model, weights, steps)
            dn = mf_cost(control.with_values(control.values - eps * h), fld, d0, model, weights, steps)
            fd = (up - dn) / (2 * eps)
            pred = control_inner(grad, h, lengths)
            worst = max(worst, abs(pred - fd) / max(abs(fd), 1e-14))
        assert worst <= 5e-3
