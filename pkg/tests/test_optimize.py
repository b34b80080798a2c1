from typing import Any

import numpy as np
import pytest

from omc.config import OptimizerMethod
from omc.core import DiscrepancyKernel, FloatArray, discrepancy
from omc.errors import (
    ConfigError,
    DimensionError,
    JacobianError,
    SingularJacobianError,
    UnderdeterminedError,
)
from omc.optimize import (
    OptimizationResult,
    OptimizerConfig,
    check_problem,
    exact_optimize,
    failed_result,
    fd_jacobian,
    gauss_newton_optimize,
    newton_optimize,
    optimize,
    pseudo_inverse_solve,
    pull_back,
    random_walk_optimize,
)
from omc.priors import uniform_prior
from omc.seeding import ParticleSeedStream
from omc.simulators import (
    SimulatorSpec,
    sim_exponential,
    sim_linked_normal,
    sim_mg1_queue,
    sim_unknown_mean,
)
from omc.weighting import linearization_residual, project_theta_star
from tests.helpers import CountingSimulator, LinearSimulator


def seed_for(
    sim: SimulatorSpec, index: int, master_seed: int = 0
) -> tuple[ParticleSeedStream, FloatArray]:
    stream = ParticleSeedStream(master_seed, index)
    return stream, stream.uniforms(sim.d_u)


class TestFdJacobian:
    def test_costs_one_call_per_parameter(self) -> None:
        sim = CountingSimulator(sim_mg1_queue())
        theta = np.array([1.0, 5.0, 0.2])
        u = np.random.default_rng(0).random(sim.d_u)
        base = sim.forward(theta, u)
        sim.calls = 0
        J = fd_jacobian(sim, theta, u, base, 1e-5)
        assert J.shape == (3, 3)
        assert sim.calls == 3

    def test_non_finite_column_names_the_parameter(self) -> None:
        sim = sim_unknown_mean()
        with pytest.raises(JacobianError) as excinfo:
            fd_jacobian(
                sim,
                [0.0],
                [0.5, 0.5],
                [0.0],
                1e-5,
                forward=lambda theta, u: np.array([np.nan]),
            )
        assert excinfo.value.column == 0

    def test_non_finite_base(self) -> None:
        with pytest.raises(JacobianError):
            fd_jacobian(sim_unknown_mean(), [0.0], [0.5, 0.5], [np.inf], 1e-5)

    def test_step_must_be_positive(self) -> None:
        with pytest.raises(ValueError):
            fd_jacobian(sim_unknown_mean(), [0.0], [0.5, 0.5], [0.0], 0.0)


class TestPseudoInverseSolve:
    def test_square(self) -> None:
        J = np.array([[2.0, 1.0], [1.0, 3.0]])
        r = np.array([1.0, 2.0])
        assert pseudo_inverse_solve(J, r) == pytest.approx(np.linalg.solve(J, r))

    def test_tall_is_least_squares(self) -> None:
        rng = np.random.default_rng(1)
        J = rng.normal(size=(5, 2))
        r = rng.normal(size=5)
        expected = np.linalg.lstsq(J, r, rcond=None)[0]
        assert pseudo_inverse_solve(J, r) == pytest.approx(expected, rel=1e-8)

    def test_underdetermined(self) -> None:
        with pytest.raises(UnderdeterminedError):
            pseudo_inverse_solve(np.ones((1, 2)), np.ones(1))

    def test_zero_matrix(self) -> None:
        with pytest.raises(SingularJacobianError):
            pseudo_inverse_solve(np.zeros((2, 2)), np.ones(2))

    def test_rank_deficient_is_regularized(self) -> None:
        step = pseudo_inverse_solve(np.ones((2, 2)), np.ones(2))
        assert np.isfinite(step).all()

    def test_residual_length(self) -> None:
        with pytest.raises(DimensionError):
            pseudo_inverse_solve(np.eye(2), np.ones(3))


class TestPullBack:
    def test_inside_is_unchanged(self) -> None:
        prior = uniform_prior(0.0, 10.0)
        assert pull_back(prior, np.array([5.0]), np.array([1.0])).tolist() == [6.0]

    def test_stops_just_inside_the_boundary(self) -> None:
        prior = uniform_prior(0.0, 10.0)
        theta = pull_back(prior, np.array([5.0]), np.array([10.0]))
        assert prior.in_support(theta)
        assert 9.99 < theta[0] < 10.0


class TestOptimizerConfig:
    def test_defaults(self) -> None:
        config = OptimizerConfig()
        assert config.method is OptimizerMethod.NEWTON
        assert config.max_sims_per_round == 1000
        assert config.fd_step == 1e-5

    def test_tolerance_defaults_to_epsilon(self) -> None:
        kernel = DiscrepancyKernel(0.25)
        assert OptimizerConfig().tolerance(kernel) == 0.25
        assert OptimizerConfig(convergence_tol=1e-6).tolerance(kernel) == 1e-6

    @pytest.mark.parametrize(
        "kwargs",
        [
            {"max_sims_per_round": 0},
            {"fd_step": 0.0},
            {"convergence_tol": -1.0},
            {"rw_scale": 0.0},
            {"rw_decay": 1.0},
        ],
    )
    def test_invalid(self, kwargs: dict[str, Any]) -> None:
        with pytest.raises(ConfigError):
            OptimizerConfig(**kwargs)


class TestNewton:
    def test_unknown_mean_in_one_step(self) -> None:
        sim = CountingSimulator(sim_unknown_mean())
        stream, u = seed_for(sim, 0)
        result = newton_optimize(
            sim, sim.observed, u, DiscrepancyKernel(0.01), OptimizerConfig(), stream
        )
        assert result.converged
        assert result.sim_count == 4
        assert sim.calls == 4
        expected = sim.inner.analytic_optimum(sim.observed, u)
        assert result.theta_opt == pytest.approx(expected, abs=1e-8)
        assert result.jacobian[0, 0] == pytest.approx(1.0, abs=1e-8)

    def test_start_at_optimum_takes_no_step(self) -> None:
        sim = sim_unknown_mean()
        stream, u = seed_for(sim, 1)
        theta = sim.analytic_optimum(sim.observed, u)
        start = OptimizationResult(
            theta_opt=theta,
            f_at_opt=sim.forward(theta, u),
            discrepancy=0.0,
            jacobian=np.full((1, 1), np.nan),
            sim_count=0,
            converged=True,
        )
        result = newton_optimize(
            sim, sim.observed, u, DiscrepancyKernel(0.01), OptimizerConfig(), stream, warm_start=start
        )
        assert result.theta_opt.tolist() == theta.tolist()
        assert result.sim_count == 1
        assert result.segment == 2

    def test_exponential_reaches_analytic_optimum(self) -> None:
        sim = sim_exponential()
        config = OptimizerConfig(convergence_tol=1e-10)
        kernel = DiscrepancyKernel(0.01)
        reached = 0
        for index in range(100):
            stream, u = seed_for(sim, index)
            result = newton_optimize(sim, sim.observed, u, kernel, config, stream)
            if result.discrepancy > 1e-9:
                continue
            reached += 1
            assert result.theta_opt == pytest.approx(sim.analytic_optimum(sim.observed, u), abs=1e-8)
        assert reached >= 90

    def test_exponential_mostly_converges(self) -> None:
        sim = sim_exponential()
        kernel = DiscrepancyKernel(0.01)
        converged = 0
        for index in range(100):
            stream, u = seed_for(sim, index)
            converged += newton_optimize(sim, sim.observed, u, kernel, OptimizerConfig(), stream).converged
        assert converged >= 95

    def test_needs_square_problem(self) -> None:
        sim = sim_linked_normal()
        stream, u = seed_for(sim, 0)
        with pytest.raises(DimensionError):
            newton_optimize(sim, sim.observed, u, DiscrepancyKernel(0.1), OptimizerConfig(), stream)

    def test_budget_below_minimum(self) -> None:
        sim = sim_unknown_mean()
        stream, u = seed_for(sim, 0)
        with pytest.raises(ConfigError):
            newton_optimize(
                sim, sim.observed, u, DiscrepancyKernel(0.1), OptimizerConfig(), stream, budget=1
            )

    @pytest.mark.parametrize("budget", [2, 3, 5, 17])
    def test_never_exceeds_budget(self, budget: int) -> None:
        sim = CountingSimulator(sim_exponential())
        config = OptimizerConfig(convergence_tol=1e-12)
        for index in range(10):
            sim.calls = 0
            stream, u = seed_for(sim, index)
            result = newton_optimize(
                sim, sim.observed, u, DiscrepancyKernel(0.01), config, stream, budget=budget
            )
            assert result.sim_count == sim.calls
            assert sim.calls <= budget

    def test_warm_start_accumulates_sims(self) -> None:
        sim = sim_exponential()
        stream, u = seed_for(sim, 3)
        config = OptimizerConfig(convergence_tol=1e-12)
        kernel = DiscrepancyKernel(0.01)
        first = newton_optimize(sim, sim.observed, u, kernel, config, stream, budget=5)
        second = newton_optimize(sim, sim.observed, u, kernel, config, stream, warm_start=first, budget=5)
        assert second.sim_count >= first.sim_count
        assert second.sim_count <= first.sim_count + 5
        assert second.discrepancy <= first.discrepancy


class TestGaussNewton:
    def test_does_not_increase_discrepancy(self) -> None:
        sim = sim_linked_normal()
        kernel = DiscrepancyKernel(0.1)
        for index in range(20):
            stream, u = seed_for(sim, index)
            start = sim.prior.sample(stream.generator("init"))
            rho0 = discrepancy(sim.observed, sim.forward(start, u), kernel)
            result = gauss_newton_optimize(sim, sim.observed, u, kernel, OptimizerConfig(), stream)
            assert result.discrepancy <= rho0

    def test_matches_newton_on_square_problems(self) -> None:
        sim = sim_unknown_mean()
        kernel = DiscrepancyKernel(0.01)
        for index in range(10):
            stream, u = seed_for(sim, index)
            newton = newton_optimize(sim, sim.observed, u, kernel, OptimizerConfig(), stream)
            gauss = gauss_newton_optimize(sim, sim.observed, u, kernel, OptimizerConfig(), stream)
            assert newton.theta_opt.tobytes() == gauss.theta_opt.tobytes()
            assert newton.sim_count == gauss.sim_count

    def test_linear_model_lands_on_least_squares(self) -> None:
        A = np.array([[1.0, 0.0], [0.0, 2.0], [1.0, 1.0]])
        y = np.array([1.0, 2.0, 4.0])
        sim = LinearSimulator(A, y)
        stream, u = seed_for(sim, 0)
        config = OptimizerConfig(method=OptimizerMethod.GAUSS_NEWTON, convergence_tol=1e-12)
        result = gauss_newton_optimize(sim, y, u, DiscrepancyKernel(1.0), config, stream)
        expected = np.linalg.lstsq(A, y - u, rcond=None)[0]
        assert result.theta_opt == pytest.approx(expected, abs=1e-8)

    def test_kernel_scale_gives_weighted_least_squares(self) -> None:
        A = np.array([[1.0, 0.0], [0.0, 2.0], [1.0, 1.0]])
        y = np.array([1.0, 2.0, 4.0])
        scale = np.array([0.1, 1.0, 10.0])
        sim = LinearSimulator(A, y)
        stream, u = seed_for(sim, 0)
        kernel = DiscrepancyKernel(1.0, scale=scale)
        config = OptimizerConfig(method=OptimizerMethod.GAUSS_NEWTON, convergence_tol=1e-12)
        result = gauss_newton_optimize(sim, y, u, kernel, config, stream)
        weighted = np.linalg.lstsq(A / scale[:, None], (y - u) / scale, rcond=None)[0]
        unweighted = np.linalg.lstsq(A, y - u, rcond=None)[0]
        assert result.theta_opt == pytest.approx(weighted, abs=1e-8)
        assert np.abs(weighted - unweighted).max() > 1e-3
        assert result.discrepancy <= discrepancy(y, A @ unweighted + u, kernel)
        assert project_theta_star(result, y, kernel=kernel) == pytest.approx(weighted, abs=1e-8)
        assert project_theta_star(result, y) == pytest.approx(unweighted, abs=1e-8)

    def test_underdetermined(self) -> None:
        sim = LinearSimulator(np.ones((1, 2)), [0.0])
        stream, u = seed_for(sim, 0)
        with pytest.raises(UnderdeterminedError):
            gauss_newton_optimize(sim, [0.0], u, DiscrepancyKernel(1.0), OptimizerConfig(), stream)

    def test_local_linearization_is_second_order(self) -> None:
        sim = sim_linked_normal()
        stream, u = seed_for(sim, 4)
        config = OptimizerConfig(method=OptimizerMethod.GAUSS_NEWTON, use_analytic_jacobian=True)
        result = gauss_newton_optimize(sim, sim.observed, u, DiscrepancyKernel(0.1), config, stream)
        ratios = [
            linearization_residual(sim, result.theta_opt, u, result.jacobian, [delta]) / delta**2
            for delta in (1e-3, 1e-4, 1e-5)
        ]
        assert ratios[1] == pytest.approx(ratios[0], rel=0.01)
        assert ratios[2] == pytest.approx(ratios[0], rel=0.01)

    def test_falls_back_to_differences_without_analytic_jacobian(self) -> None:
        sim = CountingSimulator(sim_linked_normal())
        stream, u = seed_for(sim, 0)
        config = OptimizerConfig(method=OptimizerMethod.GAUSS_NEWTON, use_analytic_jacobian=True)
        result = gauss_newton_optimize(sim, sim.observed, u, DiscrepancyKernel(0.1), config, stream)
        assert result.has_jacobian
        assert result.sim_count == sim.calls


class TestRandomWalk:
    def test_unknown_mean_converges(self) -> None:
        sim = sim_unknown_mean()
        kernel = DiscrepancyKernel(0.01)
        config = OptimizerConfig(method=OptimizerMethod.RANDOM_WALK)
        converged = 0
        for index in range(100):
            stream, u = seed_for(sim, index)
            result = random_walk_optimize(sim, sim.observed, u, kernel, config, stream)
            converged += result.converged
            assert result.sim_count <= config.max_sims_per_round
        assert converged >= 99

    def test_is_deterministic(self) -> None:
        sim = sim_mg1_queue()
        kernel = DiscrepancyKernel(1.0)
        config = OptimizerConfig(method=OptimizerMethod.RANDOM_WALK, max_sims_per_round=200)
        stream, u = seed_for(sim, 2)
        first = random_walk_optimize(sim, sim.observed, u, kernel, config, stream)
        second = random_walk_optimize(sim, sim.observed, u, kernel, config, stream)
        assert first.theta_opt.tobytes() == second.theta_opt.tobytes()
        assert first.sim_count == second.sim_count

    def test_counts_only_simulations(self) -> None:
        sim = CountingSimulator(sim_mg1_queue())
        kernel = DiscrepancyKernel(0.01)
        config = OptimizerConfig(method=OptimizerMethod.RANDOM_WALK, max_sims_per_round=150)
        for index in range(5):
            sim.calls = 0
            stream, u = seed_for(sim, index)
            result = random_walk_optimize(sim, sim.observed, u, kernel, config, stream)
            assert result.sim_count == sim.calls
            assert sim.calls <= 150

    def test_discrepancy_never_increases_across_segments(self) -> None:
        sim = sim_mg1_queue()
        kernel = DiscrepancyKernel(0.01)
        config = OptimizerConfig(method=OptimizerMethod.RANDOM_WALK)
        stream, u = seed_for(sim, 6)
        result = random_walk_optimize(sim, sim.observed, u, kernel, config, stream, budget=30)
        for _ in range(5):
            following = random_walk_optimize(
                sim, sim.observed, u, kernel, config, stream, warm_start=result, budget=30
            )
            assert following.discrepancy <= result.discrepancy
            assert following.segment == result.segment + 1
            result = following


class TestExact:
    def test_uses_one_simulation(self) -> None:
        sim = sim_exponential()
        stream, u = seed_for(sim, 0)
        config = OptimizerConfig(method=OptimizerMethod.EXACT)
        result = exact_optimize(sim, sim.observed, u, DiscrepancyKernel(0.01), config, stream)
        assert result.sim_count == 1
        assert result.converged
        assert result.theta_opt.tolist() == sim.analytic_optimum(sim.observed, u).tolist()

    def test_needs_oracles(self) -> None:
        sim = sim_linked_normal()
        stream, u = seed_for(sim, 0)
        with pytest.raises(ConfigError):
            exact_optimize(
                sim, sim.observed, u, DiscrepancyKernel(0.1), OptimizerConfig(method=OptimizerMethod.EXACT), stream
            )


class TestDispatch:
    def test_optimize_follows_method(self) -> None:
        sim = sim_unknown_mean()
        stream, u = seed_for(sim, 0)
        kernel = DiscrepancyKernel(0.01)
        direct = newton_optimize(sim, sim.observed, u, kernel, OptimizerConfig(), stream)
        dispatched = optimize(sim, sim.observed, u, kernel, OptimizerConfig(), stream)
        assert direct.theta_opt.tobytes() == dispatched.theta_opt.tobytes()
        assert direct.sim_count == dispatched.sim_count

    def test_check_problem(self) -> None:
        with pytest.raises(DimensionError):
            check_problem(sim_linked_normal(), OptimizerConfig())
        with pytest.raises(ConfigError):
            check_problem(sim_mg1_queue(), OptimizerConfig(method=OptimizerMethod.EXACT))
        with pytest.raises(UnderdeterminedError):
            check_problem(LinearSimulator(np.ones((1, 2)), [0.0]), OptimizerConfig())
        check_problem(sim_linked_normal(), OptimizerConfig(method=OptimizerMethod.GAUSS_NEWTON))

    def test_failed_result_is_never_accepted(self) -> None:
        result = failed_result(sim_unknown_mean(), [0.0], 7)
        assert result.discrepancy == np.inf
        assert not result.converged
        assert result.stalled
        assert result.sim_count == 7
