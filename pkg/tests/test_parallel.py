from typing import Any

import numpy as np
import pytest

from omc.config import OptimizerMethod, PoolBackend, RunMode
from omc.core import DiscrepancyKernel
from omc.errors import ConfigError, EmptyPosteriorError, UnderdeterminedError
from omc.optimize import OptimizerConfig
from omc.parallel import AnytimeScheduler, ProgressEvent, RunPlan, run_anytime, run_batch, worker_pool
from omc.simulators import sim_exponential, sim_unknown_mean
from tests.helpers import CountingSimulator, FailingSimulator, FlakySimulator, LinearSimulator


def square(x: int) -> int:
    return x * x


class TestRunPlan:
    def test_defaults(self) -> None:
        plan = RunPlan(master_seed=1, n_particles=10)
        assert plan.n_workers == 1
        assert plan.mode is RunMode.BATCH

    @pytest.mark.parametrize(
        "kwargs",
        [
            {"master_seed": -1},
            {"master_seed": 2**64},
            {"n_particles": 0},
            {"n_workers": 0},
            {"quantum": 0},
            {"mode": RunMode.ANYTIME},
            {"total_sim_budget": 0},
        ],
    )
    def test_invalid(self, kwargs: dict[str, Any]) -> None:
        values = {"master_seed": 0, "n_particles": 4, **kwargs}
        with pytest.raises(ConfigError):
            RunPlan(**values)


class TestWorkerPool:
    @pytest.mark.parametrize(
        "n_workers,backend",
        [(1, PoolBackend.PROCESS), (3, PoolBackend.THREAD), (2, PoolBackend.PROCESS)],
    )
    def test_preserves_order(self, n_workers: int, backend: PoolBackend) -> None:
        with worker_pool(n_workers, backend) as pool:
            assert list(pool(square, range(20))) == [x * x for x in range(20)]


class TestRunBatch:
    def test_worker_count_does_not_change_results(self) -> None:
        sim = sim_exponential()
        kernel = DiscrepancyKernel(0.01)
        config = OptimizerConfig()
        single = run_batch(RunPlan(7, 40), sim, sim.observed, kernel, config)
        threaded = run_batch(
            RunPlan(7, 40, n_workers=4, backend=PoolBackend.THREAD), sim, sim.observed, kernel, config
        )
        assert single.theta_star.tobytes() == threaded.theta_star.tobytes()
        assert single.normalized_weights.tobytes() == threaded.normalized_weights.tobytes()
        assert [p.sim_count for p in single.particles] == [p.sim_count for p in threaded.particles]

    def test_process_pool_matches_inline(self) -> None:
        sim = sim_unknown_mean()
        kernel = DiscrepancyKernel(0.01)
        inline = run_batch(RunPlan(3, 12), sim, sim.observed, kernel, OptimizerConfig())
        pooled = run_batch(RunPlan(3, 12, n_workers=2), sim, sim.observed, kernel, OptimizerConfig())
        assert inline.theta_star.tobytes() == pooled.theta_star.tobytes()

    def test_seed_changes_results(self) -> None:
        sim = sim_unknown_mean()
        kernel = DiscrepancyKernel(0.01)
        first = run_batch(RunPlan(1, 10), sim, sim.observed, kernel, OptimizerConfig())
        second = run_batch(RunPlan(2, 10), sim, sim.observed, kernel, OptimizerConfig())
        assert first.theta_star.tobytes() != second.theta_star.tobytes()

    def test_sim_counts_add_up(self) -> None:
        sim = CountingSimulator(sim_exponential())
        ensemble = run_batch(RunPlan(0, 30), sim, sim.observed, DiscrepancyKernel(0.01), OptimizerConfig())
        assert ensemble.total_sims == sim.calls

    def test_progress_sees_every_particle(self) -> None:
        sim = sim_unknown_mean()
        events: list[ProgressEvent] = []
        run_batch(
            RunPlan(0, 15),
            sim,
            sim.observed,
            DiscrepancyKernel(0.01),
            OptimizerConfig(),
            progress=events.append,
        )
        assert sorted(e.particle_index for e in events) == list(range(15))

    def test_underdetermined_fails_before_running(self) -> None:
        sim = CountingSimulator(LinearSimulator(np.ones((1, 2)), [0.0]))
        config = OptimizerConfig(method=OptimizerMethod.GAUSS_NEWTON)
        with pytest.raises(UnderdeterminedError):
            run_batch(RunPlan(0, 5), sim, sim.observed, DiscrepancyKernel(1.0), config)
        assert sim.calls == 0

    def test_failing_particles_are_rejected(self) -> None:
        sim = FlakySimulator(sim_unknown_mean(), threshold=0.3)
        ensemble = run_batch(RunPlan(0, 40), sim, sim.observed, DiscrepancyKernel(0.01), OptimizerConfig())
        for particle in ensemble.particles:
            if particle.seed[0] < 0.3:
                assert not particle.accepted
            else:
                assert particle.accepted
        assert 0 < ensemble.acceptance_fraction < 1

    def test_all_failing_is_an_empty_posterior(self) -> None:
        sim = FlakySimulator(sim_unknown_mean(), threshold=1.1)
        with pytest.raises(EmptyPosteriorError):
            run_batch(RunPlan(0, 5), sim, sim.observed, DiscrepancyKernel(0.01), OptimizerConfig())

    def test_numerical_failures_are_charged_and_rejected(self) -> None:
        sim = FailingSimulator(sim_unknown_mean(), threshold=0.3)
        ensemble = run_batch(RunPlan(0, 40), sim, sim.observed, DiscrepancyKernel(0.01), OptimizerConfig())
        failed = [p for p in ensemble.particles if p.seed[0] < 0.3]
        assert failed
        for particle in failed:
            assert not particle.accepted
            assert particle.sim_count == 1
        assert ensemble.total_sims == sim.calls

    def test_per_particle_budget_below_minimum(self) -> None:
        sim = CountingSimulator(sim_unknown_mean())
        with pytest.raises(ConfigError, match="per_particle_budget"):
            run_batch(
                RunPlan(0, 5, per_particle_budget=1),
                sim,
                sim.observed,
                DiscrepancyKernel(0.01),
                OptimizerConfig(),
            )
        assert sim.calls == 0


class TestRunAnytime:
    def plan(self, n: int, total: int, **kwargs: int) -> RunPlan:
        return RunPlan(
            master_seed=5,
            n_particles=n,
            mode=RunMode.ANYTIME,
            total_sim_budget=total,
            **kwargs,
        )

    def test_matches_batch_when_budget_is_ample(self) -> None:
        sim = sim_unknown_mean()
        kernel = DiscrepancyKernel(0.01)
        config = OptimizerConfig()
        batch = run_batch(RunPlan(5, 30), sim, sim.observed, kernel, config)
        snapshots = list(run_anytime(self.plan(30, 30 * 1000), sim, sim.observed, kernel, config))
        final = snapshots[-1]
        assert final.accepted_mask.tolist() == batch.accepted_mask.tolist()
        assert final.theta_star.tobytes() == batch.theta_star.tobytes()

    def test_snapshots_improve_and_stay_normalized(self) -> None:
        sim = sim_unknown_mean()
        kernel = DiscrepancyKernel(0.01)
        config = OptimizerConfig(method=OptimizerMethod.RANDOM_WALK)
        plan = self.plan(40, 40 * 300, quantum=25, checkpoint_every=4, wave_size=8)
        snapshots = list(run_anytime(plan, sim, sim.observed, kernel, config))
        assert len(snapshots) >= 2
        worst = [max(p.discrepancy for p in s.particles) for s in snapshots]
        assert all(b <= a for a, b in zip(worst, worst[1:]))
        for snapshot in snapshots:
            assert snapshot.normalized_weights.sum() == pytest.approx(1.0, abs=1e-9)
            assert snapshot.total_sims <= 40 * 300

    def test_accepted_particles_get_no_more_budget(self) -> None:
        sim = sim_unknown_mean()
        kernel = DiscrepancyKernel(0.01)
        config = OptimizerConfig(method=OptimizerMethod.RANDOM_WALK)
        plan = self.plan(40, 40 * 300, quantum=25, checkpoint_every=4, wave_size=8)
        snapshots = list(run_anytime(plan, sim, sim.observed, kernel, config))
        for earlier, later in zip(snapshots, snapshots[1:]):
            for before, after in zip(earlier.particles, later.particles):
                if before.accepted:
                    assert after.sim_count == before.sim_count

    def test_stopping_early_leaves_a_valid_posterior(self) -> None:
        sim = sim_unknown_mean()
        config = OptimizerConfig(method=OptimizerMethod.RANDOM_WALK)
        plan = self.plan(40, 40 * 300, quantum=25, checkpoint_every=4, wave_size=8)
        first = next(run_anytime(plan, sim, sim.observed, DiscrepancyKernel(0.01), config))
        assert first.normalized_weights.sum() == pytest.approx(1.0, abs=1e-9)
        assert first.ess >= 1.0

    def test_total_budget_is_respected(self) -> None:
        sim = CountingSimulator(sim_unknown_mean())
        config = OptimizerConfig(method=OptimizerMethod.RANDOM_WALK)
        plan = self.plan(20, 3000, quantum=25, checkpoint_every=2, wave_size=4)
        snapshots = list(run_anytime(plan, sim, sim.observed, DiscrepancyKernel(0.01), config))
        assert snapshots[-1].total_sims <= 3000
        assert sim.calls == snapshots[-1].total_sims

    def test_needs_total_budget(self) -> None:
        sim = sim_unknown_mean()
        with pytest.raises(ConfigError):
            next(
                run_anytime(
                    RunPlan(0, 4), sim, sim.observed, DiscrepancyKernel(0.1), OptimizerConfig()
                )
            )

    def test_quantum_below_minimum(self) -> None:
        sim = CountingSimulator(sim_unknown_mean())
        with pytest.raises(ConfigError, match="quantum"):
            next(
                run_anytime(
                    self.plan(4, 1000, quantum=1),
                    sim,
                    sim.observed,
                    DiscrepancyKernel(0.01),
                    OptimizerConfig(),
                )
            )
        assert sim.calls == 0

    def test_total_budget_below_minimum(self) -> None:
        sim = sim_unknown_mean()
        with pytest.raises(ConfigError, match="total_sim_budget"):
            next(
                run_anytime(
                    self.plan(4, 1, quantum=2),
                    sim,
                    sim.observed,
                    DiscrepancyKernel(0.01),
                    OptimizerConfig(),
                )
            )

    def test_snapshot_before_any_work_is_an_empty_posterior(self) -> None:
        sim = sim_unknown_mean()
        scheduler = AnytimeScheduler(
            self.plan(4, 1000), sim, sim.observed, DiscrepancyKernel(0.01), OptimizerConfig()
        )
        with pytest.raises(EmptyPosteriorError):
            scheduler.snapshot()

    def test_worker_count_does_not_change_snapshots(self) -> None:
        sim = sim_unknown_mean()
        kernel = DiscrepancyKernel(0.01)
        config = OptimizerConfig(method=OptimizerMethod.RANDOM_WALK)
        kwargs = {"quantum": 25, "checkpoint_every": 4, "wave_size": 8}
        single = list(run_anytime(self.plan(40, 40 * 300, **kwargs), sim, sim.observed, kernel, config))
        threaded_plan = RunPlan(
            master_seed=5,
            n_particles=40,
            n_workers=8,
            backend=PoolBackend.THREAD,
            mode=RunMode.ANYTIME,
            total_sim_budget=40 * 300,
            **kwargs,
        )
        threaded = list(run_anytime(threaded_plan, sim, sim.observed, kernel, config))
        assert len(single) == len(threaded)
        for a, b in zip(single, threaded):
            assert a.theta_star.tobytes() == b.theta_star.tobytes()
            assert a.normalized_weights.tobytes() == b.normalized_weights.tobytes()
            assert [p.sim_count for p in a.particles] == [p.sim_count for p in b.particles]
