"""
粒子を並列に最適化する実行エンジン

- run_batch: 粒子ごとに独立したタスクを投げ、結果をまとめて重み付けする
- run_anytime: 乖離度がいちばん大きい粒子に少しずつ予算を配り、途中経過を返し続ける

乱数は (master_seed, scope, particle_index, label) だけで決まるので、
ワーカーの数や完了順に関係なく結果はビット単位で同じになる.
"""

import heapq
import logging
from collections.abc import Callable, Iterable, Iterator
from concurrent.futures import Executor, ProcessPoolExecutor, ThreadPoolExecutor
from contextlib import contextmanager
from dataclasses import dataclass
from typing import Protocol

from numpy.typing import ArrayLike

from omc.config import PoolBackend, RunMode
from omc.core import (
    DiscrepancyKernel,
    SeedVector,
    Statistics,
    WeightedEnsemble,
    as_vector,
)
from omc.errors import ConfigError, EmptyPosteriorError, SimulationFailedError
from omc.optimize import (
    OptimizationResult,
    OptimizerConfig,
    check_problem,
    failed_result,
    minimum_budget,
    optimize,
)
from omc.seeding import ParticleSeedStream
from omc.simulators import SimulatorSpec
from omc.weighting import build_ensemble

logger = logging.getLogger(__name__)

MAX_SEED = 2**64


@dataclass(frozen=True)
class RunPlan:
    """実行計画

    Attributes:
        master_seed (int): 実行全体のシード (0 ≤ seed < 2⁶⁴)
        n_particles (int): 粒子数
        n_workers (int): ワーカー数. 1ならプールを作らずにその場で実行する
        mode (RunMode): batch または anytime
        total_sim_budget (int | None): anytimeでの全体のシミュレーション回数の上限
        per_particle_budget (int): 1粒子あたりの上限. batchでは1回の最適化の予算
        backend (PoolBackend): process または thread
        quantum (int): anytimeで1回に配るシミュレーション回数
        checkpoint_every (int): anytimeでこの数の量子を配るごとにスナップショットを返す
        wave_size (int): anytimeで一度に予算を配る粒子の数
    """

    master_seed: int
    n_particles: int
    n_workers: int = 1
    mode: RunMode = RunMode.BATCH
    total_sim_budget: int | None = None
    per_particle_budget: int = 1000
    backend: PoolBackend = PoolBackend.PROCESS
    quantum: int = 25
    checkpoint_every: int = 100
    wave_size: int = 16

    def __post_init__(self) -> None:
        if not 0 <= self.master_seed < MAX_SEED:
            raise ConfigError(f"master seed must lie in [0, 2**64), got {self.master_seed}")
        for name in ("n_particles", "n_workers", "per_particle_budget", "quantum"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be positive")
        if self.checkpoint_every < 1 or self.wave_size < 1:
            raise ConfigError("checkpoint_every and wave_size must be positive")
        if self.total_sim_budget is not None and self.total_sim_budget < 1:
            raise ConfigError("total_sim_budget must be positive")
        if self.mode is RunMode.ANYTIME and self.total_sim_budget is None:
            raise ConfigError("anytime mode needs total_sim_budget")

    def check_budgets(self, sim: SimulatorSpec) -> None:
        """予算がひとつの粒子を初期化できる大きさ(D_θ + 1回)かを確かめる

        Raises:
            ConfigError: 粒子ごとの予算、anytimeの量子または全体の予算が足りない場合
        """
        needed = minimum_budget(sim)
        budgets = {"per_particle_budget": self.per_particle_budget}
        if self.total_sim_budget is not None:
            budgets |= {"quantum": self.quantum, "total_sim_budget": self.total_sim_budget}
        for name, value in budgets.items():
            if value < needed:
                raise ConfigError(
                    f"{name}={value} is below the minimum {needed} for D_theta={sim.d_theta}"
                )


@dataclass(frozen=True)
class ProgressEvent:
    particle_index: int
    discrepancy: float
    sim_count: int


ProgressCallback = Callable[[ProgressEvent], None]


class Mapper(Protocol):
    def __call__[T, R](self, fn: Callable[[T], R], items: Iterable[T]) -> Iterator[R]: ...


def _inline_map[T, R](fn: Callable[[T], R], items: Iterable[T]) -> Iterator[R]:
    return map(fn, items)


@contextmanager
def worker_pool(n_workers: int, backend: PoolBackend = PoolBackend.PROCESS) -> Iterator[Mapper]:
    """順序を保つmap関数を返すコンテキストマネージャ

    n_workers = 1 のときはexecutorを作らない.
    """
    if n_workers == 1:
        yield _inline_map
        return

    executor: Executor
    if backend is PoolBackend.THREAD:
        executor = ThreadPoolExecutor(max_workers=n_workers)
    else:
        executor = ProcessPoolExecutor(max_workers=n_workers)

    def pool_map[T, R](fn: Callable[[T], R], items: Iterable[T]) -> Iterator[R]:
        batch = list(items)
        chunksize = max(1, len(batch) // (4 * n_workers))
        return executor.map(fn, batch, chunksize=chunksize)

    with executor:
        yield pool_map


@dataclass(frozen=True)
class ParticleTask:
    """ひとつの粒子の最適化(またはその続き)"""

    sim: SimulatorSpec
    y: Statistics
    kernel: DiscrepancyKernel
    config: OptimizerConfig
    stream: ParticleSeedStream
    budget: int
    warm_start: OptimizationResult | None = None


@dataclass(frozen=True)
class ParticleOutcome:
    index: int
    seed: SeedVector
    result: OptimizationResult


def run_particle(task: ParticleTask) -> ParticleOutcome:
    """uを粒子のストリームから引いて最適化する. ワーカーで実行される.

    シミュレータの失敗で最適化が続けられなかった粒子は、失敗までに実際に使った
    回数を数えて ρ = inf の結果を返す.
    """
    sim = task.sim
    u = task.stream.uniforms(sim.d_u)
    try:
        result = optimize(
            sim,
            task.y,
            u,
            task.kernel,
            task.config,
            task.stream,
            warm_start=task.warm_start,
            budget=task.budget,
        )
    except SimulationFailedError as exc:
        logger.debug("particle %d failed: %s", task.stream.particle_index, exc)
        previous = task.warm_start.sim_count if task.warm_start is not None else 0
        theta = (
            task.warm_start.theta_opt
            if task.warm_start is not None
            else sim.prior.sample(task.stream.generator("init"))
        )
        result = failed_result(sim, theta, previous + exc.sim_count, task.warm_start)
    return ParticleOutcome(task.stream.particle_index, u, result)


def run_tasks(
    tasks: Iterable[ParticleTask],
    pool: Mapper,
    progress: ProgressCallback | None = None,
) -> list[ParticleOutcome]:
    """タスクをプールで実行し、投げた順に結果を返す"""
    outcomes = []
    for outcome in pool(run_particle, tasks):
        if progress is not None:
            progress(
                ProgressEvent(
                    outcome.index, outcome.result.discrepancy, outcome.result.sim_count
                )
            )
        outcomes.append(outcome)
    return outcomes


def run_batch(
    plan: RunPlan,
    sim: SimulatorSpec,
    y: ArrayLike,
    kernel: DiscrepancyKernel,
    optimizer_config: OptimizerConfig,
    *,
    progress: ProgressCallback | None = None,
    scope: str = "omc",
) -> WeightedEnsemble:
    """n_particles個の独立な最適化を並列に実行して重み付けする

    Raises:
        UnderdeterminedError: D_θ > D_y の場合(タスクを投げる前)
        ConfigError: 粒子ごとの予算がD_θ + 1回に満たない場合
        EmptyPosteriorError: 受理された粒子がない場合
    """
    check_problem(sim, optimizer_config)
    plan.check_budgets(sim)
    y_arr = as_vector(y, sim.d_y, "observed statistics")
    tasks = [
        ParticleTask(
            sim,
            y_arr,
            kernel,
            optimizer_config,
            ParticleSeedStream(plan.master_seed, index, scope),
            plan.per_particle_budget,
        )
        for index in range(plan.n_particles)
    ]
    with worker_pool(plan.n_workers, plan.backend) as pool:
        outcomes = run_tasks(tasks, pool, progress)
    return build_ensemble([(o.seed, o.result) for o in outcomes], y_arr, kernel, sim.prior)


class AnytimeScheduler:
    """anytimeモードの調整役. 優先度キューと全体のカウンタを持つのはこのクラスだけ.

    キーは (−ρ, particle_index) で、ρが最大の粒子(同点なら番号が小さい方)から配る.
    ρ ≤ ε になった粒子、止まった粒子、粒子ごとの上限に達した粒子はキューから外す.
    """

    def __init__(
        self,
        plan: RunPlan,
        sim: SimulatorSpec,
        y: Statistics,
        kernel: DiscrepancyKernel,
        config: OptimizerConfig,
    ) -> None:
        assert plan.total_sim_budget is not None
        self.plan = plan
        self.sim = sim
        self.y = y
        self.kernel = kernel
        self.config = config
        self.remaining = plan.total_sim_budget
        self.min_quantum = minimum_budget(sim)
        self.outcomes: dict[int, ParticleOutcome] = {}
        self.queue: list[tuple[float, int]] = []
        self.granted = 0

    def _task(self, index: int, budget: int) -> ParticleTask:
        previous = self.outcomes.get(index)
        return ParticleTask(
            self.sim,
            self.y,
            self.kernel,
            self.config,
            ParticleSeedStream(self.plan.master_seed, index, "omc"),
            budget,
            warm_start=previous.result if previous is not None else None,
        )

    def _grant(self, index: int) -> int | None:
        spent = self.outcomes[index].result.sim_count if index in self.outcomes else 0
        budget = min(
            self.plan.quantum, self.plan.per_particle_budget - spent, self.remaining
        )
        if budget < self.min_quantum:
            return None
        self.remaining -= budget
        self.granted += 1
        return budget

    def record(self, outcome: ParticleOutcome, budget: int) -> None:
        previous = self.outcomes.get(outcome.index)
        used = outcome.result.sim_count - (previous.result.sim_count if previous else 0)
        # 使わなかった分は全体の予算に戻す
        self.remaining += budget - used
        self.outcomes[outcome.index] = outcome
        result = outcome.result
        if (
            not self.kernel.accepts(result.discrepancy)
            and not result.stalled
            and result.sim_count + self.min_quantum <= self.plan.per_particle_budget
        ):
            heapq.heappush(self.queue, (-result.discrepancy, outcome.index))

    def next_wave(self, indices: Iterable[int]) -> list[tuple[ParticleTask, int]]:
        wave = []
        for index in indices:
            budget = self._grant(index)
            if budget is None:
                break
            wave.append((self._task(index, budget), budget))
        return wave

    def worst(self) -> list[int]:
        picked = []
        while self.queue and len(picked) < self.plan.wave_size:
            picked.append(heapq.heappop(self.queue)[1])
        return picked

    def requeue(self, indices: Iterable[int]) -> None:
        for index in indices:
            result = self.outcomes[index].result
            heapq.heappush(self.queue, (-result.discrepancy, index))

    def snapshot(self) -> WeightedEnsemble:
        """
        Raises:
            EmptyPosteriorError: まだどの粒子も初期化されていないか、受理がない場合
        """
        if not self.outcomes:
            raise EmptyPosteriorError(self.kernel.epsilon)
        ordered = [self.outcomes[i] for i in sorted(self.outcomes)]
        return build_ensemble(
            [(o.seed, o.result) for o in ordered], self.y, self.kernel, self.sim.prior
        )


def run_anytime(
    plan: RunPlan,
    sim: SimulatorSpec,
    y: ArrayLike,
    kernel: DiscrepancyKernel,
    optimizer_config: OptimizerConfig,
    checkpoint_every: int | None = None,
    *,
    progress: ProgressCallback | None = None,
) -> Iterator[WeightedEnsemble]:
    """予算を最悪の粒子に配り続け、スナップショットを順に返すジェネレータ

    最初にすべての粒子を番号順に1量子ずつ初期化し、そのあとは
    ρの大きいwave_size個の粒子に1量子ずつ配る.
    スナップショットは初期化が終わってから、checkpoint_every量子ごとに返す.
    全体の予算が尽きるか、キューが空になったら最後のスナップショットを返して終わる.
    途中でジェネレータを止めても、それまでのスナップショットは正規化済みで有効.

    Raises:
        ConfigError: 量子や予算がD_θ + 1回に満たない場合
        EmptyPosteriorError: 最後の時点で受理された粒子がない場合
    """
    check_problem(sim, optimizer_config)
    plan.check_budgets(sim)
    if plan.total_sim_budget is None:
        raise ConfigError("anytime mode needs total_sim_budget")
    every = checkpoint_every if checkpoint_every is not None else plan.checkpoint_every
    if every < 1:
        raise ConfigError("checkpoint_every must be positive")
    y_arr = as_vector(y, sim.d_y, "observed statistics")
    scheduler = AnytimeScheduler(plan, sim, y_arr, kernel, optimizer_config)

    def execute(wave: list[tuple[ParticleTask, int]], pool: Mapper) -> None:
        outcomes = run_tasks([task for task, _ in wave], pool, progress)
        for outcome, (_, budget) in zip(outcomes, wave, strict=True):
            scheduler.record(outcome, budget)

    with worker_pool(plan.n_workers, plan.backend) as pool:
        pending = list(range(plan.n_particles))
        while pending:
            head, pending = pending[: plan.wave_size], pending[plan.wave_size :]
            wave = scheduler.next_wave(head)
            if wave:
                execute(wave, pool)
            if len(wave) < len(head):
                logger.info(
                    "anytime budget ran out while initializing (%d of %d particles)",
                    len(scheduler.outcomes),
                    plan.n_particles,
                )
                break

        emitted_at = scheduler.granted
        while scheduler.queue:
            picked = scheduler.worst()
            wave = scheduler.next_wave(picked)
            if not wave:
                scheduler.requeue(picked)
                break
            scheduler.requeue(picked[len(wave) :])
            execute(wave, pool)
            if scheduler.granted - emitted_at >= every:
                emitted_at = scheduler.granted
                try:
                    snapshot = scheduler.snapshot()
                except EmptyPosteriorError:
                    logger.debug("no accepted particle yet, skipping snapshot")
                    continue
                yield snapshot

    logger.info(
        "anytime run finished: %d quanta granted, %d sims left",
        scheduler.granted,
        scheduler.remaining,
    )
    yield scheduler.snapshot()
