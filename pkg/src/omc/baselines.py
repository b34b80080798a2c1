"""
比較用のサンプラー

- rejection_abc: 事前分布から引いてρ ≤ εなら受理する棄却ABC
- smc_abc: 重み付き粒子をεを下げながら更新していくpopulation Monte Carlo
- sequential_omc: SMCのラウンドに合わせて、同じuのまま最適化を続けるOMC

どれも粒子(または引いた順番)ごとの乱数ストリームを使うので、ワーカー数に関係なく
同じ結果になる.
"""

import logging
from collections.abc import Iterable, Iterator, Sequence
from dataclasses import dataclass, field, replace

import numpy as np
from numpy.typing import ArrayLike
from scipy import stats
from scipy.special import logsumexp

from omc.config import PoolBackend
from omc.core import (
    DiscrepancyKernel,
    FloatArray,
    Particle,
    Statistics,
    WeightedEnsemble,
    as_vector,
    discrepancy,
    normalize,
    weight_from_log,
)
from omc.errors import (
    ConfigError,
    DivergentSimulationError,
    EmptyPosteriorError,
    PopulationCollapseError,
    SupportError,
)
from omc.optimize import OptimizationResult, OptimizerConfig, check_problem, minimum_budget
from omc.parallel import (
    ParticleTask,
    ProgressCallback,
    ProgressEvent,
    run_tasks,
    worker_pool,
)
from omc.seeding import ParticleSeedStream
from omc.simulators import SimulatorSpec
from omc.weighting import build_ensemble

logger = logging.getLogger(__name__)

REJECTION_BLOCK = 256
REJECTION_BLOCKS_PER_WAVE = 8
SMC_CHUNK = 64
# 台の外の提案はシミュレーションしないので、提案の回数には別に上限を置く
SMC_ATTEMPTS_PER_SIM = 100


@dataclass(frozen=True)
class EpsilonSchedule:
    """狭義単調減少する正のεの列"""

    values: tuple[float, ...]

    def __post_init__(self) -> None:
        values = tuple(float(v) for v in self.values)
        if not values:
            raise ConfigError("epsilon schedule is empty")
        if any(not v > 0 for v in values):
            raise ConfigError(f"epsilons must be positive: {values}")
        if any(b >= a for a, b in zip(values, values[1:])):
            raise ConfigError(f"epsilon schedule must be strictly decreasing: {values}")
        object.__setattr__(self, "values", values)

    def __iter__(self) -> Iterator[float]:
        return iter(self.values)

    def __len__(self) -> int:
        return len(self.values)

    @property
    def final(self) -> float:
        return self.values[-1]


@dataclass(frozen=True)
class SMCConfig:
    """SMC-ABCの設定

    Attributes:
        max_sims_per_particle_per_round (int): 1粒子・1ラウンドあたりのシミュレーション回数の上限
        covariance_factor (float): 摂動カーネルの共分散 = この係数 × 重み付き経験共分散
        min_ess (float): これを下回ったら集団の崩壊とみなす
    """

    max_sims_per_particle_per_round: int = 1000
    covariance_factor: float = 2.0
    min_ess: float = 2.0

    def __post_init__(self) -> None:
        if self.max_sims_per_particle_per_round < 1:
            raise ConfigError("max_sims_per_particle_per_round must be positive")
        if not self.covariance_factor > 0:
            raise ConfigError("covariance_factor must be positive")


def _simulate(sim: SimulatorSpec, theta: FloatArray, u: FloatArray) -> Statistics:
    """失敗したシミュレーションはNaNの統計量にする(ρ = inf で必ず棄却)"""
    try:
        return sim.forward(theta, u)
    except (DivergentSimulationError, SupportError):
        return np.full(sim.d_y, np.nan)


def _rho(y: Statistics, x: Statistics, kernel: DiscrepancyKernel) -> float:
    return discrepancy(y, x, kernel) if np.all(np.isfinite(x)) else np.inf


@dataclass(frozen=True)
class _Draw:
    index: int
    theta: FloatArray
    seed: FloatArray
    x: Statistics
    rho: float


@dataclass(frozen=True)
class _RejectionBlock:
    sim: SimulatorSpec
    y: Statistics
    kernel: DiscrepancyKernel
    master_seed: int
    start: int
    stop: int


def _run_rejection_block(block: _RejectionBlock) -> list[_Draw]:
    draws = []
    for k in range(block.start, block.stop):
        stream = ParticleSeedStream(block.master_seed, k, "rejection")
        theta = block.sim.prior.sample(stream.generator("theta"))
        u = stream.uniforms(block.sim.d_u)
        x = _simulate(block.sim, theta, u)
        draws.append(_Draw(k, theta, u, x, _rho(block.y, x, block.kernel)))
    return draws


def _rejection_blocks(
    sim: SimulatorSpec,
    y: Statistics,
    kernel: DiscrepancyKernel,
    master_seed: int,
    max_sims: int,
) -> Iterator[list[_RejectionBlock]]:
    start = 0
    while start < max_sims:
        wave = []
        for _ in range(REJECTION_BLOCKS_PER_WAVE):
            if start >= max_sims:
                break
            stop = min(start + REJECTION_BLOCK, max_sims)
            wave.append(_RejectionBlock(sim, y, kernel, master_seed, start, stop))
            start = stop
        yield wave


def rejection_abc(
    sim: SimulatorSpec,
    y: ArrayLike,
    kernel: DiscrepancyKernel,
    n: int,
    max_sims: int,
    *,
    master_seed: int = 0,
    n_workers: int = 1,
    backend: PoolBackend = PoolBackend.PROCESS,
    progress: ProgressCallback | None = None,
) -> WeightedEnsemble:
    """棄却ABC. n個受理するか、max_sims回シミュレーションするまで引き続ける.

    k番目の試行はストリーム (master_seed, "rejection", k) だけで決まる. 試行はブロックで
    並列に評価し、引いた順に最初のn個の受理を残す.
    粒子のsim_countは、ひとつ前の受理からの試行回数. 最後の受理のあとの試行は
    最後の粒子に足すので、Σ sim_count は全体のシミュレーション回数に等しい.

    Raises:
        EmptyPosteriorError: ひとつも受理されなかった場合(最良のρを含む)
    """
    if n < 1 or max_sims < 1:
        raise ValueError("n and max_sims must be positive")
    y_arr = as_vector(y, sim.d_y, "observed statistics")
    particles: list[Particle] = []
    best = np.inf
    since_last = 0
    used = 0
    with worker_pool(n_workers, backend) as pool:
        for wave in _rejection_blocks(sim, y_arr, kernel, master_seed, max_sims):
            for draws in pool(_run_rejection_block, wave):
                for draw in draws:
                    if len(particles) == n:
                        break
                    used += 1
                    since_last += 1
                    best = min(best, draw.rho)
                    if not kernel.accepts(draw.rho):
                        continue
                    particles.append(
                        Particle(
                            seed=draw.seed,
                            theta_opt=draw.theta,
                            theta_star=draw.theta,
                            f_at_opt=draw.x,
                            discrepancy=draw.rho,
                            jacobian=np.full((sim.d_y, sim.d_theta), np.nan),
                            raw_weight=1.0,
                            log_weight=0.0,
                            sim_count=since_last,
                            accepted=True,
                            index=len(particles),
                        )
                    )
                    since_last = 0
                    if progress is not None:
                        progress(ProgressEvent(len(particles) - 1, draw.rho, used))
            if len(particles) == n:
                break

    if not particles:
        raise EmptyPosteriorError(kernel.epsilon, best)
    if since_last:
        particles[-1] = replace(particles[-1], sim_count=particles[-1].sim_count + since_last)
    if len(particles) < n:
        logger.warning(
            "rejection ABC accepted %d of %d particles within %d sims", len(particles), n, max_sims
        )
    ensemble = normalize(particles, kernel.epsilon)
    logger.info(
        "rejection eps=%g: %d accepted, SS %.2f", kernel.epsilon, ensemble.n, ensemble.ss_mean
    )
    return ensemble


@dataclass(frozen=True)
class _Population:
    """前のラウンドの受理された粒子と、それから作った摂動カーネル"""

    thetas: FloatArray
    weights: FloatArray
    cov: FloatArray


@dataclass(frozen=True)
class _SMCChunk:
    sim: SimulatorSpec
    y: Statistics
    kernel: DiscrepancyKernel
    master_seed: int
    round_index: int
    start: int
    stop: int
    budget: int
    population: _Population | None = field(default=None, repr=False)


@dataclass(frozen=True)
class _SMCDraw:
    index: int
    theta: FloatArray
    seed: FloatArray
    x: Statistics
    rho: float
    sims: int
    accepted: bool


def _smc_particle(chunk: _SMCChunk, index: int) -> _SMCDraw:
    sim = chunk.sim
    stream = ParticleSeedStream(chunk.master_seed, index, f"smc{chunk.round_index}")
    rng = stream.generator("proposal")
    population = chunk.population
    chol = np.linalg.cholesky(population.cov) if population is not None else None
    theta = np.full(sim.d_theta, np.nan)
    u = np.full(sim.d_u, np.nan)
    x = np.full(sim.d_y, np.nan)
    rho = np.inf
    sims = 0
    attempts = 0
    while sims < chunk.budget and attempts < SMC_ATTEMPTS_PER_SIM * chunk.budget:
        attempts += 1
        if population is None or chol is None:
            proposal = sim.prior.sample(rng)
        else:
            ancestor = rng.choice(len(population.weights), p=population.weights)
            proposal = population.thetas[ancestor] + chol @ rng.standard_normal(sim.d_theta)
            if not sim.prior.in_support(proposal):
                continue
        u_try = sim.draw_seed(rng)
        x_try = _simulate(sim, proposal, u_try)
        sims += 1
        theta, u, x, rho = proposal, u_try, x_try, _rho(chunk.y, x_try, chunk.kernel)
        if chunk.kernel.accepts(rho):
            return _SMCDraw(index, theta, u, x, rho, sims, True)
    if not np.all(np.isfinite(u)):
        # 一度もシミュレーションしなかった粒子
        theta, u = sim.prior.sample(rng), sim.draw_seed(rng)
    return _SMCDraw(index, theta, u, x, rho, sims, False)


def _run_smc_chunk(chunk: _SMCChunk) -> list[_SMCDraw]:
    return [_smc_particle(chunk, i) for i in range(chunk.start, chunk.stop)]


def _log_importance_weights(
    thetas: FloatArray, prior_log: FloatArray, population: _Population
) -> FloatArray:
    """log p(θ_i) − log Σ_j w_j N(θ_i | θ_j, Σ)"""
    kernel = stats.multivariate_normal(mean=np.zeros(thetas.shape[1]), cov=population.cov)
    log_mix = np.array(
        [
            logsumexp(np.log(population.weights) + kernel.logpdf(theta - population.thetas))
            for theta in thetas
        ]
    )
    return np.asarray(prior_log - log_mix, dtype=np.float64)


def _perturbation_covariance(ensemble: WeightedEnsemble, factor: float) -> FloatArray:
    mask = ensemble.normalized_weights > 0
    thetas = ensemble.theta_star[mask]
    weights = ensemble.normalized_weights[mask]
    d = thetas.shape[1]
    cov = factor * np.atleast_2d(np.cov(thetas, rowvar=False, aweights=weights))
    try:
        if not np.all(np.isfinite(cov)):
            raise np.linalg.LinAlgError("non-finite covariance")
        np.linalg.cholesky(cov)
    except np.linalg.LinAlgError:
        logger.warning(
            "could not estimate the population covariance, falling back to unit covariance"
        )
        cov = np.eye(d)
    return np.asarray(cov, dtype=np.float64)


def smc_abc_rounds(
    sim: SimulatorSpec,
    y: ArrayLike,
    schedule: EpsilonSchedule,
    n: int,
    max_sims_per_particle_per_round: int | None = None,
    *,
    master_seed: int = 0,
    n_workers: int = 1,
    backend: PoolBackend = PoolBackend.PROCESS,
    scale: ArrayLike | None = None,
    smc_config: SMCConfig | None = None,
    progress: ProgressCallback | None = None,
) -> list[WeightedEnsemble]:
    """SMC-ABCを実行し、ラウンドごとのアンサンブルを返す

    ラウンド0は粒子ごとの棄却ABC. 以降のラウンドでは前の集団から重みで祖先を選び、
    共分散 2 × 重み付き経験共分散 のガウス分布で摂動し、ρ ≤ ε_t になるか
    ラウンドの予算が尽きるまで繰り返す. 予算が尽きた粒子は重み0の行として残す.
    重みは p(θ) / Σ_j w_j K(θ | θ_j). sim_countはラウンドをまたいで累積する.

    Raises:
        EmptyPosteriorError: あるラウンドで受理がひとつもない場合
        PopulationCollapseError: 次のラウンドに進む前にESSがmin_essを下回った場合
    """
    config = smc_config or SMCConfig()
    budget = max_sims_per_particle_per_round or config.max_sims_per_particle_per_round
    if n < 1:
        raise ValueError("n must be positive")
    y_arr = as_vector(y, sim.d_y, "observed statistics")
    scale_arr = None if scale is None else np.asarray(scale, dtype=np.float64)
    base_kernel = DiscrepancyKernel(schedule.final, scale_arr)
    rounds: list[WeightedEnsemble] = []
    population: _Population | None = None
    cumulative = np.zeros(n, dtype=np.int64)

    with worker_pool(n_workers, backend) as pool:
        for t, epsilon in enumerate(schedule):
            kernel = base_kernel.with_epsilon(epsilon)
            chunks = [
                _SMCChunk(
                    sim,
                    y_arr,
                    kernel,
                    master_seed,
                    t,
                    start,
                    min(start + SMC_CHUNK, n),
                    budget,
                    population,
                )
                for start in range(0, n, SMC_CHUNK)
            ]
            draws = [draw for chunk_draws in pool(_run_smc_chunk, chunks) for draw in chunk_draws]
            cumulative += np.array([draw.sims for draw in draws], dtype=np.int64)
            if progress is not None:
                for draw in draws:
                    progress(ProgressEvent(draw.index, draw.rho, int(cumulative[draw.index])))

            accepted = [draw for draw in draws if draw.accepted]
            log_weights = np.full(n, -np.inf)
            if accepted:
                thetas = np.vstack([draw.theta for draw in accepted])
                prior_log = sim.prior.log_density_many(thetas)
                if population is None:
                    values = np.zeros(len(accepted))
                else:
                    values = _log_importance_weights(thetas, prior_log, population)
                for draw, value in zip(accepted, values, strict=True):
                    log_weights[draw.index] = value

            particles = [
                _smc_to_particle(sim, draw, log_weights[draw.index], int(cumulative[draw.index]))
                for draw in draws
            ]
            ensemble = normalize(particles, epsilon)
            rounds.append(ensemble)
            logger.info(
                "smc round %d eps=%g: accepted %.3f, ESS/n %.3f, SS %.2f",
                t,
                epsilon,
                ensemble.acceptance_fraction,
                ensemble.ess_over_n,
                ensemble.ss_mean,
            )
            if t + 1 == len(schedule):
                break
            if ensemble.ess < config.min_ess:
                raise PopulationCollapseError(
                    f"smc population collapsed at round {t} (eps={epsilon:g}, "
                    f"ESS={ensemble.ess:.2f} < {config.min_ess:g})"
                )
            mask = ensemble.normalized_weights > 0
            population = _Population(
                thetas=ensemble.theta_star[mask],
                weights=ensemble.normalized_weights[mask] / ensemble.normalized_weights[mask].sum(),
                cov=_perturbation_covariance(ensemble, config.covariance_factor),
            )
    return rounds


def _smc_to_particle(sim: SimulatorSpec, draw: _SMCDraw, log_weight: float, sims: int) -> Particle:
    jacobian = np.full((sim.d_y, sim.d_theta), np.nan)
    if not draw.accepted or not np.isfinite(log_weight):
        return Particle.rejected(
            seed=draw.seed,
            theta_opt=draw.theta,
            f_at_opt=draw.x,
            discrepancy=draw.rho,
            sim_count=sims,
            jacobian=jacobian,
            index=draw.index,
        )
    return Particle(
        seed=draw.seed,
        theta_opt=draw.theta,
        theta_star=draw.theta,
        f_at_opt=draw.x,
        discrepancy=draw.rho,
        jacobian=jacobian,
        raw_weight=weight_from_log(log_weight),
        log_weight=float(log_weight),
        sim_count=sims,
        accepted=True,
        index=draw.index,
    )


def smc_abc(
    sim: SimulatorSpec,
    y: ArrayLike,
    schedule: EpsilonSchedule,
    n: int,
    max_sims_per_particle_per_round: int | None = None,
    *,
    master_seed: int = 0,
    n_workers: int = 1,
    backend: PoolBackend = PoolBackend.PROCESS,
    scale: ArrayLike | None = None,
    smc_config: SMCConfig | None = None,
    progress: ProgressCallback | None = None,
) -> WeightedEnsemble:
    """SMC-ABCの最後のラウンドのアンサンブル"""
    rounds = smc_abc_rounds(
        sim,
        y,
        schedule,
        n,
        max_sims_per_particle_per_round,
        master_seed=master_seed,
        n_workers=n_workers,
        backend=backend,
        scale=scale,
        smc_config=smc_config,
        progress=progress,
    )
    return rounds[-1]


def sequential_omc(
    sim: SimulatorSpec,
    y: ArrayLike,
    schedule: EpsilonSchedule,
    n: int,
    config: OptimizerConfig,
    *,
    master_seed: int = 0,
    n_workers: int = 1,
    backend: PoolBackend = PoolBackend.PROCESS,
    scale: ArrayLike | None = None,
    progress: ProgressCallback | None = None,
) -> list[WeightedEnsemble]:
    """εのラウンドごとに最適化を続けるOMC. ラウンドごとのアンサンブルを返す.

    粒子はずっと同じuを使う. ラウンドtではρ > ε_t でまだ進める粒子だけが
    前の結果から最適化を再開し、1ラウンドあたりmax_sims_per_roundまで使う.
    sim_countはラウンドをまたいで累積する.

    Raises:
        UnderdeterminedError: D_θ > D_y の場合
        ConfigError: max_sims_per_roundがD_θ + 1回に満たない場合
        EmptyPosteriorError: あるラウンドで受理がひとつもない場合
    """
    check_problem(sim, config)
    if config.max_sims_per_round < minimum_budget(sim):
        raise ConfigError(
            f"max_sims_per_round={config.max_sims_per_round} is below the minimum "
            f"{minimum_budget(sim)} for D_theta={sim.d_theta}"
        )
    if n < 1:
        raise ValueError("n must be positive")
    y_arr = as_vector(y, sim.d_y, "observed statistics")
    scale_arr = None if scale is None else np.asarray(scale, dtype=np.float64)
    base_kernel = DiscrepancyKernel(schedule.final, scale_arr)
    seeds: list[FloatArray | None] = [None] * n
    results: list[OptimizationResult | None] = [None] * n
    rounds: list[WeightedEnsemble] = []

    with worker_pool(n_workers, backend) as pool:
        for t, epsilon in enumerate(schedule):
            kernel = base_kernel.with_epsilon(epsilon)
            todo = [i for i in range(n) if _needs_work(results[i], kernel)]
            tasks: Iterable[ParticleTask] = [
                ParticleTask(
                    sim,
                    y_arr,
                    kernel,
                    config,
                    ParticleSeedStream(master_seed, i, "omc"),
                    config.max_sims_per_round,
                    warm_start=results[i],
                )
                for i in todo
            ]
            for outcome in run_tasks(tasks, pool, progress):
                seeds[outcome.index] = outcome.seed
                results[outcome.index] = outcome.result
            logger.debug("round %d: %d particles resumed optimization", t, len(todo))
            pairs = _completed(seeds, results)
            rounds.append(build_ensemble(pairs, y_arr, kernel, sim.prior))
    return rounds


def _needs_work(result: OptimizationResult | None, kernel: DiscrepancyKernel) -> bool:
    if result is None:
        return True
    return not kernel.accepts(result.discrepancy) and not result.stalled


def _completed(
    seeds: Sequence[FloatArray | None], results: Sequence[OptimizationResult | None]
) -> list[tuple[FloatArray, OptimizationResult]]:
    pairs = []
    for seed, result in zip(seeds, results, strict=True):
        assert seed is not None and result is not None
        pairs.append((seed, result))
    return pairs
