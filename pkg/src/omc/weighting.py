"""
最適化の結果から重み付きの事後分布をつくる

粒子iは θ*_i に置いたデルタ関数で、重みは p(θ*_i) / √det(J_sᵀJ_s).
J_s はヤコビアンの行をカーネルのscaleで割ったもの. ρ > ε の粒子は棄却して重み0にする.
"""

import logging
from collections.abc import Sequence

import numpy as np
from numpy.typing import ArrayLike

from omc.core import (
    DiscrepancyKernel,
    FloatArray,
    ParameterVector,
    Particle,
    SeedVector,
    WeightedEnsemble,
    as_vector,
    normalize,
    weight_from_log,
)
from omc.errors import SingularJacobianError, UnderdeterminedError
from omc.optimize import OptimizationResult, pseudo_inverse_solve
from omc.priors import Prior
from omc.simulators import SimulatorSpec

logger = logging.getLogger(__name__)

# 重みがfloatで表せなくなる log det(JᵀJ) の下限
LOG_DET_FLOOR = -2.0 * float(np.log(np.finfo(np.float64).max))


def project_theta_star(
    result: OptimizationResult,
    y: ArrayLike,
    prior: Prior | None = None,
    kernel: DiscrepancyKernel | None = None,
) -> ParameterVector:
    """θ* = θ° + J_s†r_s

    kernelにscaleがあれば、残差とヤコビアンの行をscaleで割ってから射影する(ρと同じ距離).
    priorを渡した場合、θ*が台の外に出たらθ°を返す.

    Raises:
        UnderdeterminedError: D_θ > D_y の場合
        SingularJacobianError: JᵀJが正則化しても解けない場合
    """
    d_y, d_theta = result.jacobian.shape
    if d_theta > d_y:
        raise UnderdeterminedError(d_theta, d_y)
    residual = as_vector(y, d_y, "observed statistics") - result.f_at_opt
    jacobian = result.jacobian
    if kernel is not None:
        residual, jacobian = kernel.whiten(residual), kernel.whiten_jacobian(jacobian)
    theta_star = result.theta_opt + pseudo_inverse_solve(jacobian, residual)
    if prior is not None and not prior.in_support(theta_star):
        logger.debug("theta* %s left the prior support, using theta_opt", theta_star)
        return result.theta_opt.copy()
    return theta_star


def log_volume_factor(jacobian: ArrayLike) -> float:
    """−½ log det(JᵀJ). JᵀJのコレスキー分解の対角から計算する.

    Raises:
        SingularJacobianError: JᵀJが正定値でない、またはlog detが下限より小さい場合
    """
    J = np.atleast_2d(np.asarray(jacobian, dtype=np.float64))
    if not np.all(np.isfinite(J)):
        raise SingularJacobianError("jacobian has non-finite entries")
    try:
        chol = np.linalg.cholesky(J.T @ J)
    except np.linalg.LinAlgError as exc:
        raise SingularJacobianError(f"JᵀJ is not positive definite: {exc}") from exc
    log_det = 2.0 * float(np.sum(np.log(np.diag(chol))))
    if not np.isfinite(log_det) or log_det < LOG_DET_FLOOR:
        raise SingularJacobianError(f"near-singular jacobian (log det JᵀJ = {log_det:g})")
    return -0.5 * log_det


def particle_log_weight(theta_star: ArrayLike, jacobian: ArrayLike, prior: Prior) -> float:
    """log p(θ*) − ½ log det(JᵀJ). 台の外では-inf."""
    log_prior = prior.log_density(theta_star)
    if not np.isfinite(log_prior):
        return -np.inf
    return log_prior + log_volume_factor(jacobian)


def particle_weight(theta_star: ArrayLike, jacobian: ArrayLike, prior: Prior) -> float:
    """p(θ*)·det(JᵀJ)^{-1/2}"""
    return float(np.exp(particle_log_weight(theta_star, jacobian, prior)))


def to_particle(
    seed: SeedVector,
    result: OptimizationResult,
    y: ArrayLike,
    kernel: DiscrepancyKernel,
    prior: Prior,
    index: int = 0,
) -> Particle:
    """ひとつの最適化結果を、受理または棄却された粒子にする"""
    rejected = Particle.rejected(
        seed=seed,
        theta_opt=result.theta_opt,
        f_at_opt=result.f_at_opt,
        discrepancy=result.discrepancy,
        sim_count=result.sim_count,
        jacobian=result.jacobian,
        index=index,
    )
    if not kernel.accepts(result.discrepancy):
        return rejected
    try:
        theta_star = project_theta_star(result, y, prior, kernel)
        log_weight = particle_log_weight(theta_star, kernel.whiten_jacobian(result.jacobian), prior)
    except SingularJacobianError as exc:
        logger.debug("particle %d rejected: %s", index, exc)
        return rejected
    if not np.isfinite(log_weight):
        logger.debug("particle %d rejected: zero prior density at theta*", index)
        return rejected
    return Particle(
        seed=seed,
        theta_opt=result.theta_opt,
        theta_star=theta_star,
        f_at_opt=result.f_at_opt,
        discrepancy=result.discrepancy,
        jacobian=result.jacobian,
        raw_weight=weight_from_log(log_weight),
        log_weight=log_weight,
        sim_count=result.sim_count,
        accepted=True,
        index=index,
    )


def build_ensemble(
    results: Sequence[tuple[SeedVector, OptimizationResult]],
    y: ArrayLike,
    kernel: DiscrepancyKernel,
    prior: Prior,
) -> WeightedEnsemble:
    """(u, 最適化結果)の列から正規化された重み付き粒子集合をつくる

    Raises:
        ValueError: resultsが空の場合
        UnderdeterminedError: D_θ > D_y の場合
        EmptyPosteriorError: 受理された粒子がない場合
    """
    if not results:
        raise ValueError("build_ensemble needs at least one result")
    d_y, d_theta = results[0][1].jacobian.shape
    if d_theta > d_y:
        raise UnderdeterminedError(d_theta, d_y)
    particles = [
        to_particle(seed, result, y, kernel, prior, index)
        for index, (seed, result) in enumerate(results)
    ]
    ensemble = normalize(particles, kernel.epsilon)
    logger.info(
        "eps=%g: accepted %.3f, ESS/n %.3f, SS %.2f",
        kernel.epsilon,
        ensemble.acceptance_fraction,
        ensemble.ess_over_n,
        ensemble.ss_mean,
    )
    return ensemble


def linearization_residual(
    sim: SimulatorSpec,
    theta: ArrayLike,
    u: ArrayLike,
    jacobian: ArrayLike,
    delta: ArrayLike,
) -> float:
    """‖f(θ + δ) − f(θ) − Jδ‖. 線形近似が正しければ O(‖δ‖²)."""
    theta_arr = as_vector(theta, sim.d_theta, "theta")
    delta_arr = as_vector(delta, sim.d_theta, "delta")
    J: FloatArray = np.atleast_2d(np.asarray(jacobian, dtype=np.float64))
    moved = sim.forward(theta_arr + delta_arr, u)
    base = sim.forward(theta_arr, u)
    return float(np.linalg.norm(moved - base - J @ delta_arr))
