"""
ドメインの型と、すべてのモジュールが共有する計算

- 乖離度(discrepancy)とεボールのカーネル
- 重みの正規化(κ)とESS
- 重み付きアンサンブルでの事後期待値

重みは対数で持ち、正規化のときに最大値を引いてから指数をとる.
式の定数γやカーネルの正規化定数C(ε)は正規化で打ち消し合うので、どこにも現れない.
"""

from collections.abc import Callable, Sequence
from dataclasses import dataclass
from functools import cached_property

import numpy as np
from numpy.typing import ArrayLike, NDArray
from scipy.special import logsumexp

from omc.errors import (
    DimensionError,
    EmptyPosteriorError,
    NormalizationError,
    OMCError,
)

FloatArray = NDArray[np.float64]

# u ∈ [0,1]^{D_u}
SeedVector = FloatArray
# y, x, f(θ,u) ∈ R^{D_y}
Statistics = FloatArray
# θ, θ°, θ* ∈ R^{D_θ}
ParameterVector = FloatArray

ESS_SUM_TOLERANCE = 1e-9
SMALLEST_WEIGHT = float(np.nextafter(0.0, 1.0))


def _frozen(values: ArrayLike) -> FloatArray:
    array = np.array(values, dtype=np.float64)
    array.flags.writeable = False
    return array


def as_vector(values: ArrayLike, length: int, what: str) -> FloatArray:
    """1次元のfloat配列に変換し、長さを確認する

    Raises:
        DimensionError: 長さがlengthと異なる場合
    """
    array = np.atleast_1d(np.asarray(values, dtype=np.float64))
    if array.ndim != 1 or array.shape[0] != length:
        raise DimensionError(what, length, int(array.size))
    return array


def as_seed(values: ArrayLike, d_u: int) -> SeedVector:
    """SeedVectorの不変条件(長さD_u、各要素が[0,1])を確認する"""
    u = as_vector(values, d_u, "seed vector")
    if np.any((u < 0.0) | (u > 1.0)) or not np.all(np.isfinite(u)):
        raise ValueError("seed vector entries must lie in [0, 1]")
    return u


def weight_from_log(log_weight: float) -> float:
    """受理された粒子の raw_weight. 0にアンダーフローしない."""
    with np.errstate(over="ignore", under="ignore"):
        return max(float(np.exp(log_weight)), SMALLEST_WEIGHT)


def as_statistics(values: ArrayLike, d_y: int) -> Statistics:
    x = as_vector(values, d_y, "statistics")
    if not np.all(np.isfinite(x)):
        raise ValueError("statistics must be finite")
    return x


@dataclass(frozen=True)
class DiscrepancyKernel:
    """一様なεボールのカーネル

    Attributes:
        epsilon (float): 受理の閾値. ρ ≤ ε で受理する.
        scale (FloatArray | None): 統計量ごとのスケール. Noneなら全部1.
    """

    epsilon: float
    scale: FloatArray | None = None

    def __post_init__(self) -> None:
        if not self.epsilon > 0:
            raise ValueError(f"epsilon must be positive, got {self.epsilon}")
        if self.scale is not None:
            scale = _frozen(np.atleast_1d(self.scale))
            if np.any(scale <= 0) or not np.all(np.isfinite(scale)):
                raise ValueError("kernel scale entries must be positive and finite")
            object.__setattr__(self, "scale", scale)

    def with_epsilon(self, epsilon: float) -> "DiscrepancyKernel":
        return DiscrepancyKernel(epsilon=epsilon, scale=self.scale)

    def accepts(self, rho: float) -> bool:
        return rho <= self.epsilon

    def whiten(self, residual: ArrayLike) -> FloatArray:
        """残差を成分ごとにscaleで割る. ρはこの値のユークリッドノルム."""
        r = np.atleast_1d(np.asarray(residual, dtype=np.float64))
        if self.scale is None:
            return r
        if self.scale.shape != r.shape:
            raise DimensionError("kernel scale", r.size, self.scale.size)
        return r / self.scale

    def whiten_jacobian(self, jacobian: ArrayLike) -> FloatArray:
        """ヤコビアンの行をscaleで割る. 最適化と重みはこの行列で計算する."""
        J = np.atleast_2d(np.asarray(jacobian, dtype=np.float64))
        if self.scale is None:
            return J
        if self.scale.shape != (J.shape[0],):
            raise DimensionError("kernel scale", J.shape[0], self.scale.size)
        return J / self.scale[:, np.newaxis]


def discrepancy(y: ArrayLike, x: ArrayLike, kernel: DiscrepancyKernel) -> float:
    """ρ = ‖(y − x) ⊘ scale‖₂

    Raises:
        DimensionError: yとxの長さが違う場合(両方の長さをメッセージに含む)
    """
    y_arr = np.atleast_1d(np.asarray(y, dtype=np.float64))
    x_arr = np.atleast_1d(np.asarray(x, dtype=np.float64))
    if y_arr.shape != x_arr.shape:
        raise DimensionError("discrepancy operands (y vs x)", y_arr.size, x_arr.size)
    return float(np.linalg.norm(kernel.whiten(y_arr - x_arr)))


def ess(weights: ArrayLike) -> float:
    """有効サンプルサイズ 1 / Σ w_i²

    Raises:
        NormalizationError: 重みの和が1から1e-9以上ずれている、または負の重みがある場合
    """
    w = np.asarray(weights, dtype=np.float64)
    if w.size == 0 or np.any(w < 0) or abs(float(w.sum()) - 1.0) > ESS_SUM_TOLERANCE:
        raise NormalizationError(
            f"ess expects nonnegative weights summing to 1 (sum={float(w.sum())!r})"
        )
    return float(1.0 / np.dot(w, w))


@dataclass(frozen=True)
class Particle:
    """ひとつの乱数ベクトルuと、その最適化の結果

    Attributes:
        seed (SeedVector): 外に出したシミュレータの乱数u
        theta_opt (ParameterVector): 最適化の終点θ°
        theta_star (ParameterVector): 楕円の中心に射影したθ*
        f_at_opt (Statistics): f(θ°, u)
        discrepancy (float): θ°での乖離度ρ
        jacobian (FloatArray): θ°でのヤコビアン J° (D_y × D_θ). 計算していなければNaN
        raw_weight (float): p(θ*)·det(J_sᵀJ_s)^{-1/2}. 棄却された粒子だけが0.
            表示用で、floatで表せないほど小さい重みは最小の正の値に切り上げる
        log_weight (float): 重みの対数. 正規化はこちらで行う. 棄却された粒子は-inf
        sim_count (int): この粒子に使ったシミュレーション回数の累計
        accepted (bool): ρ ≤ ε かつ重みが計算できたか
    """

    seed: SeedVector
    theta_opt: ParameterVector
    theta_star: ParameterVector
    f_at_opt: Statistics
    discrepancy: float
    jacobian: FloatArray
    raw_weight: float
    log_weight: float
    sim_count: int
    accepted: bool
    index: int = 0

    def __post_init__(self) -> None:
        for name in ("seed", "theta_opt", "theta_star", "f_at_opt", "jacobian"):
            object.__setattr__(self, name, _frozen(getattr(self, name)))
        if self.jacobian.shape != (self.f_at_opt.size, self.theta_opt.size):
            raise DimensionError(
                "jacobian rows x cols",
                self.f_at_opt.size * self.theta_opt.size,
                int(self.jacobian.size),
            )
        if self.raw_weight < 0 or self.sim_count < 0 or self.discrepancy < 0:
            raise ValueError("raw_weight, sim_count and discrepancy must be nonnegative")
        if not self.accepted and (self.raw_weight != 0.0 or self.log_weight != -np.inf):
            raise ValueError("rejected particles must carry zero weight")
        if self.accepted and (not np.isfinite(self.log_weight) or self.raw_weight == 0.0):
            raise ValueError("accepted particles need a finite log-weight and a positive weight")

    @classmethod
    def rejected(
        cls,
        *,
        seed: ArrayLike,
        theta_opt: ArrayLike,
        f_at_opt: ArrayLike,
        discrepancy: float,
        sim_count: int,
        jacobian: ArrayLike | None = None,
        index: int = 0,
    ) -> "Particle":
        theta = np.atleast_1d(np.asarray(theta_opt, dtype=np.float64))
        f = np.atleast_1d(np.asarray(f_at_opt, dtype=np.float64))
        if jacobian is None:
            jacobian = np.full((f.size, theta.size), np.nan)
        return cls(
            seed=np.asarray(seed, dtype=np.float64),
            theta_opt=theta,
            theta_star=theta,
            f_at_opt=f,
            discrepancy=float(discrepancy),
            jacobian=np.asarray(jacobian, dtype=np.float64),
            raw_weight=0.0,
            log_weight=-np.inf,
            sim_count=int(sim_count),
            accepted=False,
            index=index,
        )


@dataclass(frozen=True)
class WeightedEnsemble:
    """正規化された重み付き粒子集合. 事後分布のモンテカルロ表現.

    棄却された粒子も重み0で残す(SSや受理率を後で計算できるように).

    Attributes:
        particles (tuple[Particle, ...]): 全粒子
        normalized_weights (FloatArray): raw_weight / κ. 棄却された粒子は厳密に0
        kappa (float): 正規化定数 κ = Σ raw_weight
        log_kappa (float): log κ. κがfloatで表せない場合でも有限
        epsilon (float): 受理に使った閾値
    """

    particles: tuple[Particle, ...]
    normalized_weights: FloatArray
    kappa: float
    log_kappa: float
    epsilon: float

    def __post_init__(self) -> None:
        object.__setattr__(self, "normalized_weights", _frozen(self.normalized_weights))

    @property
    def n(self) -> int:
        return len(self.particles)

    @cached_property
    def accepted_mask(self) -> NDArray[np.bool_]:
        return np.array([p.accepted for p in self.particles], dtype=bool)

    @cached_property
    def theta_star(self) -> FloatArray:
        """θ*を行に並べた (n, D_θ) 行列"""
        return np.vstack([p.theta_star for p in self.particles])

    @property
    def d_theta(self) -> int:
        return int(self.theta_star.shape[1])

    @cached_property
    def ess(self) -> float:
        return ess(self.normalized_weights)

    @property
    def ess_over_n(self) -> float:
        return self.ess / self.n

    @property
    def acceptance_fraction(self) -> float:
        return float(self.accepted_mask.mean())

    @cached_property
    def total_sims(self) -> int:
        return sum(p.sim_count for p in self.particles)

    @property
    def ss_mean(self) -> float:
        """粒子あたりの平均シミュレーション回数(SS)"""
        return self.total_sims / self.n

    def mean(self) -> FloatArray:
        return np.asarray(self.normalized_weights @ self.theta_star, dtype=np.float64)

    def variance(self) -> FloatArray:
        centered = self.theta_star - self.mean()
        return np.asarray(self.normalized_weights @ centered**2, dtype=np.float64)

    def quantiles(self, q: ArrayLike) -> FloatArray:
        """パラメータごとの重み付き分位点. 戻り値は (len(q), D_θ)."""
        mask = self.normalized_weights > 0
        thetas = self.theta_star[mask]
        weights = self.normalized_weights[mask]
        q_arr = np.atleast_1d(np.asarray(q, dtype=np.float64))
        columns = [
            np.quantile(thetas[:, d], q_arr, weights=weights, method="inverted_cdf")
            for d in range(self.d_theta)
        ]
        return np.column_stack(columns)

    def credible_interval(self, level: float = 0.95) -> FloatArray:
        tail = (1.0 - level) / 2.0
        return self.quantiles([tail, 1.0 - tail])


def normalize(particles: Sequence[Particle], epsilon: float) -> WeightedEnsemble:
    """生の重みを正規化してWeightedEnsembleをつくる

    κ = Σ raw_weight. 計算は対数で行い、最大の対数重みを引いてから指数をとる.

    Raises:
        EmptyPosteriorError: 受理された粒子がない、または重みが全部0の場合
    """
    if not particles:
        raise EmptyPosteriorError(epsilon)
    log_weights = np.array([p.log_weight for p in particles], dtype=np.float64)
    if not np.any(np.isfinite(log_weights)):
        raise EmptyPosteriorError(epsilon)
    log_kappa = float(logsumexp(log_weights))
    weights = np.exp(log_weights - log_kappa)
    weights[~np.isfinite(log_weights)] = 0.0
    with np.errstate(over="ignore"):
        kappa = float(np.exp(log_kappa))
    return WeightedEnsemble(
        particles=tuple(particles),
        normalized_weights=weights,
        kappa=kappa,
        log_kappa=log_kappa,
        epsilon=epsilon,
    )


def posterior_expectation(
    h: Callable[[ParameterVector], ArrayLike], ensemble: WeightedEnsemble
) -> FloatArray:
    """Σ_i w_i h(θ*_i). hは重みが正の粒子(ボールの中心θ*)でだけ評価する.

    Raises:
        OMCError: hが有限でない値を返した場合(粒子の番号をメッセージに含む)
    """
    total: FloatArray | None = None
    for i, (particle, weight) in enumerate(
        zip(ensemble.particles, ensemble.normalized_weights, strict=True)
    ):
        if weight == 0.0:
            continue
        value = np.atleast_1d(np.asarray(h(particle.theta_star), dtype=np.float64))
        if not np.all(np.isfinite(value)):
            raise OMCError(f"h returned a non-finite value at particle {i}")
        total = weight * value if total is None else total + weight * value
    if total is None:
        raise EmptyPosteriorError(ensemble.epsilon)
    return total
