"""
乱数を外に出した決定論的シミュレータ x = f(θ, u)

SimulatorSpecは抽象基底クラス. 具象クラスは次元、事前分布、観測統計量y、
forward(θ, u)を持ち、わかる場合は解析的なヤコビアンと最適解も返す.
6つの実験は名前でレジストリから引ける.
"""

import math
from abc import ABCMeta, abstractmethod
from collections.abc import Callable
from dataclasses import dataclass, field
from functools import cached_property
from typing import Any, ClassVar

import numpy as np
from numpy.typing import ArrayLike
from scipy import stats
from scipy.special import ndtri

from omc.config import OptimizerMethod
from omc.core import (
    FloatArray,
    ParameterVector,
    SeedVector,
    Statistics,
    as_seed,
    as_statistics,
    as_vector,
)
from omc.errors import ConfigError, DivergentSimulationError, QuantileError, SupportError
from omc.priors import Prior, QueuePrior, gamma_prior, lognormal_prior, normal_prior, uniform_prior

SEED_CLIP = 1e-12


def clip_seed(u: ArrayLike) -> FloatArray:
    """逆CDFで無限大が出ないよう、uを[1e-12, 1−1e-12]に収める"""
    return np.clip(np.asarray(u, dtype=np.float64), SEED_CLIP, 1.0 - SEED_CLIP)


def uniform_to_normal(u: ArrayLike, mu: float = 0.0, sigma: float = 1.0) -> FloatArray:
    """mu + sigma·√2·erf⁻¹(2u − 1) (正規分布の逆CDF)

    Raises:
        QuantileError: uが0か1(あるいは範囲外)の場合
    """
    u_arr = np.asarray(u, dtype=np.float64)
    if np.any((u_arr <= 0.0) | (u_arr >= 1.0)):
        raise QuantileError("uniform_to_normal needs 0 < u < 1")
    if not sigma > 0:
        raise ValueError("sigma must be positive")
    return np.asarray(mu + sigma * ndtri(u_arr), dtype=np.float64)


def uniform_to_exponential(u: ArrayLike, rate: float = 1.0) -> FloatArray:
    """−ln(1 − u) / rate (指数分布の逆CDF)

    Raises:
        QuantileError: u = 1 (あるいは[0,1)の外)の場合
    """
    u_arr = np.asarray(u, dtype=np.float64)
    if np.any((u_arr < 0.0) | (u_arr >= 1.0)):
        raise QuantileError("uniform_to_exponential needs 0 <= u < 1")
    if not rate > 0:
        raise SupportError(f"exponential rate must be positive, got {rate}")
    return np.asarray(-np.log1p(-u_arr) / rate, dtype=np.float64)


class SimulatorSpec(metaclass=ABCMeta):
    """決定論的シミュレータの抽象基底クラス

    forward()は純粋関数で、同じ(θ, u)には同じビット列を返す.
    analytic_jacobian()とanalytic_optimum()は、わからない場合にNoneを返す.

    Attributes:
        name (str): レジストリでの名前
        default_schedule (tuple[float, ...]): 既定のε列
        default_optimizer (OptimizerMethod): 既定の最適化手法
    """

    name: ClassVar[str]
    default_schedule: ClassVar[tuple[float, ...]]
    default_optimizer: ClassVar[OptimizerMethod]

    @property
    @abstractmethod
    def d_theta(self) -> int:
        raise NotImplementedError

    @property
    @abstractmethod
    def d_y(self) -> int:
        raise NotImplementedError

    @property
    @abstractmethod
    def d_u(self) -> int:
        raise NotImplementedError

    @property
    @abstractmethod
    def prior(self) -> Prior:
        raise NotImplementedError

    @property
    @abstractmethod
    def observed(self) -> Statistics:
        raise NotImplementedError

    @abstractmethod
    def _forward(self, theta: FloatArray, u: FloatArray) -> FloatArray:
        """次元を確認済み、uをクリップ済みの入力で統計量を計算する"""
        raise NotImplementedError

    @abstractmethod
    def hyperparameters(self) -> dict[str, Any]:
        raise NotImplementedError

    @property
    def default_scale(self) -> FloatArray | None:
        return None

    def forward(self, theta: ArrayLike, u: ArrayLike) -> Statistics:
        theta_arr = as_vector(theta, self.d_theta, f"{self.name} theta")
        u_arr = as_vector(u, self.d_u, f"{self.name} seed")
        x = self._forward(theta_arr, clip_seed(u_arr))
        if not np.all(np.isfinite(x)):
            raise DivergentSimulationError(f"{self.name}: non-finite simulator output")
        return x

    def analytic_jacobian(self, theta: ArrayLike, u: ArrayLike) -> FloatArray | None:
        return None

    def analytic_optimum(self, y: ArrayLike, u: ArrayLike) -> ParameterVector | None:
        return None

    @property
    def has_analytic_jacobian(self) -> bool:
        return type(self).analytic_jacobian is not SimulatorSpec.analytic_jacobian

    @property
    def has_oracles(self) -> bool:
        return (
            self.has_analytic_jacobian
            and type(self).analytic_optimum is not SimulatorSpec.analytic_optimum
        )

    def draw_seed(self, rng: np.random.Generator) -> SeedVector:
        return as_seed(rng.random(self.d_u), self.d_u)

    def describe(self) -> dict[str, Any]:
        return {
            "name": self.name,
            "d_theta": self.d_theta,
            "d_y": self.d_y,
            "d_u": self.d_u,
            "observed": self.observed.tolist(),
            "prior": self.prior.describe(),
            "hyperparameters": self.hyperparameters(),
        }


@dataclass(frozen=True)
class UnknownMeanSimulator(SimulatorSpec):
    """分散既知の正規分布の平均 (x_m = θ + r_m, f = θ + R(u))"""

    theta0: float = 0.0
    k: float = 1.0
    sigma: float = 1.0
    M: int = 2
    y: float = 0.0

    name: ClassVar[str] = "unknown-mean"
    default_schedule: ClassVar[tuple[float, ...]] = (0.1, 0.01)
    default_optimizer: ClassVar[OptimizerMethod] = OptimizerMethod.NEWTON

    d_theta = 1
    d_y = 1

    @property
    def d_u(self) -> int:
        return self.M

    @cached_property
    def prior(self) -> Prior:
        return normal_prior(self.theta0, math.sqrt(self.k) * self.sigma)

    @property
    def observed(self) -> Statistics:
        return np.array([self.y])

    def random_effect(self, u: ArrayLike) -> float:
        """R(u) = Σ r_m / M"""
        return float(np.mean(uniform_to_normal(clip_seed(u), 0.0, self.sigma)))

    def _forward(self, theta: FloatArray, u: FloatArray) -> FloatArray:
        return theta + self.random_effect(u)

    def analytic_jacobian(self, theta: ArrayLike, u: ArrayLike) -> FloatArray:
        return np.ones((1, 1))

    def analytic_optimum(self, y: ArrayLike, u: ArrayLike) -> ParameterVector:
        return np.atleast_1d(np.asarray(y, dtype=np.float64)) - self.random_effect(u)

    def hyperparameters(self) -> dict[str, Any]:
        return {"theta0": self.theta0, "k": self.k, "sigma": self.sigma, "M": self.M}


@dataclass(frozen=True)
class NormalMixtureSimulator(SimulatorSpec):
    """2成分の正規混合の平均. u₁で成分を選び、u₂でイノベーションをつくる."""

    rho: float = 0.5
    sigma1: float = 1.0
    sigma2: float = 0.1
    low: float = -10.0
    high: float = 10.0
    y: float = 0.0

    name: ClassVar[str] = "mixture"
    default_schedule: ClassVar[tuple[float, ...]] = (0.025, 0.01)
    default_optimizer: ClassVar[OptimizerMethod] = OptimizerMethod.NEWTON

    d_theta = 1
    d_y = 1
    d_u = 2

    @cached_property
    def prior(self) -> Prior:
        return uniform_prior(self.low, self.high)

    @property
    def observed(self) -> Statistics:
        return np.array([self.y])

    def random_effect(self, u: ArrayLike) -> float:
        u_arr = clip_seed(u)
        sigma = self.sigma1 if u_arr[0] < self.rho else self.sigma2
        return float(uniform_to_normal(u_arr[1], 0.0, sigma))

    def _forward(self, theta: FloatArray, u: FloatArray) -> FloatArray:
        return theta + self.random_effect(u)

    def analytic_jacobian(self, theta: ArrayLike, u: ArrayLike) -> FloatArray:
        return np.ones((1, 1))

    def analytic_optimum(self, y: ArrayLike, u: ArrayLike) -> ParameterVector:
        return np.atleast_1d(np.asarray(y, dtype=np.float64)) - self.random_effect(u)

    def posterior_cdf(self, theta: ArrayLike) -> FloatArray:
        """ε→0の真の事後分布 ρN(y,σ₁²)+(1−ρ)N(y,σ₂²) を(low, high)で切断したCDF"""
        def mixture_cdf(t: ArrayLike) -> FloatArray:
            return np.asarray(
                self.rho * stats.norm.cdf(t, self.y, self.sigma1)
                + (1 - self.rho) * stats.norm.cdf(t, self.y, self.sigma2),
                dtype=np.float64,
            )

        lo, hi = mixture_cdf(self.low), mixture_cdf(self.high)
        clipped = np.clip(np.asarray(theta, dtype=np.float64), self.low, self.high)
        return (mixture_cdf(clipped) - lo) / (hi - lo)

    def hyperparameters(self) -> dict[str, Any]:
        return {
            "rho": self.rho,
            "sigma1": self.sigma1,
            "sigma2": self.sigma2,
            "low": self.low,
            "high": self.high,
        }


@dataclass(frozen=True)
class ExponentialSimulator(SimulatorSpec):
    """指数分布のレート. f(θ,u) = R(u)/θ, R(u) = Σ −ln(1−u_m) / M."""

    alpha: float = 2.0
    beta: float = 1.0
    M: int = 2
    y: float = 10.0

    name: ClassVar[str] = "exponential"
    default_schedule: ClassVar[tuple[float, ...]] = (1.0, 0.1, 0.01)
    default_optimizer: ClassVar[OptimizerMethod] = OptimizerMethod.NEWTON

    d_theta = 1
    d_y = 1

    @property
    def d_u(self) -> int:
        return self.M

    @cached_property
    def prior(self) -> Prior:
        return gamma_prior(self.alpha, self.beta)

    @property
    def observed(self) -> Statistics:
        return np.array([self.y])

    def random_effect(self, u: ArrayLike) -> float:
        return float(np.mean(uniform_to_exponential(clip_seed(u), 1.0)))

    def _forward(self, theta: FloatArray, u: FloatArray) -> FloatArray:
        if theta[0] <= 0:
            raise SupportError(f"exponential rate must be positive, got {theta[0]}")
        return np.array([self.random_effect(u) / theta[0]])

    def analytic_jacobian(self, theta: ArrayLike, u: ArrayLike) -> FloatArray:
        t = float(np.atleast_1d(np.asarray(theta, dtype=np.float64))[0])
        return np.array([[-self.random_effect(u) / t**2]])

    def analytic_optimum(self, y: ArrayLike, u: ArrayLike) -> ParameterVector:
        s_y = float(np.atleast_1d(np.asarray(y, dtype=np.float64))[0])
        return np.array([self.random_effect(u) / s_y])

    def posterior_shape_rate(self) -> tuple[float, float]:
        """十分統計量が与えられたときの共役事後 Gamma(α+M, β+M·s(y))"""
        return self.alpha + self.M, self.beta + self.M * self.y

    def hyperparameters(self) -> dict[str, Any]:
        return {"alpha": self.alpha, "beta": self.beta, "M": self.M}


@dataclass(frozen=True)
class LinkedNormalSimulator(SimulatorSpec):
    """平均と分散がθでつながった正規分布. 統計量は平均と分散の2つ."""

    M: int = 10
    y: tuple[float, float] = (2.7, 12.8)
    low: float = 0.0
    high: float = 10.0

    name: ClassVar[str] = "linked-normal"
    default_schedule: ClassVar[tuple[float, ...]] = (0.25, 0.1)
    default_optimizer: ClassVar[OptimizerMethod] = OptimizerMethod.GAUSS_NEWTON

    d_theta = 1
    d_y = 2

    @property
    def d_u(self) -> int:
        return self.M

    @cached_property
    def prior(self) -> Prior:
        return uniform_prior(self.low, self.high)

    @property
    def observed(self) -> Statistics:
        return as_statistics(self.y, 2)

    def effects(self, u: ArrayLike) -> tuple[float, float]:
        """(R(u), V(u)). r_m = 1 + √2·erf⁻¹(2u_m − 1)."""
        r = 1.0 + uniform_to_normal(clip_seed(u))
        mean = float(np.mean(r))
        return mean, float(np.mean(r**2) - mean**2)

    def _forward(self, theta: FloatArray, u: FloatArray) -> FloatArray:
        mean, var = self.effects(u)
        t = theta[0]
        return np.array([t * mean, t**2 * var])

    def analytic_jacobian(self, theta: ArrayLike, u: ArrayLike) -> FloatArray:
        mean, var = self.effects(u)
        t = float(np.atleast_1d(np.asarray(theta, dtype=np.float64))[0])
        return np.array([[mean], [2.0 * t * var]])

    def hyperparameters(self) -> dict[str, Any]:
        return {"M": self.M, "low": self.low, "high": self.high}


@dataclass(frozen=True)
class LotkaVolterraSimulator(SimulatorSpec):
    """捕食者-被食者モデルを単位時間ステップのオイラー法で積分する

    dx₁/dt = θ₁x₁ − θ₂x₁x₂ + r₁,  dx₂/dt = −θ₂x₂ − θ₃x₁x₂ + r₂
    ノイズは各ステップで加え、個体数は0で下から抑える.
    出力は被食者T個、捕食者T個を連結した2T個.
    観測データはreference_thetaとreference_seedで一度だけ生成する.
    """

    T: int = 50
    initial: float = 100.0
    noise_sd: float = 10.0
    log_mean: tuple[float, float, float] = (-3.5, -8.5, -8.5)  # LOTKA_VOLTERRA_PRIORS["narrow"]
    log_sd: float = 1.0
    reference_theta: tuple[float, float, float] = (0.03, 2e-4, 2e-4)
    reference_seed: int = 2015
    _observed: FloatArray = field(init=False, repr=False, compare=False)

    name: ClassVar[str] = "lotka-volterra"
    default_schedule: ClassVar[tuple[float, ...]] = (3.0, 2.0)
    default_optimizer: ClassVar[OptimizerMethod] = OptimizerMethod.GAUSS_NEWTON

    d_theta = 3

    def __post_init__(self) -> None:
        rng = np.random.default_rng(self.reference_seed)
        u_ref = rng.random(self.d_u)
        object.__setattr__(self, "_observed", self.forward(self.reference_theta, u_ref))

    @property
    def d_y(self) -> int:
        return 2 * self.T

    @property
    def d_u(self) -> int:
        return 2 * self.T

    @cached_property
    def prior(self) -> Prior:
        return lognormal_prior(self.log_mean, self.log_sd)

    @property
    def observed(self) -> Statistics:
        return self._observed

    @property
    def default_scale(self) -> FloatArray:
        # 蓄積したプロセスノイズの標準偏差σ√t で割り、さらに√P で割ってRMSにする
        steps = np.arange(1, self.T + 1, dtype=np.float64)
        per_step = self.noise_sd * np.sqrt(steps) * math.sqrt(self.d_y)
        return np.concatenate([per_step, per_step])

    def _forward(self, theta: FloatArray, u: FloatArray) -> FloatArray:
        noise = uniform_to_normal(u, 0.0, self.noise_sd)
        prey_noise, predator_noise = noise[: self.T], noise[self.T :]
        growth, predation, death = (float(v) for v in theta)
        prey = predator = self.initial
        out = np.empty(self.d_y)
        for t in range(self.T):
            interaction = prey * predator
            next_prey = prey + growth * prey - predation * interaction + prey_noise[t]
            next_predator = predator - predation * predator - death * interaction + predator_noise[t]
            if not (math.isfinite(next_prey) and math.isfinite(next_predator)):
                raise DivergentSimulationError(f"lotka-volterra diverged at step {t + 1}")
            prey = max(0.0, next_prey)
            predator = max(0.0, next_predator)
            out[t] = prey
            out[self.T + t] = predator
        return out

    def hyperparameters(self) -> dict[str, Any]:
        return {
            "T": self.T,
            "initial": self.initial,
            "noise_sd": self.noise_sd,
            "reference_theta": list(self.reference_theta),
            "reference_seed": self.reference_seed,
            "log_mean": list(self.log_mean),
            "log_sd": self.log_sd,
        }


@dataclass(frozen=True)
class QueueSimulator(SimulatorSpec):
    """M/G/1待ち行列. 統計量は退去間隔の分位点3つ.

    uの前半M個が到着間隔 w_m ~ Exp(θ₃)、後半M個がサービス時間
    s_m = θ₁ + (θ₂ − θ₁)u を決める.
    """

    M: int = 50
    quantile_levels: tuple[float, ...] = (0.25, 0.5, 0.75)
    reference_theta: tuple[float, float, float] = (1.0, 5.0, 0.2)
    reference_seed: int = 1
    service_min_high: float = 10.0
    service_width_high: float = 10.0
    rate_high: float = 1.0 / 3.0
    _observed: FloatArray = field(init=False, repr=False, compare=False)

    name: ClassVar[str] = "mg1"
    default_schedule: ClassVar[tuple[float, ...]] = (1.0,)
    default_optimizer: ClassVar[OptimizerMethod] = OptimizerMethod.RANDOM_WALK

    d_theta = 3

    def __post_init__(self) -> None:
        rng = np.random.default_rng(self.reference_seed)
        u_ref = rng.random(self.d_u)
        object.__setattr__(self, "_observed", self.forward(self.reference_theta, u_ref))

    @property
    def d_y(self) -> int:
        return len(self.quantile_levels)

    @property
    def d_u(self) -> int:
        return 2 * self.M

    @cached_property
    def prior(self) -> Prior:
        return QueuePrior(self.service_min_high, self.service_width_high, self.rate_high)

    @property
    def observed(self) -> Statistics:
        return self._observed

    def inter_departures(self, theta: ArrayLike, u: ArrayLike) -> FloatArray:
        """退去間隔 x_m (並べ替える前)

        d_m = max(d_{m−1}, v_m) + s_m は、S_m = Σ s として
        d_m = S_m + max_{k≤m}(v_k − S_{k−1}) と書ける.
        """
        t1, t2, t3 = (float(v) for v in np.asarray(theta, dtype=np.float64))
        if t2 < t1 or t3 <= 0:
            raise SupportError(f"mg1 needs theta2 >= theta1 and theta3 > 0, got {theta}")
        u_arr = clip_seed(u)
        arrivals = np.cumsum(uniform_to_exponential(u_arr[: self.M], t3))
        service = t1 + (t2 - t1) * u_arr[self.M :]
        served = np.cumsum(service)
        departures = served + np.maximum.accumulate(arrivals - (served - service))
        return np.diff(departures, prepend=0.0)

    def _forward(self, theta: FloatArray, u: FloatArray) -> FloatArray:
        x = np.sort(self.inter_departures(theta, u))
        return np.quantile(x, self.quantile_levels, method="linear")

    def hyperparameters(self) -> dict[str, Any]:
        return {
            "M": self.M,
            "quantile_levels": list(self.quantile_levels),
            "reference_theta": list(self.reference_theta),
            "reference_seed": self.reference_seed,
        }


def sim_unknown_mean(**overrides: Any) -> SimulatorSpec:
    return UnknownMeanSimulator(**overrides)


def sim_normal_mixture(**overrides: Any) -> SimulatorSpec:
    return NormalMixtureSimulator(**overrides)


def sim_exponential(**overrides: Any) -> SimulatorSpec:
    return ExponentialSimulator(**overrides)


def sim_linked_normal(**overrides: Any) -> SimulatorSpec:
    return LinkedNormalSimulator(**overrides)


# 対数正規の事前分布の対数平均. "narrow"が既定で、"broad"では多くのθで捕食者が1ステップで絶滅する
LOTKA_VOLTERRA_PRIORS: dict[str, tuple[float, float, float]] = {
    "narrow": (-3.5, -8.5, -8.5),
    "broad": (-2.0, -5.0, -2.0),
}


def sim_lotka_volterra(prior: str | None = None, **overrides: Any) -> SimulatorSpec:
    """
    Raises:
        ValueError: priorが未知の名前、またはpriorとlog_meanを両方指定した場合
    """
    if prior is not None:
        if prior not in LOTKA_VOLTERRA_PRIORS:
            raise ValueError(
                f"unknown lotka-volterra prior {prior!r} "
                f"(choose from {', '.join(LOTKA_VOLTERRA_PRIORS)})"
            )
        if "log_mean" in overrides:
            raise ValueError("give either prior or log_mean, not both")
        overrides["log_mean"] = LOTKA_VOLTERRA_PRIORS[prior]
    return LotkaVolterraSimulator(**overrides)


def sim_mg1_queue(**overrides: Any) -> SimulatorSpec:
    return QueueSimulator(**overrides)


SimulatorFactory = Callable[..., SimulatorSpec]

SIMULATORS: dict[str, SimulatorFactory] = {}


def register_simulator(name: str, factory: SimulatorFactory) -> None:
    SIMULATORS[name] = factory


register_simulator(UnknownMeanSimulator.name, sim_unknown_mean)
register_simulator(NormalMixtureSimulator.name, sim_normal_mixture)
register_simulator(ExponentialSimulator.name, sim_exponential)
register_simulator(LinkedNormalSimulator.name, sim_linked_normal)
register_simulator(LotkaVolterraSimulator.name, sim_lotka_volterra)
register_simulator(QueueSimulator.name, sim_mg1_queue)


def make_simulator(name: str, **overrides: Any) -> SimulatorSpec:
    """レジストリから名前でシミュレータをつくる

    Raises:
        ConfigError: 名前が未登録、またはハイパーパラメータの指定が不正な場合
    """
    factory = SIMULATORS.get(name)
    if factory is None:
        raise ConfigError(f"unknown simulator {name!r} (choose from {', '.join(SIMULATORS)})")
    # TOMLの配列はlistで来るので、tupleのフィールドに合わせる
    normalized = {k: tuple(v) if isinstance(v, list) else v for k, v in overrides.items()}
    try:
        return factory(**normalized)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"bad hyperparameters for simulator {name!r}: {exc}") from exc
