"""
事前分布

Priorは抽象基底クラスで、対数密度・サンプリング・台(support)の判定を持つ.
密度と乱数はscipy.statsの凍結分布に任せる.
"""

from abc import ABCMeta, abstractmethod
from typing import Any

import numpy as np
from numpy.typing import ArrayLike
from scipy import stats

from omc.core import FloatArray, ParameterVector, as_vector


class Prior(metaclass=ABCMeta):
    """事前分布の抽象基底クラス

    log_density()は台の外で-infを返す.
    describe()はmetrics.jsonに書き出すためのハイパーパラメータの辞書を返す.
    """

    def __init__(self, dim: int) -> None:
        self.dim = dim

    @abstractmethod
    def in_support(self, theta: ArrayLike) -> bool:
        raise NotImplementedError

    @abstractmethod
    def _log_density(self, theta: FloatArray) -> float:
        raise NotImplementedError

    @abstractmethod
    def sample(self, rng: np.random.Generator) -> ParameterVector:
        raise NotImplementedError

    @abstractmethod
    def describe(self) -> dict[str, Any]:
        raise NotImplementedError

    def log_density(self, theta: ArrayLike) -> float:
        theta_arr = as_vector(theta, self.dim, "prior argument")
        if not self.in_support(theta_arr):
            return -np.inf
        return self._log_density(theta_arr)

    def density(self, theta: ArrayLike) -> float:
        return float(np.exp(self.log_density(theta)))

    def log_density_many(self, thetas: ArrayLike) -> FloatArray:
        """(n, D_θ)の行ごとに対数密度を返す"""
        rows = np.atleast_2d(np.asarray(thetas, dtype=np.float64))
        return np.array([self.log_density(row) for row in rows], dtype=np.float64)


class IndependentPrior(Prior):
    """成分ごとに独立な一次元分布の積

    Args:
        marginal: 形状パラメータを配列で持つ凍結済みのscipy.stats分布
        dim (int): 次元
        params (dict[str, Any]): describe()で返すハイパーパラメータ
    """

    def __init__(self, marginal: Any, dim: int, name: str, params: dict[str, Any]) -> None:
        super().__init__(dim)
        self.marginal = marginal
        self.name = name
        self.params = params
        lower, upper = marginal.support()
        self.lower = np.broadcast_to(np.asarray(lower, dtype=np.float64), (dim,)).copy()
        self.upper = np.broadcast_to(np.asarray(upper, dtype=np.float64), (dim,)).copy()

    def in_support(self, theta: ArrayLike) -> bool:
        theta_arr = np.asarray(theta, dtype=np.float64)
        if not np.all(np.isfinite(theta_arr)):
            return False
        return bool(np.all((theta_arr >= self.lower) & (theta_arr <= self.upper)))

    def _log_density(self, theta: FloatArray) -> float:
        return float(np.sum(self.marginal.logpdf(theta)))

    def sample(self, rng: np.random.Generator) -> ParameterVector:
        draw = self.marginal.rvs(size=self.dim, random_state=rng)
        return np.atleast_1d(np.asarray(draw, dtype=np.float64))

    def describe(self) -> dict[str, Any]:
        return {"family": self.name, **self.params}


def normal_prior(mean: ArrayLike, sd: ArrayLike) -> IndependentPrior:
    mean_arr = np.atleast_1d(np.asarray(mean, dtype=np.float64))
    sd_arr = np.broadcast_to(np.asarray(sd, dtype=np.float64), mean_arr.shape)
    return IndependentPrior(
        stats.norm(loc=mean_arr, scale=sd_arr),
        mean_arr.size,
        "normal",
        {"mean": mean_arr.tolist(), "sd": sd_arr.tolist()},
    )


def uniform_prior(low: ArrayLike, high: ArrayLike) -> IndependentPrior:
    low_arr = np.atleast_1d(np.asarray(low, dtype=np.float64))
    high_arr = np.broadcast_to(np.asarray(high, dtype=np.float64), low_arr.shape)
    if np.any(high_arr <= low_arr):
        raise ValueError("uniform prior needs high > low")
    return IndependentPrior(
        stats.uniform(loc=low_arr, scale=high_arr - low_arr),
        low_arr.size,
        "uniform",
        {"low": low_arr.tolist(), "high": high_arr.tolist()},
    )


def gamma_prior(alpha: float, beta: float) -> IndependentPrior:
    """形状α、レートβのガンマ分布 (scipyはscale=1/β)"""
    if alpha <= 0 or beta <= 0:
        raise ValueError("gamma prior needs alpha > 0 and beta > 0")
    return IndependentPrior(
        stats.gamma(a=alpha, scale=1.0 / beta),
        1,
        "gamma",
        {"alpha": alpha, "beta": beta},
    )


def lognormal_prior(log_mean: ArrayLike, log_sd: ArrayLike) -> IndependentPrior:
    mu = np.atleast_1d(np.asarray(log_mean, dtype=np.float64))
    sigma = np.broadcast_to(np.asarray(log_sd, dtype=np.float64), mu.shape)
    return IndependentPrior(
        stats.lognorm(s=sigma, scale=np.exp(mu)),
        mu.size,
        "lognormal",
        {"log_mean": mu.tolist(), "log_sd": sigma.tolist()},
    )


class QueuePrior(Prior):
    """M/G/1の事前分布

    (θ₁, θ₂−θ₁, θ₃) と再パラメータ化し、それぞれ
    U(0, service_width), U(0, service_width), U(0, rate_max) とする.
    θ₂ ≥ θ₁ が自動的に満たされる.
    """

    def __init__(
        self,
        service_min_high: float = 10.0,
        service_width_high: float = 10.0,
        rate_high: float = 1.0 / 3.0,
    ) -> None:
        super().__init__(3)
        self.service_min_high = service_min_high
        self.service_width_high = service_width_high
        self.rate_high = rate_high
        self.components = stats.uniform(
            loc=np.zeros(3),
            scale=np.array([service_min_high, service_width_high, rate_high]),
        )

    @staticmethod
    def to_reparameterized(theta: ArrayLike) -> FloatArray:
        t = np.asarray(theta, dtype=np.float64)
        return np.array([t[0], t[1] - t[0], t[2]])

    @staticmethod
    def from_reparameterized(phi: ArrayLike) -> FloatArray:
        p = np.asarray(phi, dtype=np.float64)
        return np.array([p[0], p[0] + p[1], p[2]])

    def in_support(self, theta: ArrayLike) -> bool:
        theta_arr = np.asarray(theta, dtype=np.float64)
        if not np.all(np.isfinite(theta_arr)):
            return False
        phi = self.to_reparameterized(theta_arr)
        return bool(
            0.0 <= phi[0] <= self.service_min_high
            and 0.0 <= phi[1] <= self.service_width_high
            and 0.0 < phi[2] <= self.rate_high
        )

    def _log_density(self, theta: FloatArray) -> float:
        # 変換(θ₁, θ₂) → (θ₁, θ₂−θ₁)のヤコビアンは1
        return float(np.sum(self.components.logpdf(self.to_reparameterized(theta))))

    def sample(self, rng: np.random.Generator) -> ParameterVector:
        phi = np.asarray(self.components.rvs(size=3, random_state=rng), dtype=np.float64)
        # U(0, rate_high)の下端0は台の外
        phi[2] = max(phi[2], np.finfo(np.float64).tiny)
        return self.from_reparameterized(phi)

    def describe(self) -> dict[str, Any]:
        return {
            "family": "mg1-reparameterized-uniform",
            "theta1": [0.0, self.service_min_high],
            "theta2_minus_theta1": [0.0, self.service_width_high],
            "theta3": [0.0, self.rate_high],
        }
