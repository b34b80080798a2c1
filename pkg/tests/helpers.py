from typing import Any

import numpy as np
from numpy.typing import ArrayLike

from omc.config import OptimizerMethod
from omc.core import FloatArray, Particle, Statistics, weight_from_log
from omc.errors import DivergentSimulationError
from omc.optimize import OptimizationResult
from omc.priors import Prior, normal_prior
from omc.simulators import SimulatorSpec


class LinearSimulator(SimulatorSpec):
    """f(θ, u) = Aθ + u"""

    name = "linear"
    default_schedule = (1.0,)
    default_optimizer = OptimizerMethod.GAUSS_NEWTON

    def __init__(self, A: ArrayLike, y: ArrayLike) -> None:
        self.A = np.atleast_2d(np.asarray(A, dtype=np.float64))
        self._y = np.asarray(y, dtype=np.float64)
        self._prior = normal_prior(np.zeros(self.A.shape[1]), 1.0)

    @property
    def d_theta(self) -> int:
        return int(self.A.shape[1])

    @property
    def d_y(self) -> int:
        return int(self.A.shape[0])

    @property
    def d_u(self) -> int:
        return int(self.A.shape[0])

    @property
    def prior(self) -> Prior:
        return self._prior

    @property
    def observed(self) -> Statistics:
        return self._y

    def _forward(self, theta: FloatArray, u: FloatArray) -> FloatArray:
        return np.asarray(self.A @ theta + u, dtype=np.float64)

    def analytic_jacobian(self, theta: ArrayLike, u: ArrayLike) -> FloatArray:
        return self.A.copy()

    def hyperparameters(self) -> dict[str, Any]:
        return {"A": self.A.tolist()}


class CountingSimulator(SimulatorSpec):
    """別のシミュレータをそのまま呼び、呼び出し回数を数える"""

    name = "counting"
    default_schedule = (1.0,)
    default_optimizer = OptimizerMethod.NEWTON

    def __init__(self, inner: SimulatorSpec) -> None:
        self.inner = inner
        self.calls = 0

    @property
    def d_theta(self) -> int:
        return self.inner.d_theta

    @property
    def d_y(self) -> int:
        return self.inner.d_y

    @property
    def d_u(self) -> int:
        return self.inner.d_u

    @property
    def prior(self) -> Prior:
        return self.inner.prior

    @property
    def observed(self) -> Statistics:
        return self.inner.observed

    def _forward(self, theta: FloatArray, u: FloatArray) -> FloatArray:
        self.calls += 1
        return self.inner._forward(theta, u)

    def hyperparameters(self) -> dict[str, Any]:
        return {}


class FlakySimulator(CountingSimulator):
    """u[0]がthreshold未満のときは必ず発散する"""

    name = "flaky"

    def __init__(self, inner: SimulatorSpec, threshold: float) -> None:
        super().__init__(inner)
        self.threshold = threshold

    def _forward(self, theta: FloatArray, u: FloatArray) -> FloatArray:
        self.calls += 1
        if u[0] < self.threshold:
            raise DivergentSimulationError("flaky simulator diverged")
        return self.inner._forward(theta, u)


class FailingSimulator(CountingSimulator):
    """u[0]がthreshold未満のときは発散ではない数値エラーを出す"""

    name = "failing"

    def __init__(self, inner: SimulatorSpec, threshold: float) -> None:
        super().__init__(inner)
        self.threshold = threshold

    def _forward(self, theta: FloatArray, u: FloatArray) -> FloatArray:
        self.calls += 1
        if u[0] < self.threshold:
            raise ZeroDivisionError("failing simulator divided by zero")
        return self.inner._forward(theta, u)


def make_particle(
    theta: ArrayLike,
    log_weight: float = 0.0,
    *,
    accepted: bool = True,
    sim_count: int = 1,
    index: int = 0,
) -> Particle:
    theta_arr = np.atleast_1d(np.asarray(theta, dtype=np.float64))
    if not accepted:
        return Particle.rejected(
            seed=[0.5],
            theta_opt=theta_arr,
            f_at_opt=[1.0],
            discrepancy=1.0,
            sim_count=sim_count,
            index=index,
        )
    return Particle(
        seed=np.array([0.5]),
        theta_opt=theta_arr,
        theta_star=theta_arr,
        f_at_opt=np.zeros(1),
        discrepancy=0.0,
        jacobian=np.ones((1, theta_arr.size)),
        raw_weight=weight_from_log(log_weight),
        log_weight=log_weight,
        sim_count=sim_count,
        accepted=True,
        index=index,
    )


def make_result(
    theta_opt: ArrayLike,
    f_at_opt: ArrayLike,
    jacobian: ArrayLike,
    discrepancy: float = 0.0,
    sim_count: int = 1,
) -> OptimizationResult:
    theta = np.atleast_1d(np.asarray(theta_opt, dtype=np.float64))
    f = np.atleast_1d(np.asarray(f_at_opt, dtype=np.float64))
    return OptimizationResult(
        theta_opt=theta,
        f_at_opt=f,
        discrepancy=discrepancy,
        jacobian=np.atleast_2d(np.asarray(jacobian, dtype=np.float64)),
        sim_count=sim_count,
        converged=True,
    )
