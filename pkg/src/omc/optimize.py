"""
粒子ごとの最適化

乱数uを固定して ρ(y, f(θ, u)) をθについて最小化する. シミュレータの呼び出しは
すべて数え、1回の呼び出しで使う回数はbudgetを超えない.

- newton_optimize: D_θ = D_y のニュートン法(直線探索つき)
- gauss_newton_optimize: D_θ ≤ D_y のガウス・ニュートン法(擬似逆行列)
- random_walk_optimize: 改善したときだけ動く貪欲なランダムウォーク
- exact_optimize: 解析的な最適解とヤコビアンを使う(わかるシミュレータのみ)

どの関数も前回の結果(warm_start)から続きを実行できる.
"""

import logging
from collections.abc import Callable
from dataclasses import dataclass

import numpy as np
import scipy.linalg
from numpy.typing import ArrayLike

from omc.config import OptimizerMethod
from omc.core import (
    DiscrepancyKernel,
    FloatArray,
    ParameterVector,
    Statistics,
    as_vector,
    discrepancy,
)
from omc.errors import (
    ConfigError,
    DimensionError,
    DivergentSimulationError,
    JacobianError,
    SimulationFailedError,
    SingularJacobianError,
    SupportError,
    UnderdeterminedError,
)
from omc.priors import Prior
from omc.seeding import ParticleSeedStream
from omc.simulators import SimulatorSpec

logger = logging.getLogger(__name__)

LINE_SEARCH_HALVINGS = 10
SINGULAR_SCALED_DET = 1e-12
REGULARIZATION = 1e-8
SUPPORT_BACKOFF = 1e-9
RW_PATIENCE = 20
# 台の外の提案はシミュレーションしないので、提案の回数には別に上限を置く
RW_ATTEMPTS_PER_SIM = 100


@dataclass(frozen=True)
class OptimizerConfig:
    """最適化の設定

    Attributes:
        method (OptimizerMethod): 手法
        max_sims_per_round (int): 1回の呼び出し(ラウンド)で使えるシミュレーション回数
        fd_step (float): 差分の相対ステップ h_d = fd_step·max(1, |θ_d|)
        convergence_tol (float | None): ρがこれ以下になったら止める. Noneならカーネルのε
        rw_scale (float): ランダムウォークの初期の提案スケール
        rw_decay (float): 20回続けて棄却したときにrw_scaleに掛ける係数
        use_analytic_jacobian (bool): 解析的なヤコビアンがあれば差分の代わりに使う
    """

    method: OptimizerMethod = OptimizerMethod.NEWTON
    max_sims_per_round: int = 1000
    fd_step: float = 1e-5
    convergence_tol: float | None = None
    rw_scale: float = 0.1
    rw_decay: float = 0.5
    use_analytic_jacobian: bool = False

    def __post_init__(self) -> None:
        if self.max_sims_per_round <= 0:
            raise ConfigError("max_sims_per_round must be positive")
        if not self.fd_step > 0:
            raise ConfigError("fd_step must be positive")
        if self.convergence_tol is not None and not self.convergence_tol > 0:
            raise ConfigError("convergence_tol must be positive")
        if not self.rw_scale > 0:
            raise ConfigError("rw_scale must be positive")
        if not 0 < self.rw_decay < 1:
            raise ConfigError("rw_decay must lie in (0, 1)")

    def tolerance(self, kernel: DiscrepancyKernel) -> float:
        return self.convergence_tol if self.convergence_tol is not None else kernel.epsilon


@dataclass(frozen=True)
class OptimizationResult:
    """最適化の結果

    Attributes:
        theta_opt (ParameterVector): 終点θ°
        f_at_opt (Statistics): f(θ°, u). 初回の評価が発散した場合はNaN
        discrepancy (float): ρ(y, f(θ°, u)). 発散した場合はinf
        jacobian (FloatArray): θ°でのヤコビアン. 計算していなければNaN
        sim_count (int): この粒子のシミュレーション回数の累計
        converged (bool): ρ ≤ ε
        stalled (bool): これ以上続けても進まない(直線探索の失敗、特異なヤコビアンなど)
        segment (int): これまでの呼び出し回数. ランダムウォークの提案ストリームの番号
        rw_scale (float): ランダムウォークの現在のスケール
        rw_rejections (int): ランダムウォークの連続棄却数
    """

    theta_opt: ParameterVector
    f_at_opt: Statistics
    discrepancy: float
    jacobian: FloatArray
    sim_count: int
    converged: bool
    stalled: bool = False
    segment: int = 1
    rw_scale: float = 0.0
    rw_rejections: int = 0

    @property
    def has_jacobian(self) -> bool:
        return bool(np.all(np.isfinite(self.jacobian)))


class _Evaluator:
    """シミュレータ呼び出しを数えながら f と ρ を計算する"""

    def __init__(
        self,
        sim: SimulatorSpec,
        y: Statistics,
        u: FloatArray,
        kernel: DiscrepancyKernel,
        budget: int,
    ) -> None:
        self.sim = sim
        self.y = y
        self.u = u
        self.kernel = kernel
        self.budget = budget
        self.calls = 0

    def remaining(self) -> int:
        return self.budget - self.calls

    def forward(self, theta: ArrayLike, u: ArrayLike) -> Statistics:
        """
        Raises:
            SimulationFailedError: 発散以外の数値エラー(それまでの回数を持つ)
        """
        self.calls += 1
        try:
            return self.sim.forward(theta, u)
        except (DivergentSimulationError, SupportError):
            raise
        except ArithmeticError as exc:
            raise SimulationFailedError(self.calls, str(exc) or type(exc).__name__) from exc

    def evaluate(self, theta: ParameterVector) -> tuple[Statistics, float]:
        """発散したシミュレーションはρ = infとして扱う"""
        try:
            f = self.forward(theta, self.u)
        except (DivergentSimulationError, SupportError) as exc:
            logger.debug("simulation failed at theta=%s: %s", theta, exc)
            return np.full(self.sim.d_y, np.nan), np.inf
        return f, discrepancy(self.y, f, self.kernel)


def fd_jacobian(
    sim: SimulatorSpec,
    theta: ArrayLike,
    u: ArrayLike,
    f_base: ArrayLike,
    step: float,
    *,
    forward: Callable[[ArrayLike, ArrayLike], Statistics] | None = None,
) -> FloatArray:
    """片側差分のヤコビアン. ちょうどD_θ回シミュレータを呼ぶ.

    列dは (f(θ + h_d e_d, u) − f_base) / h_d, h_d = step·max(1, |θ_d|).

    Raises:
        JacobianError: 摂動した出力が有限でない場合(列の番号を含む)
    """
    if not step > 0:
        raise ValueError("finite-difference step must be positive")
    forward = forward if forward is not None else sim.forward
    theta_arr = as_vector(theta, sim.d_theta, "theta")
    base = as_vector(f_base, sim.d_y, "f_base")
    if not np.all(np.isfinite(base)):
        raise JacobianError(-1, "base point output is not finite")
    jacobian = np.empty((sim.d_y, sim.d_theta))
    for d in range(sim.d_theta):
        h = step * max(1.0, abs(theta_arr[d]))
        perturbed = theta_arr.copy()
        perturbed[d] += h
        try:
            f_d = forward(perturbed, u)
        except (DivergentSimulationError, SupportError) as exc:
            raise JacobianError(d, str(exc)) from exc
        column = (f_d - base) / h
        if not np.all(np.isfinite(column)):
            raise JacobianError(d)
        jacobian[:, d] = column
    return jacobian


def pseudo_inverse_solve(jacobian: ArrayLike, residual: ArrayLike) -> FloatArray:
    """J†r を返す. 正方ならJ⁻¹r、縦長なら (JᵀJ)⁻¹Jᵀr.

    スケールした行列式が1e-12より小さい場合は λ = 1e-8·|trace|/D を対角に足して解き直す.

    Raises:
        UnderdeterminedError: D_θ > D_y の場合
        SingularJacobianError: 正則化しても解けない場合
    """
    J = np.atleast_2d(np.asarray(jacobian, dtype=np.float64))
    r = np.atleast_1d(np.asarray(residual, dtype=np.float64))
    d_y, d_theta = J.shape
    if d_theta > d_y:
        raise UnderdeterminedError(d_theta, d_y)
    if r.shape != (d_y,):
        raise DimensionError("residual", d_y, r.size)
    if not np.all(np.isfinite(J)):
        raise SingularJacobianError("jacobian has non-finite entries")

    square = d_theta == d_y
    A, b = (J, r) if square else (J.T @ J, J.T @ r)
    # 行(正方)または対角(正規方程式)で割った行列式. 値はアダマールの不等式から1以下
    norms = np.linalg.norm(A, axis=1) if square else np.sqrt(np.abs(np.diag(A)))
    if square:
        scaled_det = abs(np.linalg.det(A)) / np.prod(norms) if np.all(norms > 0) else 0.0
    else:
        scaled_det = abs(np.linalg.det(A)) / np.prod(norms**2) if np.all(norms > 0) else 0.0
    if scaled_det < SINGULAR_SCALED_DET:
        lam = REGULARIZATION * abs(np.trace(A)) / d_theta
        if lam == 0.0 or not np.isfinite(lam):
            raise SingularJacobianError("jacobian is singular and cannot be regularized")
        A = A + lam * np.eye(d_theta)
    try:
        if square:
            solution = np.linalg.solve(A, b)
        else:
            solution = scipy.linalg.cho_solve(scipy.linalg.cho_factor(A), b)
    except (np.linalg.LinAlgError, scipy.linalg.LinAlgError) as exc:
        raise SingularJacobianError(f"jacobian is singular after regularization: {exc}") from exc
    if not np.all(np.isfinite(solution)):
        raise SingularJacobianError("pseudo-inverse solve produced non-finite values")
    return np.asarray(solution, dtype=np.float64)


def pull_back(prior: Prior, theta: ParameterVector, step: FloatArray) -> ParameterVector:
    """θ + step が台の外なら、step方向に境界まで戻し、さらに1e-9だけ内側に寄せる"""
    candidate = theta + step
    if prior.in_support(candidate):
        return candidate
    lo, hi = 0.0, 1.0
    for _ in range(60):
        mid = 0.5 * (lo + hi)
        if prior.in_support(theta + mid * step):
            lo = mid
        else:
            hi = mid
    length = float(np.linalg.norm(step))
    t = max(lo - SUPPORT_BACKOFF / length, 0.0) if length > 0 else 0.0
    return theta + t * step


def _start(
    sim: SimulatorSpec,
    evaluator: _Evaluator,
    stream: ParticleSeedStream,
    warm_start: OptimizationResult | None,
) -> tuple[ParameterVector, Statistics, float]:
    if warm_start is not None:
        return warm_start.theta_opt.copy(), warm_start.f_at_opt, warm_start.discrepancy
    theta = sim.prior.sample(stream.generator("init"))
    f, rho = evaluator.evaluate(theta)
    return theta, f, rho


def _jacobian_at(
    sim: SimulatorSpec,
    evaluator: _Evaluator,
    theta: ParameterVector,
    f: Statistics,
    config: OptimizerConfig,
) -> FloatArray:
    if config.use_analytic_jacobian:
        analytic = sim.analytic_jacobian(theta, evaluator.u)
        if analytic is not None:
            return np.asarray(analytic, dtype=np.float64)
    return fd_jacobian(sim, theta, evaluator.u, f, config.fd_step, forward=evaluator.forward)


def _jacobian_cost(sim: SimulatorSpec, config: OptimizerConfig) -> int:
    if config.use_analytic_jacobian and sim.has_analytic_jacobian:
        return 0
    return sim.d_theta


def minimum_budget(sim: SimulatorSpec) -> int:
    """初期点の1回と差分ヤコビアンのD_θ回"""
    return sim.d_theta + 1


def _check_budget(sim: SimulatorSpec, budget: int, with_jacobian: bool) -> None:
    needed = minimum_budget(sim) if with_jacobian else 1
    if budget < needed:
        raise ConfigError(
            f"budget {budget} is below the minimum {needed} for D_theta={sim.d_theta}"
        )


def _finish(
    sim: SimulatorSpec,
    evaluator: _Evaluator,
    config: OptimizerConfig,
    kernel: DiscrepancyKernel,
    theta: ParameterVector,
    f: Statistics,
    rho: float,
    *,
    jacobian: FloatArray | None,
    with_jacobian: bool,
    warm_start: OptimizationResult | None,
    stalled: bool,
    rw_scale: float = 0.0,
    rw_rejections: int = 0,
) -> OptimizationResult:
    if jacobian is None:
        jacobian = np.full((sim.d_y, sim.d_theta), np.nan)
        if with_jacobian and np.isfinite(rho):
            try:
                jacobian = _jacobian_at(sim, evaluator, theta, f, config)
            except JacobianError as exc:
                logger.debug("final jacobian failed: %s", exc)
    previous = warm_start.sim_count if warm_start is not None else 0
    segment = warm_start.segment + 1 if warm_start is not None else 1
    return OptimizationResult(
        theta_opt=theta,
        f_at_opt=f,
        discrepancy=rho,
        jacobian=jacobian,
        sim_count=previous + evaluator.calls,
        converged=kernel.accepts(rho),
        stalled=stalled,
        segment=segment,
        rw_scale=rw_scale,
        rw_rejections=rw_rejections,
    )


def _descend(
    sim: SimulatorSpec,
    y: Statistics,
    u: FloatArray,
    kernel: DiscrepancyKernel,
    config: OptimizerConfig,
    stream: ParticleSeedStream,
    warm_start: OptimizationResult | None,
    budget: int,
    with_jacobian: bool,
) -> OptimizationResult:
    """ニュートン法とガウス・ニュートン法の共通部分

    θ ← θ + t·J_s†r_s. r_s = (y − f(θ)) ⊘ scale, J_s = diag(scale)⁻¹J で、
    ρ と同じ重み付き最小二乗を解く. tは1から始めて、ρが下がるまで最大10回半分にする.
    台の外に出るステップはpull_back()で境界の内側まで戻す.
    """
    _check_budget(sim, budget, with_jacobian)
    evaluator = _Evaluator(sim, y, u, kernel, budget)
    tol = config.tolerance(kernel)
    jac_cost = _jacobian_cost(sim, config)
    reserve = jac_cost if with_jacobian else 0
    theta, f, rho = _start(sim, evaluator, stream, warm_start)
    jacobian: FloatArray | None = None
    if warm_start is not None and warm_start.has_jacobian:
        jacobian = warm_start.jacobian
    stalled = warm_start.stalled if warm_start is not None else False

    while rho > tol and not stalled:
        # 差分1回分 + 少なくとも1回の試行 + 最後のヤコビアン
        if evaluator.remaining() < (jac_cost if jacobian is None else 0) + 1 + reserve:
            break
        try:
            if jacobian is None:
                jacobian = _jacobian_at(sim, evaluator, theta, f, config)
            direction = pseudo_inverse_solve(
                kernel.whiten_jacobian(jacobian), kernel.whiten(y - f)
            )
        except (JacobianError, SingularJacobianError) as exc:
            logger.debug("particle %d: %s", stream.particle_index, exc)
            stalled = True
            break

        moved = False
        t = 1.0
        for _ in range(LINE_SEARCH_HALVINGS + 1):
            if evaluator.remaining() < 1 + reserve:
                break
            candidate = pull_back(sim.prior, theta, t * direction)
            if np.array_equal(candidate, theta):
                break
            f_c, rho_c = evaluator.evaluate(candidate)
            if rho_c < rho:
                theta, f, rho = candidate, f_c, rho_c
                jacobian = None
                moved = True
                break
            t *= 0.5
        if not moved:
            # 予算切れでなければ、直線探索の失敗か、ステップが停滞した
            stalled = evaluator.remaining() >= 1 + reserve
            break

    return _finish(
        sim,
        evaluator,
        config,
        kernel,
        theta,
        f,
        rho,
        jacobian=jacobian,
        with_jacobian=with_jacobian,
        warm_start=warm_start,
        stalled=stalled,
    )


def newton_optimize(
    sim: SimulatorSpec,
    y: ArrayLike,
    u: ArrayLike,
    kernel: DiscrepancyKernel,
    config: OptimizerConfig,
    stream: ParticleSeedStream,
    *,
    warm_start: OptimizationResult | None = None,
    budget: int | None = None,
    with_jacobian: bool = True,
) -> OptimizationResult:
    """ニュートン法. 事前分布からの1点を初期値にする(warm_startがあればそこから).

    Raises:
        DimensionError: D_θ ≠ D_y の場合
    """
    if sim.d_theta != sim.d_y:
        raise DimensionError("newton needs D_y equal to D_theta", sim.d_theta, sim.d_y)
    return _descend(
        sim,
        as_vector(y, sim.d_y, "observed statistics"),
        as_vector(u, sim.d_u, "seed vector"),
        kernel,
        config,
        stream,
        warm_start,
        budget if budget is not None else config.max_sims_per_round,
        with_jacobian,
    )


def gauss_newton_optimize(
    sim: SimulatorSpec,
    y: ArrayLike,
    u: ArrayLike,
    kernel: DiscrepancyKernel,
    config: OptimizerConfig,
    stream: ParticleSeedStream,
    *,
    warm_start: OptimizationResult | None = None,
    budget: int | None = None,
    with_jacobian: bool = True,
) -> OptimizationResult:
    """ガウス・ニュートン法. D_θ = D_y のときはニュートン法と同じ軌跡になる.

    Raises:
        UnderdeterminedError: D_θ > D_y の場合
    """
    if sim.d_theta > sim.d_y:
        raise UnderdeterminedError(sim.d_theta, sim.d_y)
    return _descend(
        sim,
        as_vector(y, sim.d_y, "observed statistics"),
        as_vector(u, sim.d_u, "seed vector"),
        kernel,
        config,
        stream,
        warm_start,
        budget if budget is not None else config.max_sims_per_round,
        with_jacobian,
    )


def random_walk_optimize(
    sim: SimulatorSpec,
    y: ArrayLike,
    u: ArrayLike,
    kernel: DiscrepancyKernel,
    config: OptimizerConfig,
    stream: ParticleSeedStream,
    *,
    warm_start: OptimizationResult | None = None,
    budget: int | None = None,
    with_jacobian: bool = True,
) -> OptimizationResult:
    """貪欲なランダムウォーク

    θ' = θ + rw_scale·N(0, I) を提案し、ρが下がったときだけ受理する.
    20回続けて棄却したらrw_scaleにrw_decayを掛ける.
    台の外の提案はシミュレーションせずに棄却する.
    ヤコビアンは最後のθで一度だけ差分で計算する.
    """
    budget = budget if budget is not None else config.max_sims_per_round
    _check_budget(sim, budget, with_jacobian)
    y_arr = as_vector(y, sim.d_y, "observed statistics")
    u_arr = as_vector(u, sim.d_u, "seed vector")
    evaluator = _Evaluator(sim, y_arr, u_arr, kernel, budget)
    tol = config.tolerance(kernel)
    reserve = _jacobian_cost(sim, config) if with_jacobian else 0
    theta, f, rho = _start(sim, evaluator, stream, warm_start)

    if warm_start is not None and warm_start.rw_scale > 0:
        scale, rejections = warm_start.rw_scale, warm_start.rw_rejections
    else:
        scale, rejections = config.rw_scale, 0
    segment = warm_start.segment + 1 if warm_start is not None else 1
    proposals = stream.generator("proposal", segment)
    max_attempts = RW_ATTEMPTS_PER_SIM * budget
    attempts = 0
    stalled = False

    while rho > tol and evaluator.remaining() >= 1 + reserve:
        if attempts >= max_attempts or scale < np.finfo(np.float64).eps:
            stalled = True
            break
        attempts += 1
        proposal = theta + scale * proposals.standard_normal(sim.d_theta)
        if sim.prior.in_support(proposal):
            f_p, rho_p = evaluator.evaluate(proposal)
            if rho_p < rho:
                theta, f, rho = proposal, f_p, rho_p
                rejections = 0
                continue
        rejections += 1
        if rejections >= RW_PATIENCE:
            scale *= config.rw_decay
            rejections = 0

    return _finish(
        sim,
        evaluator,
        config,
        kernel,
        theta,
        f,
        rho,
        jacobian=None,
        with_jacobian=with_jacobian,
        warm_start=warm_start,
        stalled=stalled,
        rw_scale=scale,
        rw_rejections=rejections,
    )


def exact_optimize(
    sim: SimulatorSpec,
    y: ArrayLike,
    u: ArrayLike,
    kernel: DiscrepancyKernel,
    config: OptimizerConfig,
    stream: ParticleSeedStream,
    *,
    warm_start: OptimizationResult | None = None,
    budget: int | None = None,
    with_jacobian: bool = True,
) -> OptimizationResult:
    """解析的なθ°とJ°を使う. f(θ°)を記録するために1回だけシミュレーションする.

    Raises:
        ConfigError: シミュレータが解析解を持たない場合
    """
    if not sim.has_oracles:
        raise ConfigError(f"simulator {sim.name!r} has no analytic optimum/jacobian")
    if warm_start is not None and warm_start.has_jacobian:
        return warm_start
    y_arr = as_vector(y, sim.d_y, "observed statistics")
    u_arr = as_vector(u, sim.d_u, "seed vector")
    evaluator = _Evaluator(sim, y_arr, u_arr, kernel, budget or config.max_sims_per_round)
    theta = sim.analytic_optimum(y_arr, u_arr)
    assert theta is not None
    f, rho = evaluator.evaluate(theta)
    jacobian = sim.analytic_jacobian(theta, u_arr)
    return _finish(
        sim,
        evaluator,
        config,
        kernel,
        theta,
        f,
        rho,
        jacobian=np.asarray(jacobian, dtype=np.float64),
        with_jacobian=with_jacobian,
        warm_start=None,
        stalled=True,
    )


def check_problem(sim: SimulatorSpec, config: OptimizerConfig) -> None:
    """粒子を回す前に、手法とシミュレータの組み合わせを確認する

    Raises:
        UnderdeterminedError: D_θ > D_y の場合
        DimensionError: newtonでD_θ ≠ D_y の場合
        ConfigError: exactで解析解がない場合
    """
    if sim.d_theta > sim.d_y:
        raise UnderdeterminedError(sim.d_theta, sim.d_y)
    if config.method is OptimizerMethod.NEWTON and sim.d_theta != sim.d_y:
        raise DimensionError("newton needs D_y equal to D_theta", sim.d_theta, sim.d_y)
    if config.method is OptimizerMethod.EXACT and not sim.has_oracles:
        raise ConfigError(f"simulator {sim.name!r} has no analytic optimum/jacobian")


def failed_result(
    sim: SimulatorSpec,
    theta: ArrayLike,
    sim_count: int,
    warm_start: OptimizationResult | None = None,
) -> OptimizationResult:
    """途中で失敗した粒子の結果. ρ = inf なので必ず棄却される."""
    return OptimizationResult(
        theta_opt=as_vector(theta, sim.d_theta, "theta"),
        f_at_opt=np.full(sim.d_y, np.nan),
        discrepancy=np.inf,
        jacobian=np.full((sim.d_y, sim.d_theta), np.nan),
        sim_count=sim_count,
        converged=False,
        stalled=True,
        segment=warm_start.segment + 1 if warm_start is not None else 1,
    )


def optimize(
    sim: SimulatorSpec,
    y: ArrayLike,
    u: ArrayLike,
    kernel: DiscrepancyKernel,
    config: OptimizerConfig,
    stream: ParticleSeedStream,
    *,
    warm_start: OptimizationResult | None = None,
    budget: int | None = None,
    with_jacobian: bool = True,
) -> OptimizationResult:
    """config.methodに応じて最適化手法を選ぶ"""
    match config.method:
        case OptimizerMethod.NEWTON:
            fn = newton_optimize
        case OptimizerMethod.GAUSS_NEWTON:
            fn = gauss_newton_optimize
        case OptimizerMethod.RANDOM_WALK:
            fn = random_walk_optimize
        case OptimizerMethod.EXACT:
            fn = exact_optimize
        case _:
            raise ConfigError(f"unknown optimizer method {config.method!r}")
    return fn(
        sim,
        y,
        u,
        kernel,
        config,
        stream,
        warm_start=warm_start,
        budget=budget,
        with_jacobian=with_jacobian,
    )
