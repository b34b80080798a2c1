"""
omcが意図的に送出する例外

すべてOMCErrorを根に持つ。組み込みの分類(ValueErrorなど)に当てはまるものは
そちらも継承しているので、呼び出し側は`except ValueError`でも捕まえられる。
"""


class OMCError(Exception):
    """omcの例外の基底クラス"""


class DimensionError(OMCError, ValueError):
    """ベクトルや行列の長さが合わない"""

    def __init__(self, what: str, expected: int, got: int) -> None:
        super().__init__(f"{what}: expected length {expected}, got {got}")
        self.expected = expected
        self.got = got


class SupportError(OMCError, ValueError):
    """パラメータが事前分布(またはシミュレータの定義域)の外にある"""


class QuantileError(OMCError, ValueError):
    """一様乱数が逆CDFの無限大になる端点にある"""


class NormalizationError(OMCError, ValueError):
    """重みの和が1になっていない"""


class ConfigError(OMCError, ValueError):
    """設定ファイルやフラグの値が不正"""


class DivergentSimulationError(OMCError, ArithmeticError):
    """シミュレータの状態が有限でなくなった(個体数の発散など)"""


class SimulationFailedError(OMCError, ArithmeticError):
    """最適化の途中でシミュレータが想定外の数値エラーを出した

    sim_countは失敗した呼び出しを含む、その最適化で使ったシミュレーション回数.
    """

    def __init__(self, sim_count: int, message: str) -> None:
        super().__init__(f"simulator failed after {sim_count} calls: {message}")
        self.sim_count = sim_count


class JacobianError(OMCError, ArithmeticError):
    """差分ヤコビアンの列が有限でない"""

    def __init__(self, column: int, message: str = "") -> None:
        super().__init__(
            f"finite-difference column {column} is not finite"
            + (f" ({message})" if message else "")
        )
        self.column = column


class SingularJacobianError(OMCError, ArithmeticError):
    """正則化してもJᵀJがランク落ちしている"""


class UnderdeterminedError(OMCError, ValueError):
    """D_θ > D_y のときは解が多様体になり、手続きが適用できない"""

    def __init__(self, d_theta: int, d_y: int) -> None:
        super().__init__(
            f"underdetermined: procedure does not apply (D_theta={d_theta} > D_y={d_y})"
        )
        self.d_theta = d_theta
        self.d_y = d_y


class EmptyPosteriorError(OMCError, RuntimeError):
    """受理された粒子がひとつもない"""

    def __init__(self, epsilon: float, best_discrepancy: float | None = None) -> None:
        message = f"empty posterior: no particle reached discrepancy <= epsilon={epsilon:g}"
        if best_discrepancy is not None:
            message += f" (best discrepancy seen {best_discrepancy:g})"
        message += "; try a larger epsilon"
        super().__init__(message)
        self.epsilon = epsilon
        self.best_discrepancy = best_discrepancy


class PopulationCollapseError(OMCError, RuntimeError):
    """SMCの粒子集団のESSが2を下回った"""
