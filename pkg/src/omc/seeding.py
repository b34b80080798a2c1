"""
粒子ごとの乱数ストリーム

(master_seed, scope, particle_index, label) だけから numpy の SeedSequence を
組み立てる. ワーカーの数や実行順序には依存しないので、1ワーカーでも8ワーカーでも
同じ乱数が出る.
"""

from dataclasses import dataclass

import numpy as np

from omc.core import FloatArray

_SEPARATOR = ord(":")


def _key(text: str) -> tuple[int, ...]:
    return tuple(map(ord, text))


@dataclass(frozen=True)
class ParticleSeedStream:
    """ひとつの粒子の乱数ストリーム群

    labelごとに独立したGeneratorを返す. 使うlabelは
    "u"(シミュレータの乱数)、"init"(最適化の初期値)、"proposal"(ランダムウォークの提案)など.

    Attributes:
        master_seed (int): 実行全体のシード
        particle_index (int): 粒子の番号
        scope (str): アルゴリズムやラウンドの名前空間. ":"を含まないこと
    """

    master_seed: int
    particle_index: int
    scope: str = "omc"

    def __post_init__(self) -> None:
        if self.master_seed < 0 or self.particle_index < 0:
            raise ValueError("master_seed and particle_index must be nonnegative")
        if ":" in self.scope:
            raise ValueError("scope must not contain ':'")

    def seed_sequence(self, label: str, *counters: int) -> np.random.SeedSequence:
        spawn_key = (
            *_key(self.scope),
            _SEPARATOR,
            self.particle_index,
            _SEPARATOR,
            *_key(label),
            _SEPARATOR,
            *counters,
        )
        return np.random.SeedSequence(self.master_seed, spawn_key=spawn_key)

    def generator(self, label: str, *counters: int) -> np.random.Generator:
        return np.random.Generator(np.random.PCG64(self.seed_sequence(label, *counters)))

    def uniforms(self, size: int) -> FloatArray:
        """シミュレータに渡すu"""
        return self.generator("u").random(size)
