"""
設定に関わる列挙型と設定ファイルの読み込み
"""

import tomllib
from dataclasses import dataclass, field
from enum import StrEnum
from pathlib import Path
from typing import Any

from omc.errors import ConfigError


class OptimizerMethod(StrEnum):
    """粒子ごとの最適化手法. CLIの`--optimizer`に渡す文字列と同じ."""

    NEWTON = "newton"
    GAUSS_NEWTON = "gauss-newton"
    RANDOM_WALK = "random-walk"
    EXACT = "exact"


class Algorithm(StrEnum):
    OMC = "omc"
    OMC_SEQ = "omc-seq"
    REJECTION = "rejection"
    SMC = "smc"


class RunMode(StrEnum):
    BATCH = "batch"
    ANYTIME = "anytime"


class PoolBackend(StrEnum):
    PROCESS = "process"
    THREAD = "thread"


# 設定ファイルの[run]テーブルで使えるキー. CLIのフラグと一対一に対応する.
RUN_KEYS = frozenset(
    {
        "sim",
        "alg",
        "algs",
        "optimizer",
        "eps",
        "n",
        "seed",
        "workers",
        "mode",
        "budget",
        "out",
        "reps",
        "predictive",
        "backend",
        "quantum",
        "checkpoint_every",
        "wave_size",
    }
)

OPTIMIZER_KEYS = frozenset(
    {
        "method",
        "max_sims_per_round",
        "fd_step",
        "convergence_tol",
        "rw_scale",
        "rw_decay",
        "use_analytic_jacobian",
    }
)


def parse_choice[E: StrEnum](enum_type: type[E], value: str) -> E:
    """文字列を列挙型に変換する. アンダースコアはハイフンと同じに扱う.

    Raises:
        ConfigError: どの値にも一致しない場合
    """
    normalized = value.strip().lower().replace("_", "-")
    for member in enum_type:
        if member.value == normalized:
            return member
    choices = ", ".join(member.value for member in enum_type)
    raise ConfigError(f"unknown {enum_type.__name__} {value!r} (choose from {choices})")


def parse_epsilons(value: str | float | list[float] | tuple[float, ...]) -> tuple[float, ...]:
    """`0.1,0.01`のようなカンマ区切りのε列を読む"""
    if isinstance(value, (int, float)):
        items: list[Any] = [value]
    elif isinstance(value, str):
        items = [item for item in value.split(",") if item.strip()]
    else:
        items = list(value)
    try:
        epsilons = tuple(float(item) for item in items)
    except ValueError as exc:
        raise ConfigError(f"malformed epsilon list {value!r}") from exc
    if not epsilons:
        raise ConfigError("epsilon list is empty")
    return epsilons


@dataclass(frozen=True)
class FileConfig:
    """TOML設定ファイルの中身

    Attributes:
        run (dict[str, Any]): [run]テーブル. CLIフラグと同じキー
        optimizer (dict[str, Any]): [optimizer]テーブル. OptimizerConfigのフィールド
        simulator (dict[str, Any]): [simulator]テーブル. シミュレータ生成関数のキーワード引数
    """

    run: dict[str, Any] = field(default_factory=dict)
    optimizer: dict[str, Any] = field(default_factory=dict)
    simulator: dict[str, Any] = field(default_factory=dict)


def load_config_file(path: Path) -> FileConfig:
    """TOMLの設定ファイルを読み込み、未知のキーがないか確認する"""
    try:
        with path.open("rb") as fh:
            raw = tomllib.load(fh)
    except OSError as exc:
        raise ConfigError(f"cannot read config file {path}: {exc}") from exc
    except tomllib.TOMLDecodeError as exc:
        raise ConfigError(f"malformed config file {path}: {exc}") from exc

    unknown_tables = set(raw) - {"run", "optimizer", "simulator"}
    if unknown_tables:
        raise ConfigError(f"unknown config tables: {sorted(unknown_tables)}")
    run = dict(raw.get("run", {}))
    optimizer = dict(raw.get("optimizer", {}))
    simulator = dict(raw.get("simulator", {}))
    for table, allowed, name in (
        (run, RUN_KEYS, "run"),
        (optimizer, OPTIMIZER_KEYS, "optimizer"),
    ):
        unknown = set(table) - allowed
        if unknown:
            raise ConfigError(f"unknown keys in [{name}]: {sorted(unknown)}")
    return FileConfig(run=run, optimizer=optimizer, simulator=simulator)
