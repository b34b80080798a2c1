"""
結果のファイル出力

- particles.csv: 粒子ごとの行
- metrics.json: ESS, SSなどの指標と、解決済みの設定
- histogram_<param>.csv: パラメータごとの重み付きヒストグラム
- posterior_predictive.csv: f(θ*, u)の重み付き平均と標準偏差
- comparison.csv / comparison_runs.csv: 複数アルゴリズムの比較

CSVとJSONは同じ入力から同じバイト列になるように書く. metrics.jsonのtimestampだけは例外.
"""

import csv
import json
import logging
from collections.abc import Iterable, Mapping, Sequence
from dataclasses import dataclass
from datetime import datetime, timezone
from pathlib import Path
from typing import Any

import numpy as np

from omc.core import FloatArray, WeightedEnsemble, ess
from omc.errors import DivergentSimulationError, SupportError
from omc.simulators import SimulatorSpec

logger = logging.getLogger(__name__)

HISTOGRAM_BINS = 100
HISTOGRAM_RANGE = (0.001, 0.999)


def _fmt(value: float) -> str:
    return repr(float(value))


def particle_header(d_theta: int) -> list[str]:
    return [
        "index",
        "accepted",
        "discrepancy",
        "sim_count",
        "weight",
        *(f"theta_{d + 1}" for d in range(d_theta)),
        *(f"theta_star_{d + 1}" for d in range(d_theta)),
    ]


def write_particles(ensemble: WeightedEnsemble, path: Path) -> None:
    with path.open("w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(particle_header(ensemble.d_theta))
        for i, (particle, weight) in enumerate(
            zip(ensemble.particles, ensemble.normalized_weights, strict=True)
        ):
            writer.writerow(
                [
                    i,
                    int(particle.accepted),
                    _fmt(particle.discrepancy),
                    particle.sim_count,
                    _fmt(weight),
                    *(_fmt(v) for v in particle.theta_opt),
                    *(_fmt(v) for v in particle.theta_star),
                ]
            )


def weighted_histogram(
    values: FloatArray, weights: FloatArray, bins: int = HISTOGRAM_BINS
) -> tuple[FloatArray, FloatArray]:
    """重み付き0.1〜99.9パーセンタイルの範囲をbins等分した密度. (密度, ビンの端)を返す."""
    mask = weights > 0
    values, weights = values[mask], weights[mask]
    lo, hi = np.quantile(values, HISTOGRAM_RANGE, weights=weights, method="inverted_cdf")
    if not hi > lo:
        # 点質量. 幅を持たせて積分が1になるようにする
        pad = max(abs(lo) * 1e-6, 1e-12)
        lo, hi = lo - pad, hi + pad
    density, edges = np.histogram(values, bins=bins, range=(lo, hi), weights=weights, density=True)
    return np.asarray(density, dtype=np.float64), np.asarray(edges, dtype=np.float64)


def write_histograms(
    ensemble: WeightedEnsemble, out_dir: Path, names: Sequence[str] | None = None
) -> list[Path]:
    names = names or [f"theta_{d + 1}" for d in range(ensemble.d_theta)]
    paths = []
    for d, name in enumerate(names):
        density, edges = weighted_histogram(
            ensemble.theta_star[:, d], np.asarray(ensemble.normalized_weights)
        )
        path = out_dir / f"histogram_{name}.csv"
        with path.open("w", newline="") as fh:
            writer = csv.writer(fh, lineterminator="\n")
            writer.writerow(["bin_left", "bin_right", "density"])
            for left, right, value in zip(edges[:-1], edges[1:], density, strict=True):
                writer.writerow([_fmt(left), _fmt(right), _fmt(value)])
        paths.append(path)
    return paths


def posterior_predictive(
    ensemble: WeightedEnsemble, sim: SimulatorSpec
) -> tuple[FloatArray, FloatArray]:
    """f(θ*_i, u_i) の重み付き平均と標準偏差. 失敗したシミュレーションは除いて重みを正規化し直す."""
    weights = np.asarray(ensemble.normalized_weights)
    outputs = np.full((ensemble.n, sim.d_y), np.nan)
    for i, particle in enumerate(ensemble.particles):
        if weights[i] == 0.0:
            continue
        try:
            outputs[i] = sim.forward(particle.theta_star, particle.seed)
        except (DivergentSimulationError, SupportError) as exc:
            logger.debug("posterior predictive failed at particle %d: %s", i, exc)
    usable = (weights > 0) & np.all(np.isfinite(outputs), axis=1)
    w = weights[usable] / weights[usable].sum()
    mean = w @ outputs[usable]
    std = np.sqrt(w @ (outputs[usable] - mean) ** 2)
    return np.asarray(mean, dtype=np.float64), np.asarray(std, dtype=np.float64)


def write_posterior_predictive(ensemble: WeightedEnsemble, sim: SimulatorSpec, path: Path) -> None:
    mean, std = posterior_predictive(ensemble, sim)
    with path.open("w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["statistic", "observed", "mean", "std"])
        for k, (obs, m, s) in enumerate(zip(sim.observed, mean, std, strict=True)):
            writer.writerow([k + 1, _fmt(obs), _fmt(m), _fmt(s)])


def ensemble_metrics(ensemble: WeightedEnsemble) -> dict[str, Any]:
    """particles.csvの列だけから計算し直せる指標"""
    ci = ensemble.credible_interval(0.95)
    return {
        "n": ensemble.n,
        "ess": ess(ensemble.normalized_weights),
        "ess_over_n": ensemble.ess_over_n,
        "ss_mean": ensemble.ss_mean,
        "acceptance_fraction": ensemble.acceptance_fraction,
        "epsilon": ensemble.epsilon,
        "posterior_mean": ensemble.mean().tolist(),
        "posterior_std": np.sqrt(ensemble.variance()).tolist(),
        "credible_95": ci.T.tolist(),
    }


def build_metrics(
    rounds: Sequence[WeightedEnsemble],
    *,
    algorithm: str,
    simulator: str,
    seed: int,
    config: Mapping[str, Any],
) -> dict[str, Any]:
    """最後のラウンドの指標を上に、ラウンドごとの指標をroundsに並べる"""
    final = ensemble_metrics(rounds[-1])
    return {
        **final,
        "seed": seed,
        "algorithm": algorithm,
        "simulator": simulator,
        "rounds": [ensemble_metrics(ensemble) for ensemble in rounds],
        "config": dict(config),
        "timestamp": datetime.now(timezone.utc).isoformat(timespec="seconds"),
    }


def _json_default(value: Any) -> Any:
    if isinstance(value, np.ndarray):
        return value.tolist()
    if isinstance(value, np.generic):
        return value.item()
    if isinstance(value, Path):
        return str(value)
    raise TypeError(f"cannot serialize {type(value).__name__}")


def emit_outputs(
    rounds: Sequence[WeightedEnsemble],
    metrics: Mapping[str, Any],
    out_dir: Path,
    *,
    sim: SimulatorSpec | None = None,
    predictive: bool = False,
) -> list[Path]:
    """最後のラウンドのアンサンブルと指標をout_dirに書き出し、書いたファイルの一覧を返す

    Raises:
        OSError: ディレクトリを作れない、または書き込めない場合
    """
    out_dir.mkdir(parents=True, exist_ok=True)
    final = rounds[-1]
    particles_path = out_dir / "particles.csv"
    write_particles(final, particles_path)
    metrics_path = out_dir / "metrics.json"
    metrics_path.write_text(
        json.dumps(metrics, indent=2, sort_keys=True, default=_json_default) + "\n"
    )
    written = [particles_path, metrics_path, *write_histograms(final, out_dir)]
    if predictive and sim is not None:
        path = out_dir / "posterior_predictive.csv"
        write_posterior_predictive(final, sim, path)
        written.append(path)
    return written


@dataclass(frozen=True)
class RunRecord:
    """比較の1回分 (アルゴリズム, ε, 繰り返し番号) の結果"""

    algorithm: str
    epsilon: float
    repetition: int
    ss_mean: float
    ess_over_n: float
    acceptance_fraction: float


def write_comparison(records: Iterable[RunRecord], out_dir: Path) -> tuple[Path, Path]:
    """comparison_runs.csv (1回ごと) と comparison.csv (平均と標準偏差) を書く

    アルゴリズムとεの組は最初に現れた順に並べる.
    """
    out_dir.mkdir(parents=True, exist_ok=True)
    records = list(records)
    runs_path = out_dir / "comparison_runs.csv"
    with runs_path.open("w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(
            ["algorithm", "epsilon", "repetition", "ss_mean", "ess_over_n", "acceptance_fraction"]
        )
        for r in records:
            writer.writerow(
                [
                    r.algorithm,
                    _fmt(r.epsilon),
                    r.repetition,
                    _fmt(r.ss_mean),
                    _fmt(r.ess_over_n),
                    _fmt(r.acceptance_fraction),
                ]
            )

    groups: dict[tuple[str, float], list[RunRecord]] = {}
    for r in records:
        groups.setdefault((r.algorithm, r.epsilon), []).append(r)
    summary_path = out_dir / "comparison.csv"
    with summary_path.open("w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(
            ["algorithm", "epsilon", "reps", "ss_mean", "ss_std", "ess_over_n_mean", "ess_over_n_std"]
        )
        for (algorithm, epsilon), group in groups.items():
            ss = np.array([r.ss_mean for r in group])
            ess_n = np.array([r.ess_over_n for r in group])
            writer.writerow(
                [
                    algorithm,
                    _fmt(epsilon),
                    len(group),
                    _fmt(ss.mean()),
                    _fmt(ss.std(ddof=1) if len(group) > 1 else 0.0),
                    _fmt(ess_n.mean()),
                    _fmt(ess_n.std(ddof=1) if len(group) > 1 else 0.0),
                ]
            )
    return summary_path, runs_path
