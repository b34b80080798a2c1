"""
コマンドラインのフロントエンド

    omc run --sim unknown-mean --alg omc --eps 0.1,0.01 --n 5000 --seed 42
    omc compare --sim exponential --algs omc-seq,smc --reps 5

設定の優先順位は フラグ > 設定ファイル([run], [optimizer], [simulator]) >
シミュレータの既定値 > ライブラリの既定値. OMC_THREADSはワーカー数を上書きする.
"""

import argparse
import logging
import os
from collections.abc import Callable, Iterator, Sequence
from contextlib import contextmanager
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path
from typing import Any

from rich.console import Console
from rich.progress import BarColumn, MofNCompleteColumn, Progress, TextColumn, TimeElapsedColumn
from rich.table import Table

from omc.baselines import EpsilonSchedule, rejection_abc, sequential_omc, smc_abc_rounds
from omc.config import (
    OPTIMIZER_KEYS,
    Algorithm,
    FileConfig,
    OptimizerMethod,
    PoolBackend,
    RunMode,
    load_config_file,
    parse_choice,
    parse_epsilons,
)
from omc.core import DiscrepancyKernel, WeightedEnsemble
from omc.errors import ConfigError, OMCError
from omc.log import level_from_verbosity, setup_logging
from omc.optimize import OptimizerConfig, minimum_budget
from omc.outputs import RunRecord, build_metrics, emit_outputs, write_comparison
from omc.parallel import ProgressCallback, ProgressEvent, RunPlan, run_anytime, run_batch
from omc.simulators import SimulatorSpec, make_simulator

logger = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_RUNTIME = 1
EXIT_USAGE = 2

DEFAULT_OUT = Path("omc_out")
DEFAULT_REPS = 5
DEFAULT_ALGS = (Algorithm.OMC_SEQ, Algorithm.SMC)
ALWAYS_PREDICTIVE = frozenset({"lotka-volterra", "mg1"})


@dataclass(frozen=True)
class RunSettings:
    """フラグと設定ファイルを合わせた、実行に使う設定"""

    sim: str
    algorithm: Algorithm
    epsilons: tuple[float, ...]
    n: int
    seed: int
    workers: int
    mode: RunMode
    budget: int | None
    out: Path
    optimizer: OptimizerConfig
    simulator_overrides: dict[str, Any] = field(default_factory=dict)
    algorithms: tuple[Algorithm, ...] = DEFAULT_ALGS
    reps: int = DEFAULT_REPS
    predictive: bool = False
    backend: PoolBackend = PoolBackend.PROCESS
    quantum: int = 25
    checkpoint_every: int = 100
    wave_size: int = 16

    def describe(self) -> dict[str, Any]:
        data = {f.name: getattr(self, f.name) for f in fields(self) if f.name != "optimizer"}
        data["optimizer"] = asdict(self.optimizer)
        data["out"] = str(self.out)
        return data


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="omc", description="Optimization Monte Carlo likelihood-free inference"
    )
    subparsers = parser.add_subparsers(dest="command", required=True)

    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--sim", help="simulator name")
    common.add_argument("--optimizer", help="newton, gauss-newton, random-walk or exact")
    common.add_argument("--eps", help="comma separated decreasing epsilon schedule")
    common.add_argument("--n", type=int, help="number of particles")
    common.add_argument("--seed", type=int, help="master seed")
    common.add_argument("--workers", type=int, help="worker count (OMC_THREADS overrides)")
    common.add_argument("--mode", help="batch or anytime")
    common.add_argument(
        "--budget",
        type=int,
        help="simulations per particle per round (anytime: total simulations)",
    )
    common.add_argument("--out", type=Path, help="output directory")
    common.add_argument("--config", type=Path, help="TOML config file")
    common.add_argument("--backend", help="process or thread")
    common.add_argument("--quantum", type=int, help="anytime work quantum")
    common.add_argument("--checkpoint-every", type=int, help="anytime snapshot cadence")
    common.add_argument("--wave-size", type=int, help="anytime particles per wave")
    common.add_argument("-v", "--verbose", action="count", default=0)

    run = subparsers.add_parser("run", parents=[common], help="run one algorithm")
    run.add_argument("--alg", help="omc, omc-seq, rejection or smc")
    run.add_argument(
        "--predictive",
        action="store_true",
        default=None,
        help="also write posterior_predictive.csv",
    )

    compare = subparsers.add_parser("compare", parents=[common], help="compare algorithms")
    compare.add_argument("--algs", help="comma separated algorithms (at least two)")
    compare.add_argument("--reps", type=int, help="repetitions (seed, seed+1, ...)")
    return parser


def _integer(name: str, value: Any) -> int:
    if isinstance(value, bool):
        raise ConfigError(f"{name} must be an integer, got {value!r}")
    try:
        return int(value)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"{name} must be an integer, got {value!r}") from exc


def _positive(name: str, value: Any) -> int:
    number = _integer(name, value)
    if number < 1:
        raise ConfigError(f"{name} must be positive, got {number}")
    return number


def _optimizer_config(
    file_optimizer: dict[str, Any], method: OptimizerMethod
) -> OptimizerConfig:
    unknown = set(file_optimizer) - OPTIMIZER_KEYS
    if unknown:
        raise ConfigError(f"unknown optimizer settings: {sorted(unknown)}")
    values = {k: v for k, v in file_optimizer.items() if k != "method"}
    try:
        return OptimizerConfig(method=method, **values)
    except TypeError as exc:
        raise ConfigError(f"bad optimizer settings: {exc}") from exc


def resolve_settings(
    args: argparse.Namespace, environ: dict[str, str] | None = None
) -> tuple[RunSettings, SimulatorSpec]:
    """フラグ、設定ファイル、既定値から設定を決め、シミュレータをつくる

    Raises:
        ConfigError: 名前や値が不正な場合
    """
    environ = dict(os.environ) if environ is None else environ
    file_config = load_config_file(args.config) if args.config else FileConfig()
    run_table = file_config.run

    def pick(flag: str, default: Any = None) -> Any:
        value = getattr(args, flag, None)
        if value is None:
            value = run_table.get(flag)
        return default if value is None else value

    sim_name = pick("sim")
    if sim_name is None:
        raise ConfigError("no simulator given (use --sim or [run] sim)")
    sim = make_simulator(str(sim_name), **file_config.simulator)

    method_value = pick("optimizer") or file_config.optimizer.get("method")
    method = (
        parse_choice(OptimizerMethod, str(method_value))
        if method_value
        else sim.default_optimizer
    )
    optimizer = _optimizer_config(file_config.optimizer, method)

    eps_value = pick("eps")
    epsilons = parse_epsilons(eps_value) if eps_value is not None else sim.default_schedule
    EpsilonSchedule(epsilons)

    workers = _positive("workers", pick("workers", 1))
    if environ.get("OMC_THREADS"):
        workers = _positive("OMC_THREADS", environ["OMC_THREADS"])

    budget_value = pick("budget")
    budget = _positive("budget", budget_value) if budget_value is not None else None

    algs_value = pick("algs")
    if algs_value is None:
        algorithms = DEFAULT_ALGS
    else:
        items = algs_value.split(",") if isinstance(algs_value, str) else list(algs_value)
        algorithms = tuple(parse_choice(Algorithm, str(a)) for a in items if str(a).strip())

    settings = RunSettings(
        sim=sim.name,
        algorithm=parse_choice(Algorithm, str(pick("alg", Algorithm.OMC))),
        epsilons=epsilons,
        n=_positive("n", pick("n", 1000)),
        seed=_integer("seed", pick("seed", 0)),
        workers=workers,
        mode=parse_choice(RunMode, str(pick("mode", RunMode.BATCH))),
        budget=budget,
        out=Path(pick("out", DEFAULT_OUT)),
        optimizer=optimizer,
        simulator_overrides=dict(file_config.simulator),
        algorithms=algorithms,
        reps=_positive("reps", pick("reps", DEFAULT_REPS)),
        predictive=bool(pick("predictive")) or sim.name in ALWAYS_PREDICTIVE,
        backend=parse_choice(PoolBackend, str(pick("backend", PoolBackend.PROCESS))),
        quantum=_positive("quantum", pick("quantum", 25)),
        checkpoint_every=_positive(
            "checkpoint_every", pick("checkpoint_every", 100)
        ),
        wave_size=_positive("wave_size", pick("wave_size", 16)),
    )
    command = getattr(args, "command", "run")
    algorithms = settings.algorithms if command == "compare" else (settings.algorithm,)
    _check_budgets(settings, sim, algorithms)
    return settings, sim


def _per_particle_budget(settings: RunSettings) -> int:
    if settings.budget is not None and settings.mode is RunMode.BATCH:
        return settings.budget
    return settings.optimizer.max_sims_per_round


def _total_budget(settings: RunSettings) -> int:
    return settings.budget or settings.n * _per_particle_budget(settings)


def _check_budgets(
    settings: RunSettings, sim: SimulatorSpec, algorithms: Sequence[Algorithm]
) -> None:
    """最適化するアルゴリズムでは、粒子ひとつを初期化できる予算が要る"""
    if not {Algorithm.OMC, Algorithm.OMC_SEQ} & set(algorithms):
        return
    needed = minimum_budget(sim)
    batch_budget = settings.mode is RunMode.BATCH and settings.budget is not None
    per_particle = "budget" if batch_budget else "max_sims_per_round"
    budgets = {per_particle: _per_particle_budget(settings)}
    if settings.mode is RunMode.ANYTIME and Algorithm.OMC in algorithms:
        budgets |= {"quantum": settings.quantum, "total budget": _total_budget(settings)}
    for name, value in budgets.items():
        if value < needed:
            raise ConfigError(
                f"{name}={value} is below the minimum {needed} simulations "
                f"for {sim.name} (D_theta={sim.d_theta})"
            )


def run_algorithm(
    settings: RunSettings,
    sim: SimulatorSpec,
    algorithm: Algorithm,
    seed: int,
    progress: ProgressCallback | None = None,
) -> list[WeightedEnsemble]:
    """ひとつのアルゴリズムを実行し、εごとのアンサンブルを返す"""
    schedule = EpsilonSchedule(settings.epsilons)
    scale = sim.default_scale
    y = sim.observed
    per_particle = _per_particle_budget(settings)
    optimizer = replace(settings.optimizer, max_sims_per_round=per_particle)
    plan = RunPlan(
        master_seed=seed,
        n_particles=settings.n,
        n_workers=settings.workers,
        mode=settings.mode,
        total_sim_budget=(
            _total_budget(settings)
            if settings.mode is RunMode.ANYTIME
            else None
        ),
        per_particle_budget=per_particle,
        backend=settings.backend,
        quantum=settings.quantum,
        checkpoint_every=settings.checkpoint_every,
        wave_size=settings.wave_size,
    )

    match algorithm:
        case Algorithm.OMC if settings.mode is RunMode.ANYTIME:
            kernel = DiscrepancyKernel(schedule.final, scale)
            snapshots = list(run_anytime(plan, sim, y, kernel, optimizer, progress=progress))
            logger.info("anytime run emitted %d snapshots", len(snapshots))
            return [snapshots[-1]]
        case Algorithm.OMC:
            return [
                run_batch(plan, sim, y, DiscrepancyKernel(eps, scale), optimizer, progress=progress)
                for eps in schedule
            ]
        case Algorithm.OMC_SEQ:
            return sequential_omc(
                sim,
                y,
                schedule,
                settings.n,
                optimizer,
                master_seed=seed,
                n_workers=settings.workers,
                backend=settings.backend,
                scale=scale,
                progress=progress,
            )
        case Algorithm.REJECTION:
            return [
                rejection_abc(
                    sim,
                    y,
                    DiscrepancyKernel(eps, scale),
                    settings.n,
                    settings.n * per_particle,
                    master_seed=seed,
                    n_workers=settings.workers,
                    backend=settings.backend,
                    progress=progress,
                )
                for eps in schedule
            ]
        case Algorithm.SMC:
            return smc_abc_rounds(
                sim,
                y,
                schedule,
                settings.n,
                per_particle,
                master_seed=seed,
                n_workers=settings.workers,
                backend=settings.backend,
                scale=scale,
                progress=progress,
            )
    raise ConfigError(f"unknown algorithm {algorithm!r}")


@contextmanager
def progress_bar(console: Console, description: str) -> Iterator[Callable[[ProgressEvent], None]]:
    """ProgressEventを受け取ってrichのバーを進めるコールバック"""
    with Progress(
        TextColumn("[bold blue]{task.description}"),
        BarColumn(),
        MofNCompleteColumn(),
        TextColumn("worst ρ {task.fields[worst]}"),
        TimeElapsedColumn(),
        console=console,
        transient=True,
    ) as progress:
        task = progress.add_task(description, total=None, worst="-")

        def advance(event: ProgressEvent) -> None:
            progress.update(task, advance=1, worst=f"{event.discrepancy:.3g}")

        yield advance


def _summary_table(title: str, rounds: Sequence[WeightedEnsemble]) -> Table:
    table = Table(title=title)
    for column in ("epsilon", "n", "accepted", "ESS/n", "SS", "posterior mean"):
        table.add_column(column, justify="right")
    for ensemble in rounds:
        table.add_row(
            f"{ensemble.epsilon:g}",
            str(ensemble.n),
            f"{ensemble.acceptance_fraction:.3f}",
            f"{ensemble.ess_over_n:.3f}",
            f"{ensemble.ss_mean:.2f}",
            ", ".join(f"{v:.4g}" for v in ensemble.mean()),
        )
    return table


def run_command(args: argparse.Namespace, console: Console) -> int:
    settings, sim = resolve_settings(args)
    with progress_bar(console, f"{settings.algorithm} on {sim.name}") as advance:
        rounds = run_algorithm(settings, sim, settings.algorithm, settings.seed, advance)
    config = settings.describe()
    config["simulator"] = sim.describe()
    metrics = build_metrics(
        rounds,
        algorithm=str(settings.algorithm),
        simulator=sim.name,
        seed=settings.seed,
        config=config,
    )
    written = emit_outputs(rounds, metrics, settings.out, sim=sim, predictive=settings.predictive)
    console.print(_summary_table(f"{settings.algorithm} / {sim.name}", rounds))
    console.print(f"wrote {len(written)} files to {settings.out}")
    return EXIT_OK


def compare_command(args: argparse.Namespace, console: Console) -> int:
    settings, sim = resolve_settings(args)
    if len(settings.algorithms) < 2:
        raise ConfigError("compare needs at least two algorithms (use --algs)")
    records: list[RunRecord] = []
    for algorithm in settings.algorithms:
        for rep in range(settings.reps):
            seed = settings.seed + rep
            with progress_bar(console, f"{algorithm} rep {rep + 1}/{settings.reps}") as advance:
                rounds = run_algorithm(settings, sim, algorithm, seed, advance)
            records.extend(
                RunRecord(
                    algorithm=str(algorithm),
                    epsilon=ensemble.epsilon,
                    repetition=rep,
                    ss_mean=ensemble.ss_mean,
                    ess_over_n=ensemble.ess_over_n,
                    acceptance_fraction=ensemble.acceptance_fraction,
                )
                for ensemble in rounds
            )
    summary, runs = write_comparison(records, settings.out)

    table = Table(title=f"comparison on {sim.name}")
    for column in ("algorithm", "epsilon", "rep", "SS", "ESS/n"):
        table.add_column(column, justify="right")
    for r in records:
        table.add_row(
            r.algorithm, f"{r.epsilon:g}", str(r.repetition), f"{r.ss_mean:.2f}", f"{r.ess_over_n:.3f}"
        )
    console.print(table)
    console.print(f"wrote {summary} and {runs}")
    return EXIT_OK


def main(argv: Sequence[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return exc.code if isinstance(exc.code, int) else EXIT_USAGE
    setup_logging(level_from_verbosity(args.verbose))
    console = Console()
    error_console = Console(stderr=True)
    commands = {"run": run_command, "compare": compare_command}
    try:
        return commands[args.command](args, console)
    except ConfigError as exc:
        error_console.print(f"[red]error:[/red] {exc}")
        return EXIT_USAGE
    except (OMCError, OSError) as exc:
        error_console.print(f"[red]error:[/red] {exc}")
        return EXIT_RUNTIME
