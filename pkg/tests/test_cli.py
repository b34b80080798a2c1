import argparse
import csv
import json
import logging
from pathlib import Path

import pytest
from rich.logging import RichHandler

from omc.cli import EXIT_OK, EXIT_RUNTIME, EXIT_USAGE, build_parser, main, resolve_settings
from omc.config import Algorithm, OptimizerMethod, RunMode
from omc.log import LOGGER_NAME, level_from_verbosity, setup_logging


def run(tmp_path: Path, *flags: str, out: str = "out") -> int:
    return main(["run", *flags, "--out", str(tmp_path / out)])


class TestRun:
    def test_writes_outputs(self, tmp_path: Path) -> None:
        code = run(tmp_path, "--sim", "unknown-mean", "--eps", "0.1,0.01", "--n", "40", "--seed", "3")
        assert code == EXIT_OK
        out = tmp_path / "out"
        assert (out / "particles.csv").exists()
        assert (out / "histogram_theta_1.csv").exists()
        metrics = json.loads((out / "metrics.json").read_text())
        assert metrics["seed"] == 3
        assert metrics["simulator"] == "unknown-mean"
        assert metrics["epsilon"] == 0.01
        assert [r["epsilon"] for r in metrics["rounds"]] == [0.1, 0.01]
        assert metrics["config"]["simulator"]["name"] == "unknown-mean"

    def test_same_seed_same_particles(self, tmp_path: Path) -> None:
        flags = ("--sim", "exponential", "--eps", "0.1", "--n", "30", "--seed", "11")
        assert run(tmp_path, *flags, out="a") == EXIT_OK
        assert run(tmp_path, *flags, out="b") == EXIT_OK
        first = (tmp_path / "a" / "particles.csv").read_bytes()
        assert first == (tmp_path / "b" / "particles.csv").read_bytes()

    def test_thread_workers_match_single_worker(self, tmp_path: Path) -> None:
        flags = ("--sim", "exponential", "--eps", "0.1", "--n", "30", "--seed", "11")
        assert run(tmp_path, *flags, out="a") == EXIT_OK
        assert run(tmp_path, *flags, "--workers", "3", "--backend", "thread", out="b") == EXIT_OK
        first = (tmp_path / "a" / "particles.csv").read_bytes()
        assert first == (tmp_path / "b" / "particles.csv").read_bytes()

    def test_queue_with_random_walk(self, tmp_path: Path) -> None:
        code = run(tmp_path, "--sim", "mg1", "--eps", "30", "--n", "10", "--budget", "300")
        assert code == EXIT_OK
        out = tmp_path / "out"
        metrics = json.loads((out / "metrics.json").read_text())
        assert metrics["config"]["optimizer"]["method"] == "random-walk"
        assert metrics["config"]["optimizer"]["max_sims_per_round"] == 300
        assert (out / "posterior_predictive.csv").exists()
        assert len(list(out.glob("histogram_theta_*.csv"))) == 3

    def test_baselines_run(self, tmp_path: Path) -> None:
        for alg in ("rejection", "smc", "omc-seq"):
            code = run(
                tmp_path, "--sim", "unknown-mean", "--alg", alg, "--eps", "0.5,0.2", "--n", "20", out=alg
            )
            assert code == EXIT_OK
            metrics = json.loads((tmp_path / alg / "metrics.json").read_text())
            assert metrics["algorithm"] == alg

    def test_anytime(self, tmp_path: Path) -> None:
        code = run(
            tmp_path,
            "--sim",
            "unknown-mean",
            "--eps",
            "0.01",
            "--n",
            "20",
            "--mode",
            "anytime",
            "--budget",
            "2000",
        )
        assert code == EXIT_OK
        with (tmp_path / "out" / "particles.csv").open(newline="") as fh:
            rows = list(csv.DictReader(fh))
        assert sum(int(row["sim_count"]) for row in rows) <= 2000

    @pytest.mark.parametrize(
        "flags",
        [
            ("--sim", "nope"),
            ("--sim", "unknown-mean", "--eps", "0.01,0.1"),
            ("--sim", "unknown-mean", "--eps", "abc"),
            ("--sim", "unknown-mean", "--alg", "mcmc"),
            ("--sim", "unknown-mean", "--optimizer", "bfgs"),
            ("--sim", "unknown-mean", "--n", "0"),
            ("--sim", "unknown-mean", "--unknown-flag"),
            ("--sim", "unknown-mean", "--budget", "1"),
            ("--sim", "unknown-mean", "--mode", "anytime", "--budget", "1"),
            ("--sim", "unknown-mean", "--mode", "anytime", "--budget", "100", "--quantum", "1"),
            ("--sim", "mg1", "--budget", "3"),
            (),
        ],
    )
    def test_usage_errors(self, tmp_path: Path, flags: tuple[str, ...]) -> None:
        assert run(tmp_path, *flags) == EXIT_USAGE

    def test_bad_config_file(self, tmp_path: Path) -> None:
        config = tmp_path / "bad.toml"
        config.write_text("[run]\ncolour = 1\n")
        assert run(tmp_path, "--sim", "unknown-mean", "--config", str(config)) == EXIT_USAGE

    def test_empty_posterior_is_a_runtime_error(self, tmp_path: Path) -> None:
        code = run(
            tmp_path, "--sim", "unknown-mean", "--alg", "rejection", "--eps", "1e-9", "--n", "5", "--budget", "1"
        )
        assert code == EXIT_RUNTIME

    def test_missing_subcommand(self) -> None:
        assert main([]) == EXIT_USAGE


class TestCompare:
    def test_rows(self, tmp_path: Path) -> None:
        code = main(
            [
                "compare",
                "--sim",
                "unknown-mean",
                "--algs",
                "omc-seq,rejection",
                "--eps",
                "0.5,0.1",
                "--n",
                "20",
                "--reps",
                "2",
                "--out",
                str(tmp_path),
            ]
        )
        assert code == EXIT_OK
        with (tmp_path / "comparison.csv").open(newline="") as fh:
            summary = list(csv.DictReader(fh))
        with (tmp_path / "comparison_runs.csv").open(newline="") as fh:
            runs = list(csv.DictReader(fh))
        assert len(summary) == 4
        assert len(runs) == 8
        assert {row["reps"] for row in summary} == {"2"}

    def test_needs_two_algorithms(self, tmp_path: Path) -> None:
        code = main(["compare", "--sim", "unknown-mean", "--algs", "omc", "--out", str(tmp_path)])
        assert code == EXIT_USAGE


class TestResolveSettings:
    def parse(self, *flags: str) -> argparse.Namespace:
        return build_parser().parse_args(["run", *flags])

    def test_simulator_defaults(self) -> None:
        settings, sim = resolve_settings(self.parse("--sim", "linked-normal"), environ={})
        assert settings.optimizer.method is OptimizerMethod.GAUSS_NEWTON
        assert settings.epsilons == sim.default_schedule
        assert settings.algorithm is Algorithm.OMC
        assert settings.mode is RunMode.BATCH
        assert settings.workers == 1

    def test_threads_environment_overrides_workers(self) -> None:
        args = self.parse("--sim", "unknown-mean", "--workers", "2")
        settings, _ = resolve_settings(args, environ={"OMC_THREADS": "6"})
        assert settings.workers == 6

    def test_flags_override_config_file(self, tmp_path: Path) -> None:
        config = tmp_path / "run.toml"
        config.write_text(
            '[run]\nsim = "unknown-mean"\nn = 7\neps = "0.5,0.05"\n'
            '[optimizer]\nmethod = "random-walk"\nrw_scale = 0.2\n'
            "[simulator]\nM = 4\n"
        )
        args = self.parse("--config", str(config), "--n", "3")
        settings, sim = resolve_settings(args, environ={})
        assert settings.n == 3
        assert settings.epsilons == (0.5, 0.05)
        assert settings.optimizer.method is OptimizerMethod.RANDOM_WALK
        assert settings.optimizer.rw_scale == 0.2
        assert sim.d_u == 4
        assert settings.simulator_overrides == {"M": 4}

    def test_lotka_volterra_prior_from_config_file(self, tmp_path: Path) -> None:
        config = tmp_path / "lv.toml"
        config.write_text('[simulator]\nprior = "broad"\n')
        args = self.parse("--sim", "lotka-volterra", "--config", str(config))
        _, sim = resolve_settings(args, environ={})
        assert sim.hyperparameters()["log_mean"] == [-2.0, -5.0, -2.0]

    def test_optimizer_flag_beats_config_method(self, tmp_path: Path) -> None:
        config = tmp_path / "run.toml"
        config.write_text('[optimizer]\nmethod = "random-walk"\n')
        args = build_parser().parse_args(
            ["run", "--sim", "unknown-mean", "--config", str(config), "--optimizer", "exact"]
        )
        settings, _ = resolve_settings(args, environ={})
        assert settings.optimizer.method is OptimizerMethod.EXACT


class TestLogging:
    def test_verbosity(self, monkeypatch: pytest.MonkeyPatch) -> None:
        monkeypatch.delenv("OMC_LOG_LEVEL", raising=False)
        assert level_from_verbosity(0) == logging.WARNING
        assert level_from_verbosity(1) == logging.INFO
        assert level_from_verbosity(2) == logging.DEBUG
        assert level_from_verbosity(5) == logging.DEBUG

    def test_environment_level(self, monkeypatch: pytest.MonkeyPatch) -> None:
        monkeypatch.setenv("OMC_LOG_LEVEL", "debug")
        assert level_from_verbosity(0) == logging.DEBUG
        assert level_from_verbosity(1) == logging.INFO
        monkeypatch.setenv("OMC_LOG_LEVEL", "loud")
        assert level_from_verbosity(0) == logging.WARNING

    def test_setup_is_idempotent(self) -> None:
        setup_logging(logging.INFO)
        logger = setup_logging(logging.DEBUG)
        handlers = [h for h in logger.handlers if isinstance(h, RichHandler)]
        assert logger.name == LOGGER_NAME
        assert len(handlers) == 1
        assert handlers[0].level == logging.DEBUG
        assert not logger.propagate
