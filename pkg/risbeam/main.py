"""Command-line entry point: train, evaluate, sweep or self-test."""

import argparse
import csv
import json
import logging
import sys
from pathlib import Path
from typing import List, Optional, Sequence

import numpy as np

from risbeam import __version__
from risbeam.channel import gen_geometry, load_geometry, noise_reference, save_geometry
from risbeam.config import ExperimentConfig, dump_manifest, load_config
from risbeam.errors import ConfigError, RisbeamError, UsageError
from risbeam.evaluation import (
    SCHEMES,
    EvalReport,
    SweepRunner,
    evaluate,
    exact_outage,
    prepare_system,
    task_rng,
    train_scheme,
    write_eval_csv,
    write_summary_csv,
    write_sweep_csv,
)
from risbeam.selftest import run_selftest
from risbeam.surrogate import BeamformingState


logger = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_RUNTIME = 1
EXIT_CONFIG = 2
EXACT_PATH_LIMIT = 12


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="risbeam",
        description="Robust RIS-aided mmWave hybrid beamforming under random blockages",
    )
    parser.add_argument("--config", default="config/config.yaml", help="YAML configuration file")
    parser.add_argument("--mode", choices=["train", "eval", "sweep", "selftest"], help="run mode")
    parser.add_argument("--seed", type=int, help="master seed")
    parser.add_argument("--out", help="output directory")
    parser.add_argument("--threads", type=int, help="worker threads for sweeps")
    parser.add_argument("--set", dest="overrides", action="append", default=[], metavar="KEY=VALUE",
                        help="override a configuration value, e.g. stop.t_max=2000")
    return parser


def cli_overrides(args: argparse.Namespace) -> List[str]:
    """Flags become dotted overrides so the manifest records them."""
    overrides = list(args.overrides)
    if args.mode is not None:
        overrides.append(f"experiment.mode={args.mode}")
    if args.seed is not None:
        overrides.append(f"experiment.seed={args.seed}")
    if args.out is not None:
        overrides.append(f"experiment.output_dir={json.dumps(args.out)}")
    if args.threads is not None:
        overrides.append(f"experiment.threads={args.threads}")
    return overrides


class ExperimentRunner:
    """Runs one mode of an experiment and writes its artifacts."""

    def __init__(self, config: ExperimentConfig, event_callback=None):
        self.logger = logging.getLogger(__name__)
        self.config = config
        self.settings = config.experiment
        self.output_dir = Path(self.settings.output_dir)
        self.event_callback = event_callback
        self.run_info = {"seed": self.settings.seed, "code_version": __version__, "artifacts": []}

    def _artifact(self, name: str) -> Path:
        path = self.output_dir / name
        path.parent.mkdir(parents=True, exist_ok=True)
        self.run_info["artifacts"].append(str(Path(name)))
        return path

    def _geometry(self):
        if self.settings.geometry_file:
            return load_geometry(self.settings.geometry_file)
        return gen_geometry(self.config.system, task_rng(self.settings.seed, 0, 0))

    def _with_exact(self, report: EvalReport, state, geo, system, noise) -> EvalReport:
        if geo.n_paths_bu <= EXACT_PATH_LIMIT:
            report.exact_outage, report.exact_eff_rate = exact_outage(state, geo, system, noise)
            self.logger.info(
                f"{report.scheme}: monte carlo outage {np.round(report.outage, 4).tolist()}, "
                f"exact {np.round(report.exact_outage, 4).tolist()}"
            )
        return report

    def train(self) -> int:
        seed = self.settings.seed
        geo = self._geometry()
        save_geometry(geo, self._artifact("geometry.yaml"))
        system, geo, noise, scale = prepare_system(self.config, geo)
        self.run_info["noise_scale"] = scale

        trained = train_scheme("bsgd_robust", self.config, system, geo, noise, task_rng(seed, 0, 1, 0),
                               event_callback=self.event_callback)
        trained.trace.to_csv(self._artifact("trace.csv"))
        trained.state.save(self._artifact("state.npz"))
        report = evaluate(trained.state, trained.geo, trained.config, self.settings.n_trials,
                          task_rng(seed, 0, 2), noise=noise, seed=seed, scheme=trained.scheme)
        self._with_exact(report, trained.state, trained.geo, trained.config, noise)
        write_eval_csv([report], self._artifact("eval.csv"))
        self.logger.info(
            f"Trained in {trained.trace.iterations} iterations: outage {report.outage_avg:.4f}, "
            f"effective sum rate {report.eff_sum_rate:.4f} bit/s/Hz"
        )
        return EXIT_OK

    def eval(self) -> int:
        """Evaluate a saved state, or train and evaluate every scheme when none is given."""
        seed = self.settings.seed
        geo = self._geometry()
        system, geo, noise, scale = prepare_system(self.config, geo)
        self.run_info["noise_scale"] = scale

        reports = []
        if self.settings.state_file:
            state = BeamformingState.load(self.settings.state_file)
            report = evaluate(state, geo, system, self.settings.n_trials, task_rng(seed, 0, 2),
                              noise=noise, seed=seed, scheme="loaded")
            reports.append(self._with_exact(report, state, geo, system, noise))
        else:
            for index, scheme in enumerate(SCHEMES):
                trained = train_scheme(scheme, self.config, system, geo, noise, task_rng(seed, 0, 1, index),
                                       event_callback=self.event_callback if scheme == "bsgd_robust" else None)
                report = evaluate(trained.state, trained.geo, trained.config, self.settings.n_trials,
                                  task_rng(seed, 0, 2), noise=noise, seed=seed, scheme=scheme)
                reports.append(self._with_exact(report, trained.state, trained.geo, trained.config, noise))
        write_eval_csv(reports, self._artifact("eval.csv"))
        return EXIT_OK

    def sweep(self) -> int:
        if self.settings.normalize_noise:
            self.run_info["noise_scale"] = noise_reference(self.config.system)
        else:
            self.run_info["noise_scale"] = 1.0
        result = SweepRunner(self.config, event_callback=self.event_callback).run()
        write_sweep_csv(result.rows, self._artifact("sweep.csv"))
        write_summary_csv(result.summary(), self._artifact("summary.csv"))
        for p, trace in result.traces.items():
            trace.to_csv(self._artifact(f"traces/trace_p{p:g}.csv"))
        self.logger.info(f"Sweep finished: {len(result.rows)} rows")
        return EXIT_OK

    def selftest(self) -> int:
        results = run_selftest(self.settings.seed, event_callback=self.event_callback)
        width = max(len(r.name) for r in results)
        for r in results:
            print(f"{r.name:<{width}}  {'PASS' if r.passed else 'FAIL'}  {r.detail}")
        with open(self._artifact("selftest.csv"), "w", newline="", encoding="utf-8") as f:
            writer = csv.writer(f, lineterminator="\n")
            writer.writerow(["check", "passed", "detail"])
            writer.writerows([r.name, r.passed, r.detail] for r in results)
        return EXIT_OK if all(r.passed for r in results) else EXIT_RUNTIME

    def run(self) -> int:
        self.output_dir.mkdir(parents=True, exist_ok=True)
        mode = self.settings.mode
        self.logger.info(f"Running mode '{mode}' with seed {self.settings.seed}, output in {self.output_dir}")
        if self.event_callback:
            self.event_callback("run_started", {"mode": mode, "seed": self.settings.seed})
        status = getattr(self, mode)()
        dump_manifest(self.config, self._artifact("manifest.yaml"), **self.run_info)
        if self.event_callback:
            self.event_callback("run_finished", {"mode": mode, "status": status})
        return status


def run(config_path: str = "config/config.yaml", overrides: Sequence[str] = ()) -> int:
    """
    Load the configuration and run the selected mode.

    Returns:
        0 on success, 1 on runtime failures, 2 on configuration errors
    """
    try:
        config = load_config(config_path, overrides)
    except (ConfigError, UsageError) as e:
        logger.error(f"Invalid configuration: {e}")
        return EXIT_CONFIG
    except OSError as e:
        logger.error(f"Cannot read configuration {e.filename}: {e.strerror}")
        return EXIT_CONFIG

    logging.getLogger().setLevel(config.logging.level)

    monitor = None
    if config.monitor.enabled:
        from risbeam.monitor import RunMonitor
        monitor = RunMonitor(config.monitor.model_dump(), manifest=config.model_dump(mode="json"))
        monitor.start()

    try:
        return ExperimentRunner(config, event_callback=monitor.broadcast_event_sync if monitor else None).run()
    except RisbeamError as e:
        logger.error(f"{type(e).__name__}: {e}")
        return EXIT_RUNTIME
    except OSError as e:
        logger.error(f"I/O error on {e.filename}: {e.strerror}")
        return EXIT_RUNTIME
    finally:
        if monitor:
            monitor.stop()


def main(argv: Optional[Sequence[str]] = None) -> int:
    """Run the risbeam command line."""
    logging.basicConfig(
        level=logging.INFO,
        format='%(asctime)s - %(name)s - %(levelname)s - %(message)s'
    )
    args = build_parser().parse_args(argv)
    return run(args.config, cli_overrides(args))


if __name__ == "__main__":
    sys.exit(main())
