"""Monte Carlo outage and effective-rate estimation, baselines and the blockage sweep."""

import csv
import itertools
import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Dict, List, Optional, Sequence, Tuple, Union

import numpy as np

from risbeam.channel import (
    GeometricChannel,
    gen_geometry,
    no_blockage_sample,
    normalize_problem,
    sample_blockages,
)
from risbeam.config import ExperimentConfig, SystemConfig, TrainingConfig
from risbeam.errors import UsageError
from risbeam.optimizer import (
    FixedSampler,
    RunTrace,
    StepSchedule,
    StopCriteria,
    bsgd_outmin,
    init_a,
    init_d,
    initial_state,
    make_sampler,
)
from risbeam.surrogate import BeamformingState, link_factors, lipschitz_constants


logger = logging.getLogger(__name__)

SCHEMES = ("bsgd_robust", "ris_non_robust", "ris_random", "non_ris")
EVAL_BATCH = 4096

SWEEP_COLUMNS = ("p_block", "scheme", "geo_index", "outage_avg", "eff_sum_rate", "n_trials", "seed")
SUMMARY_COLUMNS = (
    "p_block", "scheme", "outage_mean", "outage_se", "eff_sum_rate_mean", "eff_sum_rate_se", "n_geo",
)
EVAL_COLUMNS = ("scheme", "user", "outage", "outage_se", "eff_rate", "eff_rate_se", "n_trials", "seed")


@dataclass
class EvalReport:
    """
    Monte Carlo metrics of one state.

    Per-user arrays have length K. The *_avg/_sum standard errors are taken
    over per-trial averages, so they include the correlation between users.
    """

    outage: np.ndarray
    outage_se: np.ndarray
    eff_rate: np.ndarray
    eff_rate_se: np.ndarray
    outage_avg: float
    outage_avg_se: float
    eff_sum_rate: float
    eff_sum_rate_se: float
    n_trials: int
    seed: Optional[int] = None
    scheme: str = ""
    exact_outage: Optional[np.ndarray] = None
    exact_eff_rate: Optional[np.ndarray] = None


def _standard_error(total: float, total_sq: float, n: int) -> float:
    if n < 2:
        return 0.0
    mean = total / n
    variance = max(total_sq / n - mean * mean, 0.0) * n / (n - 1)
    return float(np.sqrt(variance / n))


def evaluate(state: BeamformingState, geo: GeometricChannel, config: SystemConfig, n_trials: int,
             rng: np.random.Generator, noise: Optional[np.ndarray] = None, seed: Optional[int] = None,
             scheme: str = "", batch: int = EVAL_BATCH) -> EvalReport:
    """
    Outage probability and effective rate over n_trials fresh blockage draws.

    Omega_k <= omega_k counts as outage; otherwise log2(1 + Omega_k) counts toward
    the effective rate, so each trial lands in exactly one of the two.

    Raises:
        InfeasibleStateError: If the state violates its constraints
    """
    if n_trials < 1:
        raise UsageError(f"n_trials must be >= 1, got {n_trials}")
    state.check_feasible(config.p_max)
    noise = config.noise_vec if noise is None else noise
    omegas = config.omega_vec
    k = config.n_users

    out_sum = np.zeros(k)
    rate_sum = np.zeros(k)
    rate_sq = np.zeros(k)
    avg_sum = avg_sq = total_sum = total_sq = 0.0
    done = 0
    while done < n_trials:
        count = min(batch, n_trials - done)
        gammas = sample_blockages(config, rng, count)
        direct = geo.direct_channels(gammas).conj()
        values = link_factors(state, geo.ris_rows, direct, noise).sinr
        outage = values <= omegas
        rates = np.where(outage, 0.0, np.log2(1.0 + values))
        out_sum += outage.sum(axis=0)
        rate_sum += rates.sum(axis=0)
        rate_sq += (rates ** 2).sum(axis=0)
        per_trial_outage = outage.mean(axis=1)
        per_trial_rate = rates.sum(axis=1)
        avg_sum += per_trial_outage.sum()
        avg_sq += (per_trial_outage ** 2).sum()
        total_sum += per_trial_rate.sum()
        total_sq += (per_trial_rate ** 2).sum()
        done += count

    outage_p = out_sum / n_trials
    return EvalReport(
        outage=outage_p,
        outage_se=np.sqrt(outage_p * (1.0 - outage_p) / n_trials),
        eff_rate=rate_sum / n_trials,
        eff_rate_se=np.array([_standard_error(rate_sum[i], rate_sq[i], n_trials) for i in range(k)]),
        outage_avg=float(avg_sum / n_trials),
        outage_avg_se=_standard_error(avg_sum, avg_sq, n_trials),
        eff_sum_rate=float(total_sum / n_trials),
        eff_sum_rate_se=_standard_error(total_sum, total_sq, n_trials),
        n_trials=n_trials,
        seed=seed,
        scheme=scheme,
    )


def exact_outage(state: BeamformingState, geo: GeometricChannel, config: SystemConfig,
                 noise: Optional[np.ndarray] = None) -> Tuple[np.ndarray, np.ndarray]:
    """
    Exact per-user outage probability and effective rate.

    User k's SINR depends only on its own blockage pattern, so the joint
    enumeration factorizes into 2^L_BU patterns per user.

    Returns:
        (outage, eff_rate), each of length K
    """
    noise = config.noise_vec if noise is None else noise
    n_paths = geo.n_paths_bu
    patterns = np.array(list(itertools.product((0, 1), repeat=n_paths)), dtype=np.int8)
    gammas = np.broadcast_to(patterns[:, None, :], (len(patterns), geo.n_users, n_paths))
    direct = geo.direct_channels(gammas).conj()
    values = link_factors(state, geo.ris_rows, direct, noise).sinr

    p = config.p_block_matrix
    # probability of each pattern for each user, shape (2^L, K)
    probs = np.prod(np.where(gammas == 1, 1.0 - p[None], p[None]), axis=2)
    outage = values <= config.omega_vec
    rates = np.where(outage, 0.0, np.log2(1.0 + values))
    return (probs * outage).sum(axis=0), (probs * rates).sum(axis=0)


# --- schemes ----------------------------------------------------------------

@dataclass
class TrainedScheme:
    """A trained state with the system it must be evaluated on."""

    scheme: str
    state: BeamformingState
    config: SystemConfig
    geo: GeometricChannel
    noise: np.ndarray
    trace: RunTrace


def _schedule(experiment: ExperimentConfig, config: SystemConfig, geo: GeometricChannel,
              noise: np.ndarray) -> StepSchedule:
    lipschitz = None
    if experiment.schedule.lipschitz_cap:
        lipschitz = lipschitz_constants(config, geo, noise)
    return StepSchedule.from_config(experiment.schedule, lipschitz)


def _robust_run(config: SystemConfig, geo: GeometricChannel, schedule: StepSchedule, stop: StopCriteria,
                training: TrainingConfig, rng: np.random.Generator, initial: BeamformingState,
                noise: Optional[np.ndarray], frozen=(), event_callback=None):
    sampler = make_sampler(training.sampler, geo, config, training.n_samples, rng)
    return bsgd_outmin(config, geo, sampler, schedule, stop, rng, frozen=frozen, initial=initial,
                       noise=noise, event_callback=event_callback)


def train_robust(config: SystemConfig, geo: GeometricChannel, schedule: StepSchedule, stop: StopCriteria,
                 training: TrainingConfig, rng: np.random.Generator, noise: Optional[np.ndarray] = None,
                 event_callback: Optional[Callable] = None) -> Tuple[BeamformingState, RunTrace]:
    """BSGD-OutMin on the blockage distribution of config.p_block."""
    initial = initial_state(no_blockage_sample(geo), config.n_rf, config.p_max, rng)
    return _robust_run(config, geo, schedule, stop, training, rng, initial, noise,
                       event_callback=event_callback)


def baseline_ris_random(config: SystemConfig, geo: GeometricChannel, schedule: StepSchedule,
                        stop: StopCriteria, training: TrainingConfig, rng: np.random.Generator,
                        noise: Optional[np.ndarray] = None) -> Tuple[BeamformingState, RunTrace]:
    """Random RIS phases held fixed; D and A are still trained on the robust objective."""
    e_vec = np.ones(geo.ris_elements + 1, dtype=complex)
    if geo.ris_elements:
        e_vec[:-1] = np.exp(1j * rng.uniform(-np.pi, np.pi, geo.ris_elements))
    h0 = no_blockage_sample(geo)
    a0 = init_a(h0, e_vec, config.n_rf, rng)
    d0 = init_d(h0, a0, e_vec, config.p_max)
    initial = BeamformingState(d_mat=d0, a_mat=a0, e_vec=e_vec)
    return _robust_run(config, geo, schedule, stop, training, rng, initial, noise, frozen=("e",))


def baseline_non_robust(config: SystemConfig, geo: GeometricChannel, schedule: StepSchedule,
                        stop: StopCriteria, rng: np.random.Generator,
                        noise: Optional[np.ndarray] = None) -> Tuple[BeamformingState, RunTrace]:
    """Designed as if nothing were ever blocked: every iteration sees H^(0)."""
    h0 = no_blockage_sample(geo)
    initial = initial_state(h0, config.n_rf, config.p_max, rng)
    return bsgd_outmin(config, geo, FixedSampler(h0), schedule, stop, rng, initial=initial, noise=noise)


def baseline_no_ris(config: SystemConfig, geo: GeometricChannel, schedule: StepSchedule,
                    stop: StopCriteria, training: TrainingConfig, rng: np.random.Generator,
                    noise: Optional[np.ndarray] = None) -> Tuple[BeamformingState, RunTrace]:
    """
    D and A trained on the direct links only.

    The returned state has e = [1] and must be evaluated on geo.without_ris().
    """
    return train_robust(config.without_ris(), geo.without_ris(), schedule, stop, training, rng, noise)


def train_scheme(scheme: str, experiment: ExperimentConfig, config: SystemConfig, geo: GeometricChannel,
                 noise: np.ndarray, rng: np.random.Generator,
                 event_callback: Optional[Callable] = None) -> TrainedScheme:
    """Train one of SCHEMES on an (already normalized) system."""
    stop = StopCriteria.from_config(experiment.stop)
    training = experiment.training
    if scheme == "non_ris":
        eval_config, eval_geo = config.without_ris(), geo.without_ris()
    else:
        eval_config, eval_geo = config, geo
    schedule = _schedule(experiment, eval_config, eval_geo, noise)

    if scheme == "bsgd_robust":
        state, trace = train_robust(config, geo, schedule, stop, training, rng, noise, event_callback)
    elif scheme == "ris_non_robust":
        state, trace = baseline_non_robust(config, geo, schedule, stop, rng, noise)
    elif scheme == "ris_random":
        state, trace = baseline_ris_random(config, geo, schedule, stop, training, rng, noise)
    elif scheme == "non_ris":
        state, trace = baseline_no_ris(config, geo, schedule, stop, training, rng, noise)
    else:
        raise UsageError(f"unknown scheme '{scheme}', expected one of {SCHEMES}")
    return TrainedScheme(scheme, state, eval_config, eval_geo, noise, trace)


def prepare_system(experiment: ExperimentConfig, geo: GeometricChannel,
                   config: Optional[SystemConfig] = None) -> Tuple[SystemConfig, GeometricChannel, np.ndarray, float]:
    """Apply noise normalization when enabled; returns (config, geo, noise, scale)."""
    config = config or experiment.system
    if experiment.experiment.normalize_noise:
        config, geo, scale = normalize_problem(config, geo)
    else:
        scale = 1.0
    return config, geo, config.noise_vec, scale


def task_rng(seed: int, *keys: int) -> np.random.Generator:
    """Independent generator for one task, derived from the master seed."""
    return np.random.default_rng(np.random.SeedSequence([seed, *keys]))


# --- sweep ------------------------------------------------------------------

@dataclass(frozen=True)
class SweepRow:
    p_block: float
    scheme: str
    geo_index: int
    outage_avg: float
    eff_sum_rate: float
    n_trials: int
    seed: int


@dataclass
class SweepResult:
    rows: List[SweepRow] = field(default_factory=list)
    traces: Dict[float, RunTrace] = field(default_factory=dict)

    def summary(self) -> List[Dict[str, Union[float, str, int]]]:
        """Mean and standard error over geometries per (p, scheme), in grid then scheme order."""
        groups: Dict[Tuple[float, str], List[SweepRow]] = {}
        for row in self.rows:
            groups.setdefault((row.p_block, row.scheme), []).append(row)
        out = []
        p_values = sorted({row.p_block for row in self.rows}, key=[r.p_block for r in self.rows].index)
        for p in p_values:
            for scheme in SCHEMES:
                members = groups.get((p, scheme))
                if not members:
                    continue
                outage = np.array([r.outage_avg for r in members])
                rate = np.array([r.eff_sum_rate for r in members])
                n = len(members)
                out.append({
                    "p_block": p,
                    "scheme": scheme,
                    "outage_mean": float(outage.mean()),
                    "outage_se": float(outage.std(ddof=1) / np.sqrt(n)) if n > 1 else 0.0,
                    "eff_sum_rate_mean": float(rate.mean()),
                    "eff_sum_rate_se": float(rate.std(ddof=1) / np.sqrt(n)) if n > 1 else 0.0,
                    "n_geo": n,
                })
        return out


class SweepRunner:
    """Trains and evaluates every scheme for each blockage probability and geometry."""

    def __init__(self, experiment: ExperimentConfig, event_callback: Optional[Callable] = None):
        """
        Initialize sweep runner.

        Args:
            experiment: Resolved configuration (system, schedule, stop, experiment sections)
            event_callback: Optional callback for ("geometry_done", row dict) events
        """
        self.logger = logging.getLogger(__name__)
        self.experiment = experiment
        self.settings = experiment.experiment
        self.event_callback = event_callback

    def _run_task(self, p: float, g: int) -> Tuple[List[SweepRow], Optional[RunTrace]]:
        seed = self.settings.seed
        base = self.experiment.system.with_p_block(p)
        geo = gen_geometry(base, task_rng(seed, g, 0))
        config, geo, noise, _ = prepare_system(self.experiment, geo, base)

        rows = []
        trace = None
        for index, scheme in enumerate(SCHEMES):
            trained = train_scheme(scheme, self.experiment, config, geo, noise, task_rng(seed, g, 1, index))
            report = evaluate(trained.state, trained.geo, trained.config, self.settings.n_trials,
                              task_rng(seed, g, 2), noise=trained.noise, seed=seed, scheme=scheme)
            rows.append(SweepRow(p, scheme, g, report.outage_avg, report.eff_sum_rate,
                                 report.n_trials, seed))
            if scheme == "bsgd_robust" and g == self.settings.trace_geometry:
                trace = trained.trace
        self.logger.info(f"p_block={p:g} geometry {g + 1}/{self.settings.n_geo} done")
        if self.event_callback:
            for row in rows:
                self.event_callback("geometry_done", asdict(row))
        return rows, trace

    def run(self, p_grid: Optional[Sequence[float]] = None) -> SweepResult:
        """Run all (p, geometry) tasks; results are ordered by grid, geometry, scheme."""
        p_grid = list(self.settings.p_grid if p_grid is None else p_grid)
        if not p_grid:
            raise UsageError("p_grid must not be empty")
        tasks = [(p, g) for p in p_grid for g in range(self.settings.n_geo)]
        self.logger.info(
            f"Sweep started: {len(p_grid)} blockage values x {self.settings.n_geo} geometries, "
            f"{self.settings.threads} thread(s)"
        )
        if self.settings.threads > 1:
            with ThreadPoolExecutor(max_workers=self.settings.threads) as pool:
                outputs = list(pool.map(lambda task: self._run_task(*task), tasks))
        else:
            outputs = [self._run_task(*task) for task in tasks]

        result = SweepResult()
        for (p, _), (rows, trace) in zip(tasks, outputs):
            result.rows.extend(rows)
            if trace is not None:
                result.traces[p] = trace
        return result


def sweep_pblock(experiment: ExperimentConfig, p_grid: Sequence[float], n_geo: int, n_trials: int,
                 seed: int, threads: int = 1, event_callback: Optional[Callable] = None) -> SweepResult:
    """Functional entry point: overrides the experiment's grid, geometry count, trials and seed."""
    settings = experiment.experiment.model_copy(
        update={"p_grid": list(p_grid), "n_geo": n_geo, "n_trials": n_trials, "seed": seed, "threads": threads}
    )
    experiment = experiment.model_copy(update={"experiment": settings})
    return SweepRunner(experiment, event_callback=event_callback).run()


# --- CSV writers ------------------------------------------------------------

def _write_rows(path: Union[str, Path], columns: Sequence[str], rows: Sequence[Sequence]) -> None:
    with open(path, "w", newline="", encoding="utf-8") as f:
        writer = csv.writer(f, lineterminator="\n")
        writer.writerow(columns)
        writer.writerows(rows)


def write_sweep_csv(rows: Sequence[SweepRow], path: Union[str, Path]) -> None:
    _write_rows(path, SWEEP_COLUMNS, [[getattr(row, c) for c in SWEEP_COLUMNS] for row in rows])


def write_summary_csv(summary: Sequence[Dict], path: Union[str, Path]) -> None:
    _write_rows(path, SUMMARY_COLUMNS, [[entry[c] for c in SUMMARY_COLUMNS] for entry in summary])


def write_eval_csv(reports: Sequence[EvalReport], path: Union[str, Path]) -> None:
    """Per-user rows, then an 'all' row with the average outage and the sum rate."""
    rows = []
    for report in reports:
        for k in range(len(report.outage)):
            rows.append([report.scheme, k, float(report.outage[k]), float(report.outage_se[k]),
                         float(report.eff_rate[k]), float(report.eff_rate_se[k]),
                         report.n_trials, report.seed])
        rows.append([report.scheme, "all", report.outage_avg, report.outage_avg_se,
                     report.eff_sum_rate, report.eff_sum_rate_se, report.n_trials, report.seed])
    _write_rows(path, EVAL_COLUMNS, rows)
