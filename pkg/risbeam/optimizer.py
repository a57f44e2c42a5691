"""Projections, initialization, step sizes and the block stochastic gradient loop."""

import csv
import logging
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Iterable, List, Optional, Sequence, Tuple, Union

import numpy as np

from risbeam.channel import (
    ChannelSample,
    GeometricChannel,
    assemble_equivalent,
    no_blockage_sample,
    sample_blockage,
    training_set,
)
from risbeam.config import ScheduleConfig, StopConfig, SystemConfig
from risbeam.errors import DegenerateError, SamplerExhaustedError, UsageError
from risbeam.surrogate import BLOCKS, BeamformingState, LipschitzConstants, hinge_block_gradient


logger = logging.getLogger(__name__)

TRACE_COLUMNS = ("t", "objective_rolling", "grad_norm_d", "grad_norm_a", "grad_norm_e", "alpha")


# --- projections ------------------------------------------------------------

def project_d(d_candidate: np.ndarray, a_current: np.ndarray, p_max: float) -> np.ndarray:
    """Rescale Z so that ||A Z||_F^2 = p_max."""
    norm = np.linalg.norm(a_current @ d_candidate)
    if not norm > 0:
        raise DegenerateError("digital precoder candidate is annihilated by A")
    return d_candidate * (np.sqrt(p_max) / norm)


def project_a(a_candidate: np.ndarray) -> np.ndarray:
    """Entrywise nearest unit-modulus point; zero entries map to 1."""
    return np.exp(1j * np.angle(a_candidate))


def project_e(e_candidate: np.ndarray) -> np.ndarray:
    """exp(j angle(z / z_last)); unit modulus with the last entry exactly 1."""
    last = e_candidate[-1]
    if last == 0:
        raise DegenerateError("reflection candidate has a zero last entry")
    out = np.exp(1j * np.angle(e_candidate / last))
    out[-1] = 1.0
    return out


# --- initialization ---------------------------------------------------------

def channel_gain_objective(h0: ChannelSample, e_vec: np.ndarray) -> float:
    """sum_k ||e^H H_k||^2."""
    rows = np.einsum("r,krn->kn", e_vec.conj(), h0.h_eq)
    return float(np.sum(np.abs(rows) ** 2))


def init_e(h0: ChannelSample, max_mm_iters: int = 100, tol: float = 1e-9,
           return_history: bool = False) -> Union[np.ndarray, Tuple[np.ndarray, List[float]]]:
    """
    Reflection vector maximizing the total no-blockage channel gain.

    Runs the minorize-maximize fixed point e <- project_e(M e) with
    M = sum_k H_k H_k^H from the all-ones vector until the relative objective
    change drops below tol or max_mm_iters is reached.

    Args:
        h0: No-blockage channel sample
        max_mm_iters: Iteration cap
        tol: Relative objective change tolerance
        return_history: Also return the objective after each iterate

    Raises:
        DegenerateError: If the channel is zero
    """
    h_eq = h0.h_eq
    n_rows = h_eq.shape[1]
    e_vec = np.ones(n_rows, dtype=complex)
    history = [channel_gain_objective(h0, e_vec)]
    gram = np.einsum("krn,ksn->rs", h_eq, h_eq.conj())
    if not np.any(gram):
        raise DegenerateError("no-blockage channel is identically zero")
    if n_rows > 1:
        for _ in range(max_mm_iters):
            e_vec = project_e(gram @ e_vec)
            history.append(float(np.real(np.vdot(e_vec, gram @ e_vec))))
            if abs(history[-1] - history[-2]) <= tol * abs(history[-1]):
                break
    if return_history:
        return e_vec, history
    return e_vec


def init_a(h0: ChannelSample, e0: np.ndarray, n_rf: int,
           rng: Optional[np.random.Generator] = None) -> np.ndarray:
    """
    Analog precoder with column i = exp(j angle(H_i^H e)).

    Columns beyond the K users take the phases of seeded complex Gaussians.
    """
    k = h0.n_users
    if n_rf < k:
        raise UsageError(f"n_rf = {n_rf} cannot serve {k} users")
    w = np.einsum("krn,r->kn", h0.h_eq.conj(), e0)
    if np.any(np.all(w == 0, axis=1)):
        raise DegenerateError("a user's equivalent channel H_k^H e is zero")
    columns = [w.T]
    if n_rf > k:
        if rng is None:
            raise UsageError("extra RF chains need a random generator")
        extra = rng.standard_normal((h0.n_tx, n_rf - k)) + 1j * rng.standard_normal((h0.n_tx, n_rf - k))
        columns.append(extra)
    return project_a(np.concatenate(columns, axis=1))


def init_d(h0: ChannelSample, a0: np.ndarray, e0: np.ndarray, p_max: float) -> np.ndarray:
    """Matched filter d_k proportional to (e^H H_k A)^H, scaled to full power."""
    w = np.einsum("krn,r->kn", h0.h_eq.conj(), e0)
    d0 = a0.conj().T @ w.T
    if not np.any(d0):
        raise DegenerateError("effective channels e^H H_k A are all zero")
    return project_d(d0, a0, p_max)


def initial_state(h0: ChannelSample, n_rf: int, p_max: float,
                  rng: Optional[np.random.Generator] = None,
                  max_mm_iters: int = 100, tol: float = 1e-9) -> BeamformingState:
    """e, then A, then D from the no-blockage channel."""
    e0 = init_e(h0, max_mm_iters=max_mm_iters, tol=tol)
    a0 = init_a(h0, e0, n_rf, rng)
    d0 = init_d(h0, a0, e0, p_max)
    return BeamformingState(d_mat=d0, a_mat=a0, e_vec=e0)


# --- step sizes and stopping ------------------------------------------------

@dataclass(frozen=True)
class StepSchedule:
    kind: str = "inverse_t"
    alpha0: float = 0.05
    tau: float = 1000.0
    lipschitz_cap: Optional[float] = None

    def __post_init__(self):
        if self.kind not in ("constant", "inverse_t"):
            raise UsageError(f"unknown step schedule '{self.kind}'")
        if not 0 < self.alpha0 <= 1:
            raise UsageError(f"alpha0 must lie in (0, 1], got {self.alpha0}")
        if not self.tau > 0:
            raise UsageError(f"tau must be positive, got {self.tau}")
        if self.lipschitz_cap is not None and not self.lipschitz_cap > 0:
            raise UsageError(f"step cap must be positive, got {self.lipschitz_cap}")

    @classmethod
    def from_config(cls, config: ScheduleConfig,
                    lipschitz: Optional[LipschitzConstants] = None) -> "StepSchedule":
        cap = lipschitz.step_cap if (config.lipschitz_cap and lipschitz is not None) else None
        return cls(kind=config.kind, alpha0=config.alpha0, tau=config.tau, lipschitz_cap=cap)


def step_size(schedule: StepSchedule, t: int) -> float:
    """alpha_t for iteration t >= 1, capped at 1/L when a cap is set."""
    if t < 1:
        raise UsageError(f"iterations are counted from 1, got {t}")
    if schedule.kind == "constant":
        alpha = schedule.alpha0
    else:
        alpha = schedule.alpha0 / (1.0 + t / schedule.tau)
    if schedule.lipschitz_cap is not None:
        alpha = min(alpha, schedule.lipschitz_cap)
    return alpha


@dataclass(frozen=True)
class StopCriteria:
    t_max: int = 100_000
    window: int = 500
    tol: float = 1e-4
    log_every: int = 1

    @classmethod
    def from_config(cls, config: StopConfig) -> "StopCriteria":
        return cls(t_max=config.t_max, window=config.window, tol=config.tol, log_every=config.log_every)


@dataclass(frozen=True)
class TraceRecord:
    t: int
    objective_rolling: float
    grad_norm_d: float
    grad_norm_a: float
    grad_norm_e: float
    alpha: float


@dataclass
class RunTrace:
    records: List[TraceRecord] = field(default_factory=list)
    window_means: List[float] = field(default_factory=list)
    iterations: int = 0
    converged: bool = False

    def append(self, record: TraceRecord) -> None:
        if self.records and record.t <= self.records[-1].t:
            raise UsageError(f"trace records must be strictly increasing in t, got {record.t}")
        self.records.append(record)

    @property
    def final_objective(self) -> float:
        return self.records[-1].objective_rolling if self.records else float("nan")

    def to_csv(self, path: Union[str, Path]) -> None:
        with open(path, "w", newline="", encoding="utf-8") as f:
            writer = csv.writer(f, lineterminator="\n")
            writer.writerow(TRACE_COLUMNS)
            for record in self.records:
                writer.writerow([getattr(record, column) for column in TRACE_COLUMNS])


# --- samplers ---------------------------------------------------------------

class TrainingSetSampler:
    """Uniform draws from a fixed training set."""

    def __init__(self, samples: Sequence[ChannelSample]):
        if not samples:
            raise UsageError("training set is empty")
        self.samples = list(samples)

    def draw(self, rng: np.random.Generator) -> ChannelSample:
        return self.samples[int(rng.integers(len(self.samples)))]


class StreamingSampler:
    """A fresh blockage realization at every draw."""

    def __init__(self, geo: GeometricChannel, config: SystemConfig):
        self.geo = geo
        self.config = config

    def draw(self, rng: np.random.Generator) -> ChannelSample:
        return assemble_equivalent(self.geo, sample_blockage(self.config, rng))


class FixedSampler:
    """Always the same sample; with H^(0) this is the non-robust design."""

    def __init__(self, sample: ChannelSample):
        self.sample = sample

    def draw(self, rng: np.random.Generator) -> ChannelSample:
        return self.sample


class SequenceSampler:
    """Samples in the given order, then exhausted."""

    def __init__(self, samples: Iterable[ChannelSample]):
        self._iterator = iter(samples)

    def draw(self, rng: np.random.Generator) -> ChannelSample:
        try:
            return next(self._iterator)
        except StopIteration:
            raise SamplerExhaustedError("sample sequence exhausted") from None


def make_sampler(kind: str, geo: GeometricChannel, config: SystemConfig, n_samples: int,
                 rng: np.random.Generator):
    """Robust sampler of the configured kind; the training set is drawn from rng."""
    if kind == "training_set":
        return TrainingSetSampler(training_set(geo, config, n_samples, rng))
    if kind == "streaming":
        return StreamingSampler(geo, config)
    raise UsageError(f"unknown sampler '{kind}'")


# --- main loop --------------------------------------------------------------

class BSGDOutMin:
    """Block stochastic gradient descent on the hinge surrogate of the sum outage."""

    def __init__(self, config: SystemConfig, schedule: StepSchedule, stop: StopCriteria,
                 noise: Optional[np.ndarray] = None, frozen: Iterable[str] = (),
                 event_callback: Optional[Callable] = None):
        """
        Initialize the optimizer.

        Args:
            config: System scalars (p_max, omega, epsilon, n_rf)
            schedule: Step-size schedule
            stop: Stopping and logging parameters
            noise: Per-user noise power, defaults to config.noise_vec
            frozen: Blocks held fixed during the run, subset of {"d", "a", "e"}
            event_callback: Optional callback receiving ("trace", record) events
        """
        self.logger = logging.getLogger(__name__)
        self.config = config
        self.schedule = schedule
        self.stop = stop
        self.noise = config.noise_vec if noise is None else np.asarray(noise, dtype=float)
        self.omegas = config.omega_vec
        self.frozen = frozenset(frozen)
        unknown = self.frozen - set(BLOCKS)
        if unknown:
            raise UsageError(f"unknown frozen blocks {sorted(unknown)}")
        self.event_callback = event_callback

    def _update(self, block: str, state: BeamformingState, grad: np.ndarray, alpha: float) -> BeamformingState:
        p_max = self.config.p_max
        if block == "d":
            return state.replace(d=project_d(state.d_mat - alpha * grad, state.a_mat, p_max))
        if block == "a":
            a_new = project_a(state.a_mat - alpha * grad)
            # keep ||A D||_F^2 = p_max with the new A
            return state.replace(a=a_new, d=project_d(state.d_mat, a_new, p_max))
        return state.replace(e=project_e(state.e_vec - alpha * grad))

    def step(self, state: BeamformingState, sample: ChannelSample,
             alpha: float) -> Tuple[BeamformingState, float, Tuple[float, float, float]]:
        """
        One iteration: D, then A, then e, each with the freshest other blocks.

        Returns:
            (new state, per-sample objective before the update, gradient norms)
        """
        objective = None
        norms = []
        for block in BLOCKS:
            value, grad = hinge_block_gradient(block, state, sample, self.omegas, self.config.epsilon, self.noise)
            if objective is None:
                objective = value
            norms.append(float(np.linalg.norm(grad)))
            if block not in self.frozen:
                state = self._update(block, state, grad, alpha)
        return state, objective, tuple(norms)

    def run(self, geo: GeometricChannel, sampler, rng: np.random.Generator,
            initial: Optional[BeamformingState] = None) -> Tuple[BeamformingState, RunTrace]:
        """
        Run until the windowed objective settles or t_max is reached.

        Args:
            geo: Geometry, used for the initial state when none is given
            sampler: Object with draw(rng) -> ChannelSample
            rng: Generator for initialization extras and sampling
            initial: Optional feasible starting state

        Returns:
            (final state, trace)
        """
        if initial is None:
            initial = initial_state(no_blockage_sample(geo), self.config.n_rf, self.config.p_max, rng)
        state = initial
        state.check_feasible(self.config.p_max)

        stop = self.stop
        if self.schedule.lipschitz_cap is not None and self.schedule.lipschitz_cap < self.schedule.alpha0:
            self.logger.warning(f"Step-size cap 1/L = {self.schedule.lipschitz_cap:.3e} is binding")

        self.logger.info(
            f"BSGD-OutMin started: t_max={stop.t_max}, window={stop.window}, "
            f"frozen={sorted(self.frozen) or 'none'}"
        )
        trace = RunTrace()
        buffer = np.zeros(stop.window)
        previous_mean = None

        t = 0
        for t in range(1, stop.t_max + 1):
            alpha = step_size(self.schedule, t)
            sample = sampler.draw(rng)
            state, objective, norms = self.step(state, sample, alpha)
            buffer[(t - 1) % stop.window] = objective
            rolling = float(buffer[:min(t, stop.window)].mean())

            if t % stop.log_every == 0 or t == stop.t_max:
                state.check_feasible(self.config.p_max)
                record = TraceRecord(t, rolling, norms[0], norms[1], norms[2], alpha)
                trace.append(record)
                self.logger.debug(f"t={t} objective={rolling:.6g} alpha={alpha:.3e}")
                if self.event_callback:
                    self.event_callback("trace", asdict(record))

            if t % stop.window == 0:
                trace.window_means.append(rolling)
                if previous_mean is not None and abs(rolling - previous_mean) <= stop.tol * max(abs(previous_mean), 1e-12):
                    trace.converged = True
                    if not trace.records or trace.records[-1].t != t:
                        trace.append(TraceRecord(t, rolling, norms[0], norms[1], norms[2], alpha))
                    break
                previous_mean = rolling

        trace.iterations = t
        if trace.converged:
            self.logger.info(f"Converged after {t} iterations, objective {trace.final_objective:.6g}")
        else:
            self.logger.warning(f"Reached t_max = {stop.t_max} without convergence")
        return state, trace


def bsgd_outmin(config: SystemConfig, geo: GeometricChannel, sampler, schedule: StepSchedule,
                stop: StopCriteria, rng: np.random.Generator, frozen: Iterable[str] = (),
                initial: Optional[BeamformingState] = None, noise: Optional[np.ndarray] = None,
                event_callback: Optional[Callable] = None) -> Tuple[BeamformingState, RunTrace]:
    """Functional entry point around BSGDOutMin.run."""
    optimizer = BSGDOutMin(config, schedule, stop, noise=noise, frozen=frozen, event_callback=event_callback)
    return optimizer.run(geo, sampler, rng, initial=initial)
