"""Numerical self-checks of the SINR algebra, gradients, projections and estimators.

The Kronecker-structured quadratic forms are materialized here only, as an
independent reference for the factored computations.
"""

import logging
from dataclasses import dataclass
from typing import Callable, List, Optional, Tuple

import numpy as np

from risbeam.channel import (
    ChannelSample,
    assemble_equivalent,
    gen_geometry,
    no_blockage_sample,
    normalize_problem,
    sample_blockage,
)
from risbeam.config import GeometryConfig, SystemConfig
from risbeam.evaluation import evaluate, exact_outage
from risbeam.optimizer import init_e, initial_state, project_a, project_d, project_e
from risbeam.surrogate import (
    BLOCKS,
    BeamformingState,
    effective_link,
    grad_hinge_block,
    grad_sinr_block,
    hinge,
    lipschitz_constants,
)


logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class CheckResult:
    name: str
    passed: bool
    detail: str


def complex_normal(rng: np.random.Generator, shape) -> np.ndarray:
    return (rng.standard_normal(shape) + 1j * rng.standard_normal(shape)) / np.sqrt(2.0)


def random_sample(rng: np.random.Generator, n_tx: int, n_users: int, n_rows: int) -> ChannelSample:
    """Unstructured Gaussian channel sample with n_rows = U*M + 1 rows per user."""
    return ChannelSample(
        ris_rows=complex_normal(rng, (n_users, n_rows - 1, n_tx)),
        direct_rows=complex_normal(rng, (n_users, n_tx)),
    )


def random_state(rng: np.random.Generator, n_tx: int, n_rf: int, n_users: int, n_rows: int,
                 p_max: float = 1.0) -> BeamformingState:
    """Random point of the feasible set."""
    a_mat = project_a(complex_normal(rng, (n_tx, n_rf)))
    d_mat = project_d(complex_normal(rng, (n_rf, n_users)), a_mat, p_max)
    e_vec = project_e(complex_normal(rng, n_rows))
    return BeamformingState(d_mat=d_mat, a_mat=a_mat, e_vec=e_vec)


def tiny_system(**updates) -> SystemConfig:
    """Small scenario for oracle checks: N=4, K=N_RF=2, one 2x2 RIS, two BS-user paths."""
    fields = dict(
        n_tx=4, n_rf=2, n_users=2, n_ris=1, m_per_ris=4, m_rows=2, m_cols=2,
        p_max=1.0, n_paths_bu=2, n_paths_bi=2, n_paths_iu=2,
        geometry=GeometryConfig(ris=[(40.0, 10.0)]),
    )
    fields.update(updates)
    return SystemConfig(**fields)


def kronecker_forms(block: str, state: BeamformingState, sample: ChannelSample,
                    k: int) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    """
    Materialized (Q, Q_bar, x) of the quadratic-form SINR for one block.

    x is the column-major vectorization of the block, signal = x^H Q x and
    interference = x^H Q_bar x.
    """
    h_k = sample.h_eq[k]
    a_mat, d_mat, e_vec = state.a_mat, state.d_mat, state.e_vec
    n_users = d_mat.shape[1]
    w = h_k.conj().T @ e_vec
    if block == "d":
        g = a_mat.conj().T @ w
        gram = np.outer(g, g.conj())
        own = np.zeros(n_users)
        own[k] = 1.0
        return np.kron(np.diag(own), gram), np.kron(np.diag(1.0 - own), gram), d_mat.flatten(order="F")
    if block == "a":
        ww = np.outer(w, w.conj())
        q = np.kron(np.outer(d_mat[:, k].conj(), d_mat[:, k]), ww)
        q_bar = sum(
            np.kron(np.outer(d_mat[:, i].conj(), d_mat[:, i]), ww) for i in range(n_users) if i != k
        )
        return q, q_bar, a_mat.flatten(order="F")
    f = h_k @ a_mat @ d_mat
    q = np.outer(f[:, k], f[:, k].conj())
    q_bar = sum(np.outer(f[:, i], f[:, i].conj()) for i in range(n_users) if i != k)
    return q, q_bar, e_vec.copy()


def kronecker_sinr_gradient(block: str, state: BeamformingState, sample: ChannelSample, k: int,
                            noise: float) -> Tuple[float, np.ndarray]:
    """Omega_k and its conjugate gradient, vectorized, from the materialized forms."""
    q, q_bar, x = kronecker_forms(block, state, sample, k)
    signal = float(np.real(np.vdot(x, q @ x)))
    v = float(np.real(np.vdot(x, q_bar @ x))) + noise
    return signal / v, q @ x / v - (signal / v ** 2) * (q_bar @ x)


def _relative_error(actual: np.ndarray, expected: np.ndarray) -> float:
    scale = max(np.linalg.norm(expected), 1e-300)
    return float(np.linalg.norm(np.asarray(actual) - np.asarray(expected)) / scale)


def _flat(block: str, grad: np.ndarray) -> np.ndarray:
    return grad if block == "e" else grad.flatten(order="F")


def check_kronecker(rng: np.random.Generator, n_instances: int = 100) -> CheckResult:
    worst = 0.0
    for _ in range(n_instances):
        sample = random_sample(rng, 4, 2, 5)
        state = random_state(rng, 4, 2, 2, 5)
        for k in range(2):
            omega_ref = None
            for block in BLOCKS:
                omega_ref, grad_ref = kronecker_sinr_gradient(block, state, sample, k, 1.0)
                grad = _flat(block, grad_sinr_block(block, state, sample, k, 1.0))
                worst = max(worst, _relative_error(grad, grad_ref))
            omega = effective_link(state, sample, 1.0).sinr[k]
            worst = max(worst, abs(omega - omega_ref) / max(omega_ref, 1e-300))
    return CheckResult("kronecker_equivalence", worst <= 1e-10, f"max relative error {worst:.2e}")


def hinge_value(state: BeamformingState, sample: ChannelSample, k: int, omega: float, eps: float,
                noise: float) -> float:
    return hinge(omega, eps, effective_link(state, sample, noise).sinr[k])


def _perturbed(state: BeamformingState, block: str, delta: np.ndarray, t: float) -> BeamformingState:
    return state.replace(**{block: state.block(block) + t * delta})


def directional_error(block: str, state: BeamformingState, sample: ChannelSample, k: int,
                      omega: float, eps: float, rng: np.random.Generator,
                      step: float = 1e-6) -> Tuple[float, float]:
    """(central difference of u_k along a random unit direction, 2 Re <grad, delta>)."""
    shape = state.block(block).shape
    delta = complex_normal(rng, shape)
    delta /= np.linalg.norm(delta)
    grad = grad_hinge_block(block, state, sample, k, omega, eps, 1.0)
    forward = hinge_value(_perturbed(state, block, delta, step), sample, k, omega, eps, 1.0)
    backward = hinge_value(_perturbed(state, block, delta, -step), sample, k, omega, eps, 1.0)
    return (forward - backward) / (2.0 * step), 2.0 * float(np.real(np.vdot(grad, delta)))


def check_finite_differences(rng: np.random.Generator, n_states: int = 50, eps: float = 0.01) -> CheckResult:
    """u_k gradients on N=8, K=N_RF=2, one 4-element RIS, at margins eps/2 and 1/3."""
    worst = 0.0
    for index in range(n_states):
        sample = random_sample(rng, 8, 2, 5)
        state = random_state(rng, 8, 2, 2, 5)
        values = effective_link(state, sample, 1.0).sinr
        for k in range(2):
            # margin eps/2 (quadratic branch) on even states, 1/3 (linear branch) on odd ones
            omega = values[k] / (1.0 - eps / 2.0) if index % 2 == 0 else 1.5 * values[k]
            for block in BLOCKS:
                fd, analytic = directional_error(block, state, sample, k, omega, eps, rng)
                grad_norm = 2.0 * np.linalg.norm(grad_hinge_block(block, state, sample, k, omega, eps, 1.0))
                worst = max(worst, abs(fd - analytic) / max(abs(analytic), 1e-3 * grad_norm))
    return CheckResult("finite_difference_gradients", worst < 1e-5, f"max relative error {worst:.2e}")


def check_projections(rng: np.random.Generator, n_candidates: int = 1000) -> CheckResult:
    failures = []
    for _ in range(n_candidates):
        z_a = complex_normal(rng, (6, 3))
        a_mat = project_a(z_a)
        if not np.allclose(project_a(a_mat), a_mat, rtol=0, atol=1e-12):
            failures.append("project_a idempotency")
        if not np.allclose(np.abs(a_mat), 1.0, rtol=0, atol=1e-12):
            failures.append("project_a feasibility")

        z_d = complex_normal(rng, (3, 2))
        d_mat = project_d(z_d, a_mat, 5.0)
        if abs(np.linalg.norm(a_mat @ d_mat) ** 2 - 5.0) > 5e-12:
            failures.append("project_d power")
        if not np.allclose(project_d(d_mat, a_mat, 5.0), d_mat, rtol=0, atol=1e-12):
            failures.append("project_d idempotency")

        z_e = complex_normal(rng, 7)
        e_vec = project_e(z_e)
        if e_vec[-1] != 1 or not np.allclose(np.abs(e_vec), 1.0, rtol=0, atol=1e-12):
            failures.append("project_e feasibility")
        if not np.allclose(project_e(e_vec), e_vec, rtol=0, atol=1e-12):
            failures.append("project_e idempotency")
        scale = complex_normal(rng, 1)[0]
        if not np.allclose(project_e(scale * z_e), e_vec, rtol=0, atol=1e-12):
            failures.append("project_e gauge invariance")
    detail = "all projections consistent" if not failures else f"{len(failures)} failures, first: {failures[0]}"
    return CheckResult("projections", not failures, detail)


def check_mm_monotone(rng: np.random.Generator, n_instances: int = 100) -> CheckResult:
    worst = 0.0
    for _ in range(n_instances):
        sample = random_sample(rng, 4, 2, 9)
        _, history = init_e(sample, max_mm_iters=50, tol=0.0, return_history=True)
        steps = np.diff(history) / np.maximum(np.abs(history[:-1]), 1e-300)
        worst = min(worst, float(steps.min()))
    return CheckResult("mm_initialization_monotone", worst >= -1e-9, f"worst relative step {worst:.2e}")


def check_exact_outage(rng: np.random.Generator, n_trials: int = 100_000) -> CheckResult:
    """Monte Carlo outage within 3 standard errors of the exhaustive-pattern value."""
    config = tiny_system(p_block=0.5, noise_dbm=-100.0)
    geo = gen_geometry(config, rng)
    config, geo, _ = normalize_problem(config, geo)
    state = initial_state(no_blockage_sample(geo), config.n_rf, config.p_max, rng)
    exact, _ = exact_outage(state, geo, config)
    report = evaluate(state, geo, config, n_trials, rng)
    se = np.sqrt(exact * (1.0 - exact) / n_trials)
    gap = np.abs(report.outage - exact)
    passed = bool(np.all(np.where(se > 0, gap <= 3.0 * se, gap <= 1e-12)))
    return CheckResult("exact_outage_oracle", passed,
                       f"exact {np.round(exact, 4).tolist()} vs monte carlo {np.round(report.outage, 4).tolist()}")


def _real_gradient(block: str, state: BeamformingState, sample: ChannelSample, k: int, omega: float,
                   eps: float, noise) -> np.ndarray:
    """Gradient of u_k in the real coordinates (Re x, Im x) of one block."""
    grad = grad_hinge_block(block, state, sample, k, omega, eps, noise).ravel()
    return 2.0 * np.concatenate([grad.real, grad.imag])


def hessian_vector(block: str, state: BeamformingState, sample: ChannelSample, k: int, omega: float,
                   eps: float, noise, direction: np.ndarray, step: float = 1e-5) -> np.ndarray:
    """Central difference of the real gradient of u_k along a real direction (Re, Im stacked)."""
    shape = state.block(block).shape
    half = direction.size // 2
    delta = (direction[:half] + 1j * direction[half:]).reshape(shape)
    forward = _real_gradient(block, _perturbed(state, block, delta, step), sample, k, omega, eps, noise)
    backward = _real_gradient(block, _perturbed(state, block, delta, -step), sample, k, omega, eps, noise)
    return (forward - backward) / (2.0 * step)


def hessian_norm(block: str, state: BeamformingState, sample: ChannelSample, k: int, omega: float,
                 eps: float, noise, rng: np.random.Generator, max_iter: int = 30, tol: float = 1e-3) -> float:
    """
    Spectral norm of the Hessian of u_k over one block by power iteration on
    finite-difference Hessian-vector products.

    Every iterate ||H v|| with ||v|| = 1 is a lower bound on the norm; the
    largest one seen is returned.
    """
    size = 2 * state.block(block).size
    v = rng.standard_normal(size)
    v /= np.linalg.norm(v)
    best = 0.0
    previous = 0.0
    for _ in range(max_iter):
        hv = hessian_vector(block, state, sample, k, omega, eps, noise, v)
        norm = float(np.linalg.norm(hv))
        if norm == 0.0:
            break
        best = max(best, norm)
        if abs(norm - previous) <= tol * norm:
            break
        previous = norm
        v = hv / norm
    return best


def check_lipschitz(rng: np.random.Generator, n_instances: int = 20, n_points: int = 100) -> CheckResult:
    """The per-block Hessian norm of u_k at random feasible points never exceeds l_total."""
    worst_ratio = 0.0
    for _ in range(n_instances):
        config = tiny_system(p_block=0.5)
        geo = gen_geometry(config, rng)
        config, geo, _ = normalize_problem(config, geo)
        constants = lipschitz_constants(config, geo)
        noise = config.noise_vec
        for _ in range(n_points):
            sample = assemble_equivalent(geo, sample_blockage(config, rng))
            state = random_state(rng, config.n_tx, config.n_rf, config.n_users, geo.ris_elements + 1, config.p_max)
            for k in range(config.n_users):
                for block in BLOCKS:
                    norm = hessian_norm(block, state, sample, k, config.omega_vec[k], config.epsilon, noise, rng)
                    worst_ratio = max(worst_ratio, norm / constants.l_total)
    return CheckResult("lipschitz_bound", worst_ratio <= 1.0 + 1e-6,
                       f"max Hessian norm / l_total = {worst_ratio:.2e}")


CHECKS: Tuple[Tuple[str, Callable[[np.random.Generator], CheckResult]], ...] = (
    ("kronecker_equivalence", check_kronecker),
    ("finite_difference_gradients", check_finite_differences),
    ("projections", check_projections),
    ("mm_initialization_monotone", check_mm_monotone),
    ("exact_outage_oracle", check_exact_outage),
    ("lipschitz_bound", check_lipschitz),
)


def run_selftest(seed: int = 0, event_callback: Optional[Callable] = None) -> List[CheckResult]:
    """Run every check on its own seeded generator."""
    results = []
    for index, (name, check) in enumerate(CHECKS):
        result = check(np.random.default_rng(np.random.SeedSequence([seed, index])))
        level = logging.INFO if result.passed else logging.ERROR
        logger.log(level, f"{name}: {'PASS' if result.passed else 'FAIL'} ({result.detail})")
        if event_callback:
            event_callback("selftest", {"name": name, "passed": result.passed, "detail": result.detail})
        results.append(result)
    return results
