"""SINR, the smooth hinge surrogate, block Wirtinger gradients and Lipschitz constants.

All quadratic forms go through the received amplitudes c[k, i] = e^H H_k A d_i;
the Kronecker-structured matrices are never built here.
"""

import logging
from dataclasses import dataclass
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple, Union

import numpy as np

from risbeam.channel import ChannelSample, GeometricChannel
from risbeam.config import SystemConfig
from risbeam.errors import ConvergenceError, DimensionError, DomainError, InfeasibleStateError, UsageError


logger = logging.getLogger(__name__)

BLOCKS = ("d", "a", "e")

POWER_ITER_CAP = 10_000
POWER_ITER_TOL = 1e-12


@dataclass(frozen=True, eq=False)
class BeamformingState:
    """Digital precoder D (N_RF x K), analog precoder A (N x N_RF), reflection vector e (U*M + 1)."""

    d_mat: np.ndarray
    a_mat: np.ndarray
    e_vec: np.ndarray

    def __post_init__(self):
        if self.d_mat.ndim != 2 or self.a_mat.ndim != 2 or self.e_vec.ndim != 1:
            raise DimensionError("D and A must be matrices and e a vector")
        if self.a_mat.shape[1] != self.d_mat.shape[0]:
            raise DimensionError(
                f"A is {self.a_mat.shape} but D is {self.d_mat.shape}"
            )

    @property
    def n_users(self) -> int:
        return self.d_mat.shape[1]

    @property
    def n_tx(self) -> int:
        return self.a_mat.shape[0]

    @property
    def transmit_power(self) -> float:
        return float(np.linalg.norm(self.a_mat @ self.d_mat) ** 2)

    def block(self, name: str) -> np.ndarray:
        return {"d": self.d_mat, "a": self.a_mat, "e": self.e_vec}[name]

    def replace(self, **blocks: np.ndarray) -> "BeamformingState":
        return BeamformingState(
            d_mat=blocks.get("d", self.d_mat),
            a_mat=blocks.get("a", self.a_mat),
            e_vec=blocks.get("e", self.e_vec),
        )

    def violations(self, p_max: float) -> List[str]:
        """Names of the violated constraints (empty when feasible)."""
        problems = []
        if self.transmit_power > p_max * (1.0 + 1e-9):
            problems.append(f"power {self.transmit_power:.6g} exceeds p_max {p_max:.6g}")
        if not np.allclose(np.abs(self.a_mat), 1.0, rtol=0.0, atol=1e-12):
            problems.append("analog precoder entries are not unit modulus")
        if not np.allclose(np.abs(self.e_vec), 1.0, rtol=0.0, atol=1e-12):
            problems.append("reflection entries are not unit modulus")
        if self.e_vec.size and self.e_vec[-1] != 1:
            problems.append("last reflection entry is not exactly 1")
        return problems

    def is_feasible(self, p_max: float) -> bool:
        return not self.violations(p_max)

    def check_feasible(self, p_max: float) -> None:
        problems = self.violations(p_max)
        if problems:
            raise InfeasibleStateError("; ".join(problems))

    def save(self, path: Union[str, Path]) -> None:
        """Write D, A and e to an .npz archive."""
        with open(path, "wb") as f:
            np.savez(f, d=self.d_mat, a=self.a_mat, e=self.e_vec)

    @classmethod
    def load(cls, path: Union[str, Path]) -> "BeamformingState":
        with np.load(path) as archive:
            return cls(d_mat=archive["d"], a_mat=archive["a"], e_vec=archive["e"])


@dataclass(frozen=True, eq=False)
class EffectiveLink:
    """
    Factors of all K SINRs for one state and channel sample.

    Attributes:
        c: (K, K) received amplitudes c[k, i] = e^H H_k A d_i
        v: (K,) interference plus noise
        w: (K, N) rows w_k = H_k^H e
    """

    c: np.ndarray
    v: np.ndarray
    w: np.ndarray

    @property
    def signal(self) -> np.ndarray:
        return np.abs(np.diagonal(self.c, axis1=-2, axis2=-1)) ** 2

    @property
    def sinr(self) -> np.ndarray:
        return self.signal / self.v


def _check_dims(state: BeamformingState, ris_rows: np.ndarray, direct_rows: np.ndarray) -> None:
    k, n = direct_rows.shape[-2:]
    rows = ris_rows.shape[-2] + 1
    if state.d_mat.shape[1] != k:
        raise DimensionError(f"D has {state.d_mat.shape[1]} streams for {k} users")
    if state.a_mat.shape[0] != n:
        raise DimensionError(f"A has {state.a_mat.shape[0]} rows for {n} antennas")
    if state.e_vec.shape[0] != rows:
        raise DimensionError(f"e has length {state.e_vec.shape[0]}, channel has {rows} rows")


def _noise_vec(noise, n_users: int) -> np.ndarray:
    noise = np.broadcast_to(np.asarray(noise, dtype=float), (n_users,))
    if np.any(noise <= 0):
        raise DomainError("noise power must be positive")
    return noise


def link_factors(state: BeamformingState, ris_rows: np.ndarray, direct_rows: np.ndarray,
                 noise) -> EffectiveLink:
    """
    EffectiveLink for one sample or a batch of samples.

    Args:
        state: Beamforming state
        ris_rows: (K, U*M, N), optionally with leading batch axes
        direct_rows: (..., K, N) rows h_{b,k}^H
        noise: Scalar or per-user noise power

    Returns:
        EffectiveLink whose arrays carry the batch axes of direct_rows
    """
    _check_dims(state, ris_rows, direct_rows)
    noise = _noise_vec(noise, direct_rows.shape[-2])
    e_ris, e_last = state.e_vec[:-1], state.e_vec[-1]
    # b_k = e^H H_k
    b = np.einsum("m,...kmn->...kn", e_ris.conj(), ris_rows) + np.conj(e_last) * direct_rows
    c = b @ state.a_mat @ state.d_mat
    power = np.abs(c) ** 2
    signal = np.diagonal(power, axis1=-2, axis2=-1)
    v = power.sum(axis=-1) - signal + noise
    return EffectiveLink(c=c, v=v, w=b.conj())


def effective_link(state: BeamformingState, sample: ChannelSample, noise) -> EffectiveLink:
    return link_factors(state, sample.ris_rows, sample.direct_rows, noise)


def sinr_all(state: BeamformingState, sample: ChannelSample, noise) -> np.ndarray:
    """Omega_k for every user of one sample."""
    return effective_link(state, sample, noise).sinr


def sinr(state: BeamformingState, sample: ChannelSample, k: int, noise: float) -> float:
    """
    Achievable SINR of user k: |c_kk|^2 / (sum_{i != k} |c_ki|^2 + sigma_k^2).

    Raises:
        DimensionError: If the state does not match the sample
    """
    if not 0 <= k < sample.n_users:
        raise DimensionError(f"user index {k} out of range for {sample.n_users} users")
    link = effective_link(state, sample, _noise_vec(noise, sample.n_users))
    return float(link.sinr[k])


def _margin(omega, sinr_value):
    return 1.0 - np.asarray(sinr_value, dtype=float) / omega


def hinge(omega, eps: float, sinr_value):
    """
    Smooth hinge surrogate of the outage indicator, margin m = 1 - Omega/omega.

    0 for m < 0, m^2/(2 eps) for 0 <= m <= eps, m - eps/2 for m > eps.
    Works elementwise on arrays.
    """
    m = _margin(omega, sinr_value)
    out = np.where(m < 0, 0.0, np.where(m <= eps, m * m / (2.0 * eps), m - eps / 2.0))
    return float(out) if out.ndim == 0 else out


def hinge_slope(omega, eps: float, sinr_value):
    """Derivative of hinge with respect to Omega."""
    omega = np.asarray(omega, dtype=float)
    m = _margin(omega, sinr_value)
    middle = (np.asarray(sinr_value, dtype=float) / omega - 1.0) / (eps * omega)
    out = np.where(m < 0, 0.0, np.where(m <= eps, middle, -1.0 / omega))
    return float(out) if out.ndim == 0 else out


def _coefficients(link: EffectiveLink) -> np.ndarray:
    """kappa[k, k] = c_kk / v_k and kappa[k, i] = -|c_kk|^2 / v_k^2 * c_ki for i != k."""
    diag = np.diagonal(link.c, axis1=-2, axis2=-1)
    eye = np.eye(link.c.shape[-1], dtype=bool)
    cross = -(np.abs(diag) ** 2 / link.v ** 2)[..., None] * link.c
    own = (diag / link.v)[..., None]
    return np.where(eye, own, cross)


def _weighted_gradient(block: str, state: BeamformingState, ris_rows: np.ndarray,
                       direct_rows: np.ndarray, link: EffectiveLink, weights: np.ndarray) -> np.ndarray:
    """sum_k weights[k] * dOmega_k / d conj(block), summed over any batch axes."""
    kappa = weights[..., :, None] * _coefficients(link)
    w = link.w
    if block == "d":
        g_rows = w @ state.a_mat.conj()
        grad = np.swapaxes(g_rows, -1, -2) @ kappa
    elif block == "a":
        grad = np.swapaxes(w, -1, -2) @ (kappa @ state.d_mat.conj().T)
    elif block == "e":
        y = kappa.conj() @ (state.a_mat @ state.d_mat).T
        ris_part = np.einsum("...kmn,...kn->...m", ris_rows, y)
        direct_part = np.einsum("...kn,...kn->...", direct_rows, y)
        grad = np.concatenate([ris_part, direct_part[..., None]], axis=-1)
    else:
        raise UsageError(f"unknown block '{block}', expected one of {BLOCKS}")
    lead = grad.ndim - (1 if block == "e" else 2)
    if lead:
        grad = grad.reshape((-1,) + grad.shape[lead:]).sum(axis=0)
    return grad


def _normalize_block(block: str) -> str:
    name = block.lower()
    if name not in BLOCKS:
        raise UsageError(f"unknown block '{block}', expected one of {BLOCKS}")
    return name


def grad_sinr_block(block: str, state: BeamformingState, sample: ChannelSample, k: int, noise) -> np.ndarray:
    """
    Wirtinger gradient dOmega_k / d conj(x) for x in {D, A, e}, shaped like the block.

    The real directional derivative along delta is 2 Re <grad, delta>.
    """
    block = _normalize_block(block)
    link = effective_link(state, sample, noise)
    weights = np.zeros(sample.n_users)
    weights[k] = 1.0
    return _weighted_gradient(block, state, sample.ris_rows, sample.direct_rows, link, weights)


def grad_hinge_block(block: str, state: BeamformingState, sample: ChannelSample, k: int,
                     omega: float, eps: float, noise) -> np.ndarray:
    """Gradient of u_k: hinge slope at Omega_k times grad_sinr_block."""
    block = _normalize_block(block)
    link = effective_link(state, sample, noise)
    weights = np.zeros(sample.n_users)
    weights[k] = hinge_slope(omega, eps, link.sinr[k])
    if weights[k] == 0.0:
        return np.zeros_like(state.block(block))
    return _weighted_gradient(block, state, sample.ris_rows, sample.direct_rows, link, weights)


def hinge_block_gradient(block: str, state: BeamformingState, sample: ChannelSample,
                         omegas, eps: float, noise) -> Tuple[float, np.ndarray]:
    """
    Per-sample surrogate sum_k u_k and its gradient with respect to one block.

    Returns:
        (objective, gradient) with users reduced in index order
    """
    block = _normalize_block(block)
    link = effective_link(state, sample, noise)
    values = link.sinr
    slopes = hinge_slope(np.asarray(omegas, dtype=float), eps, values)
    objective = float(np.sum(hinge(np.asarray(omegas, dtype=float), eps, values)))
    grad = _weighted_gradient(block, state, sample.ris_rows, sample.direct_rows, link, np.atleast_1d(slopes))
    return objective, grad


def _stack_samples(samples: Sequence[ChannelSample]) -> Tuple[np.ndarray, np.ndarray]:
    if not samples:
        raise UsageError("empirical risk needs at least one channel sample")
    first = samples[0].ris_rows
    direct = np.stack([s.direct_rows for s in samples])
    if all(s.ris_rows is first for s in samples):
        return first, direct
    return np.stack([s.ris_rows for s in samples]), direct


def empirical_risk(state: BeamformingState, samples: Sequence[ChannelSample], omegas, eps: float,
                   noise) -> float:
    """(1/T) sum_t sum_k hinge(omega_k, eps, Omega_k(state, H_t))."""
    ris_rows, direct = _stack_samples(samples)
    link = link_factors(state, ris_rows, direct, noise)
    values = hinge(np.asarray(omegas, dtype=float), eps, link.sinr)
    return float(np.sum(values) / len(samples))


def empirical_risk_gradient(state: BeamformingState, samples: Sequence[ChannelSample], omegas,
                            eps: float, noise) -> Dict[str, np.ndarray]:
    """Batch gradient of empirical_risk for all three blocks."""
    ris_rows, direct = _stack_samples(samples)
    link = link_factors(state, ris_rows, direct, noise)
    slopes = hinge_slope(np.asarray(omegas, dtype=float), eps, link.sinr)
    return {
        block: _weighted_gradient(block, state, ris_rows, direct, link, slopes) / len(samples)
        for block in BLOCKS
    }


def lambda_max_psd(factor: np.ndarray, max_iter: int = POWER_ITER_CAP, tol: float = POWER_ITER_TOL) -> float:
    """
    Largest eigenvalue of F^H F by power iteration.

    Starts from the conjugate of the largest-norm row of F, which is never
    annihilated by F.

    Raises:
        DomainError: If F is empty or the zero matrix
        ConvergenceError: If the Rayleigh quotient has not settled after max_iter steps
    """
    factor = np.atleast_2d(np.asarray(factor, dtype=complex))
    if factor.size == 0:
        raise DomainError(f"cannot take the spectrum of an empty {factor.shape} matrix")
    row_norms = np.linalg.norm(factor, axis=1)
    if not np.any(row_norms > 0):
        raise DomainError("cannot take the spectrum of an all-zero matrix")
    x = factor[int(np.argmax(row_norms))].conj()
    x = x / np.linalg.norm(x)
    value = 0.0
    for _ in range(max_iter):
        y = factor.conj().T @ (factor @ x)
        new_value = float(np.real(np.vdot(x, y)))
        x = y / np.linalg.norm(y)
        if abs(new_value - value) <= tol * new_value:
            return new_value
        value = new_value
    raise ConvergenceError(
        f"power iteration did not converge in {max_iter} steps",
        last_iterate=x,
        last_value=value,
    )


@dataclass(frozen=True)
class LipschitzConstants:
    a: float
    b: float
    h_k: Tuple[float, ...]
    l_e1: float
    l_a1: float
    l_d1: float
    l_e2: float
    l_a2: float
    l_d2: float
    l_total: float

    @property
    def step_cap(self) -> float:
        return 1.0 / self.l_total


def channel_gain_bound(geo: GeometricChannel, k: int) -> float:
    """
    h_k >= lambda_max(H_k^H H_k) for every blockage realization of user k.

    lambda_max(R_k^H R_k) + (1/L_BU) lambda_max(G_k^H G_k) ||g_k||^2, where R_k are
    the RIS rows of H_k and G_k the BS-user steering matrix.
    """
    ris_rows = geo.ris_rows[k]
    ris_term = lambda_max_psd(ris_rows) if ris_rows.size and np.any(ris_rows) else 0.0
    steering = geo.bu_steering[k].T
    gains = geo.bu_gain[k]
    direct_term = lambda_max_psd(steering) * float(np.vdot(gains, gains).real) / geo.n_paths_bu
    return ris_term + direct_term


def lipschitz_constants(config: SystemConfig, geo: GeometricChannel,
                        noise: Optional[np.ndarray] = None) -> LipschitzConstants:
    """
    Uniform Lipschitz constants of the hinge surrogate over both nonzero branches.

    Uses the worst case omega = min omega_k and sigma^2 = min sigma_k^2. `noise`
    overrides config.noise_vec (the normalized problem passes its own).

    Raises:
        DomainError: If every channel of the geometry is zero
    """
    h = tuple(channel_gain_bound(geo, k) for k in range(geo.n_users))
    lam = max(h)
    if lam <= 0:
        raise DomainError("all-zero channel: Lipschitz constants are undefined")
    rows = geo.ris_elements + 1
    p_max = config.p_max
    a = rows * p_max ** 2 * lam ** 2
    b = rows * p_max * lam
    omega = float(np.min(config.omega_vec))
    sigma2 = float(np.min(config.noise_vec if noise is None else noise))
    sigma4 = sigma2 ** 2
    eps = config.epsilon
    nn = config.n_tx * config.n_rf

    l_e1 = ((2 + 5 * omega) * a - 4 * a * b / sigma2 + 6 * a * b ** 2 / sigma4) / (omega ** 2 * eps * sigma4)
    l_a1 = b ** 2 / (omega ** 2 * eps * sigma4 * nn) * (2 + (5 * omega - 4 * b) / sigma2 + 6 * b ** 2 / sigma4)
    l_d1 = nn * b ** 2 / (omega ** 2 * eps * sigma4 * p_max) * (2 + omega + 6 * b ** 2 / sigma4)
    l_e2 = 5 * a / (omega * sigma4)
    l_a2 = 5 * b ** 2 / (omega * sigma4 * nn)
    l_d2 = b ** 2 * nn / (omega * sigma4 * p_max)
    l_total = max(l_e1, l_a1, l_d1, l_e2, l_a2, l_d2)
    return LipschitzConstants(
        a=a, b=b, h_k=h,
        l_e1=l_e1, l_a1=l_a1, l_d1=l_d1,
        l_e2=l_e2, l_a2=l_a2, l_d2=l_d2,
        l_total=l_total,
    )
