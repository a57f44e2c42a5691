"""Geometric mmWave channels, Bernoulli blockages and stacked equivalent channels."""

import dataclasses
import logging
from dataclasses import dataclass
from functools import cached_property
from pathlib import Path
from typing import List, Tuple, Union

import numpy as np
import yaml

from risbeam.config import PathlossParams, SystemConfig
from risbeam.errors import DimensionError, DomainError, UsageError


logger = logging.getLogger(__name__)

AOD_RANGE = (-np.pi / 2, np.pi / 2)
ELEVATION_RANGE = (-np.pi / 4, np.pi / 4)


def ula_steering(theta, n: int) -> np.ndarray:
    """
    Half-wavelength ULA steering vector, entry i = exp(j*pi*i*sin(theta)).

    Args:
        theta: Angle in radians (scalar or array)
        n: Number of antennas

    Returns:
        Complex array of shape theta.shape + (n,)
    """
    phase = np.multiply.outer(np.sin(theta), np.arange(n))
    return np.exp(1j * np.pi * phase)


def upa_steering(theta, phi, m_rows: int, m_cols: int) -> np.ndarray:
    """
    Half-wavelength UPA steering vector as kron(vertical factor, horizontal factor).

    Entry (p, q), flattened as p*m_cols + q, is exp(j*pi*(p*sin(theta)*sin(phi) + q*cos(theta))).
    """
    col = np.exp(1j * np.pi * np.multiply.outer(np.sin(theta) * np.sin(phi), np.arange(m_rows)))
    row = np.exp(1j * np.pi * np.multiply.outer(np.cos(theta), np.arange(m_cols)))
    out = col[..., :, None] * row[..., None, :]
    return out.reshape(out.shape[:-2] + (m_rows * m_cols,))


def pathloss_variance(link_distance: float, pl_params: PathlossParams, shadowing_db: float = 0.0) -> float:
    """Linear gain variance 10^(PL/10) for PL = -C0 - 10*alpha*log10(D) - zeta."""
    if not link_distance > 0:
        raise DomainError(f"link distance must be positive, got {link_distance}")
    pl_db = -pl_params.c0_db - 10.0 * pl_params.exponent * np.log10(link_distance) - shadowing_db
    return 10.0 ** (pl_db / 10.0)


def draw_pathloss_gain(link_distance: float, pl_params: PathlossParams, rng: np.random.Generator) -> complex:
    """Draw g ~ CN(0, 10^(PL/10)) with a fresh lognormal shadowing term."""
    if not link_distance > 0:
        raise DomainError(f"link distance must be positive, got {link_distance}")
    zeta = rng.normal(0.0, pl_params.shadowing_std_db)
    variance = pathloss_variance(link_distance, pl_params, zeta)
    re, im = rng.standard_normal(2)
    return complex(np.sqrt(variance / 2.0) * (re + 1j * im))


@dataclass(frozen=True, eq=False)
class GeometricChannel:
    """
    Deterministic channel skeleton of one geometry.

    Per-path arrays:
        bu_gain, bu_aod: (K, L_BU) BS-user paths
        iu_gain, iu_aod_az, iu_aod_el: (U, K, L_IU) RIS-user paths
        bi_gain, bi_aoa_az, bi_aoa_el, bi_aod: (U, L_BI) BS-RIS paths
    """

    n_tx: int
    m_rows: int
    m_cols: int
    user_positions: np.ndarray
    bu_gain: np.ndarray
    bu_aod: np.ndarray
    iu_gain: np.ndarray
    iu_aod_az: np.ndarray
    iu_aod_el: np.ndarray
    bi_gain: np.ndarray
    bi_aoa_az: np.ndarray
    bi_aoa_el: np.ndarray
    bi_aod: np.ndarray

    def __post_init__(self):
        k, l_bu = self.bu_gain.shape
        u = self.bi_gain.shape[0]
        if self.bu_aod.shape != (k, l_bu):
            raise DimensionError("bu_aod shape does not match bu_gain")
        if self.iu_gain.shape[:2] != (u, k) or self.iu_aod_az.shape != self.iu_gain.shape \
                or self.iu_aod_el.shape != self.iu_gain.shape:
            raise DimensionError("RIS-user path arrays must have shape (U, K, L_IU)")
        for name in ("bi_aoa_az", "bi_aoa_el", "bi_aod"):
            if getattr(self, name).shape != self.bi_gain.shape:
                raise DimensionError(f"{name} shape does not match bi_gain")
        for name in ("bu_gain", "bu_aod", "iu_gain", "iu_aod_az", "iu_aod_el",
                     "bi_gain", "bi_aoa_az", "bi_aoa_el", "bi_aod"):
            if not np.all(np.isfinite(getattr(self, name))):
                raise DomainError(f"{name} contains non-finite values")

    @property
    def n_users(self) -> int:
        return self.bu_gain.shape[0]

    @property
    def n_paths_bu(self) -> int:
        return self.bu_gain.shape[1]

    @property
    def n_ris(self) -> int:
        return self.bi_gain.shape[0]

    @property
    def m_per_ris(self) -> int:
        return self.m_rows * self.m_cols

    @property
    def ris_elements(self) -> int:
        return self.n_ris * self.m_per_ris

    @cached_property
    def bu_steering(self) -> np.ndarray:
        """Steering matrix columns a_L(theta_{k,l}) stacked as (K, L_BU, N); G_k = bu_steering[k].T."""
        return ula_steering(self.bu_aod, self.n_tx)

    @cached_property
    def ris_user_channels(self) -> np.ndarray:
        """h_{i,uk} for every RIS and user, shape (U, K, M)."""
        if self.n_ris == 0:
            return np.zeros((0, self.n_users, self.m_per_ris), dtype=complex)
        steer = upa_steering(self.iu_aod_az, self.iu_aod_el, self.m_rows, self.m_cols)
        l_iu = self.iu_gain.shape[2]
        return np.einsum("ukl,uklm->ukm", self.iu_gain, steer) / np.sqrt(l_iu)

    @cached_property
    def bs_ris_channels(self) -> np.ndarray:
        """H_{bi,u} for every RIS, shape (U, M, N)."""
        if self.n_ris == 0:
            return np.zeros((0, self.m_per_ris, self.n_tx), dtype=complex)
        rx = upa_steering(self.bi_aoa_az, self.bi_aoa_el, self.m_rows, self.m_cols)
        tx = ula_steering(self.bi_aod, self.n_tx)
        l_bi = self.bi_gain.shape[1]
        return np.einsum("ul,ulm,uln->umn", self.bi_gain, rx, tx.conj()) / np.sqrt(l_bi)

    @cached_property
    def ris_rows(self) -> np.ndarray:
        """Blockage-free rows diag(h_{i,k}^H) H_bi of every H_k, shape (K, U*M, N)."""
        h_i = self.ris_user_channels
        h_bi = self.bs_ris_channels
        rows = np.einsum("ukm,umn->kumn", h_i.conj(), h_bi)
        return rows.reshape(self.n_users, self.ris_elements, self.n_tx)

    def direct_channels(self, gamma: np.ndarray) -> np.ndarray:
        """h_{b,k} = sqrt(1/L_BU) sum_l gamma_{k,l} g_{k,l} a_L(theta_{k,l}); gamma may carry leading batch axes."""
        weights = gamma * self.bu_gain
        return np.einsum("...kl,kln->...kn", weights, self.bu_steering) / np.sqrt(self.n_paths_bu)

    def scaled(self, factor: float) -> "GeometricChannel":
        """Scale every H_k by `factor` (direct and BS-RIS gains carry the factor once)."""
        return dataclasses.replace(self, bu_gain=self.bu_gain * factor, bi_gain=self.bi_gain * factor)

    def without_ris(self) -> "GeometricChannel":
        """Same direct links with no RIS deployed."""
        k = self.n_users
        return dataclasses.replace(
            self,
            iu_gain=np.zeros((0, k, 0), dtype=complex),
            iu_aod_az=np.zeros((0, k, 0)),
            iu_aod_el=np.zeros((0, k, 0)),
            bi_gain=np.zeros((0, 0), dtype=complex),
            bi_aoa_az=np.zeros((0, 0)),
            bi_aoa_el=np.zeros((0, 0)),
            bi_aod=np.zeros((0, 0)),
        )


@dataclass(frozen=True, eq=False)
class BlockageDraw:
    """gamma_{k,l} in {0, 1}; 0 means the path is blocked."""

    gamma: np.ndarray

    def __post_init__(self):
        if not np.all((self.gamma == 0) | (self.gamma == 1)):
            raise DomainError("blockage draws must be 0 or 1")


@dataclass(frozen=True, eq=False)
class ChannelSample:
    """
    One blockage realization of the stacked equivalent channels.

    ris_rows is shared by every sample of a geometry; direct_rows holds h_{b,k}^H.
    """

    ris_rows: np.ndarray
    direct_rows: np.ndarray

    def __post_init__(self):
        if self.ris_rows.ndim != 3 or self.direct_rows.ndim != 2:
            raise DimensionError("ris_rows must be (K, U*M, N) and direct_rows (K, N)")
        k, _, n = self.ris_rows.shape
        if self.direct_rows.shape != (k, n):
            raise DimensionError(
                f"direct_rows shape {self.direct_rows.shape} does not match ({k}, {n})"
            )

    @property
    def n_users(self) -> int:
        return self.direct_rows.shape[0]

    @property
    def n_rows(self) -> int:
        """U*M + 1."""
        return self.ris_rows.shape[1] + 1

    @property
    def n_tx(self) -> int:
        return self.direct_rows.shape[1]

    @property
    def h_eq(self) -> np.ndarray:
        """Stacked H_k = [diag(h_{i,k}^H) H_bi ; h_{b,k}^H] for all users, shape (K, U*M+1, N)."""
        return np.concatenate([self.ris_rows, self.direct_rows[:, None, :]], axis=1)


def _uniform_in_disc(center, radius: float, count: int, rng: np.random.Generator) -> np.ndarray:
    r = radius * np.sqrt(rng.random(count))
    angle = rng.uniform(-np.pi, np.pi, count)
    return np.asarray(center, dtype=float) + np.stack([r * np.cos(angle), r * np.sin(angle)], axis=1)


def _distance(a, b) -> float:
    return float(np.hypot(a[0] - b[0], a[1] - b[1]))


def gen_geometry(config: SystemConfig, rng: np.random.Generator) -> GeometricChannel:
    """
    Draw user positions, path angles and path gains for one geometry.

    Draw order (fixed for reproducibility): user positions, BS-user angles and
    gains, RIS-user angles and gains, BS-RIS angles and gains.
    """
    k, u = config.n_users, config.n_ris
    geometry = config.geometry
    users = _uniform_in_disc(geometry.user_center, geometry.user_radius, k, rng)

    bu_aod = rng.uniform(*AOD_RANGE, (k, config.n_paths_bu))
    bu_gain = np.array([
        [draw_pathloss_gain(_distance(geometry.bs, users[i]), config.pathloss.direct, rng)
         for _ in range(config.n_paths_bu)]
        for i in range(k)
    ], dtype=complex)

    iu_aod_az = rng.uniform(*AOD_RANGE, (u, k, config.n_paths_iu))
    iu_aod_el = rng.uniform(*ELEVATION_RANGE, (u, k, config.n_paths_iu))
    iu_gain = np.array([
        [[draw_pathloss_gain(_distance(geometry.ris[r], users[i]), config.pathloss.ris_user, rng)
          for _ in range(config.n_paths_iu)]
         for i in range(k)]
        for r in range(u)
    ], dtype=complex).reshape(u, k, config.n_paths_iu)

    bi_aoa_az = rng.uniform(*AOD_RANGE, (u, config.n_paths_bi))
    bi_aoa_el = rng.uniform(*ELEVATION_RANGE, (u, config.n_paths_bi))
    bi_aod = rng.uniform(*AOD_RANGE, (u, config.n_paths_bi))
    bi_gain = np.array([
        [draw_pathloss_gain(_distance(geometry.bs, geometry.ris[r]), config.pathloss.bs_ris, rng)
         for _ in range(config.n_paths_bi)]
        for r in range(u)
    ], dtype=complex).reshape(u, config.n_paths_bi)

    return GeometricChannel(
        n_tx=config.n_tx,
        m_rows=config.m_rows,
        m_cols=config.m_cols,
        user_positions=users,
        bu_gain=bu_gain,
        bu_aod=bu_aod,
        iu_gain=iu_gain,
        iu_aod_az=iu_aod_az,
        iu_aod_el=iu_aod_el,
        bi_gain=bi_gain,
        bi_aoa_az=bi_aoa_az,
        bi_aoa_el=bi_aoa_el,
        bi_aod=bi_aod,
    )


def sample_blockages(config: SystemConfig, rng: np.random.Generator, count: int) -> np.ndarray:
    """Draw `count` independent gamma matrices at once, shape (count, K, L_BU).

    Consumes the generator exactly like `count` successive sample_blockage calls.
    """
    uniforms = rng.random((count, config.n_users, config.n_paths_bu))
    return (uniforms >= config.p_block_matrix).astype(np.int8)


def sample_blockage(config: SystemConfig, rng: np.random.Generator) -> BlockageDraw:
    """gamma_{k,l} = 0 with probability p_{k,l}, independently across users and paths."""
    return BlockageDraw(gamma=sample_blockages(config, rng, 1)[0])


def assemble_equivalent(geo: GeometricChannel, draw: BlockageDraw) -> ChannelSample:
    """Compose one blockage draw with the geometry into the stacked channels H_k."""
    if draw.gamma.shape != geo.bu_gain.shape:
        raise DimensionError(
            f"blockage draw shape {draw.gamma.shape} does not match {geo.bu_gain.shape}"
        )
    h_b = geo.direct_channels(draw.gamma)
    return ChannelSample(ris_rows=geo.ris_rows, direct_rows=h_b.conj())


def no_blockage_sample(geo: GeometricChannel) -> ChannelSample:
    """H^(0): every path unblocked."""
    return assemble_equivalent(geo, BlockageDraw(gamma=np.ones(geo.bu_gain.shape, dtype=np.int8)))


def training_set(geo: GeometricChannel, config: SystemConfig, n_samples: int,
                 rng: np.random.Generator) -> List[ChannelSample]:
    """Training data H: n_samples independent blockage draws sharing the RIS-side rows."""
    if n_samples < 1:
        raise UsageError(f"training set size must be >= 1, got {n_samples}")
    gammas = sample_blockages(config, rng, n_samples)
    direct = geo.direct_channels(gammas).conj()
    return [ChannelSample(ris_rows=geo.ris_rows, direct_rows=direct[t]) for t in range(n_samples)]


def noise_reference(config: SystemConfig) -> float:
    """sigma_ref = sqrt(min_k sigma_k^2), the amplitude the normalized problem divides by."""
    return float(np.sqrt(config.noise_vec.min()))


def normalize_problem(config: SystemConfig, geo: GeometricChannel) -> Tuple[SystemConfig, GeometricChannel, float]:
    """
    Rescale channels by 1/sigma_ref so the smallest noise power becomes 1.

    SINR, hinge and outage are invariant under this joint scaling.

    Returns:
        (scaled config, scaled geometry, sigma_ref)
    """
    noise = config.noise_vec
    scale = noise_reference(config)
    return config.with_noise(noise / scale ** 2), geo.scaled(1.0 / scale), scale


def _complex_to_list(values: np.ndarray):
    return np.stack([values.real, values.imag], axis=-1).tolist()


def _list_to_complex(values) -> np.ndarray:
    pairs = np.asarray(values, dtype=float)
    if pairs.size == 0:
        return pairs.reshape(pairs.shape[:-1] if pairs.ndim > 1 else pairs.shape).astype(complex)
    return pairs[..., 0] + 1j * pairs[..., 1]


_REAL_FIELDS = ("user_positions", "bu_aod", "iu_aod_az", "iu_aod_el", "bi_aoa_az", "bi_aoa_el", "bi_aod")
_COMPLEX_FIELDS = ("bu_gain", "iu_gain", "bi_gain")


def save_geometry(geo: GeometricChannel, path: Union[str, Path]) -> None:
    """Write a geometry to YAML; complex gains are stored as [re, im] pairs."""
    document = {
        "n_tx": geo.n_tx,
        "m_rows": geo.m_rows,
        "m_cols": geo.m_cols,
        "shapes": {name: list(getattr(geo, name).shape) for name in _REAL_FIELDS + _COMPLEX_FIELDS},
    }
    for name in _REAL_FIELDS:
        document[name] = getattr(geo, name).tolist()
    for name in _COMPLEX_FIELDS:
        document[name] = _complex_to_list(getattr(geo, name))
    with open(path, "w", newline="\n") as f:
        yaml.safe_dump(document, f, sort_keys=False)
    logger.info(f"Geometry written to {path}")


def load_geometry(path: Union[str, Path]) -> GeometricChannel:
    """Read a geometry written by save_geometry."""
    with open(path, "r") as f:
        document = yaml.safe_load(f)
    shapes = document["shapes"]
    fields = {}
    for name in _REAL_FIELDS:
        fields[name] = np.asarray(document[name], dtype=float).reshape(shapes[name])
    for name in _COMPLEX_FIELDS:
        fields[name] = _list_to_complex(document[name]).reshape(shapes[name])
    return GeometricChannel(
        n_tx=int(document["n_tx"]),
        m_rows=int(document["m_rows"]),
        m_cols=int(document["m_cols"]),
        **fields,
    )
