"""Configuration loading and validation.

The YAML file is grouped per component like the detector's original
`config/config.yaml`; each section is a frozen pydantic model so unknown
keys and out-of-range values are rejected with the offending key path.
"""

import logging
from pathlib import Path
from typing import Any, Dict, List, Literal, Optional, Sequence, Tuple, Union

import numpy as np
import yaml
from pydantic import BaseModel, ConfigDict, Field, ValidationError, model_validator

from risbeam.errors import ConfigError


logger = logging.getLogger(__name__)

DEFAULT_P_GRID = [0.1, 0.2, 0.3, 0.4, 0.5, 0.6, 0.7, 0.8, 0.9]


def dbm_to_watts(dbm: float) -> float:
    """Convert a power level in dBm to watts."""
    return 10.0 ** ((dbm - 30.0) / 10.0)


def rate_to_sinr(rate: float) -> float:
    """SINR threshold for a target rate, from R = log2(1 + omega)."""
    return 2.0 ** rate - 1.0


class _Section(BaseModel):
    model_config = ConfigDict(extra="forbid", frozen=True)


class PathlossParams(_Section):
    """Log-distance path loss PL = -C0 - 10*alpha*log10(D) - zeta (dB)."""

    c0_db: float = 61.4
    exponent: float = Field(2.0, gt=0)
    shadowing_std_db: float = Field(5.8, ge=0)


class PathlossTable(_Section):
    """Path-loss parameters per link class.

    Defaults are common 28 GHz values (LOS exponent 2.0 for the RIS links,
    NLOS exponent 3.3 for the direct link), not measured constants.
    """

    direct: PathlossParams = PathlossParams(exponent=3.3)
    bs_ris: PathlossParams = PathlossParams(exponent=2.0)
    ris_user: PathlossParams = PathlossParams(exponent=2.0)


class GeometryConfig(_Section):
    """2-D node placement in meters."""

    bs: Tuple[float, float] = (0.0, 0.0)
    ris: List[Tuple[float, float]] = [(40.0, 10.0), (40.0, -10.0)]
    user_center: Tuple[float, float] = (50.0, 0.0)
    user_radius: float = Field(5.0, ge=0)


class SystemConfig(_Section):
    """All scalars of one scenario."""

    n_tx: int = Field(32, gt=0)
    n_rf: int = Field(2, gt=0)
    n_users: int = Field(2, gt=0)
    n_ris: int = Field(2, ge=0)
    m_per_ris: int = Field(64, gt=0)
    m_rows: int = Field(8, gt=0)
    m_cols: int = Field(8, gt=0)
    p_max: float = Field(5.0, gt=0)
    noise_dbm: Optional[float] = -100.0
    noise_power: Optional[Union[float, List[float]]] = None
    rate_target: float = Field(1.0, gt=0)
    sinr_targets: Optional[List[float]] = None
    epsilon: float = Field(0.01, gt=0, lt=1)
    p_block: Union[float, List[List[float]]] = 0.5
    n_paths_bu: int = Field(5, gt=0)
    n_paths_bi: int = Field(5, gt=0)
    n_paths_iu: int = Field(5, gt=0)
    geometry: GeometryConfig = GeometryConfig()
    pathloss: PathlossTable = PathlossTable()

    @model_validator(mode="after")
    def _check_invariants(self):
        if not self.n_users <= self.n_rf <= self.n_tx:
            raise ValueError(
                f"n_rf: need n_users <= n_rf <= n_tx, got {self.n_users}, {self.n_rf}, {self.n_tx}"
            )
        if self.m_rows * self.m_cols != self.m_per_ris:
            raise ValueError(
                f"m_per_ris: m_rows * m_cols = {self.m_rows * self.m_cols} != {self.m_per_ris}"
            )
        if len(self.geometry.ris) != self.n_ris:
            raise ValueError(
                f"geometry.ris: {len(self.geometry.ris)} positions for n_ris = {self.n_ris}"
            )
        if self.noise_power is None and self.noise_dbm is None:
            raise ValueError("noise_power: one of noise_power or noise_dbm is required")
        noise = np.atleast_1d(np.asarray(self.noise_power if self.noise_power is not None else 0.0))
        if self.noise_power is not None:
            if noise.size not in (1, self.n_users) or np.any(noise <= 0):
                raise ValueError("noise_power: must be positive, scalar or one value per user")
        if self.sinr_targets is not None:
            if len(self.sinr_targets) != self.n_users or min(self.sinr_targets) <= 0:
                raise ValueError("sinr_targets: need one positive value per user")
        p = np.asarray(self.p_block, dtype=float)
        if p.ndim not in (0, 2) or (p.ndim == 2 and p.shape != (self.n_users, self.n_paths_bu)):
            raise ValueError("p_block: must be a scalar or an n_users x n_paths_bu matrix")
        if np.any(p < 0) or np.any(p > 1):
            raise ValueError("p_block: probabilities must lie in [0, 1]")
        return self

    @property
    def ris_elements(self) -> int:
        """Total number of reflecting elements U*M."""
        return self.n_ris * self.m_per_ris

    @property
    def noise_vec(self) -> np.ndarray:
        """Per-user noise power in watts."""
        if self.noise_power is not None:
            noise = np.asarray(self.noise_power, dtype=float)
        else:
            noise = np.asarray(dbm_to_watts(self.noise_dbm))
        return np.broadcast_to(noise, (self.n_users,)).astype(float)

    @property
    def omega_vec(self) -> np.ndarray:
        """Per-user SINR thresholds omega_k."""
        if self.sinr_targets is not None:
            return np.asarray(self.sinr_targets, dtype=float)
        return np.full(self.n_users, rate_to_sinr(self.rate_target))

    @property
    def p_block_matrix(self) -> np.ndarray:
        """Blockage probabilities p_{k,l} as an n_users x n_paths_bu matrix."""
        p = np.asarray(self.p_block, dtype=float)
        return np.broadcast_to(p, (self.n_users, self.n_paths_bu)).astype(float)

    def with_p_block(self, p_block: float) -> "SystemConfig":
        return self.model_copy(update={"p_block": float(p_block)})

    def with_noise(self, noise: Sequence[float]) -> "SystemConfig":
        return self.model_copy(update={"noise_power": [float(x) for x in noise], "noise_dbm": None})

    def without_ris(self) -> "SystemConfig":
        """Reduced system with no RIS deployed."""
        geometry = self.geometry.model_copy(update={"ris": []})
        return self.model_copy(update={"n_ris": 0, "geometry": geometry})


class TrainingConfig(_Section):
    """Training data H for the empirical risk."""

    n_samples: int = Field(1000, gt=0)
    sampler: Literal["training_set", "streaming"] = "training_set"


class ScheduleConfig(_Section):
    kind: Literal["constant", "inverse_t"] = "inverse_t"
    alpha0: float = Field(0.05, gt=0, le=1)
    tau: float = Field(1000.0, gt=0)
    lipschitz_cap: bool = False


class StopConfig(_Section):
    t_max: int = Field(100_000, gt=0)
    window: int = Field(500, gt=0)
    tol: float = Field(1e-4, ge=0)
    log_every: int = Field(1, gt=0)


class ExperimentSection(_Section):
    mode: Literal["train", "eval", "sweep", "selftest"] = "train"
    seed: int = Field(0, ge=0)
    n_geo: int = Field(500, gt=0)
    n_trials: int = Field(10_000, gt=0)
    p_grid: List[float] = DEFAULT_P_GRID
    output_dir: str = "results"
    threads: int = Field(1, gt=0)
    normalize_noise: bool = True
    trace_geometry: int = Field(0, ge=0)
    geometry_file: Optional[str] = None
    state_file: Optional[str] = None

    @model_validator(mode="after")
    def _check_grid(self):
        if self.mode == "sweep" and not self.p_grid:
            raise ValueError("p_grid: must be nonempty for sweep mode")
        if any(p < 0 or p > 1 for p in self.p_grid):
            raise ValueError("p_grid: values must lie in [0, 1]")
        return self


class MonitorConfig(_Section):
    enabled: bool = False
    host: str = "127.0.0.1"
    port: int = Field(8080, gt=0)


class LoggingConfig(_Section):
    level: Literal["DEBUG", "INFO", "WARNING", "ERROR"] = "INFO"


class ExperimentConfig(_Section):
    """Resolved experiment: scenario plus training, schedule, stop and run settings."""

    system: SystemConfig = SystemConfig()
    training: TrainingConfig = TrainingConfig()
    schedule: ScheduleConfig = ScheduleConfig()
    stop: StopConfig = StopConfig()
    experiment: ExperimentSection = ExperimentSection()
    monitor: MonitorConfig = MonitorConfig()
    logging: LoggingConfig = LoggingConfig()


def _error_key(error: Dict[str, Any]) -> str:
    loc = [str(part) for part in error.get("loc", ()) if not isinstance(part, int)]
    # Model-level validators report the field name at the start of the message.
    message = str(error.get("msg", ""))
    if error.get("type") == "value_error":
        head = message.removeprefix("Value error, ").split(":", 1)[0]
        if head and " " not in head:
            loc.append(head)
    return ".".join(loc)


def _apply_override(data: Dict[str, Any], assignment: str) -> None:
    if "=" not in assignment:
        raise ConfigError(assignment, "override must look like key=value")
    key, raw = assignment.split("=", 1)
    key = key.strip()
    parts = key.split(".")
    node = data
    for part in parts[:-1]:
        child = node.setdefault(part, {})
        if not isinstance(child, dict):
            raise ConfigError(key, f"'{part}' is not a section")
        node = child
    node[parts[-1]] = yaml.safe_load(raw)


def build_config(data: Optional[Dict[str, Any]], overrides: Sequence[str] = ()) -> ExperimentConfig:
    """Validate a raw mapping (plus dotted key=value overrides) into an ExperimentConfig."""
    data = dict(data or {})
    for assignment in overrides:
        _apply_override(data, assignment)
    try:
        return ExperimentConfig.model_validate(data)
    except ValidationError as exc:
        first = exc.errors()[0]
        key = _error_key(first)
        raise ConfigError(key, first.get("msg", "invalid value")) from exc


def load_config(config_path: Union[str, Path] = "config/config.yaml",
                overrides: Sequence[str] = ()) -> ExperimentConfig:
    """Load configuration from a YAML file."""
    path = Path(config_path)
    with open(path, "r") as f:
        data = yaml.safe_load(f)
    if data is not None and not isinstance(data, dict):
        raise ConfigError("", f"{path} must contain a mapping at top level")
    config = build_config(data, overrides)
    logger.info(f"Configuration loaded from {path}")
    return config


def dump_manifest(config: ExperimentConfig, path: Union[str, Path], **extra: Any) -> None:
    """Write the resolved configuration plus run metadata in the config's YAML format."""
    document = config.model_dump(mode="json")
    document["run"] = {key: value for key, value in extra.items()}
    with open(path, "w", newline="\n") as f:
        yaml.safe_dump(document, f, sort_keys=False)
