# common.py
"""
Shared constants, configuration records, the error hierarchy and logging setup.

- Config records are frozen dataclasses validated on construction.
- load_config() reads divfree.yml (PyYAML) and falls back to built-in defaults.
- Every module logs through logging.getLogger(__name__); setup_logging() is called
  once by the CLI.
"""
import logging
import os
from dataclasses import dataclass, field, asdict, replace
from pathlib import Path
from typing import Any, Dict, Optional, Tuple

import yaml

# =========================
#   Constants
# =========================
LOG_FORMAT = '%(asctime)s - %(name)s - %(levelname)s - %(message)s'

DATA_DIR = os.getenv("DIVFREE_DATA_DIR", "runs")
CONFIG_PATH = os.getenv("DIVFREE_CONFIG", "divfree.yml")
LOG_LEVEL = os.getenv("DIVFREE_LOG_LEVEL", "INFO")

VARIANTS = ("pg", "pi", "pe")

# Row-major 3x3 component channels of a plane-form stress or potential.
PLANE_ACTIVE = (0, 1, 3, 4, 8)          # P11, P12, P21, P22, P33
PLANE_ZERO = (2, 5, 6, 7)               # P13, P23, P31, P32
PLANE_ZERO_PAIRS = ((0, 2), (1, 2), (2, 0), (2, 1))

N_INPUT_CHANNELS = 11                   # E, nu, nine entries of F_bar
N_OUTPUT_CHANNELS = 9

SYMMETRY_RTOL = 1e-12

EXIT_OK = 0
EXIT_IO = 2
EXIT_NUMERICAL = 3
EXIT_CONFIG = 4


# =========================
#   Errors
# =========================
class DivfreeError(Exception):
    """Base error; exit_code is what the CLI returns for it."""
    exit_code = 1


class PreconditionError(DivfreeError, ValueError):
    exit_code = 1


class DataIOError(DivfreeError):
    exit_code = EXIT_IO


class ConfigError(DivfreeError):
    exit_code = EXIT_CONFIG


class NumericalError(DivfreeError):
    exit_code = EXIT_NUMERICAL


class SolverDivergenceError(NumericalError):
    def __init__(self, message: str, iterations: int, residual: float):
        super().__init__(message)
        self.iterations = iterations
        self.residual = residual


class NonFiniteLossError(NumericalError):
    def __init__(self, epoch: int, message: Optional[str] = None):
        super().__init__(message or f"non-finite loss at epoch {epoch}")
        self.epoch = epoch


# =========================
#   Logging
# =========================
def setup_logging(level: Optional[str] = None) -> None:
    logging.basicConfig(
        level=getattr(logging, str(level or LOG_LEVEL).upper(), logging.INFO),
        format=LOG_FORMAT
    )


logger = logging.getLogger(__name__)


# =========================
#   Configuration
# =========================
@dataclass(frozen=True)
class GridConfig:
    n_dis: int = 32
    ell_U: float = 1.0
    spatial_dims: int = 2

    def __post_init__(self):
        if self.n_dis <= 0 or self.n_dis % 2:
            raise PreconditionError(f"n_dis must be even and positive, got {self.n_dis}")
        if not self.ell_U > 0:
            raise PreconditionError(f"ell_U must be positive, got {self.ell_U}")
        if self.spatial_dims not in (2, 3):
            raise PreconditionError(f"spatial_dims must be 2 or 3, got {self.spatial_dims}")

    @property
    def shape(self) -> Tuple[int, ...]:
        return (self.n_dis,) * self.spatial_dims

    @property
    def spectral_shape(self) -> Tuple[int, ...]:
        return (self.n_dis,) * (self.spatial_dims - 1) + (self.n_dis // 2 + 1,)


@dataclass(frozen=True)
class MicrostructureConfig:
    s_U: float = 1.0 / 3.0
    E_range: Tuple[float, float] = (50.0, 200.0)      # GPa
    nu_range: Tuple[float, float] = (0.25, 0.35)
    seed: int = 0

    def __post_init__(self):
        if not 0.0 < self.s_U <= 1.0:
            raise PreconditionError(f"s_U must lie in (0, 1], got {self.s_U}")
        e_min, e_max = self.E_range
        if not 0.0 < e_min <= e_max:
            raise PreconditionError(f"invalid E_range {self.E_range}")
        nu_min, nu_max = self.nu_range
        if not 0.0 < nu_min <= nu_max < 0.5:
            raise PreconditionError(f"invalid nu_range {self.nu_range}")


@dataclass(frozen=True)
class SolverConfig:
    tol_div: float = 1e-8
    max_iter: int = 500
    ref_modulus_rule: str = "bounds_mean"

    def __post_init__(self):
        if not self.tol_div > 0:
            raise PreconditionError(f"tol_div must be positive, got {self.tol_div}")
        if self.max_iter < 1:
            raise PreconditionError(f"max_iter must be >= 1, got {self.max_iter}")
        if self.ref_modulus_rule not in ("arithmetic_mean", "bounds_mean"):
            raise PreconditionError(f"unknown ref_modulus_rule {self.ref_modulus_rule!r}")


@dataclass(frozen=True)
class FnoConfig:
    n_hid: int = 4
    width: int = 16
    modes: int = 8
    variant: str = "pe"
    activation: str = "gelu"
    n_neu: Optional[int] = None             # if set, hidden width = 11 * n_neu

    def __post_init__(self):
        if self.n_hid < 1:
            raise PreconditionError(f"n_hid must be >= 1, got {self.n_hid}")
        if self.modes < 1:
            raise PreconditionError(f"modes must be >= 1, got {self.modes}")
        if self.variant not in VARIANTS:
            raise ConfigError(f"unknown variant {self.variant!r}, expected one of {VARIANTS}")
        if self.activation != "gelu":
            raise ConfigError(f"unsupported activation {self.activation!r}")
        if self.hidden_width < 1:
            raise PreconditionError("hidden width must be positive")

    @property
    def hidden_width(self) -> int:
        return N_INPUT_CHANNELS * self.n_neu if self.n_neu else self.width


@dataclass(frozen=True)
class LossConfig:
    c_div: float = 0.0
    epsilon: float = 1e-8
    variant: str = "pe"

    def __post_init__(self):
        if self.c_div < 0:
            raise PreconditionError(f"c_div must be >= 0, got {self.c_div}")
        if not self.epsilon > 0:
            raise PreconditionError(f"epsilon must be positive, got {self.epsilon}")
        if self.variant not in VARIANTS:
            raise ConfigError(f"unknown variant {self.variant!r}")


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 100
    lr0: float = 1e-3
    seed: int = 0
    batch_size: int = 0                     # 0 = full batch
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    log_every: int = 10

    def __post_init__(self):
        if self.epochs < 0:
            raise PreconditionError(f"epochs must be >= 0, got {self.epochs}")
        if not self.lr0 > 0:
            raise PreconditionError(f"lr0 must be positive, got {self.lr0}")


@dataclass(frozen=True)
class DatasetConfig:
    n_dat: int = 64
    n_tra: int = 48
    n_res: int = 32
    f22: Tuple[float, ...] = (1.002, 1.004)
    seed: int = 0
    p_mode: str = "component"

    def __post_init__(self):
        if self.n_dat < 1 or not 0 <= self.n_tra <= self.n_dat:
            raise PreconditionError(f"need 0 <= n_tra <= n_dat, got {self.n_tra}/{self.n_dat}")
        if not self.f22:
            raise PreconditionError("at least one load is required")
        if self.p_mode not in ("component", "shared"):
            raise ConfigError(f"unknown p_mode {self.p_mode!r}")

    @property
    def n_tes(self) -> int:
        return self.n_dat - self.n_tra


@dataclass(frozen=True)
class RunSettings:
    grid: GridConfig = field(default_factory=GridConfig)
    microstructure: MicrostructureConfig = field(default_factory=MicrostructureConfig)
    solver: SolverConfig = field(default_factory=SolverConfig)
    dataset: DatasetConfig = field(default_factory=DatasetConfig)
    model: FnoConfig = field(default_factory=FnoConfig)
    loss: LossConfig = field(default_factory=LossConfig)
    training: TrainConfig = field(default_factory=TrainConfig)
    output: str = DATA_DIR
    threads: int = 1

    def to_dict(self) -> Dict[str, Any]:
        return asdict(self)


_SECTIONS = {
    "grid": GridConfig,
    "microstructure": MicrostructureConfig,
    "solver": SolverConfig,
    "dataset": DatasetConfig,
    "model": FnoConfig,
    "loss": LossConfig,
    "training": TrainConfig,
}


# =========================
#   Helpers
# =========================
def _coerce(value: Any, default: Any) -> Any:
    """Coerce a YAML scalar/list to the type of the built-in default."""
    if isinstance(default, bool):
        return bool(value)
    if isinstance(default, int):
        return int(value)
    if isinstance(default, float):
        return parse_float(value)
    if isinstance(default, tuple):
        if not isinstance(value, (list, tuple)):
            value = [value]
        return tuple(parse_float(v) for v in value)
    if default is None:
        return None if value is None else int(value)
    return str(value)


def parse_float(value: Any) -> float:
    """Accept plain numbers and simple fractions such as '1/3'."""
    if isinstance(value, str) and "/" in value:
        num, den = value.split("/", 1)
        return float(num) / float(den)
    return float(value)


def _normalize_block(cls, block: Optional[Dict[str, Any]]):
    defaults = cls()
    if not block:
        return defaults
    if not isinstance(block, dict):
        raise ConfigError(f"section for {cls.__name__} must be a mapping")
    known = {k: v for k, v in asdict(defaults).items()}
    unknown = set(block) - set(known)
    if unknown:
        raise ConfigError(f"unknown keys for {cls.__name__}: {sorted(unknown)}")
    try:
        values = {k: _coerce(v, known[k]) for k, v in block.items()}
        return replace(defaults, **values)
    except (TypeError, ValueError) as e:
        if isinstance(e, ConfigError):
            raise
        raise ConfigError(f"invalid value in {cls.__name__}: {str(e)}") from e


def load_config(path: Optional[str] = None) -> RunSettings:
    """
    Read a divfree.yml file into RunSettings.
    - path None: use DIVFREE_CONFIG if that file exists, otherwise defaults only.
    - explicit path that does not exist: ConfigError.
    """
    if path is None:
        if not Path(CONFIG_PATH).is_file():
            return RunSettings()
        path = CONFIG_PATH

    p = Path(path)
    try:
        with p.open("r", encoding="utf-8") as f:
            raw = yaml.safe_load(f) or {}
    except FileNotFoundError as e:
        raise ConfigError(f"config file not found: {p}") from e
    except yaml.YAMLError as e:
        raise ConfigError(f"malformed YAML in {p}: {str(e)}") from e

    if not isinstance(raw, dict):
        raise ConfigError(f"{p} must contain a mapping at top level")

    sections = {name: _normalize_block(cls, raw.get(name)) for name, cls in _SECTIONS.items()}
    output = raw.get("output", {}) or {}
    settings = RunSettings(
        **sections,
        output=str(output.get("root", DATA_DIR)),
        threads=int(output.get("threads", 1)),
    )
    logger.info(f"Loaded config {p}")
    return settings
