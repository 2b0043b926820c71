"""
Configuration: analysis settings, experiment configuration files and environment defaults
"""

import hashlib
import json
import logging
import multiprocessing
import os
from dataclasses import asdict, dataclass, field, replace
from fractions import Fraction
from pathlib import Path
from typing import Dict, Optional, Tuple

from dotenv import load_dotenv

from errors import ConfigurationError
from geometry import check_grid_size

load_dotenv()

logger = logging.getLogger(__name__)

APP_VERSION = os.getenv('APP_VERSION', '1.0.0')
SNR_SCHEDULE = (1 / 30, 1 / 20, 1 / 10, 1 / 2)

U_CRITICAL = 0.1185
U_CRITICAL_CONSERVATIVE = 1.9637

# nominal sizes of the five tests
DEFAULT_LEVELS = {'U': 0.05, 'U_tilde': 0.10, 'Q': 0.05, 'V': 0.05, 'K': 0.10}


@dataclass(frozen=True)
class AnalysisSettings:
    """Parameters shared by the estimator and the tests"""

    N: int = 128
    rho: float = 3.0
    m: int = 9
    m_prime: int = 16
    c: float = 2.0
    L: int = 64
    mad: str = 'maximum'
    u_threshold: str = 'published'
    u_tilde_reference: str = 'gaussian'

    def __post_init__(self):
        check_grid_size(self.N)
        if not 0 < self.rho <= 3:
            raise ConfigurationError(f"rho must lie in (0, 3], got {self.rho}")
        if not self.m < self.m_prime < 2 * self.m:
            raise ConfigurationError(f"Need m < m' < 2m, got m={self.m}, m'={self.m_prime}")
        if self.N % (2 * self.m_prime) != 0:
            raise ConfigurationError(f"N/(2m') must be an integer, got N={self.N}, m'={self.m_prime}")
        if self.c <= 1:
            raise ConfigurationError(f"c must exceed 1, got {self.c}")
        if self.L < 16:
            raise ConfigurationError(f"The circle quadrature needs L >= 16 nodes, got {self.L}")
        if self.mad not in ('maximum', 'median'):
            raise ConfigurationError(f"mad must be 'maximum' or 'median', got '{self.mad}'")
        if self.u_threshold not in ('published', 'conservative', 'calibrated'):
            raise ConfigurationError(f"Unknown u_threshold '{self.u_threshold}'")
        if self.u_tilde_reference not in ('gaussian', 'calibrated'):
            raise ConfigurationError(f"Unknown u_tilde_reference '{self.u_tilde_reference}'")

    @property
    def u_critical(self) -> float:
        return U_CRITICAL_CONSERVATIVE if self.u_threshold == 'conservative' else U_CRITICAL

    def fingerprint(self) -> Dict:
        return {'N': self.N, 'rho': self.rho, 'm': self.m, 'm_prime': self.m_prime,
                'c': self.c, 'L': self.L, 'mad': self.mad}


def default_workers() -> int:
    return int(os.getenv('QSTRUCT_WORKERS', '1'))


def default_backend() -> str:
    return os.getenv('QSTRUCT_BACKEND', 'loky')


def resolve_workers(requested: int) -> int:
    """Clip the worker count to the available cores"""
    available = multiprocessing.cpu_count()
    if requested < 1:
        logger.warning(f"Worker count {requested} is below 1, using 1")
        return 1
    if requested > available:
        logger.warning(f"Worker count {requested} exceeds the {available} available cores, using {available}")
        return available
    return requested


@dataclass(frozen=True)
class ExperimentConfig:
    models: Tuple[str, ...] = ('A1', 'A2', 'A3', 'A4', 'A5', 'A6')
    noise_levels: Tuple[float, ...] = SNR_SCHEDULE
    scheme: str = '60'
    n0: int = 1
    replicates: int = 200
    seed: int = 0
    output: Optional[str] = None
    workers: int = field(default_factory=default_workers)
    backend: str = field(default_factory=default_backend)
    min_tail_count: int = 50
    chunk_size: int = 64
    settings: AnalysisSettings = field(default_factory=AnalysisSettings)

    def __post_init__(self):
        if self.replicates < 1:
            raise ConfigurationError(f"replicates must be at least 1, got {self.replicates}")
        if any(s < 0 for s in self.noise_levels):
            raise ConfigurationError(f"Noise levels must be positive or exactly 0: {self.noise_levels}")
        if self.n0 < 1:
            raise ConfigurationError(f"n0 must be at least 1, got {self.n0}")
        if self.chunk_size < 1:
            raise ConfigurationError(f"chunk_size must be at least 1, got {self.chunk_size}")
        if not self.scheme.isdigit() and not Path(self.scheme).exists():
            raise ConfigurationError(f"Scheme file not found: {self.scheme}")

    def config_hash(self) -> str:
        data = asdict(self)
        data.pop('workers')
        data.pop('backend')
        payload = json.dumps(data, sort_keys=True, default=str)
        return hashlib.sha256(payload.encode()).hexdigest()

    def with_overrides(self, **overrides) -> 'ExperimentConfig':
        return build_config(base=self, **overrides)


def parse_fraction(text: str) -> float:
    """Parse '1/30', '0.05' or '0' as a float"""
    try:
        return float(Fraction(text.strip()))
    except (ValueError, ZeroDivisionError) as e:
        raise ConfigurationError(f"Not a number or fraction: '{text}'") from e


def _parse_list(text: str):
    return tuple(item.strip() for item in text.split(',') if item.strip())


SETTINGS_KEYS = {'N': int, 'rho': float, 'm': int, 'm_prime': int, 'c': float, 'L': int,
                 'mad': str, 'u_threshold': str, 'u_tilde_reference': str}
CONFIG_KEYS = {'models': lambda v: tuple(m.upper() for m in _parse_list(v)),
               'noise': lambda v: tuple(parse_fraction(x) for x in _parse_list(v)),
               'scheme': str, 'n0': int, 'reps': int, 'seed': int, 'output': str,
               'workers': int, 'backend': str, 'min_tail_count': int, 'chunk_size': int}
RENAMED = {'noise': 'noise_levels', 'reps': 'replicates'}


def read_config_file(path) -> Dict[str, str]:
    """Read 'key = value' lines; '#' starts a comment"""
    path = Path(path)
    if not path.exists():
        raise ConfigurationError(f"Config file not found: {path}")
    entries = {}
    for lineno, raw in enumerate(path.read_text().splitlines(), start=1):
        line = raw.split('#', 1)[0].strip()
        if not line:
            continue
        if '=' not in line:
            raise ConfigurationError(f"{path}:{lineno}: expected 'key = value', got '{raw.strip()}'")
        key, value = (part.strip() for part in line.split('=', 1))
        if key not in CONFIG_KEYS and key not in SETTINGS_KEYS:
            raise ConfigurationError(f"{path}:{lineno}: unknown key '{key}'")
        entries[key] = value
    return entries


def build_config(base: Optional[ExperimentConfig] = None, **values) -> ExperimentConfig:
    """Apply string or typed overrides (None values are ignored) to base"""
    base = base or ExperimentConfig()
    config_updates, settings_updates = {}, {}
    for key, value in values.items():
        if value is None:
            continue
        try:
            if key in SETTINGS_KEYS:
                settings_updates[key] = SETTINGS_KEYS[key](value) if isinstance(value, str) else value
            elif key in CONFIG_KEYS:
                parsed = CONFIG_KEYS[key](value) if isinstance(value, str) else value
                config_updates[RENAMED.get(key, key)] = parsed
            else:
                raise ConfigurationError(f"Unknown configuration key '{key}'")
        except ValueError as e:
            raise ConfigurationError(f"Invalid value for '{key}': {value}") from e

    settings = replace(base.settings, **settings_updates) if settings_updates else base.settings
    return replace(base, settings=settings, **config_updates)


def load_config(path=None, **overrides) -> ExperimentConfig:
    """Defaults, then environment, then the config file, then overrides"""
    file_values = read_config_file(path) if path else {}
    config = build_config(**file_values)
    config = build_config(base=config, **overrides)
    logger.debug(f"Resolved configuration {config.config_hash()[:12]}")
    return config
