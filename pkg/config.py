"""
FlowAug - Configuration Settings
Centralized defaults for every knob, environment presets, and the flat
key=value run configuration that is echoed into each output directory
"""

import hashlib
import logging
import os
from pathlib import Path
from typing import Any, Dict, Iterable, Mapping, Optional

from dotenv import dotenv_values

from engine.errors import ConfigError
from utils.io_utils import atomic_write_text

logger = logging.getLogger(__name__)

RUN_CONFIG_FILENAME = 'run_config.env'


class Config:
    """Base configuration class"""

    # Flow architecture
    FLOW_LEVELS = 3
    FLOW_STEPS = 4
    FLOW_FILTERS = 32
    ATTENTION_LEVELS = 1
    ATTENTION_HEADS = 4
    SCALE_STABILIZER = 'sigmoid'

    # Flow training
    FLOW_EPOCHS = 50
    FLOW_BATCH_SIZE = 32
    WARMUP_STEPS = 500
    MAX_LR = 1e-3
    LR_POWER = 1.0
    GRADIENT_CLIP_NORM = 50.0
    DISCRETIZATION = 1.0 / 256.0

    # Latent interpolation
    INTERP_MODE = 'linear'
    INTERP_PAIRING = 'random'
    T_LOW = 0.2
    T_HIGH = 0.8
    TEMPERATURE = 1.0
    FLOW_TRAIN_SCOPE = 'rare'

    # Synthetic dataset
    IMAGE_SIZE = 32
    N_IMAGES = 3000
    CLASS_RATIOS = (0.70, 0.22, 0.08)
    BACKGROUND_NOISE = 0.03
    SWELL_AMPLITUDE_MEDIUM = 0.35
    SWELL_AMPLITUDE_BAD = 0.8
    SPIKE_RATE_BAD = 0.02
    DEAD_TRACE_PROB_BAD = 0.12

    # Baseline classifier
    CLF_FILTERS = (8, 16)
    CLF_MAX_EPOCHS = 100
    CLF_PATIENCE = 5
    CLF_BATCH_SIZE = 32
    CLF_LR = 1e-3
    CLF_VALID_FRACTION = 0.1

    # Experiments
    FOLDS = 10
    AUGMENT_COUNT = 250
    SWEEP_SIZES = (0, 100, 250, 500, 1000)
    SWEEP_RUNS = 10
    SPLIT_RATIOS = (0.70, 0.15, 0.15)
    RARE_CLASS = 'bad'
    SEED = 0

    # Logging settings
    LOG_LEVEL = os.environ.get('LOG_LEVEL', 'INFO')
    LOG_FORMAT = os.environ.get('LOG_FORMAT', '%(asctime)s - %(name)s - %(levelname)s - %(message)s')
    PROGRESS_BARS = True


class DevelopmentConfig(Config):
    """Development configuration"""
    LOG_LEVEL = os.environ.get('LOG_LEVEL', 'INFO')


class ProductionConfig(Config):
    """Production configuration"""
    LOG_LEVEL = os.environ.get('LOG_LEVEL', 'WARNING')


class TestingConfig(Config):
    """Testing configuration: desk-scale sizes for fast suites"""
    TESTING = True
    PROGRESS_BARS = False
    FLOW_LEVELS = 2
    FLOW_STEPS = 2
    FLOW_FILTERS = 8
    FLOW_EPOCHS = 2
    WARMUP_STEPS = 10
    IMAGE_SIZE = 8
    N_IMAGES = 120
    CLF_FILTERS = (4, 8)
    CLF_MAX_EPOCHS = 8
    FOLDS = 3
    AUGMENT_COUNT = 10
    SWEEP_SIZES = (0, 5, 10)
    SWEEP_RUNS = 2


# Configuration mapping
config = {
    'development': DevelopmentConfig,
    'production': ProductionConfig,
    'testing': TestingConfig,
    'default': DevelopmentConfig
}

# Keys a run configuration may set, in echo order
RUN_KEYS = (
    'flow_levels', 'flow_steps', 'flow_filters', 'attention_levels', 'attention_heads', 'scale_stabilizer',
    'flow_epochs', 'flow_batch_size', 'warmup_steps', 'max_lr', 'lr_power', 'gradient_clip_norm', 'discretization',
    'interp_mode', 'interp_pairing', 't_low', 't_high', 'temperature', 'flow_train_scope',
    'image_size', 'n_images', 'class_ratios', 'background_noise', 'swell_amplitude_medium',
    'swell_amplitude_bad', 'spike_rate_bad', 'dead_trace_prob_bad',
    'clf_filters', 'clf_max_epochs', 'clf_patience', 'clf_batch_size', 'clf_lr', 'clf_valid_fraction',
    'folds', 'augment_count', 'sweep_sizes', 'sweep_runs', 'split_ratios', 'rare_class', 'seed',
)

ARCHITECTURE_KEYS = (
    'image_size', 'flow_levels', 'flow_steps', 'flow_filters', 'attention_levels', 'attention_heads',
    'scale_stabilizer',
)

CHOICES = {
    'scale_stabilizer': ('sigmoid', 'exp'),
    'interp_mode': ('linear', 'spherical'),
    'interp_pairing': ('random',),
    'flow_train_scope': ('rare', 'all'),
    'rare_class': ('good', 'medium', 'bad'),
}

_TRUE = {'1', 'true', 'yes', 'on'}
_FALSE = {'0', 'false', 'no', 'off'}


def get_config_class(env: Optional[str] = None):
    """Preset selected by `env`, else FLOWAUG_ENV, else 'default'."""
    name = env or os.environ.get('FLOWAUG_ENV', 'default')
    if name not in config:
        raise ConfigError(f"unknown configuration preset '{name}', expected one of {sorted(config)}")
    return config[name]


def _coerce(key: str, raw: Any, default: Any) -> Any:
    try:
        if isinstance(default, bool):
            if isinstance(raw, bool):
                return raw
            text = str(raw).strip().lower()
            if text in _TRUE:
                return True
            if text in _FALSE:
                return False
            raise ValueError(f"not a boolean: {raw!r}")
        if isinstance(default, tuple):
            items = raw if isinstance(raw, (tuple, list)) else [p for p in str(raw).split(',') if p.strip()]
            element = type(default[0]) if default else float
            return tuple(_coerce(key, item, element()) for item in items)
        if isinstance(default, int):
            if isinstance(raw, float) and not raw.is_integer():
                raise ValueError(f"not an integer: {raw!r}")
            return int(str(raw).strip()) if not isinstance(raw, (int, float)) else int(raw)
        if isinstance(default, float):
            return float(raw)
        value = str(raw).strip()
    except ConfigError:
        raise
    except (TypeError, ValueError) as e:
        raise ConfigError(f"invalid value for '{key}': {str(e)}")
    if key in CHOICES and value not in CHOICES[key]:
        raise ConfigError(f"invalid value for '{key}': {value!r}, expected one of {CHOICES[key]}")
    return value


def _format(value: Any) -> str:
    if isinstance(value, bool):
        return 'true' if value else 'false'
    if isinstance(value, tuple):
        return ','.join(_format(v) for v in value)
    if isinstance(value, float):
        return repr(value)
    return str(value)


class RunConfig:
    """
    Effective configuration of one run

    Precedence: preset defaults < key=value file < explicit overrides.
    Values are available as attributes (`rc.flow_levels`) or by key.
    """

    def __init__(self, values: Mapping[str, Any], preset: str = 'default'):
        self._values: Dict[str, Any] = dict(values)
        self.preset = preset

    @classmethod
    def defaults(cls, env: Optional[str] = None) -> 'RunConfig':
        preset_class = get_config_class(env)
        values = {key: getattr(preset_class, key.upper()) for key in RUN_KEYS}
        return cls(values, preset=env or os.environ.get('FLOWAUG_ENV', 'default'))

    @classmethod
    def load(
        cls,
        path: Optional[str] = None,
        overrides: Optional[Mapping[str, Any]] = None,
        env: Optional[str] = None,
    ) -> 'RunConfig':
        """
        Build the effective configuration

        Args:
            path: optional key=value file
            overrides: explicit values (CLI flags); None entries are ignored
            env: preset name

        Returns:
            RunConfig

        Raises:
            ConfigError: unknown key, uncoercible value or unreadable file
        """
        run_config = cls.defaults(env)
        if path is not None:
            if not Path(path).is_file():
                raise ConfigError(f"config file not found: {path}")
            file_values = dotenv_values(path)
            logger.info(f"Loaded {len(file_values)} config entries from {path}")
            run_config = run_config.updated(file_values)
        if overrides:
            run_config = run_config.updated({k: v for k, v in overrides.items() if v is not None})
        return run_config

    def updated(self, changes: Mapping[str, Any]) -> 'RunConfig':
        values = dict(self._values)
        unknown = sorted(k for k in changes if k.lower() not in values)
        if unknown:
            raise ConfigError(f"unknown config key(s): {', '.join(unknown)}")
        for key, raw in changes.items():
            key = key.lower()
            if raw is None:
                raise ConfigError(f"config key '{key}' has no value")
            values[key] = _coerce(key, raw, self._values[key])
        return RunConfig(values, preset=self.preset)

    def __getattr__(self, name: str) -> Any:
        values = self.__dict__.get('_values', {})
        if name in values:
            return values[name]
        raise AttributeError(name)

    def __getitem__(self, key: str) -> Any:
        return self._values[key]

    def as_dict(self) -> Dict[str, Any]:
        return dict(self._values)

    def to_text(self, keys: Iterable[str] = RUN_KEYS) -> str:
        return ''.join(f"{key}={_format(self._values[key])}\n" for key in keys)

    def digest(self) -> bytes:
        """SHA-256 over the canonical architecture keys."""
        return hashlib.sha256(self.to_text(ARCHITECTURE_KEYS).encode('utf-8')).digest()

    def write(self, out_dir: str) -> Path:
        """Echo the effective configuration as run_config.env in `out_dir`."""
        path = Path(out_dir) / RUN_CONFIG_FILENAME
        atomic_write_text(path, f"# effective configuration (preset: {self.preset})\n" + self.to_text())
        return path

    def __eq__(self, other: object) -> bool:
        return isinstance(other, RunConfig) and self._values == other._values

    def __repr__(self) -> str:
        return f"RunConfig(preset='{self.preset}', seed={self._values.get('seed')})"

