import dataclasses
import json
from dataclasses import dataclass, field
from typing import Any, Dict, Optional, Tuple

from core.errors import ConfigError, StorageError
from core.knn_core import KnnConfig
from core.noise_lab import sigma_ladder
from core.recover import RecoverabilityCriterion

DEFAULT_SIGMAS = tuple(sigma_ladder(0.015625, 0.25))
DEFAULT_SEEDS = (0, 1, 2, 3, 4)


@dataclass(frozen=True)
class ExperimentConfig:
    """
    Everything a sweep depends on. Together with the input file bytes this
    fully determines every emitted report.
    """
    input_path: str
    target_column: str
    kept_features_path: Optional[str] = None
    prune_threshold: float = 0.7
    split_ratios: Tuple[float, float, float] = (0.8, 0.1, 0.1)
    knn: KnnConfig = field(default_factory=KnnConfig)
    sigma_ladder: Tuple[float, ...] = DEFAULT_SIGMAS
    train_sizes: Tuple[int, ...] = ()
    seeds: Tuple[int, ...] = DEFAULT_SEEDS
    criterion: RecoverabilityCriterion = field(default_factory=RecoverabilityCriterion)
    output_dir: str = "results"
    master_seed: int = 0
    train_size_start: int = 112
    correction_sigma: float = 0.25
    clip_noise: bool = False
    emd_on_absolute: bool = False
    threads: int = 1
    write_samples: bool = False

    def __post_init__(self):
        object.__setattr__(self, 'split_ratios', tuple(float(r) for r in self.split_ratios))
        object.__setattr__(self, 'sigma_ladder', tuple(float(s) for s in self.sigma_ladder))
        object.__setattr__(self, 'train_sizes', tuple(self.train_sizes))
        object.__setattr__(self, 'seeds', tuple(self.seeds))
        validate_config(self)

    def to_dict(self) -> Dict[str, Any]:
        echo = {}
        for f in dataclasses.fields(self):
            value = getattr(self, f.name)
            if hasattr(value, 'to_dict'):
                value = value.to_dict()
            elif isinstance(value, tuple):
                value = list(value)
            echo[f.name] = value
        return echo

    def with_overrides(self, **overrides) -> 'ExperimentConfig':
        return dataclasses.replace(self, **{k: v for k, v in overrides.items() if v is not None})


def validate_config(config: ExperimentConfig):
    if not config.input_path:
        raise ConfigError("input_path is required")
    if not config.target_column:
        raise ConfigError("target_column is required")
    if not 0.0 < config.prune_threshold <= 1.0:
        raise ConfigError(f"prune_threshold must be in (0, 1], got {config.prune_threshold}")
    if len(config.split_ratios) != 3 or any(r <= 0 for r in config.split_ratios):
        raise ConfigError(f"split_ratios must be three positive numbers, got {list(config.split_ratios)}")
    if abs(sum(config.split_ratios) - 1.0) > 1e-9:
        raise ConfigError(f"split_ratios must sum to 1, got {sum(config.split_ratios)}")

    sigmas = config.sigma_ladder
    if not sigmas:
        raise ConfigError("sigma_ladder must not be empty")
    if any(s < 0 for s in sigmas):
        raise ConfigError("sigma_ladder entries must be >= 0")
    if any(b <= a for a, b in zip(sigmas, sigmas[1:])):
        raise ConfigError(f"sigma_ladder must be strictly increasing, got {list(sigmas)}")

    sizes = config.train_sizes
    if any(not isinstance(z, int) or isinstance(z, bool) or z <= 0 for z in sizes):
        raise ConfigError(f"train_sizes must be positive integers, got {list(sizes)}")
    if any(b < a for a, b in zip(sizes, sizes[1:])):
        raise ConfigError(f"train_sizes must be non-decreasing, got {list(sizes)}")
    if not isinstance(config.train_size_start, int) or config.train_size_start <= 0:
        raise ConfigError(f"train_size_start must be a positive integer, got {config.train_size_start}")

    if not config.seeds:
        raise ConfigError("seeds must not be empty")
    if any(not isinstance(s, int) or isinstance(s, bool) for s in config.seeds):
        raise ConfigError(f"seeds must be integers, got {list(config.seeds)}")
    if len(set(config.seeds)) != len(config.seeds):
        raise ConfigError("seeds must be distinct")
    if not isinstance(config.master_seed, int) or isinstance(config.master_seed, bool):
        raise ConfigError(f"master_seed must be an integer, got {config.master_seed!r}")
    if config.correction_sigma < 0:
        raise ConfigError(f"correction_sigma must be >= 0, got {config.correction_sigma}")
    if not isinstance(config.threads, int) or config.threads < 1:
        raise ConfigError(f"threads must be a positive integer, got {config.threads}")


_SIMPLE_TYPES = {
    'input_path': str,
    'target_column': str,
    'kept_features_path': (str, type(None)),
    'prune_threshold': (int, float),
    'split_ratios': list,
    'sigma_ladder': list,
    'train_sizes': list,
    'seeds': list,
    'output_dir': str,
    'master_seed': int,
    'train_size_start': int,
    'correction_sigma': (int, float),
    'clip_noise': bool,
    'emd_on_absolute': bool,
    'threads': int,
    'write_samples': bool,
}


def _build_nested(cls, data: Any, key: str):
    if not isinstance(data, dict):
        raise ConfigError(f"'{key}' must be a JSON object")
    known = {f.name for f in dataclasses.fields(cls)}
    unknown = sorted(set(data) - known)
    if unknown:
        raise ConfigError(f"Unknown key(s) in '{key}': {unknown}")
    try:
        return cls(**data)
    except TypeError as e:
        raise ConfigError(f"Invalid '{key}' section: {e}") from e


def config_from_dict(data: Dict[str, Any]) -> ExperimentConfig:
    if not isinstance(data, dict):
        raise ConfigError("Config must be a JSON object")
    known = {f.name for f in dataclasses.fields(ExperimentConfig)}
    unknown = sorted(set(data) - known)
    if unknown:
        raise ConfigError(f"Unknown config key(s): {unknown}")
    for key in ('input_path', 'target_column'):
        if key not in data:
            raise ConfigError(f"Missing required config key '{key}'")

    kwargs: Dict[str, Any] = {}
    for key, value in data.items():
        if key == 'knn':
            kwargs[key] = _build_nested(KnnConfig, value, key)
        elif key == 'criterion':
            kwargs[key] = _build_nested(RecoverabilityCriterion, value, key)
        else:
            expected = _SIMPLE_TYPES[key]
            # bool is an int subclass; never accept it where a number is meant
            if isinstance(value, bool) and expected is not bool:
                raise ConfigError(f"'{key}' must not be a boolean")
            if not isinstance(value, expected):
                raise ConfigError(f"'{key}' has the wrong type ({type(value).__name__})")
            kwargs[key] = value
    return ExperimentConfig(**kwargs)


def load_config(path: str) -> ExperimentConfig:
    try:
        with open(path, 'r', encoding='utf-8') as f:
            data = json.load(f)
    except FileNotFoundError:
        raise StorageError(f"Config file not found: {path}") from None
    except json.JSONDecodeError as e:
        raise ConfigError(f"Config file {path} is not valid JSON: {e}") from e
    except OSError as e:
        raise StorageError(f"Could not read config file {path}: {e}") from e
    return config_from_dict(data)
