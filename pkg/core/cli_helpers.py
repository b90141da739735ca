import os
from typing import Dict, Optional

from .config import ExperimentConfig, load_config
from .errors import ConfigError
from .logging_utils import replay_logs


def resolve_experiment_config_logic(
    config_path: str,
    seed: Optional[int] = None,
    out: Optional[str] = None,
    threads: Optional[int] = None,
    features: Optional[str] = None,
) -> Dict:
    """
    Loads the config file and applies the CLI overrides on top of it.
    This is the logic-only version.
    """
    logs = []
    config = load_config(config_path)
    logs.append({'level': 'debug', 'message': f"Loaded config from '{os.path.abspath(config_path)}'"})

    overrides = {
        'master_seed': seed,
        'output_dir': out,
        'threads': threads,
        'kept_features_path': features,
    }
    for field_name, value in overrides.items():
        if value is None:
            continue
        current = getattr(config, field_name)
        if current != value:
            logs.append({'level': 'info', 'message': f"Overriding {field_name}: {current!r} -> {value!r}"})

    resolved = config.with_overrides(**overrides)
    if resolved.kept_features_path and not os.path.isfile(resolved.kept_features_path):
        raise ConfigError(f"Kept-feature list '{resolved.kept_features_path}' does not exist")
    if resolved.threads > (os.cpu_count() or 1):
        logs.append({'level': 'warning',
                     'message': f"Warning: {resolved.threads} threads requested on {os.cpu_count()} CPU(s)."})
    return {'config': resolved, 'logs': logs}


def resolve_experiment_config(
    config_path: str,
    seed: Optional[int] = None,
    out: Optional[str] = None,
    threads: Optional[int] = None,
    features: Optional[str] = None,
) -> ExperimentConfig:
    """Wrapper that replays the logic-only logs to the console."""
    result = resolve_experiment_config_logic(config_path, seed=seed, out=out, threads=threads, features=features)
    replay_logs(result['logs'])
    return result['config']
