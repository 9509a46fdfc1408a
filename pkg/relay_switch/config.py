"""
Settings resolution and logging setup.

Precedence, highest first: command-line flags, the TOML config file, RELAYGEN_*
environment variables, built-in defaults. The resolved values are echoed into
every artifact so a run can be reproduced from its outputs.
"""
from __future__ import annotations

import logging
import os
try:
    import tomllib
except ModuleNotFoundError:  # Python < 3.11
    import tomli as tomllib
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Dict, Mapping, Optional

from .errors import ConfigError

logger = logging.getLogger(__name__)

LOG_FORMAT = '%(asctime)s - %(levelname)s - %(message)s'

DEFAULTS: Dict[str, Any] = {
    # endpoints
    'large_url': None,
    'small_url': None,
    'large_model': 'large',
    'small_model': 'small',
    'api_key': None,
    'timeout': 60.0,
    'max_retries': 3,
    'logprobs_top_k': 5,
    # session
    'cue_set_path': None,
    'max_total_tokens': 32768,
    'max_small_segment_tokens': 128,
    'temperature': 0.6,
    'top_p': 0.95,
    'top_k': 20,
    # calibration
    'prompts_path': None,
    'samples_per_prompt': 4,
    'min_count': 3,
    'score_under': 'small',
    # runtime
    'jobs': 4,
    'output_dir': 'output',
    'log_level': 'INFO',
}

ENV_KEYS: Dict[str, str] = {
    'large_url': 'RELAYGEN_LARGE_URL',
    'small_url': 'RELAYGEN_SMALL_URL',
    'api_key': 'RELAYGEN_API_KEY',
    'large_model': 'RELAYGEN_LARGE_MODEL',
    'small_model': 'RELAYGEN_SMALL_MODEL',
}

# dotted TOML path -> settings key
FILE_KEYS: Dict[str, str] = {
    'prompts_path': 'prompts_path',
    'samples_per_prompt': 'samples_per_prompt',
    'min_count': 'min_count',
    'score_under': 'score_under',
    'cue_set_path': 'cue_set_path',
    'jobs': 'jobs',
    'output_dir': 'output_dir',
    'log_level': 'log_level',
    'endpoints.large.url': 'large_url',
    'endpoints.large.model': 'large_model',
    'endpoints.small.url': 'small_url',
    'endpoints.small.model': 'small_model',
    'endpoints.api_key': 'api_key',
    'endpoints.timeout': 'timeout',
    'endpoints.max_retries': 'max_retries',
    'endpoints.logprobs_top_k': 'logprobs_top_k',
    'budgets.max_total_tokens': 'max_total_tokens',
    'budgets.max_small_segment_tokens': 'max_small_segment_tokens',
    'sampling.temperature': 'temperature',
    'sampling.top_p': 'top_p',
    'sampling.top_k': 'top_k',
}
# per-endpoint overrides of shared client settings are accepted too
for _role in ('large', 'small'):
    for _key in ('api_key', 'timeout', 'max_retries', 'logprobs_top_k'):
        FILE_KEYS[f'endpoints.{_role}.{_key}'] = _key

NOT_ECHOED = frozenset({'api_key', 'output_dir', 'log_level'})


@dataclass
class ResolvedConfig:
    values: Dict[str, Any] = field(default_factory=dict)
    sources: Dict[str, str] = field(default_factory=dict)

    def __getitem__(self, key: str) -> Any:
        return self.values[key]

    def get(self, key: str, default: Any = None) -> Any:
        value = self.values.get(key)
        return default if value is None else value

    def echo(self) -> Dict[str, Any]:
        return {k: self.values[k] for k in sorted(self.values) if k not in NOT_ECHOED}


def _flatten(table: Mapping[str, Any], prefix: str = '') -> Dict[str, Any]:
    flat: Dict[str, Any] = {}
    for key, value in table.items():
        dotted = f"{prefix}{key}"
        if isinstance(value, dict):
            flat.update(_flatten(value, dotted + '.'))
        else:
            flat[dotted] = value
    return flat


def load_config_file(path: Path) -> Dict[str, Any]:
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"config file not found: {path}")
    try:
        with open(path, 'rb') as fh:
            data = tomllib.load(fh)
    except tomllib.TOMLDecodeError as exc:
        raise ConfigError(f"invalid TOML in {path}: {exc}") from exc
    settings: Dict[str, Any] = {}
    for dotted, value in _flatten(data).items():
        key = FILE_KEYS.get(dotted)
        if key is None:
            logger.warning(f"Ignoring unknown config key {dotted!r} in {path}")
            continue
        settings[key] = value
    return settings


def _coerce(key: str, value: Any) -> Any:
    default = DEFAULTS.get(key)
    if value is None or default is None:
        return value
    try:
        if isinstance(default, bool):
            return bool(value)
        if isinstance(default, int):
            return int(value)
        if isinstance(default, float):
            return float(value)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"invalid value for {key}: {value!r}") from exc
    return value


def resolve_config(
    flags: Optional[Mapping[str, Any]] = None,
    config_path: Optional[Path] = None,
    env: Optional[Mapping[str, str]] = None,
) -> ResolvedConfig:
    env = os.environ if env is None else env
    file_values = load_config_file(config_path) if config_path else {}
    resolved = ResolvedConfig()
    keys = list(DEFAULTS) + [k for k in (flags or {}) if k not in DEFAULTS]
    for key in keys:
        value, source = DEFAULTS.get(key), 'default'
        env_name = ENV_KEYS.get(key)
        if env_name and env.get(env_name):
            value, source = env[env_name], 'env'
        if file_values.get(key) is not None:
            value, source = file_values[key], 'file'
        if flags and flags.get(key) is not None:
            value, source = flags[key], 'flag'
        resolved.values[key] = _coerce(key, value)
        resolved.sources[key] = source
    return resolved


def setup_logging(level: str = 'INFO', log_file: Optional[Path] = None) -> None:
    numeric = logging.getLevelName(str(level).upper())
    if not isinstance(numeric, int):
        raise ConfigError(f"unknown log level: {level!r}")
    handlers: list = [logging.StreamHandler()]
    if log_file:
        Path(log_file).parent.mkdir(parents=True, exist_ok=True)
        handlers.append(logging.FileHandler(log_file, encoding='utf-8'))
    logging.basicConfig(level=numeric, format=LOG_FORMAT, handlers=handlers, force=True)
