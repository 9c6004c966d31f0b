from pathlib import Path
from typing import Dict, Iterable, Optional, Tuple

from pydantic import Field, ValidationError
from pydantic_settings import BaseSettings, SettingsConfigDict
import structlog

from fmnet.models import NetworkConfig, TrainConfig
from fmnet.utils.errors import ConfigurationError, FormatError

logger = structlog.get_logger()


class Settings(BaseSettings):
    """Process settings, read from FMNET_* environment variables and .env"""

    # Worker parallelism (FMNET_THREADS)
    threads: int = Field(1, ge=1)

    # Logging
    log_level: str = "INFO"
    log_json: bool = True

    # FastAPI Configuration
    api_host: str = "0.0.0.0"
    api_port: int = 8000
    debug: bool = False

    # Checkpoint served by the inference API
    checkpoint_path: Optional[str] = None

    # API Limits
    max_upload_size_mb: int = 256

    @property
    def MAX_UPLOAD_SIZE(self) -> int:
        return self.max_upload_size_mb * 1024 * 1024

    model_config = SettingsConfigDict(env_prefix="FMNET_", env_file=".env", env_file_encoding="utf-8", extra="ignore")


# Global settings instance
settings = Settings()


PRESETS: Dict[str, Dict[str, str]] = {
    "paper": {},
    "desk": {
        "c": "16",
        "n": "2",
        "p": "2",
        "m": "2",
        "patch_size": "32",
        "epochs": "10",
        "batch_size": "8",
        "initial_lr": "1e-3",
        "steps_per_epoch": "25",
    },
}

NETWORK_KEYS = frozenset(NetworkConfig.model_fields)
TRAIN_KEYS = frozenset(TrainConfig.model_fields)


def parse_key_values(lines: Iterable[str], source: str) -> Dict[str, str]:
    """Parse flat key=value lines; '#' starts a comment"""
    values: Dict[str, str] = {}
    for lineno, raw in enumerate(lines, 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise FormatError(f"{source}:{lineno}", f"expected key=value, got {raw.strip()!r}")
        key, value = line.split("=", 1)
        values[key.strip()] = value.strip()
    return values


def load_config_file(path: Path) -> Dict[str, str]:
    path = Path(path)
    if not path.is_file():
        raise ConfigurationError(f"config file not found: {path}")
    return parse_key_values(path.read_text(encoding="utf-8").splitlines(), str(path))


def resolve_configs(
    file_values: Optional[Dict[str, str]] = None,
    flag_values: Optional[Dict[str, str]] = None,
    default_preset: str = "paper",
) -> Tuple[NetworkConfig, TrainConfig]:
    """Merge built-in defaults < preset < config file < --set flags"""
    merged: Dict[str, str] = {}
    merged.update(file_values or {})
    merged.update(flag_values or {})

    preset_name = merged.pop("preset", default_preset)
    if preset_name not in PRESETS:
        raise ConfigurationError(f"preset: unknown preset {preset_name!r}, expected one of {sorted(PRESETS)}")

    values = dict(PRESETS[preset_name])
    values.update(merged)

    unknown = sorted(set(values) - NETWORK_KEYS - TRAIN_KEYS)
    if unknown:
        raise ConfigurationError(f"unknown config key(s): {', '.join(unknown)}")

    network = validate_config(NetworkConfig, {k: v for k, v in values.items() if k in NETWORK_KEYS})
    train = validate_config(TrainConfig, {k: v for k, v in values.items() if k in TRAIN_KEYS})
    logger.debug("Resolved configuration", preset=preset_name, overrides=sorted(merged))
    return network, train


def validate_config(model, values):
    """Validate a config mapping, turning pydantic errors into ConfigurationError"""
    try:
        return model.model_validate(values)
    except ValidationError as e:
        problems = "; ".join(
            f"{'.'.join(str(part) for part in err['loc']) or model.__name__}: {err['msg']}" for err in e.errors()
        )
        raise ConfigurationError(f"invalid {model.__name__}: {problems}") from e


def parse_set_flags(flags: Iterable[str]) -> Dict[str, str]:
    return parse_key_values(flags, "--set")


def config_snapshot(network: NetworkConfig, train: Optional[TrainConfig] = None) -> Dict[str, str]:
    """Flatten configs to key=value strings that resolve_configs reads back"""
    snapshot: Dict[str, str] = {}
    for model in (network, train):
        if model is None:
            continue
        for key, value in model.model_dump().items():
            if value is None:
                continue
            if isinstance(value, (list, tuple)):
                value = ",".join(str(v) for v in value)
            elif isinstance(value, float):
                value = repr(value)
            snapshot[key] = str(value).lower() if isinstance(value, bool) else str(value)
    return snapshot
