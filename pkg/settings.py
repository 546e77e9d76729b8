"""
Run configuration.

Sources, highest precedence first:
    1. command line (`--set section.key=value` and dedicated flags)
    2. the TOML config file (`[blackbox]`, `[blackbox.sgm]`, `[net]`, `[train]`, `[eval]`, `[camera]`)
    3. environment variables and `.env` (NDR_ prefix, `__` between levels,
       e.g. NDR_TRAIN__STEPS=500)
    4. defaults

Unknown keys in the config file and overrides are rejected. Unrelated variables
in the environment or `.env` are ignored; NDR_ variables naming an unknown key
inside a section are rejected by that section.
"""

try:
    import tomllib
except ImportError:  # Python < 3.11
    import tomli as tomllib
from pathlib import Path
from typing import Any, Dict, List, Literal, Optional, Sequence, Union

from pydantic import BaseModel, ConfigDict, Field, ValidationError, model_validator
from pydantic_settings import BaseSettings, SettingsConfigDict, SettingsError

from blackbox import BlackboxConfig
from errors import ConfigError, InputError
from evaluation import CameraModel
from refine_net import NetConfig
from train import TrainConfig


class EvalConfig(BaseModel):
    model_config = ConfigDict(extra="forbid")

    thresholds: List[float] = Field(default_factory=lambda: [2.0, 3.0, 4.0, 5.0])
    see_patch: int = Field(5, ge=1)
    edge_range_th: float = Field(2.0, ge=0)
    fill_raw_holes: bool = True


class LoggingSettings(BaseSettings):
    """Log verbosity, read from NDR_LOG_LEVEL only"""

    model_config = SettingsConfigDict(env_prefix="NDR_", env_file=".env", env_file_encoding="utf-8", extra="ignore")

    log_level: str = "INFO"


class RunConfig(BaseSettings):
    model_config = SettingsConfigDict(
        env_prefix="NDR_",
        env_nested_delimiter="__",
        env_file=".env",
        env_file_encoding="utf-8",
        extra="ignore",
    )

    net_preset: Literal["desk", "full"] = "desk"
    blackbox: BlackboxConfig = Field(default_factory=BlackboxConfig)
    net: NetConfig = Field(default_factory=NetConfig)
    train: TrainConfig = Field(default_factory=TrainConfig)
    eval: EvalConfig = Field(default_factory=EvalConfig)
    camera: CameraModel = Field(default_factory=CameraModel)

    @model_validator(mode="before")
    @classmethod
    def _apply_net_preset(cls, data: Any) -> Any:
        if isinstance(data, dict) and data.get("net_preset") == "full":
            net = data.get("net") or {}
            if isinstance(net, NetConfig):
                net = net.model_dump(exclude_unset=True)
            data["net"] = {**NetConfig.full().model_dump(), **net}
        return data


def parse_value(text: str) -> Any:
    """Interpret an override value as TOML, falling back to a bare string"""
    try:
        return tomllib.loads(f"value = {text}")["value"]
    except tomllib.TOMLDecodeError:
        return text


def parse_overrides(overrides: Sequence[str]) -> Dict[str, Any]:
    tree: Dict[str, Any] = {}
    for item in overrides:
        key, sep, value = item.partition("=")
        if not sep or not key.strip():
            raise ConfigError(f"override must look like section.key=value, got {item!r}")
        *parents, leaf = key.strip().split(".")
        node = tree
        for part in parents:
            node = node.setdefault(part, {})
            if not isinstance(node, dict):
                raise ConfigError(f"override {item!r} conflicts with an earlier value")
        node[leaf] = parse_value(value.strip())
    return tree


def deep_merge(base: Dict[str, Any], update: Dict[str, Any]) -> Dict[str, Any]:
    merged = dict(base)
    for key, value in update.items():
        if isinstance(value, dict) and isinstance(merged.get(key), dict):
            merged[key] = deep_merge(merged[key], value)
        else:
            merged[key] = value
    return merged


def read_config_file(path: Union[str, Path]) -> Dict[str, Any]:
    path = Path(path)
    if not path.exists():
        raise InputError(f"config file not found: {path}")
    try:
        with open(path, "rb") as f:
            return tomllib.load(f)
    except tomllib.TOMLDecodeError as e:
        raise ConfigError(f"invalid config file {path}: {e}") from e


def load_run_config(
    path: Optional[Union[str, Path]] = None,
    overrides: Sequence[str] = (),
    env_file: Optional[Union[str, Path]] = ".env",
) -> RunConfig:
    values = read_config_file(path) if path else {}
    values = deep_merge(values, parse_overrides(overrides))
    unknown = sorted(set(values) - set(RunConfig.model_fields))
    if unknown:
        raise ConfigError(f"unknown config keys: {', '.join(unknown)}")
    try:
        return RunConfig(_env_file=env_file, **values)
    except ValidationError as e:
        raise ConfigError(f"invalid configuration: {e}") from e
    except SettingsError as e:
        raise ConfigError(f"unreadable environment settings: {e}") from e
