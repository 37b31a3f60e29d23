from __future__ import annotations

from functools import lru_cache
import logging
from pathlib import Path
from typing import Any

from pydantic import ValidationError
from pydantic_settings import BaseSettings, SettingsConfigDict

from box6d.exceptions import ConfigFormatError, ConfigLineError, ConfigValueError, DatasetIOError
from box6d.schemas import PipelineConfig

logger = logging.getLogger(__name__)


class Settings(BaseSettings):
    model_config = SettingsConfigDict(
        env_prefix="BOX6D_", env_file=".env", env_file_encoding="utf-8", extra="ignore"
    )

    log_level: str = "INFO"
    # None means one worker per logical CPU.
    jobs: int | None = None
    results_filename: str = "results.csv"
    traces_filename: str = "traces.csv"


@lru_cache
def get_settings() -> Settings:
    return Settings()


def _assign(tree: dict[str, Any], dotted: str, value: Any) -> None:
    *parents, leaf = dotted.split(".")
    node = tree
    for part in parents:
        child = node.setdefault(part, {})
        if not isinstance(child, dict):
            raise KeyError(dotted)
        node = child
    node[leaf] = value


def _known_key(dotted: str) -> bool:
    model: Any = PipelineConfig
    for part in dotted.split("."):
        fields = getattr(model, "model_fields", None)
        if fields is None or part not in fields:
            return False
        model = fields[part].annotation
    return True


def parse_config_text(text: str) -> dict[str, Any]:
    """Parse ``section.field = value`` lines into a nested dict; every bad line is reported."""
    tree: dict[str, Any] = {}
    errors: list[ConfigLineError] = []
    seen: set[str] = set()

    for number, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        key, sep, value = line.partition("=")
        key, value = key.strip(), value.strip()
        if not sep or not key:
            errors.append(ConfigLineError(number, f"expected 'section.field = value', got {raw.strip()!r}"))
            continue
        if "." not in key:
            errors.append(ConfigLineError(number, f"key {key!r} must be qualified as section.field"))
            continue
        if not _known_key(key):
            errors.append(ConfigLineError(number, f"unknown key {key!r}"))
            continue
        if key in seen:
            errors.append(ConfigLineError(number, f"duplicate key {key!r}"))
            continue
        seen.add(key)
        try:
            _assign(tree, key, None if value.lower() == "none" else value)
        except KeyError:
            errors.append(ConfigLineError(number, f"key {key!r} conflicts with an earlier key"))

    if errors:
        raise ConfigFormatError(errors)
    return tree


def _validate(tree: dict[str, Any]) -> PipelineConfig:
    try:
        return PipelineConfig.model_validate(tree)
    except ValidationError as exc:
        first = exc.errors()[0]
        field = ".".join(str(part) for part in first["loc"]) or "config"
        raise ConfigValueError(field, first["msg"]) from exc


def load_config(path: Path | None) -> PipelineConfig:
    if path is None:
        return PipelineConfig()
    try:
        text = path.read_text(encoding="utf-8")
    except OSError as exc:
        raise DatasetIOError(path, f"cannot read config: {exc.strerror or exc}") from exc
    config = _validate(parse_config_text(text))
    logger.debug("Loaded pipeline config from %s", path)
    return config


def with_overrides(config: PipelineConfig, overrides: dict[str, Any]) -> PipelineConfig:
    """Copy of ``config`` with dotted-key overrides applied and fully revalidated."""
    tree = config.model_dump()
    for dotted, value in overrides.items():
        if not _known_key(dotted):
            raise ConfigValueError(dotted, "unknown key")
        _assign(tree, dotted, value)
    return _validate(tree)
