"""
Experiment config files: a flat, sectioned ``key = value`` text format.

Grammar (see CONFIG_FORMAT.md)::

    # comment            ; comment
    [section]            one of data, model, stage1, stage2, eval, mi
    key = value          value is raw text; lists are comma separated

Overrides ``section.key=value`` from the command line replace file values
and are reported with line 0.
"""
from dataclasses import dataclass
from pathlib import Path
from typing import Dict, Iterable, List, Optional, Union

import structlog
from pydantic import ValidationError

from ..models.config import SECTION_MODELS, TrainConfig
from .errors import ConfigFileError

logger = structlog.get_logger(__name__)


@dataclass
class ConfigValue:
    value: str
    line: int


ConfigTable = Dict[str, Dict[str, ConfigValue]]


def parse_config_text(text: str, path: Optional[str] = None) -> ConfigTable:
    """Parse config text into {section: {key: ConfigValue}}."""
    table: ConfigTable = {}
    section: Optional[str] = None
    for number, raw in enumerate(text.splitlines(), start=1):
        line = raw.strip()
        if not line or line.startswith(("#", ";")):
            continue
        if line.startswith("["):
            if not line.endswith("]"):
                raise ConfigFileError("malformed section header", line=number, path=path)
            section = line[1:-1].strip()
            if section not in SECTION_MODELS:
                raise ConfigFileError("unknown section", key=section, line=number, path=path)
            table.setdefault(section, {})
            continue
        key, sep, value = line.partition("=")
        key = key.strip()
        if not sep or not key:
            raise ConfigFileError("expected 'key = value'", line=number, path=path)
        if section is None:
            raise ConfigFileError("key outside a section", key=key, line=number, path=path)
        if key not in SECTION_MODELS[section].__fields__:
            raise ConfigFileError("unknown key", key=f"{section}.{key}", line=number, path=path)
        if key in table[section]:
            first = table[section][key].line
            raise ConfigFileError(f"duplicate key (first set on line {first})",
                                  key=f"{section}.{key}", line=number, path=path)
        table[section][key] = ConfigValue(value=value.strip(), line=number)
    return table


def apply_overrides(table: ConfigTable, overrides: Iterable[str]) -> ConfigTable:
    """Apply ``section.key=value`` overrides in order."""
    for override in overrides:
        name, sep, value = override.partition("=")
        section, dot, key = name.strip().partition(".")
        if not sep or not dot or not key:
            raise ConfigFileError(f"override {override!r} is not section.key=value", line=0)
        if section not in SECTION_MODELS:
            raise ConfigFileError("unknown section in override", key=section, line=0)
        if key not in SECTION_MODELS[section].__fields__:
            raise ConfigFileError("unknown key in override", key=f"{section}.{key}", line=0)
        table.setdefault(section, {})[key] = ConfigValue(value=value.strip(), line=0)
    return table


def _validate(table: ConfigTable, path: Optional[str]) -> TrainConfig:
    raw = {section: {k: v.value for k, v in values.items()} for section, values in table.items()}
    try:
        return TrainConfig(**raw)
    except ValidationError as exc:
        first = exc.errors()[0]
        loc = [str(part) for part in first["loc"]]
        if len(loc) >= 2 and loc[0] in table and loc[1] in table[loc[0]]:
            entry = table[loc[0]][loc[1]]
            raise ConfigFileError(first["msg"], key=f"{loc[0]}.{loc[1]}", line=entry.line,
                                  path=path) from exc
        raise


def load_train_config(
    path: Optional[Union[str, Path]] = None,
    overrides: Iterable[str] = (),
    defaults: Iterable[str] = (),
) -> TrainConfig:
    """Read, override and validate an experiment config.

    Without a path the model defaults are used and only the overrides apply.
    `defaults` are ``section.key=value`` entries used only where neither the
    file nor an override sets the key.

    Raises:
        ConfigFileError: unknown section/key, malformed line, or a value
            rejected by validation (named with its key and line)
        ValidationError: cross-field violations with no single source line
    """
    overrides = list(overrides)
    table: ConfigTable = {}
    location = None
    if path is not None:
        location = str(path)
        try:
            text = Path(path).read_text(encoding="utf-8")
        except FileNotFoundError as exc:
            raise ConfigFileError("config file not found", path=location) from exc
        table = parse_config_text(text, path=location)
    fallback = apply_overrides({}, defaults)
    for section, values in fallback.items():
        for key, entry in values.items():
            table.setdefault(section, {}).setdefault(key, entry)
    apply_overrides(table, overrides)
    config = _validate(table, location)
    logger.debug("Config loaded", path=location, overrides=overrides,
                 fingerprint=config.fingerprint()[:12])
    return config


def _render_value(value) -> str:
    if value is None:
        return "none"
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, (list, tuple)):
        return ",".join(_render_value(v) for v in value)
    if isinstance(value, float):
        return repr(value)
    return str(value)


def render_config_text(config: TrainConfig) -> str:
    """Full config text, every key spelled out, that parses back to `config`."""
    lines: List[str] = []
    for section in SECTION_MODELS:
        model = getattr(config, section)
        if lines:
            lines.append("")
        lines.append(f"[{section}]")
        for key in type(model).__fields__:
            lines.append(f"{key} = {_render_value(getattr(model, key))}")
    return "\n".join(lines) + "\n"
