"""
Flat ``key = value`` experiment configuration files.

Each key names exactly one field of the dataclasses a file is loaded into;
values are converted using the field's declared type. A ``#`` at the
start of a line or after whitespace starts a comment; one inside a value
(``label = run#2``) is kept. Blank lines are ignored.
"""
import logging
import re
import typing
from dataclasses import MISSING, dataclass, fields
from pathlib import Path

from rtdforge.exceptions import ConfigError
from rtdforge.services.data import TaskDescriptor
from rtdforge.services.finetune import FinetuneConfig
from rtdforge.services.pretrain import PretrainConfig
from rtdforge.services.transformer import ModelConfig

logger = logging.getLogger('rtdforge')

_TRUE = {'true', 'yes', 'on', '1'}
_FALSE = {'false', 'no', 'off', '0'}
_COMMENT = re.compile(r'(?:^|\s)#')


@dataclass(frozen=True)
class ConfigEntry:
    key: str
    raw: str
    lineno: int


def parse_config_text(text: str, source: str = '<config>') -> dict[str, ConfigEntry]:
    entries: dict[str, ConfigEntry] = {}
    for lineno, line in enumerate(text.splitlines(), start=1):
        line = _COMMENT.split(line, maxsplit=1)[0].strip()
        if not line:
            continue
        key, sep, raw = line.partition('=')
        key, raw = key.strip(), raw.strip()
        if not sep or not key:
            raise ConfigError(f"{source}:{lineno}: expected 'key = value', got {line!r}")
        if key in entries:
            raise ConfigError(
                f"{source}: key '{key}' is set twice (lines {entries[key].lineno} and {lineno})"
            )
        entries[key] = ConfigEntry(key, raw, lineno)
    return entries


def read_config_file(path: str | Path) -> dict[str, ConfigEntry]:
    path = Path(path)
    try:
        text = path.read_text(encoding='utf-8')
    except OSError as e:
        raise ConfigError(f"Cannot read config file {path}: {e}") from e
    return parse_config_text(text, str(path))


def _type_name(tp) -> str:
    if typing.get_origin(tp) is tuple:
        inner = typing.get_args(tp)[0]
        return f"comma-separated list of {inner.__name__}"
    return getattr(tp, '__name__', str(tp))


def convert_value(raw: str, tp):
    """Convert ``raw`` to ``tp`` (int, float, bool, str or tuple[X, ...]); ValueError on failure."""
    if typing.get_origin(tp) is tuple:
        inner = typing.get_args(tp)[0]
        items = [item.strip() for item in raw.split(',') if item.strip()]
        return tuple(convert_value(item, inner) for item in items)
    if tp is bool:
        lowered = raw.lower()
        if lowered in _TRUE:
            return True
        if lowered in _FALSE:
            return False
        raise ValueError(raw)
    if tp is int:
        return int(raw)
    if tp is float:
        return float(raw)
    if tp is str:
        if len(raw) >= 2 and raw[0] == raw[-1] and raw[0] in '"\'':
            return raw[1:-1]
        return raw
    raise TypeError(f"Unsupported config field type {tp!r}")


def field_types(cls) -> dict[str, object]:
    hints = typing.get_type_hints(cls)
    return {f.name: hints[f.name] for f in fields(cls)}


def split_entries(entries: dict[str, ConfigEntry], source: str, *classes) -> list[dict[str, object]]:
    """
    Distribute entries over ``classes`` by field name and convert them.

    Returns one ``{field: value}`` dict per class. Unknown keys and
    unconvertible values raise ConfigError with the line number.
    """
    owners: dict[str, int] = {}
    types: list[dict[str, object]] = []
    for i, cls in enumerate(classes):
        cls_types = field_types(cls)
        types.append(cls_types)
        for name in cls_types:
            owners.setdefault(name, i)

    values: list[dict[str, object]] = [{} for _ in classes]
    for key, entry in sorted(entries.items(), key=lambda item: item[1].lineno):
        if key not in owners:
            raise ConfigError(f"{source}:{entry.lineno}: unknown key '{key}'")
        i = owners[key]
        tp = types[i][key]
        try:
            values[i][key] = convert_value(entry.raw, tp)
        except ValueError:
            raise ConfigError(
                f"{source}:{entry.lineno}: invalid value {entry.raw!r} for '{key}' (expected {_type_name(tp)})"
            ) from None
    return values


def build(cls, values: dict[str, object], source: str):
    missing = [f.name for f in fields(cls)
               if f.default is MISSING and f.default_factory is MISSING and f.name not in values]
    if missing:
        raise ConfigError(f"{source}: missing required keys {missing}")
    try:
        return cls(**values)
    except ConfigError as e:
        raise ConfigError(f"{source}: {e}") from e


def load_configs(path: str | Path, *classes) -> tuple:
    entries = read_config_file(path)
    values = split_entries(entries, str(path), *classes)
    return tuple(build(cls, v, str(path)) for cls, v in zip(classes, values))


def load_pretrain_config(path: str | Path) -> tuple[ModelConfig, PretrainConfig]:
    model_config, pretrain_config = load_configs(path, ModelConfig, PretrainConfig)
    logger.info(f"Loaded pretraining config from {path}")
    return model_config, pretrain_config


def load_finetune_config(path: str | Path) -> FinetuneConfig:
    (config,) = load_configs(path, FinetuneConfig)
    return config


def load_task_descriptor(path: str | Path) -> TaskDescriptor:
    """A task file; ``name`` defaults to the file stem."""
    path = Path(path)
    entries = read_config_file(path)
    (values,) = split_entries(entries, str(path), TaskDescriptor)
    values.setdefault('name', path.stem)
    return build(TaskDescriptor, values, str(path))
