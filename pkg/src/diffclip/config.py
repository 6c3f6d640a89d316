"""Flat ``key=value`` run configuration files.

    # comment
    epochs = 30
    variant = diffclip

Keys are the fields of :class:`~diffclip.train.TrainConfig`. Command-line
overrides are applied after the file and win on conflict.
"""

from __future__ import annotations

from dataclasses import asdict
from pathlib import Path
from typing import Iterable, Mapping

from .train import TrainConfig


class ConfigError(ValueError):
    pass


_TRUE = {"1", "true", "yes", "on"}
_FALSE = {"0", "false", "no", "off"}


def _coerce(key: str, raw: str, where: str) -> object:
    types = TrainConfig.field_types()
    if key not in types:
        raise ConfigError(f"{where}: unknown key {key!r}")
    typ = types[key]
    raw = raw.strip()
    try:
        if typ is bool:
            low = raw.lower()
            if low in _TRUE:
                return True
            if low in _FALSE:
                return False
            raise ValueError(raw)
        return typ(raw)
    except ValueError:
        raise ConfigError(f"{where}: cannot read {raw!r} as {typ.__name__} for {key!r}") from None


def parse_config_text(text: str, source: str = "<config>") -> dict[str, object]:
    out: dict[str, object] = {}
    for lineno, line in enumerate(text.splitlines(), start=1):
        body = line.split("#", 1)[0].strip()
        if not body:
            continue
        if "=" not in body:
            raise ConfigError(f"{source}:{lineno}: expected key=value, got {line.strip()!r}")
        key, _, value = body.partition("=")
        out[key.strip()] = _coerce(key.strip(), value, f"{source}:{lineno}")
    return out


def parse_overrides(pairs: Iterable[str]) -> dict[str, object]:
    out: dict[str, object] = {}
    for pair in pairs:
        if "=" not in pair:
            raise ConfigError(f"override {pair!r} is not key=value")
        key, _, value = pair.partition("=")
        out[key.strip()] = _coerce(key.strip(), value, "override")
    return out


def resolve(config_path=None, overrides: Mapping[str, object] | None = None) -> TrainConfig:
    values: dict[str, object] = {}
    if config_path is not None:
        path = Path(config_path)
        if not path.exists():
            raise FileNotFoundError(f"config file {path} not found")
        values.update(parse_config_text(path.read_text(encoding="utf-8"), str(path)))
    values.update(overrides or {})
    try:
        return TrainConfig(**values)
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc


def dump(cfg: TrainConfig) -> str:
    return "".join(f"{k}={v}\n" for k, v in asdict(cfg).items())
