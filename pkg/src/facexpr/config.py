"""Key-value config files.

A config is an INI file read with :mod:`configparser`; each section maps onto
one settings dataclass::

    [synth]
    num_videos = 20
    pixel_noise_sigma = 1.0

    [fit]
    lambda_temporal = 0.5

Unknown sections or keys are errors, so typos do not pass silently.
"""

from __future__ import annotations

import configparser
import dataclasses
import os

from .errors import ConfigError, ContractError


def read_config(path) -> dict:
    """``{section: {key: raw string}}``; a missing file is a config error."""
    if not os.path.isfile(path):
        raise ConfigError(f"config file {path} does not exist")
    parser = configparser.ConfigParser(interpolation=None, inline_comment_prefixes=("#", ";"))
    parser.optionxform = str  # keys match field names exactly, e.g. max_gap_K
    try:
        with open(path, encoding="utf-8") as fh:
            parser.read_file(fh)
    except (OSError, configparser.Error) as exc:
        raise ConfigError(f"{path}: {exc}") from exc
    return {name: dict(parser[name]) for name in parser.sections()}


def _parse(raw, default, key):
    text = str(raw).strip()
    try:
        if isinstance(default, bool):
            lowered = text.lower()
            if lowered not in ("1", "0", "true", "false", "yes", "no", "on", "off"):
                raise ValueError(text)
            return lowered in ("1", "true", "yes", "on")
        if isinstance(default, int):
            return int(text)
        if isinstance(default, float) or default is None:
            return float(text)
        if isinstance(default, tuple):
            return tuple(float(v) for v in text.replace(",", " ").split())
    except ValueError as exc:
        raise ConfigError(f"bad value {raw!r} for {key}") from exc
    return text


def from_mapping(cls, mapping: dict, section: str = ""):
    """Build dataclass ``cls`` from string values, converting by each field's default type."""
    fields = {f.name: f for f in dataclasses.fields(cls)}
    kwargs = {}
    for key, raw in mapping.items():
        if key not in fields:
            where = f" in [{section}]" if section else ""
            raise ConfigError(f"unknown config key {key!r}{where}")
        field = fields[key]
        default = field.default
        if default is dataclasses.MISSING and field.default_factory is not dataclasses.MISSING:
            default = field.default_factory()
        kwargs[key] = _parse(raw, default, key)
    try:
        return cls(**kwargs)
    except (ContractError, TypeError) as exc:
        raise ConfigError(f"[{section or cls.__name__}] {exc}") from exc


def check_sections(sections: dict, allowed) -> None:
    unknown = sorted(set(sections) - set(allowed))
    if unknown:
        raise ConfigError(f"unknown config sections {unknown}; expected some of {sorted(allowed)}")
