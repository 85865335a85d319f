"""Layered configuration: defaults < key-value file < environment < --set overrides.

The file holds one ``section.key=value`` per line (``#`` comments allowed)
and is read with python-dotenv. Top-level keys have no section prefix.
Environment variables use ``LIDARSLAM_<SECTION>__<KEY>``, e.g.
``LIDARSLAM_FEATURES__FAST_THRESHOLD=15`` or ``LIDARSLAM_SEED=3``.
"""

import logging
import os
import typing
from pathlib import Path
from typing import Iterable, Mapping, Optional

from dotenv import dotenv_values
from pydantic import BaseModel, ValidationError

from src.pipeline.schemas import PipelineConfig
from src.slam.errors import ConfigError

log = logging.getLogger(__name__)

ENV_PREFIX = "LIDARSLAM_"
_NONE = {"", "none", "null"}


def _sections() -> dict[str, type[BaseModel]]:
    out = {}
    for name, info in PipelineConfig.model_fields.items():
        ann = info.annotation
        if isinstance(ann, type) and issubclass(ann, BaseModel):
            out[name] = ann
    return out


def _field_annotation(section: Optional[str], key: str):
    model = _sections()[section] if section else PipelineConfig
    if key not in model.model_fields:
        where = f"section '{section}'" if section else "top level"
        raise ConfigError(f"unknown config key '{key}' at {where}")
    return model.model_fields[key].annotation


def _coerce(raw: str, annotation):
    value = raw.strip()
    if value.lower() in _NONE and type(None) in typing.get_args(annotation):
        return None
    if typing.get_origin(annotation) is tuple:
        return tuple(v.strip() for v in value.split(","))
    return value


def _split_key(key: str) -> tuple[Optional[str], str]:
    key = key.strip().lower()
    if "." not in key:
        return None, key
    section, _, name = key.partition(".")
    if section not in _sections():
        raise ConfigError(f"unknown config section '{section}' in '{key}'")
    return section, name


def _apply(tree: dict, assignments: Iterable[tuple[str, str]]) -> dict:
    for key, raw in assignments:
        section, name = _split_key(key)
        value = _coerce(raw, _field_annotation(section, name))
        if section:
            tree.setdefault(section, {})[name] = value
        else:
            tree[name] = value
    return tree


def read_config_file(path) -> list[tuple[str, str]]:
    path = Path(path)
    if not path.is_file():
        raise ConfigError(f"config file not found: {path}")
    return [(k, v if v is not None else "") for k, v in dotenv_values(path).items()]


def env_assignments(environ: Mapping[str, str]) -> list[tuple[str, str]]:
    out = []
    for name in sorted(environ):
        if not name.startswith(ENV_PREFIX):
            continue
        section, sep, key = name[len(ENV_PREFIX):].lower().partition("__")
        out.append((f"{section}.{key}" if sep else section, environ[name]))
    return out


def parse_override(item: str) -> tuple[str, str]:
    key, sep, value = item.partition("=")
    if not sep or not key.strip():
        raise ConfigError(f"override must look like section.key=value, got '{item}'")
    return key, value


def load_config(path=None, overrides: Iterable[str] = (),
                environ: Optional[Mapping[str, str]] = None) -> PipelineConfig:
    environ = os.environ if environ is None else environ
    tree: dict = {}
    if path is not None:
        _apply(tree, read_config_file(path))
        log.info("[config] loaded %s", path)
    _apply(tree, env_assignments(environ))
    _apply(tree, [parse_override(item) for item in overrides])
    try:
        return PipelineConfig.model_validate(tree)
    except ValidationError as exc:
        raise ConfigError(f"invalid configuration:\n{exc}") from exc


def dump_config(cfg: PipelineConfig) -> list[str]:
    """``section.key=value`` lines for every setting, in the file format load_config reads."""
    lines = []
    for name, value in cfg.model_dump(mode="json").items():
        if isinstance(value, dict):
            for key, v in value.items():
                lines.append(f"{name}.{key}={_render(v)}")
        else:
            lines.append(f"{name}={_render(value)}")
    return lines


def _render(value) -> str:
    if value is None:
        return "none"
    if isinstance(value, (list, tuple)):
        return ",".join(str(v) for v in value)
    if isinstance(value, bool):
        return str(value).lower()
    return str(value)
