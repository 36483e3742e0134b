"""Solver configuration: bundled TOML defaults, optional user file, overrides."""

from __future__ import annotations

import copy
import dataclasses
import sys
from importlib import resources
from pathlib import Path
from typing import Any

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

from .kkt import NewtonOptions
from .pipeline import PipelineOptions
from .stage1 import HomotopyOptions, StepPolicy
from .stage2 import Stage2Options


class ConfigError(ValueError):
    pass


def default_config() -> dict[str, Any]:
    text = resources.files("discopf").joinpath("defaults.toml").read_text(encoding="utf-8")
    return tomllib.loads(text)


def _merge(base: dict, extra: dict, where: str = "") -> dict:
    out = copy.deepcopy(base)
    for key, val in extra.items():
        path = f"{where}.{key}" if where else key
        if key not in out:
            raise ConfigError(f"unknown config key '{path}'")
        if isinstance(out[key], dict):
            if not isinstance(val, dict):
                raise ConfigError(f"config key '{path}' must be a table")
            out[key] = _merge(out[key], val, path)
        else:
            if isinstance(out[key], bool) != isinstance(val, bool) or (isinstance(out[key], (int, float)) and not isinstance(val, (int, float))):
                raise ConfigError(f"config key '{path}' has the wrong type")
            out[key] = type(out[key])(val) if isinstance(out[key], float) else val
    return out


def load_config(path: str | Path | None = None, overrides: dict | None = None) -> dict[str, Any]:
    cfg = default_config()
    if path is not None:
        try:
            user = tomllib.loads(Path(path).read_text(encoding="utf-8"))
        except FileNotFoundError as exc:
            raise ConfigError(f"config file not found: {path}") from exc
        except tomllib.TOMLDecodeError as exc:
            raise ConfigError(f"invalid config file {path}: {exc}") from exc
        cfg = _merge(cfg, user)
    if overrides:
        cfg = _merge(cfg, overrides)
    return cfg


def _build(cls, table: dict, **nested):
    names = {f.name for f in dataclasses.fields(cls)}
    kwargs = {k: v for k, v in table.items() if k in names and not isinstance(v, dict)}
    kwargs.update(nested)
    try:
        return cls(**kwargs)
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc


def pipeline_options(cfg: dict[str, Any]) -> PipelineOptions:
    newton = _build(NewtonOptions, cfg["newton"])
    hom = _build(HomotopyOptions, cfg["homotopy"], step=_build(StepPolicy, cfg["homotopy"]["step"]), newton=newton)
    s2 = _build(Stage2Options, cfg["stage2"], step=_build(StepPolicy, cfg["stage2"]["step"]), newton=newton)
    try:
        return PipelineOptions(homotopy=hom, stage2=s2, mode=cfg["stage2"]["mode"], screen=cfg["discretize"]["screen"])
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc
