"""INI-style configuration files.

A run config has ``[model]`` and ``[train]`` sections whose keys are the
``ModelConfig`` / ``StageConfig`` field names; ``preset = desk|paper`` under
``[model]`` selects the base values. A generator config has an optional
``[generator]`` section (``image_size``, ``count_per_class``) and one
``[domain:<id>]`` section per domain with ``DomainSpec`` fields, e.g.::

    [domain:alpha]
    color_shift = 0.06, 0.02, -0.04
    noise_std = 0.02
    artifact = moire
"""

from __future__ import annotations

import configparser
from dataclasses import fields
from pathlib import Path

from .data import DomainSpec
from .errors import ConfigError
from .model import ModelConfig
from .pipeline import StageConfig


def _coerce(value: str, typ, key: str):
    typ = typ if isinstance(typ, str) else getattr(typ, "__name__", str(typ))
    try:
        if typ == "bool":
            low = value.strip().lower()
            if low in ("1", "true", "yes", "on"):
                return True
            if low in ("0", "false", "no", "off"):
                return False
            raise ValueError(value)
        if typ == "int":
            return int(value)
        if typ == "float":
            return float(value)
        if typ.startswith("tuple"):
            return tuple(float(v) for v in value.replace(",", " ").split())
        if "None" in typ and typ.startswith("float"):
            return None if value.strip().lower() in ("", "none") else float(value)
        return value.strip()
    except ValueError:
        raise ConfigError(f"{key}: cannot parse {value!r} as {typ}") from None


def _section_to_kwargs(section, cls, skip=()) -> dict:
    types = {f.name: f.type for f in fields(cls)}
    out = {}
    for key, value in section.items():
        if key in skip:
            continue
        if key not in types:
            raise ConfigError(f"[{section.name}] unknown key {key!r}")
        out[key] = _coerce(value, types[key], f"[{section.name}] {key}")
    return out


def _read(path) -> configparser.ConfigParser:
    cp = configparser.ConfigParser(interpolation=None)
    path = Path(path)
    try:
        with path.open() as fh:
            cp.read_file(fh)
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    except configparser.Error as exc:
        raise ConfigError(f"{path}: {exc}") from exc
    return cp


def load_run_config(path) -> tuple[ModelConfig, StageConfig]:
    cp = _read(path)
    extra = set(cp.sections()) - {"model", "train"}
    if extra:
        raise ConfigError(f"{path}: unknown sections {sorted(extra)}")
    model_kw = _section_to_kwargs(cp["model"], ModelConfig, skip=("preset",)) if cp.has_section("model") else {}
    preset = cp.get("model", "preset", fallback="desk")
    stage_kw = _section_to_kwargs(cp["train"], StageConfig) if cp.has_section("train") else {}
    return ModelConfig.preset(preset, **model_kw), StageConfig(**stage_kw)


def dump_run_config(model_cfg: ModelConfig, stage_cfg: StageConfig) -> str:
    lines = ["[model]"]
    lines += [f"{k} = {v}" for k, v in model_cfg.to_dict().items()]
    lines += ["", "[train]"]
    lines += [f"{k} = {v}" for k, v in stage_cfg.to_dict().items()]
    return "\n".join(lines) + "\n"


def load_domain_specs(path) -> tuple[list[DomainSpec], dict]:
    """Return the domain specs and generator options (``image_size``, ``count_per_class``)."""
    cp = _read(path)
    gen = {"image_size": 32, "count_per_class": 200}
    if cp.has_section("generator"):
        for key, value in cp["generator"].items():
            if key not in gen:
                raise ConfigError(f"[generator] unknown key {key!r}")
            gen[key] = _coerce(value, "int", f"[generator] {key}")
    specs = []
    for name in cp.sections():
        if name == "generator":
            continue
        if not name.startswith("domain:"):
            raise ConfigError(f"{path}: unknown section [{name}]")
        kwargs = _section_to_kwargs(cp[name], DomainSpec, skip=("domain_id",))
        specs.append(DomainSpec(domain_id=name[len("domain:"):], **kwargs))
    if not specs:
        raise ConfigError(f"{path}: no [domain:<id>] sections")
    return specs, gen


def dump_domain_specs(specs: list[DomainSpec], image_size: int = 32, count_per_class: int = 200) -> str:
    lines = ["[generator]", f"image_size = {image_size}", f"count_per_class = {count_per_class}", ""]
    for s in specs:
        lines.append(f"[domain:{s.domain_id}]")
        for k, v in s.to_dict().items():
            if k == "domain_id":
                continue
            lines.append(f"{k} = {', '.join(map(str, v)) if isinstance(v, tuple) else v}")
        lines.append("")
    return "\n".join(lines)
