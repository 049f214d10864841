"""INI-style configuration files.

Schema (every key optional; unknown keys are errors)::

    [cohort]      any CohortConfig field, e.g. n_patients = 200
    [train]       any TrainConfig field, e.g. encoder_lr = 0.024
    preset = desk | default   (train section only; desk is the default)
    [sweep]       n_labeled, variants, repetitions, bootstrap, jobs

Tuples are comma-separated (``hidden = 64, 64``), booleans accept
``true/false/on/off/yes/no/1/0``.
"""
from __future__ import annotations

import configparser
import dataclasses
from pathlib import Path

from .analysis import SweepSpec
from .synthetic import CohortConfig
from .training import TrainConfig

SECTIONS = ("cohort", "train", "sweep")


def _coerce(raw: str, default, name: str):
    text = raw.strip()
    if isinstance(default, bool):
        low = text.lower()
        if low in ("1", "true", "yes", "on"):
            return True
        if low in ("0", "false", "no", "off"):
            return False
        raise ValueError(f"{name}: expected a boolean, got {raw!r}")
    if isinstance(default, tuple):
        parts = [p.strip() for p in text.split(",") if p.strip()]
        kind = type(default[0]) if default else str
        return tuple(_coerce(p, kind(), name) if kind is not str else p for p in parts)
    if isinstance(default, int):
        return int(text)
    if isinstance(default, float):
        return float(text)
    return text


def _section_values(parser, section, cls, skip=()):
    if not parser.has_section(section):
        return {}
    defaults = {f.name: getattr(cls(), f.name) for f in dataclasses.fields(cls)}
    out = {}
    for key, raw in parser.items(section):
        if key in skip:
            continue
        if key not in defaults:
            raise ValueError(f"[{section}] unknown key {key!r}")
        out[key] = _coerce(raw, defaults[key], f"[{section}] {key}")
    return out


@dataclasses.dataclass(frozen=True)
class RunConfig:
    cohort: CohortConfig = CohortConfig()
    train: TrainConfig = dataclasses.field(default_factory=TrainConfig.desk)
    sweep: SweepSpec = SweepSpec()


def parse_config(text: str) -> RunConfig:
    parser = configparser.ConfigParser(interpolation=None)
    parser.read_string(text)
    extra = set(parser.sections()) - set(SECTIONS)
    if extra:
        raise ValueError(f"unknown config sections: {sorted(extra)}")
    preset = parser.get("train", "preset", fallback="desk").strip()
    if preset not in ("desk", "default"):
        raise ValueError(f"[train] preset must be desk or default, got {preset!r}")
    train_values = _section_values(parser, "train", TrainConfig, skip=("preset",))
    train = TrainConfig.desk(**train_values) if preset == "desk" else TrainConfig(**train_values)
    sweep_values = _section_values(parser, "sweep", SweepSpec, skip=("out_dir",))
    return RunConfig(CohortConfig(**_section_values(parser, "cohort", CohortConfig)), train,
                     SweepSpec(**sweep_values))


def load_config(path=None) -> RunConfig:
    if path is None:
        return RunConfig()
    return parse_config(Path(path).read_text(encoding="utf-8"))


def with_seed(cfg: RunConfig, seed: int | None) -> RunConfig:
    if seed is None:
        return cfg
    return dataclasses.replace(cfg, cohort=dataclasses.replace(cfg.cohort, seed=seed),
                               train=dataclasses.replace(cfg.train, seed=seed))
