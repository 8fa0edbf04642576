"""Run configuration: TOML file plus command-line overrides.

Every field has a default; unknown keys are rejected (typos should fail
loudly, not train the wrong model).  Flags always win over the file.
Ablation switches apply at the accessor level so each one changes exactly
its intended behavior and nothing else.
"""

from __future__ import annotations

import dataclasses
import sys
from dataclasses import dataclass, field, fields, replace
from pathlib import Path

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

from .docgen import CorpusConfig
from .meta import AdamConfig, CurriculumSchedule, MetaConfig
from .model import ArchConfig
from .objectives import MaskSpec, SsimConfig
from .tta import AdaptConfig


class ConfigError(ValueError):
    """Bad configuration file or flag value."""


@dataclass(frozen=True)
class TrainSettings:
    phase1_steps: int = 600
    phase2_steps: int = 150
    val_every: int = 50
    checkpoint_every: int = 200


@dataclass(frozen=True)
class AblationSwitches:
    """Row switches for the component-removal study."""

    no_ttt: bool = False
    no_meta: bool = False
    no_teacher_forcing: bool = False
    no_positional_encoding: bool = False
    no_curriculum_dropout: bool = False


@dataclass(frozen=True)
class RunConfig:
    seed: int = 0
    data_dir: str = "data"
    run_dir: str = "runs/default"
    arch: ArchConfig = field(default_factory=ArchConfig)
    meta: MetaConfig = field(default_factory=MetaConfig)
    adapt: AdaptConfig = field(default_factory=AdaptConfig)
    corpus: CorpusConfig = field(default_factory=CorpusConfig)
    train: TrainSettings = field(default_factory=TrainSettings)
    ablation: AblationSwitches = field(default_factory=AblationSwitches)

    # -- ablation-aware accessors -------------------------------------------

    def effective_arch(self) -> ArchConfig:
        arch = self.arch
        if self.ablation.no_positional_encoding:
            arch = replace(arch, positional_encoding=False)
        return arch

    def effective_meta(self) -> MetaConfig:
        meta = self.meta
        if self.ablation.no_teacher_forcing:
            meta = replace(meta, teacher_error_rate=0.0)
        if self.ablation.no_curriculum_dropout:
            meta = replace(meta, curriculum=replace(meta.curriculum, dropout_max=0.0))
        return meta

    def effective_adapt(self) -> AdaptConfig:
        adapt = self.adapt
        if self.ablation.no_ttt:
            adapt = replace(adapt, steps=0)
        return adapt

    def use_meta_training(self) -> bool:
        return not self.ablation.no_meta


# -- strict dataclass construction -------------------------------------------

_SECTION_TYPES = {
    "arch": ArchConfig,
    "meta": MetaConfig,
    "adapt": AdaptConfig,
    "corpus": CorpusConfig,
    "train": TrainSettings,
    "ablation": AblationSwitches,
}

_NESTED_TYPES = {
    "mask": MaskSpec,
    "ssim": SsimConfig,
    "curriculum": CurriculumSchedule,
    "adam": AdamConfig,
}


def _build_dataclass(cls, data: dict, path: str):
    known = {f.name: f for f in fields(cls)}
    kwargs = {}
    for key, value in data.items():
        if key not in known:
            raise ConfigError(f"unknown key '{path}{key}'")
        if isinstance(value, dict):
            nested_cls = _NESTED_TYPES.get(key)
            if nested_cls is None:
                raise ConfigError(f"'{path}{key}' does not take a table")
            kwargs[key] = _build_dataclass(nested_cls, value, f"{path}{key}.")
        elif isinstance(value, list):
            kwargs[key] = tuple(tuple(v) if isinstance(v, list) else v for v in value)
        else:
            kwargs[key] = value
    try:
        return cls(**kwargs)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"invalid value under '{path.rstrip('.') or 'top level'}': {exc}") from exc


def load_config(path: str | Path | None) -> RunConfig:
    """Parse a TOML config file; missing path means all defaults."""
    if path is None:
        return RunConfig()
    p = Path(path)
    if not p.exists():
        raise ConfigError(f"config file not found: {p}")
    try:
        raw = tomllib.loads(p.read_text(encoding="utf-8"))
    except tomllib.TOMLDecodeError as exc:
        raise ConfigError(f"{p}: {exc}") from exc
    top: dict = {}
    for key, value in raw.items():
        if isinstance(value, dict):
            if key not in _SECTION_TYPES:
                raise ConfigError(f"unknown section [{key}]")
            top[key] = _build_dataclass(_SECTION_TYPES[key], value, f"{key}.")
        else:
            if key not in {"seed", "data_dir", "run_dir"}:
                raise ConfigError(f"unknown key '{key}'")
            top[key] = value
    try:
        return RunConfig(**top)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"{p}: {exc}") from exc


def apply_overrides(cfg: RunConfig, overrides: dict) -> RunConfig:
    """Flag overrides; dotted paths reach into sections (e.g. meta.inner_lr)."""
    for dotted, value in overrides.items():
        if value is None:
            continue
        parts = dotted.split(".")
        cfg = _replace_path(cfg, parts, value, dotted)
    return cfg


def _replace_path(obj, parts: list[str], value, dotted: str):
    name = parts[0]
    if not dataclasses.is_dataclass(obj) or name not in {f.name for f in fields(obj)}:
        raise ConfigError(f"unknown override '{dotted}'")
    if len(parts) == 1:
        return replace(obj, **{name: value})
    child = getattr(obj, name)
    return replace(obj, **{name: _replace_path(child, parts[1:], value, dotted)})
