"""Experiment configuration as flat ``section.key = value`` lines.

Blank lines and ``#`` comments are ignored. A bare ``key`` is accepted when
exactly one section defines it (``tau = 0.9`` means ``train.tau``).
``train.lambda`` is an alias for ``train.lam``. Unknown keys, malformed
values and constraint violations raise :class:`ConfigError` naming the key.
"""
from __future__ import annotations

import dataclasses
import math
import types
import typing
from dataclasses import dataclass, field

from .data import Augmentor
from .trainer import METHODS, TrainConfig, ZslConfig


class ConfigError(ValueError):
    pass


@dataclass
class DataConfig:
    num_classes: int = 10
    dim: int = 8
    centroid_separation: float = 2.2
    cluster_scale: float = 1.0
    unlabeled_gamma: float = 100.0
    unlabeled_n_max: int = 500
    # a separate, fully labeled pool (e.g. long-tailed labels over a balanced
    # unlabeled pool); when unset the labeled rows are split out of one pool
    labeled_gamma: float | None = None
    labeled_n_max: int | None = None
    label_fraction: float = 0.1
    labels_per_class: int | None = None
    min_labels_per_class: int = 1
    test_per_class: int = 100


@dataclass
class RunConfig:
    out: str = "runs"
    seeds: tuple = (0,)
    workers: int = 0


@dataclass
class ExperimentConfig:
    data: DataConfig = field(default_factory=DataConfig)
    aug: Augmentor = field(default_factory=Augmentor)
    train: TrainConfig = field(default_factory=TrainConfig)
    zsl: ZslConfig = field(default_factory=ZslConfig)
    run: RunConfig = field(default_factory=RunConfig)


_SECTION_TYPES = {"data": DataConfig, "aug": Augmentor, "train": TrainConfig, "zsl": ZslConfig, "run": RunConfig}
ALIASES = {"train.lambda": "train.lam", "lambda": "train.lam"}

_in01 = ("0 < x <= 1", lambda x: 0 < x <= 1)
_nonneg = ("x >= 0", lambda x: x >= 0)
_pos = ("x > 0", lambda x: x > 0)
_ge1 = ("x >= 1", lambda x: x >= 1)
CONSTRAINTS = {
    "data.num_classes": ("x >= 2", lambda x: x >= 2),
    "data.dim": ("x >= 2", lambda x: x >= 2),
    "data.centroid_separation": _pos,
    "data.cluster_scale": _pos,
    "data.unlabeled_gamma": _ge1,
    "data.unlabeled_n_max": _ge1,
    "data.label_fraction": ("0 <= x <= 1", lambda x: 0 <= x <= 1),
    "data.min_labels_per_class": _nonneg,
    "data.test_per_class": _ge1,
    "aug.weak_noise": _nonneg,
    "aug.strong_noise": _nonneg,
    "aug.mask_fraction": ("0 <= x < 1", lambda x: 0 <= x < 1),
    "train.method": (f"one of {', '.join(METHODS)}", lambda x: x in METHODS),
    "train.batch_size": _ge1,
    "train.mu": _ge1,
    "train.tau": _in01,
    "train.lambda_u": _nonneg,
    "train.total_steps": _nonneg,
    "train.base_lr": _pos,
    "train.nesterov_momentum": ("0 <= x < 1", lambda x: 0 <= x < 1),
    "train.weight_decay": _nonneg,
    "train.ema_decay": ("0 <= x <= 1", lambda x: 0 <= x <= 1),
    "train.eval_every": _ge1,
    "train.lam": _nonneg,
    "train.m": ("0 <= x < 1", lambda x: 0 <= x < 1),
    "train.la_tau": _nonneg,
    "train.da_target": ("'labeled' or 'uniform'", lambda x: x in ("labeled", "uniform")),
    "zsl.tau_clip": _pos,
    "zsl.source_gamma": _ge1,
    "zsl.teacher_steps": _ge1,
    "zsl.teacher_temperature": _pos,
    "zsl.prior_bias": _nonneg,
    "zsl.unlabeled_pool": ("'all' or 'rest'", lambda x: x in ("all", "rest")),
    "run.workers": _nonneg,
}


def _hints(cls) -> dict:
    return typing.get_type_hints(cls)


def _all_keys() -> dict[str, type]:
    out = {}
    for sec, cls in _SECTION_TYPES.items():
        for name, tp in _hints(cls).items():
            out[f"{sec}.{name}"] = tp
    return out


KEYS = _all_keys()


def _resolve(key: str) -> str:
    key = ALIASES.get(key, key)
    if key in KEYS:
        return key
    if "." not in key:
        hits = [k for k in KEYS if k.split(".", 1)[1] == key]
        if len(hits) == 1:
            return hits[0]
        if len(hits) > 1:
            raise ConfigError(f"{key}: ambiguous, qualify with a section ({', '.join(hits)})")
    raise ConfigError(f"{key}: unknown key")


def _convert(key: str, raw: str, tp):
    origin = typing.get_origin(tp)
    args = typing.get_args(tp)
    if origin in (typing.Union, types.UnionType) and type(None) in args:
        if raw.lower() in ("none", ""):
            return None
        (tp,) = [a for a in args if a is not type(None)]
    try:
        if tp is bool:
            low = raw.lower()
            if low not in ("true", "false", "1", "0", "yes", "no"):
                raise ValueError
            return low in ("true", "1", "yes")
        if tp is int:
            return int(raw)
        if tp is float:
            v = float(raw)
            if math.isnan(v):
                raise ValueError
            return v
        if tp is tuple or origin is tuple:
            parts = [p.strip() for p in raw.split(",") if p.strip()]
            return tuple(int(p) if _is_int(p) else float(p) for p in parts)
        if tp is str:
            return raw
    except ValueError:
        raise ConfigError(f"{key}: cannot parse {raw!r} as {getattr(tp, '__name__', tp)}") from None
    raise ConfigError(f"{key}: unsupported type {tp}")


def _is_int(s: str) -> bool:
    try:
        int(s)
        return True
    except ValueError:
        return False


def parse_config(text: str, overrides=()) -> ExperimentConfig:
    """Parse config text, then apply ``overrides`` (``key=value`` strings)."""
    values: dict[str, object] = {}
    lines = list(text.splitlines()) + list(overrides)
    for lineno, line in enumerate(lines, 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected 'key = value', got {line!r}")
        k, v = (s.strip() for s in line.split("=", 1))
        key = _resolve(k)
        val = _convert(key, v, KEYS[key])
        if key in CONSTRAINTS and val is not None:
            desc, ok = CONSTRAINTS[key]
            if not ok(val):
                raise ConfigError(f"{key}: constraint violated ({desc.replace('x', key.split('.')[-1], 1)}), got {v}")
        values[key] = val
    sections = {}
    for sec, cls in _SECTION_TYPES.items():
        kw = {k.split(".", 1)[1]: val for k, val in values.items() if k.startswith(sec + ".")}
        try:
            sections[sec] = cls(**kw)
        except ValueError as e:
            raise ConfigError(f"{sec}: {e}") from None
    return ExperimentConfig(**sections)


def _fmt(v) -> str:
    if v is None:
        return "none"
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, float):
        return repr(v)
    if isinstance(v, tuple):
        return ",".join(_fmt(x) for x in v)
    return str(v)


def serialize_config(cfg: ExperimentConfig) -> str:
    lines = []
    for sec in _SECTION_TYPES:
        obj = getattr(cfg, sec)
        for f in dataclasses.fields(obj):
            lines.append(f"{sec}.{f.name} = {_fmt(getattr(obj, f.name))}")
    return "\n".join(lines) + "\n"


def with_overrides(cfg: ExperimentConfig, *overrides: str) -> ExperimentConfig:
    return parse_config(serialize_config(cfg), overrides)
