"""Build run configurations from flat ``key = value`` files.

Keys address dataclass fields directly (``epochs = 10``) or through a dotted
section (``scene.channels = 8``, ``network.max_disp = 4``,
``weights.cloud = 0.5``).
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, fields, replace
from enum import Enum
from pathlib import Path
from typing import Dict, Mapping, Optional, Tuple, Union

from .batching import MiscalibRange
from .io import ConfigError, parse_kv_lines
from .losses import LossWeights, SclConfig
from .network import NetworkConfig
from .pipeline import TrainConfig
from .scene import SceneConfig

_TRUE = {"1", "true", "yes", "on"}
_FALSE = {"0", "false", "no", "off"}


def _coerce(default, raw: str):
    if isinstance(default, bool):
        low = raw.lower()
        if low in _TRUE:
            return True
        if low in _FALSE:
            return False
        raise ValueError(f"expected a boolean, got {raw!r}")
    if isinstance(default, Enum):
        return type(default)(raw)
    if isinstance(default, MiscalibRange):
        return MiscalibRange.parse(raw)
    if isinstance(default, tuple):
        elem = type(default[0]) if default else float
        return tuple(elem(v.strip()) for v in raw.split(","))
    if isinstance(default, int):
        return int(raw)
    if isinstance(default, float):
        return float(raw)
    return raw


def _build(cls, base, entries: Dict[str, Tuple[str, str]]):
    """``entries`` maps field name -> (raw value, location for messages)."""
    names = {f.name for f in fields(cls)}
    kw = {}
    for name, (raw, where) in entries.items():
        if name not in names:
            raise ConfigError(f"{where}: unknown key {name!r}")
        try:
            kw[name] = _coerce(getattr(base, name), raw)
        except ValueError as exc:
            raise ConfigError(f"{where}: bad value for {name!r}: {exc}") from exc
    try:
        return replace(base, **kw)
    except ValueError as exc:
        where = next(iter(entries.values()))[1] if entries else "<config>"
        raise ConfigError(f"{where}: {exc}") from exc


@dataclass(frozen=True)
class RunConfig:
    """Everything one training/evaluation run needs besides file paths."""

    scene: SceneConfig = SceneConfig()
    train: TrainConfig = TrainConfig()
    train_scenes: int = 64
    val_scenes: int = 16
    train_first_seed: int = 1000
    val_first_seed: int = 5000
    eval_per_scene: int = 4
    eval_seed: int = 7
    subsample: int = 1
    data: str = ""  # manifest of stored scenes; empty means synthesise
    grid: str = ""  # experiment grid override, e.g. "64,32" or "2,4,8"

    def with_seed(self, seed: Optional[int]) -> "RunConfig":
        if seed is None:
            return self
        return replace(self, train=replace(self.train, seed=seed), eval_seed=seed)


_SECTIONS = {
    "scene": ("scene", SceneConfig),
    "network": ("network", NetworkConfig),
    "weights": ("weights", LossWeights),
    "scl": ("scl", SclConfig),
}


def run_config_from_entries(entries: Mapping[str, Tuple[str, int]], source: str = "<config>") -> RunConfig:
    """Entries as returned by :func:`parse_kv_lines`."""
    grouped: Dict[str, Dict[str, Tuple[str, str]]] = {k: {} for k in ("top", "train", *_SECTIONS)}
    for key, (value, lineno) in entries.items():
        where = f"{source}:{lineno}"
        section, dot, name = key.partition(".")
        if not dot:
            section, name = "top", key
        if section not in grouped:
            raise ConfigError(f"{where}: unknown section {section!r}")
        grouped[section][name] = (value, where)

    top = grouped["top"]
    run_fields = {f.name for f in fields(RunConfig)} - {"scene", "train"}
    train_fields = {f.name for f in fields(TrainConfig)} - {"network", "weights", "scl"}
    run_kw = {k: v for k, v in top.items() if k in run_fields}
    train_kw = dict(grouped["train"])
    for k, v in top.items():
        if k in run_fields:
            continue
        if k in train_fields:
            train_kw[k] = v
        else:
            raise ConfigError(f"{v[1]}: unknown key {k!r}")

    base = RunConfig()
    train = base.train
    subs = {}
    for section, (attr, cls) in _SECTIONS.items():
        if section == "scene":
            continue
        subs[attr] = _build(cls, getattr(train, attr), grouped[section])
    train = _build(TrainConfig, replace(train, **subs), train_kw)
    scene = _build(SceneConfig, base.scene, grouped["scene"])
    run = _build(RunConfig, replace(base, scene=scene, train=train), run_kw)
    return run


def parse_run_config(text: str, source: str = "<config>") -> RunConfig:
    return run_config_from_entries(parse_kv_lines(text, source), source)


def load_run_config(path: Union[str, Path]) -> RunConfig:
    p = Path(path)
    return parse_run_config(p.read_text(encoding="utf-8"), str(p))


def load_scene_config(path: Union[str, Path]) -> SceneConfig:
    """A scene file holds bare ``SceneConfig`` keys (``scene.`` prefixes also accepted)."""
    p = Path(path)
    entries = parse_kv_lines(p.read_text(encoding="utf-8"), str(p))
    flat = {}
    for key, (value, lineno) in entries.items():
        name = key[len("scene.") :] if key.startswith("scene.") else key
        flat[name] = (value, f"{p}:{lineno}")
    return _build(SceneConfig, SceneConfig(), flat)


def run_config_to_text(run: RunConfig) -> str:
    """Inverse of :func:`parse_run_config` for every field that differs from the default."""
    lines = []

    def emit(prefix, obj, base):
        for f in fields(obj):
            v, d = getattr(obj, f.name), getattr(base, f.name)
            if dataclasses.is_dataclass(v) and not isinstance(v, MiscalibRange):
                emit(f"{f.name}.", v, d)
                continue
            if v == d:
                continue
            if isinstance(v, bool):
                text = "true" if v else "false"
            elif isinstance(v, Enum):
                text = v.value
            elif isinstance(v, tuple):
                text = ",".join(repr(i) for i in v)
            elif isinstance(v, float):
                text = repr(v)
            else:
                text = str(v)
            lines.append(f"{prefix}{f.name} = {text}")

    base = RunConfig()
    emit("scene.", run.scene, base.scene)
    emit("", run.train, base.train)
    for f in fields(run):
        if f.name in ("scene", "train"):
            continue
        v = getattr(run, f.name)
        if v != getattr(base, f.name):
            lines.append(f"{f.name} = {v}")
    return "\n".join(lines) + ("\n" if lines else "")
