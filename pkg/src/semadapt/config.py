"""Flat ``key=value`` run configuration.

Every training knob of :class:`~semadapt.training.TrainConfig` plus the run
and dataset paths lives in one namespace.  Files are parsed first, then
command-line overrides; unknown keys are rejected.  :meth:`RunConfig.to_text`
emits the fully resolved configuration, which parses back to the same values.
"""

from __future__ import annotations

from dataclasses import dataclass, field, fields
from pathlib import Path
from typing import Optional

from .training import TrainConfig


class ConfigError(ValueError):
    pass


@dataclass
class RunSettings:
    name: str = "default"
    runs_dir: str = "runs"
    data_dir: str = "data/toy"
    checkpoint: str = ""  # bundle to start from / evaluate; empty = fresh
    n_train_s: int = 200
    n_train_t: int = 200
    n_val_t: int = 50
    split: str = "val"  # split used by eval and pseudo
    input_dir: str = ""  # translate: directory of PPMs (default: source images)
    guidance_dir: str = ""  # translate: semantic maps taken from these images instead
    ablation_seeds: str = "0"  # comma-separated seeds for the ablation grid


_RUN_FIELDS = {f.name: f for f in fields(RunSettings)}
_TRAIN_FIELDS = {f.name: f for f in fields(TrainConfig)}
assert not set(_RUN_FIELDS) & set(_TRAIN_FIELDS)


def _coerce(key: str, raw, default):
    if isinstance(raw, type(default)) and not isinstance(default, bool):
        return raw
    text = str(raw).strip()
    try:
        if isinstance(default, bool):
            low = text.lower()
            if low in ("1", "true", "yes", "on"):
                return True
            if low in ("0", "false", "no", "off"):
                return False
            raise ValueError(text)
        if isinstance(default, int):
            return int(text)
        if isinstance(default, float):
            return float(text)
    except ValueError:
        raise ConfigError(f"{key}: cannot parse {text!r} as {type(default).__name__}") from None
    return text


@dataclass
class RunConfig:
    run: RunSettings = field(default_factory=RunSettings)
    train: TrainConfig = field(default_factory=TrainConfig)

    @classmethod
    def keys(cls) -> list:
        return list(_RUN_FIELDS) + list(_TRAIN_FIELDS)

    @classmethod
    def from_pairs(cls, pairs: dict) -> "RunConfig":
        unknown = sorted(set(pairs) - set(_RUN_FIELDS) - set(_TRAIN_FIELDS))
        if unknown:
            raise ConfigError(f"unknown config keys: {', '.join(unknown)}")
        run, train = RunSettings(), {}
        defaults = TrainConfig()
        for key, raw in pairs.items():
            if key in _RUN_FIELDS:
                setattr(run, key, _coerce(key, raw, getattr(run, key)))
            else:
                train[key] = _coerce(key, raw, getattr(defaults, key))
        try:
            return cls(run, TrainConfig(**train))
        except ValueError as exc:
            raise ConfigError(str(exc)) from None

    def to_dict(self) -> dict:
        out = {k: getattr(self.run, k) for k in _RUN_FIELDS}
        out.update({k: getattr(self.train, k) for k in _TRAIN_FIELDS})
        return out

    def to_text(self) -> str:
        def fmt(v):
            return ("true" if v else "false") if isinstance(v, bool) else repr(v) if isinstance(v, float) else str(v)
        return "".join(f"{k}={fmt(v)}\n" for k, v in self.to_dict().items())

    @property
    def run_dir(self) -> Path:
        return Path(self.run.runs_dir) / self.run.name


def parse_config_text(text: str, source: str = "<config>") -> dict:
    pairs = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{source}:{lineno}: expected key=value, got {line!r}")
        key, val = (s.strip() for s in line.split("=", 1))
        if key in pairs:
            raise ConfigError(f"{source}:{lineno}: duplicate key {key}")
        pairs[key] = val
    return pairs


def load_config(path: Optional[str] = None, overrides: Optional[dict] = None) -> RunConfig:
    """File values, then ``overrides`` on top."""
    pairs = {}
    if path:
        p = Path(path)
        if not p.exists():
            raise ConfigError(f"{p}: config file not found")
        pairs = parse_config_text(p.read_text(), str(p))
    pairs.update(overrides or {})
    return RunConfig.from_pairs(pairs)
