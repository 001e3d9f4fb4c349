"""Toolkit configuration: defaults < config file < DIFFPROF_* environment < command-line flags."""

from __future__ import annotations

import json
import os
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path
from typing import Any, Mapping

from .detector import DetectorConfig
from .errors import InputMissing, SpecInvalid
from .localize import LocalizeConfig, RangePolicy

ENV_PREFIX = "DIFFPROF_"


@dataclass(frozen=True)
class ToolkitConfig:
    window_seconds: float = 20.0
    sample_rate_hz: float = 10_000.0
    beta_gate: float = 0.01
    delta: float = 0.4
    k: float = 5.0
    max_peers: int = 100          # peers sampled per worker: min(max_peers, |W|)
    mad_floor: float = 0.0
    range_overrides: dict = field(default_factory=dict)
    learn_repeats: int = 10
    detector_window: int = 50
    relearn_after: int = 200
    slowdown_percent: float = 5.0
    blocked_multiplier: float = 5.0
    cooldown_seconds: float = 600.0
    lead_iterations: int = 3
    rng_seed: int = 0

    def __post_init__(self):
        if self.window_seconds <= 0 or self.sample_rate_hz <= 0:
            raise SpecInvalid("window_seconds and sample_rate_hz must be positive")
        if not 0 <= self.beta_gate <= 1 or not self.delta > 0 or self.k < 0:
            raise SpecInvalid("beta_gate must lie in [0, 1], delta > 0, k >= 0")
        if self.max_peers < 1 or self.learn_repeats < 1 or self.detector_window < 1:
            raise SpecInvalid("max_peers, learn_repeats and detector_window must be >= 1")
        if self.relearn_after < 1 or self.lead_iterations < 1:
            raise SpecInvalid("relearn_after and lead_iterations must be >= 1")

    def localize_config(self) -> LocalizeConfig:
        return LocalizeConfig(delta=self.delta, k=self.k, beta_gate=self.beta_gate,
                              max_peers=self.max_peers, seed=self.rng_seed,
                              mad_floor=self.mad_floor)

    def range_policy(self) -> RangePolicy:
        try:
            return RangePolicy.with_overrides(self.range_overrides)
        except (KeyError, ValueError, TypeError) as exc:
            raise SpecInvalid(f"bad range override: {exc}") from None

    def detector_config(self) -> DetectorConfig:
        return DetectorConfig(learn_repeats=self.learn_repeats, window=self.detector_window,
                              relearn_after=self.relearn_after,
                              slowdown_fraction=self.slowdown_percent / 100.0,
                              blocked_multiplier=self.blocked_multiplier,
                              cooldown_ns=int(self.cooldown_seconds * 1e9))

    def to_dict(self) -> dict:
        return asdict(self)


_FIELDS = {f.name: f for f in fields(ToolkitConfig)}


def _coerce(name: str, value: Any) -> Any:
    default = _FIELDS[name].default
    if name == "range_overrides":
        if isinstance(value, str):
            value = json.loads(value)
        if not isinstance(value, dict):
            raise SpecInvalid("range_overrides must be a mapping")
        return value
    try:
        if isinstance(default, bool):
            return str(value).lower() in ("1", "true", "yes")
        if isinstance(default, int):
            return int(value)
        return float(value)
    except (TypeError, ValueError):
        raise SpecInvalid(f"config field {name!r}: cannot use {value!r}") from None


def _apply(cfg: ToolkitConfig, values: Mapping[str, Any], source: str) -> ToolkitConfig:
    unknown = set(values) - set(_FIELDS)
    if unknown:
        raise SpecInvalid(f"{source}: unknown config fields {sorted(unknown)}")
    return replace(cfg, **{k: _coerce(k, v) for k, v in values.items() if v is not None})


def env_overrides(environ: Mapping[str, str] | None = None) -> dict:
    environ = os.environ if environ is None else environ
    out = {}
    for name in _FIELDS:
        key = ENV_PREFIX + name.upper()
        if key in environ:
            out[name] = environ[key]
    return out


def load_config(path: str | Path | None = None, flags: Mapping[str, Any] | None = None,
                environ: Mapping[str, str] | None = None) -> ToolkitConfig:
    cfg = ToolkitConfig()
    if path is not None:
        path = Path(path)
        if not path.exists():
            raise InputMissing(f"{path}: no such config file")
        try:
            data = json.loads(path.read_text(encoding="utf-8"))
        except json.JSONDecodeError as exc:
            raise SpecInvalid(f"{path}: not valid JSON ({exc.msg})") from None
        if not isinstance(data, dict):
            raise SpecInvalid(f"{path}: config must be a JSON object")
        cfg = _apply(cfg, data, str(path))
    cfg = _apply(cfg, env_overrides(environ), "environment")
    if flags:
        cfg = _apply(cfg, {k: v for k, v in flags.items() if v is not None}, "flags")
    return cfg
