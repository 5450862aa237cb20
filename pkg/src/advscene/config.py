"""Run configuration (``config.v1``): a single JSON file plus ``key.path=value`` overrides."""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field, fields, is_dataclass, replace
from pathlib import Path
from typing import Optional

from .codec import CodecConfig
from .diffusion import SCHEDULE_KINDS, DenoiserConfig, GuidedSampleConfig
from .dsl.check import LEVEL_RANGES, in_level_range, level_range_text
from .guidance import DEFAULT_W_ADV
from .io import config_hash
from .llm.providers import ProviderConfig
from .planner import PlannerConfig
from .synth import TEMPLATES

CONFIG_SCHEMA = "config.v1"


class ConfigError(ValueError):
    """Invalid or unknown configuration keys or values."""


@dataclass(frozen=True)
class Paths:
    models: str = "models"
    scenarios: str = "scenarios"
    out: str = "out"


@dataclass(frozen=True)
class SynthConfig:
    template: str = "straight"
    count: int = 10
    mixture: Optional[dict] = None     # template -> count; overrides template/count

    def __post_init__(self):
        if self.mixture is None and self.template not in TEMPLATES:
            raise ConfigError(f"unknown template {self.template!r}; expected one of {TEMPLATES}")
        if self.count < 1:
            raise ConfigError("synth.count must be >= 1")
        for t in (self.mixture or {}):
            if t not in TEMPLATES:
                raise ConfigError(f"unknown template {t!r} in synth.mixture")


@dataclass(frozen=True)
class ScheduleConfig:
    steps: int = 20
    kind: str = "cosine"

    def __post_init__(self):
        if self.steps < 1:
            raise ConfigError("schedule.steps must be >= 1")
        if self.kind not in SCHEDULE_KINDS:
            raise ConfigError(f"schedule.kind must be one of {SCHEDULE_KINDS}")


@dataclass(frozen=True)
class SimSection:
    steps: Optional[int] = None
    replan_period: int = 2


@dataclass(frozen=True)
class RunConfig:
    seed: int = 0
    paths: Paths = Paths()
    synth: SynthConfig = SynthConfig()
    codec: CodecConfig = CodecConfig()
    denoiser: DenoiserConfig = DenoiserConfig()
    schedule: ScheduleConfig = ScheduleConfig()
    sampling: GuidedSampleConfig = GuidedSampleConfig()
    planner: PlannerConfig = PlannerConfig()
    sim: SimSection = SimSection()
    provider: ProviderConfig = ProviderConfig()
    levels: dict = field(default_factory=lambda: dict(DEFAULT_W_ADV))

    def __post_init__(self):
        if set(self.levels) != set(LEVEL_RANGES):
            raise ConfigError(f"levels must define exactly {sorted(LEVEL_RANGES)}")
        for lv, w in self.levels.items():
            if not in_level_range(lv, w):
                raise ConfigError(f"levels.{lv} = {w} is outside {level_range_text(lv)}")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["schema"] = CONFIG_SCHEMA
        return d

    @property
    def hash(self) -> str:
        return config_hash(self.to_dict())


def _build(cls, data, where: str):
    if not isinstance(data, dict):
        raise ConfigError(f"{where or 'config'} must be an object")
    known = {f.name: f for f in fields(cls)}
    unknown = sorted(set(data) - set(known))
    if unknown:
        raise ConfigError(f"unknown key(s) in {where or 'config'}: {', '.join(unknown)}")
    kw = {}
    defaults = cls()
    for name, value in data.items():
        current = getattr(defaults, name)
        if is_dataclass(current):
            kw[name] = _build(type(current), value, f"{where}.{name}" if where else name)
        else:
            kw[name] = value
    try:
        return cls(**kw)
    except (TypeError, ValueError) as e:
        if isinstance(e, ConfigError):
            raise
        raise ConfigError(f"{where or 'config'}: {e}") from e


def config_from_dict(data: dict) -> RunConfig:
    data = dict(data)
    schema = data.pop("schema", CONFIG_SCHEMA)
    if schema != CONFIG_SCHEMA:
        raise ConfigError(f"expected schema {CONFIG_SCHEMA}, got {schema!r}")
    return _build(RunConfig, data, "")


def _parse_value(text: str):
    try:
        return json.loads(text)
    except json.JSONDecodeError:
        return text


def apply_overrides(data: dict, overrides) -> dict:
    """Apply ``a.b=value`` overrides (values parsed as JSON, else kept as strings)."""
    data = json.loads(json.dumps(data))
    for item in overrides or ():
        if "=" not in item:
            raise ConfigError(f"override {item!r} is not of the form key.path=value")
        key, value = item.split("=", 1)
        parts = key.split(".")
        node = data
        for p in parts[:-1]:
            node = node.setdefault(p, {})
            if not isinstance(node, dict):
                raise ConfigError(f"override {key!r} descends into a non-object")
        node[parts[-1]] = _parse_value(value)
    return data


def load_config(path: Optional[str] = None, overrides=None) -> RunConfig:
    data = {}
    if path is not None:
        try:
            data = json.loads(Path(path).read_text())
        except OSError as e:
            raise ConfigError(f"cannot read config {path}: {e}") from e
        except json.JSONDecodeError as e:
            raise ConfigError(f"config {path} is not valid JSON: {e}") from e
    return config_from_dict(apply_overrides(data, overrides))


def with_sampling(cfg: RunConfig, **kw) -> RunConfig:
    return replace(cfg, sampling=replace(cfg.sampling, **kw))
