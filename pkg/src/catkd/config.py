"""Run configuration: one YAML file whose sections mirror the library types.

Scalar keys can be overridden from the environment with the ``CATKD__``
prefix and ``__`` as the section separator, e.g.
``CATKD__SCHEDULE__EPOCHS=5`` or ``CATKD__TEACHER__SCHEDULE__LR=0.1``.
"""

from __future__ import annotations

import dataclasses
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import yaml

from .backbones import BackboneSpec
from .data import DatasetSpec
from .errors import ConfigError
from .losses import DistillConfig
from .trainer import SCHEDULE_PRESETS, TrainSchedule
from .transforms import SubsetPolicy, TransformConfig

ENV_PREFIX = "CATKD__"
METHODS = ("ce", "kd", "cat", "catkd")


def _build(cls, data, section):
    if data is None:
        return cls()
    if not isinstance(data, dict):
        raise ConfigError(f"{section}: expected a mapping, got {type(data).__name__}")
    names = {f.name for f in dataclasses.fields(cls)}
    for key in data:
        if key not in names:
            raise ConfigError(f"{section}.{key}: unknown key")
    try:
        return cls(**data)
    except TypeError as exc:
        raise ConfigError(f"{section}: {exc}") from None


@dataclass(frozen=True)
class TeacherConfig:
    backbone: BackboneSpec = field(default_factory=lambda: BackboneSpec("tiny-cnn", 3, 16))
    schedule: TrainSchedule = field(default_factory=lambda: SCHEDULE_PRESETS["synthetic-teacher"])
    checkpoint: Optional[str] = None

    @classmethod
    def from_dict(cls, d, section="teacher"):
        d = dict(d or {})
        unknown = set(d) - {"backbone", "schedule", "checkpoint"}
        if unknown:
            raise ConfigError(f"{section}.{sorted(unknown)[0]}: unknown key")
        return cls(
            _build(BackboneSpec, d.get("backbone"), f"{section}.backbone") if "backbone" in d else cls().backbone,
            _build(TrainSchedule, d.get("schedule"), f"{section}.schedule") if "schedule" in d else cls().schedule,
            d.get("checkpoint"),
        )

    def to_dict(self):
        return {"backbone": self.backbone.to_dict(), "schedule": self.schedule.to_dict(), "checkpoint": self.checkpoint}


@dataclass(frozen=True)
class ProbeConfig:
    dataset: Optional[DatasetSpec] = None
    test_dataset: Optional[DatasetSpec] = None
    schedule: TrainSchedule = field(default_factory=lambda: SCHEDULE_PRESETS["probe"])

    def to_dict(self):
        return {
            "dataset": None if self.dataset is None else self.dataset.to_dict(),
            "test_dataset": None if self.test_dataset is None else self.test_dataset.to_dict(),
            "schedule": self.schedule.to_dict(),
        }


@dataclass(frozen=True)
class PlanConfig:
    kind: Optional[str] = None
    grid: tuple = ()
    seeds: tuple = (0,)

    def __post_init__(self):
        object.__setattr__(self, "grid", tuple(dict(c) for c in (self.grid or ())))
        object.__setattr__(self, "seeds", tuple(int(s) for s in self.seeds))

    def to_dict(self):
        return {"kind": self.kind, "grid": [dict(c) for c in self.grid], "seeds": list(self.seeds)}


@dataclass(frozen=True)
class RunConfig:
    student: BackboneSpec = field(default_factory=lambda: BackboneSpec("tiny-cnn", 3, 16))
    teacher: TeacherConfig = field(default_factory=TeacherConfig)
    dataset: DatasetSpec = field(default_factory=DatasetSpec)
    test_per_class: int = 50
    schedule: TrainSchedule = field(default_factory=lambda: SCHEDULE_PRESETS["synthetic-student"])
    distill: DistillConfig = field(default_factory=DistillConfig)
    probe: ProbeConfig = field(default_factory=ProbeConfig)
    plan: PlanConfig = field(default_factory=PlanConfig)
    method: str = "catkd"
    bias: bool = True
    cache_teacher: bool = False

    def __post_init__(self):
        if self.method not in METHODS:
            raise ConfigError(f"method: expected one of {METHODS}, got {self.method!r}")

    @classmethod
    def from_dict(cls, d) -> "RunConfig":
        d = dict(d or {})
        known = {f.name for f in dataclasses.fields(cls)} | {"transform"}
        for key in d:
            if key not in known:
                raise ConfigError(f"{key}: unknown section")
        distill = dict(d.get("distill") or {})
        if "transform" in distill:
            raise ConfigError("distill.transform: put transform settings in the top-level 'transform' section")
        transform = _build(TransformConfig, _subset_from(d.get("transform")), "transform")
        distill_cfg = _build(DistillConfig, {**distill, "transform": transform}, "distill")
        probe = dict(d.get("probe") or {})
        unknown = set(probe) - {"dataset", "test_dataset", "schedule"}
        if unknown:
            raise ConfigError(f"probe.{sorted(unknown)[0]}: unknown key")
        probe_cfg = ProbeConfig(
            _build(DatasetSpec, probe["dataset"], "probe.dataset") if probe.get("dataset") else None,
            _build(DatasetSpec, probe["test_dataset"], "probe.test_dataset") if probe.get("test_dataset") else None,
            _build(TrainSchedule, probe["schedule"], "probe.schedule") if probe.get("schedule") else ProbeConfig().schedule,
        )
        scalars = {}
        for key in ("test_per_class", "method", "bias", "cache_teacher"):
            if key in d:
                scalars[key] = d[key]
        return cls(
            student=_build(BackboneSpec, d["student"], "student") if "student" in d else cls().student,
            teacher=TeacherConfig.from_dict(d.get("teacher")),
            dataset=_build(DatasetSpec, d.get("dataset"), "dataset"),
            schedule=_build(TrainSchedule, d["schedule"], "schedule") if "schedule" in d else cls().schedule,
            distill=distill_cfg,
            probe=probe_cfg,
            plan=_build(PlanConfig, d.get("plan"), "plan"),
            **scalars,
        )

    def to_dict(self) -> dict:
        distill = self.distill.to_dict()
        transform = distill.pop("transform")
        return {
            "student": self.student.to_dict(),
            "teacher": self.teacher.to_dict(),
            "dataset": self.dataset.to_dict(),
            "test_per_class": self.test_per_class,
            "schedule": self.schedule.to_dict(),
            "distill": distill,
            "transform": transform,
            "probe": self.probe.to_dict(),
            "plan": self.plan.to_dict(),
            "method": self.method,
            "bias": self.bias,
            "cache_teacher": self.cache_teacher,
        }

    def with_overrides(self, overrides: dict) -> "RunConfig":
        """Apply dotted-key overrides such as ``{"transform.pool": [4, 4]}``."""
        d = self.to_dict()
        for dotted, value in overrides.items():
            set_dotted(d, dotted, value)
        return RunConfig.from_dict(d)


def _subset_from(transform):
    if not transform or not transform.get("subset"):
        return transform
    t = dict(transform)
    t["subset"] = _build(SubsetPolicy, t["subset"], "transform.subset")
    return t


def set_dotted(d: dict, dotted: str, value):
    keys = dotted.split(".")
    node = d
    for k in keys[:-1]:
        if not isinstance(node.get(k), dict):
            if k in node and node[k] is not None:
                raise ConfigError(f"{dotted}: {k} is not a section")
            node[k] = {}
        node = node[k]
    node[keys[-1]] = value


def env_overrides(environ=None) -> dict:
    environ = os.environ if environ is None else environ
    out = {}
    for key, raw in environ.items():
        if key.startswith(ENV_PREFIX):
            dotted = ".".join(part.lower() for part in key[len(ENV_PREFIX):].split("__"))
            out[dotted] = yaml.safe_load(raw)
    return out


def parse_config(text: str, environ=None) -> RunConfig:
    try:
        data = yaml.safe_load(text) or {}
    except yaml.YAMLError as exc:
        raise ConfigError(f"config is not valid YAML: {exc}") from None
    if not isinstance(data, dict):
        raise ConfigError("config: top level must be a mapping of sections")
    for dotted, value in env_overrides(environ).items():
        set_dotted(data, dotted, value)
    return RunConfig.from_dict(data)


def load_config(path, environ=None) -> RunConfig:
    path = Path(path)
    if not path.is_file():
        raise ConfigError(f"config file not found: {path}")
    return parse_config(path.read_text(), environ)


def dump_config(cfg: RunConfig) -> str:
    return yaml.safe_dump(cfg.to_dict(), sort_keys=False)
