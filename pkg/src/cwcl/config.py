"""Flat ``key = value`` experiment configuration.

One file fully determines a run.  Lines starting with ``#`` are comments.  The
config hash covers every setting except the seed and the output directory, so
seed replicates of one experiment share a hash.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, field, fields
from pathlib import Path

from .corpus import InvalidSpecError, NoiseSpec
from .trainer import TrainPlan

STAGES = ("full", "1-only")


class ConfigError(ValueError):
    pass


@dataclass
class DatasetSpec:
    name: str = "shapes"
    path: str = ""
    num_classes: int = 10
    image_size: int = 16
    train_size: int = 0  # 0: whole split (shapes: 5000)
    test_size: int = 0  # 0: whole split (shapes: 1000)
    seed: int = 0


@dataclass
class ExperimentConfig:
    dataset: DatasetSpec = field(default_factory=DatasetSpec)
    noise: NoiseSpec = field(default_factory=lambda: NoiseSpec("symmetric", 0.4))
    plan: TrainPlan = field(default_factory=TrainPlan)
    arch: str = "resnet18"
    stage: str = "full"
    overlay: str = ""
    out: str = "runs/default"
    seed: int = 0

    def __post_init__(self):
        self.plan.seed = self.seed

    def validate(self):
        if self.stage not in STAGES:
            raise ConfigError(f"stage must be one of {STAGES}, got {self.stage!r}")
        if self.dataset.name not in ("shapes", "cifar10", "cifar100", "folder"):
            raise ConfigError(f"unknown dataset {self.dataset.name!r}")
        if self.dataset.name != "shapes" and not self.dataset.path:
            raise ConfigError(f"dataset {self.dataset.name!r} needs dataset.path (no auto-download)")
        try:
            self.noise.validate(self.dataset.num_classes)
        except InvalidSpecError as exc:
            raise ConfigError(str(exc)) from None
        return self

    @property
    def arm(self) -> str:
        if self.plan.lam == 0:
            return "CE" if self.stage == "1-only" else "CE+finetune"
        return "CWCL(N)" if self.stage == "1-only" else "CWCL(Y)"

    def config_hash(self) -> str:
        body = serialize(self, include_run_keys=False)
        return hashlib.sha256(body.encode()).hexdigest()[:16]


# -- (de)serialization -------------------------------------------------------------

_PLAN_SKIP = {"seed"}
_TOP = ("arch", "stage", "overlay")


def _format(v) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, dict):
        return ",".join(f"{k}:{t}" for k, t in sorted(v.items()))
    if v is None:
        return ""
    return repr(v) if isinstance(v, float) else str(v)


def _parse(raw: str, kind, key: str):
    raw = raw.strip()
    try:
        if kind in (bool, "bool"):
            if raw.lower() in ("true", "yes", "1"):
                return True
            if raw.lower() in ("false", "no", "0"):
                return False
            raise ValueError(raw)
        if kind in (int, "int"):
            return int(raw)
        if kind in (float, "float"):
            return float(raw)
        if "dict" in str(kind):
            if not raw:
                return None
            pairs = (p.split(":") for p in raw.split(","))
            return {int(a): int(b) for a, b in pairs}
        return raw
    except ValueError:
        raise ConfigError(f"{key}: cannot parse {raw!r} as {getattr(kind, '__name__', kind)}") from None


def _sections(cfg: ExperimentConfig):
    yield "dataset", cfg.dataset, set()
    yield "noise", cfg.noise, set()
    yield "plan", cfg.plan, _PLAN_SKIP


def serialize(cfg: ExperimentConfig, include_run_keys: bool = True) -> str:
    lines = ["# cwcl experiment config"]
    for name, obj, skip in _sections(cfg):
        lines.append(f"\n# {name}")
        for f in fields(obj):
            if f.name not in skip:
                lines.append(f"{name}.{f.name} = {_format(getattr(obj, f.name))}")
    lines.append("\n# run")
    for k in _TOP:
        lines.append(f"{k} = {_format(getattr(cfg, k))}")
    if include_run_keys:
        lines.append(f"seed = {cfg.seed}")
        lines.append(f"out = {cfg.out}")
    return "\n".join(lines) + "\n"


def _field_types(obj):
    return {f.name: f.type for f in fields(obj)}


def set_key(cfg: ExperimentConfig, key: str, raw: str):
    section, _, name = key.partition(".")
    if name:
        targets = {s: (o, skip) for s, o, skip in _sections(cfg)}
        if section not in targets or name in targets[section][1]:
            raise ConfigError(f"unknown config key {key!r}")
        obj = targets[section][0]
        types = _field_types(obj)
        if name not in types:
            raise ConfigError(f"unknown config key {key!r}")
        setattr(obj, name, _parse(raw, types[name], key))
    elif key in _TOP + ("out",):
        setattr(cfg, key, raw.strip())
    elif key == "seed":
        cfg.seed = _parse(raw, int, key)
        cfg.plan.seed = cfg.seed
    else:
        raise ConfigError(f"unknown config key {key!r}")


def parse(text: str) -> ExperimentConfig:
    cfg = ExperimentConfig()
    for lineno, line in enumerate(text.splitlines(), start=1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected 'key = value', got {line!r}")
        key, raw = line.split("=", 1)
        try:
            set_key(cfg, key.strip(), raw)
        except ConfigError as exc:
            raise ConfigError(f"line {lineno}: {exc}") from None
    _recheck_plan(cfg)
    return cfg


def _recheck_plan(cfg):
    try:
        cfg.plan.__post_init__()
    except ValueError as exc:
        raise ConfigError(str(exc)) from None


def load(path) -> ExperimentConfig:
    try:
        text = Path(path).read_text(encoding="utf-8")
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from None
    return parse(text)
