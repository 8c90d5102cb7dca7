"""Strict TOML configuration.

Every key has a default; unknown keys and wrong types are rejected with the
dotted path of the offending entry.  ``fingerprint`` hashes the canonical
(defaults-filled, key-sorted) JSON form.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
import math
from dataclasses import dataclass, field

import tomli

from .schedules import FAMILIES
from .training import TASK_KINDS, TaskSpec

TASK_PARAM_KEYS = {
    "deblur": {"size", "sigma_lo", "sigma_hi"},
    "inpaint": {"drop_p"},
    "superres": {"factor"},
    "mri": {"pattern", "acceleration", "n_coils"},
    "dense": {"rows", "seed"},
    "identity": set(),
}


class ConfigError(ValueError):
    pass


@dataclass
class ScheduleSection:
    family: str = "EDM"
    sigma_min: float = 0.002
    sigma_max: float = 80.0
    rho: float = 7.0
    p_mean: float = -1.2
    p_std: float = 1.2


@dataclass
class DenoiserSection:
    K: int = 4
    channels: list[int] = field(default_factory=lambda: [8, 16, 32])
    untied: bool = False
    sigma_data: float = 0.5
    gamma_target: float = 0.5
    gamma_tau_init: float = 1.0
    dtype: str = "float32"


def _default_tasks() -> list[dict]:
    return [{"kind": "deblur", "weight": 0.5, "size": 9, "sigma_lo": 1.0, "sigma_hi": 2.0},
            {"kind": "inpaint", "weight": 0.5, "drop_p": [0.2, 0.4]}]


def _default_eval_tasks() -> list[dict]:
    return [{"kind": "deblur", "weight": 1.0, "size": 9, "sigma_lo": 1.5, "sigma_hi": 1.5},
            {"kind": "inpaint", "weight": 1.0, "drop_p": 0.4}]


@dataclass
class TrainingSection:
    learning_rate: float = 2e-4
    batch_size: int = 4
    total_steps: int = 5000
    sigma_y_range: list[float] = field(default_factory=lambda: [0.0, 0.1])
    ema_decay: float = 0.999
    log_every: int = 50
    checkpoint_every: int = 1000
    tasks: list[dict] = field(default_factory=_default_tasks)


@dataclass
class SamplerSection:
    family: str = "EDM"
    nfe: int = 18
    s_churn: float = 0.0
    s_tmin: float = 0.0
    s_tmax: float = math.inf
    s_noise: float = 1.0
    second_order: bool = True


@dataclass
class DataSection:
    kind: str = "shapes"
    path: str = ""
    size: int = 64
    n_train: int = 2000
    n_eval: int = 16
    eval_seed: int = 12345
    sigma_y: float = 0.05
    eval_tasks: list[dict] = field(default_factory=_default_eval_tasks)


@dataclass
class Config:
    seed: int = 0
    schedule: ScheduleSection = field(default_factory=ScheduleSection)
    denoiser: DenoiserSection = field(default_factory=DenoiserSection)
    training: TrainingSection = field(default_factory=TrainingSection)
    sampler: SamplerSection = field(default_factory=SamplerSection)
    data: DataSection = field(default_factory=DataSection)

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @property
    def fingerprint(self) -> str:
        return fingerprint(self)

    def task_specs(self, which: str = "training") -> list[TaskSpec]:
        raw = self.training.tasks if which == "training" else self.data.eval_tasks
        return [task_spec(d) for d in raw]


def task_spec(d: dict) -> TaskSpec:
    d = dict(d)
    kind = d.pop("kind")
    weight = d.pop("weight", 1.0)
    return TaskSpec(kind, weight, d)


def _type_ok(value, annotation: str) -> bool:
    if annotation == "bool":
        return isinstance(value, bool)
    if annotation == "int":
        return isinstance(value, int) and not isinstance(value, bool)
    if annotation == "float":
        return isinstance(value, (int, float)) and not isinstance(value, bool)
    if annotation == "str":
        return isinstance(value, str)
    if annotation.startswith("list[int]"):
        return isinstance(value, list) and all(_type_ok(v, "int") for v in value)
    if annotation.startswith("list[float]"):
        return isinstance(value, list) and all(_type_ok(v, "float") for v in value)
    if annotation.startswith("list[dict]"):
        return isinstance(value, list) and all(isinstance(v, dict) for v in value)
    return False


def _fill(cls, raw: dict, path: str):
    fields = {f.name: f for f in dataclasses.fields(cls)}
    kwargs = {}
    for key, value in raw.items():
        where = f"{path}.{key}" if path else key
        if key not in fields:
            raise ConfigError(f"unknown config key {where!r}")
        ann = fields[key].type
        if dataclasses.is_dataclass(fields[key].default_factory if fields[key].default_factory
                                    is not dataclasses.MISSING else None):
            if not isinstance(value, dict):
                raise ConfigError(f"{where!r} must be a table")
            kwargs[key] = _fill(fields[key].default_factory, value, where)
            continue
        if not _type_ok(value, ann):
            raise ConfigError(f"{where!r} has the wrong type: expected {ann}, got {type(value).__name__}")
        if ann == "float":
            value = float(value)
        if ann == "list[float]":
            value = [float(v) for v in value]
        kwargs[key] = value
    return cls(**kwargs)


def _check_tasks(tasks: list[dict], path: str) -> None:
    for i, t in enumerate(tasks):
        where = f"{path}[{i}]"
        kind = t.get("kind")
        if kind not in TASK_KINDS:
            raise ConfigError(f"{where}.kind must be one of {TASK_KINDS}, got {kind!r}")
        extra = set(t) - {"kind", "weight"} - TASK_PARAM_KEYS[kind]
        if extra:
            raise ConfigError(f"unknown config key {where + '.' + sorted(extra)[0]!r}")
        try:
            task_spec(t)
        except ValueError as exc:
            raise ConfigError(f"{where}: {exc}") from exc


def validate(cfg: Config) -> Config:
    if cfg.schedule.family not in FAMILIES:
        raise ConfigError(f"schedule.family must be one of {FAMILIES}")
    if cfg.sampler.family not in FAMILIES:
        raise ConfigError(f"sampler.family must be one of {FAMILIES}")
    if cfg.sampler.nfe < 1:
        raise ConfigError(f"sampler.nfe must be >= 1, got {cfg.sampler.nfe}")
    if cfg.sampler.s_churn < 0 or cfg.sampler.s_noise < 0:
        raise ConfigError("sampler.s_churn and sampler.s_noise must be non-negative")
    if not 0 < cfg.schedule.sigma_min < cfg.schedule.sigma_max:
        raise ConfigError("schedule requires 0 < sigma_min < sigma_max")
    if cfg.denoiser.K < 1:
        raise ConfigError("denoiser.K must be >= 1")
    if len(cfg.denoiser.channels) != 3 or min(cfg.denoiser.channels) < 1:
        raise ConfigError("denoiser.channels must list three positive widths")
    if not cfg.denoiser.gamma_target > 0 or not cfg.denoiser.gamma_tau_init > 0:
        raise ConfigError("denoiser.gamma_target and denoiser.gamma_tau_init must be positive")
    if cfg.denoiser.dtype not in ("float32", "float64"):
        raise ConfigError("denoiser.dtype must be 'float32' or 'float64'")
    tr = cfg.training
    if len(tr.sigma_y_range) != 2 or not 0 <= tr.sigma_y_range[0] <= tr.sigma_y_range[1]:
        raise ConfigError("training.sigma_y_range must be [lo, hi] with 0 <= lo <= hi")
    if tr.batch_size < 1 or tr.total_steps < 0 or tr.log_every < 1 or tr.checkpoint_every < 1:
        raise ConfigError("training.batch_size, log_every, checkpoint_every must be >= 1; total_steps >= 0")
    if tr.learning_rate < 0 or not 0 <= tr.ema_decay < 1:
        raise ConfigError("training.learning_rate must be >= 0 and ema_decay in [0, 1)")
    if not tr.tasks:
        raise ConfigError("training.tasks must not be empty")
    _check_tasks(tr.tasks, "training.tasks")
    _check_tasks(cfg.data.eval_tasks, "data.eval_tasks")
    if cfg.data.kind not in ("shapes", "grf", "folder"):
        raise ConfigError("data.kind must be 'shapes', 'grf' or 'folder'")
    if cfg.data.size < 8 or cfg.data.size % 4:
        raise ConfigError("data.size must be a multiple of 4 and >= 8")
    if cfg.data.n_train < 1 or cfg.data.n_eval < 1 or cfg.data.sigma_y < 0:
        raise ConfigError("data.n_train, data.n_eval must be >= 1 and data.sigma_y >= 0")
    return cfg


def parse_config(text: str) -> Config:
    try:
        raw = tomli.loads(text)
    except tomli.TOMLDecodeError as exc:
        raise ConfigError(f"malformed config: {exc}") from exc
    return validate(_fill(Config, raw, ""))


def load_config(path) -> Config:
    with open(path, "rb") as f:
        data = f.read()
    try:
        text = data.decode("utf-8")
    except UnicodeDecodeError as exc:
        raise ConfigError(f"{path} is not UTF-8") from exc
    return parse_config(text)


def canonical_json(cfg: Config) -> str:
    return json.dumps(cfg.to_dict(), sort_keys=True, separators=(",", ":"))


def fingerprint(cfg: Config) -> str:
    return hashlib.sha256(canonical_json(cfg).encode()).hexdigest()
