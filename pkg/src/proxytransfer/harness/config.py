"""Run configuration: defaults, flat ``key=value`` files, and validation."""

from __future__ import annotations

import dataclasses
import json
import typing
from dataclasses import dataclass
from pathlib import Path

from ..augment import ROTATION_MODES
from ..errors import ConfigError
from ..models import ARCH_PRESETS, ArchSpec
from ..optim import SCHEDULE_KINDS, Schedule

TASKS = ("pretrain", "finetune", "evaluate")
PRETRAIN_METHODS = ("classification", "proxynca")
PROTOCOLS = ("kfold", "holdout")
FINETUNE_LOSSES = ("cross_entropy", "proxynca")
HEAD_INITS = ("normal", "feature_scaled")

# Fixed-epoch defaults: 100 for pretraining, 200 for k-fold (CRC-style)
# targets, 100 for holdout (PCam-style) targets.
DEFAULT_EPOCHS = {"pretrain": 100, "kfold": 200, "holdout": 100}


@dataclass
class RunConfig:
    task: str = "finetune"
    method: str = "proxynca"
    init: str = "random"
    data: str | None = None
    test_data: str | None = None
    out: str = "runs_out"
    arch: str = "desk"
    stage_blocks: tuple[int, ...] | None = None
    stage_widths: tuple[int, ...] | None = None
    stem_width: int | None = None
    stem_kernel: int | None = None
    stem_stride: int | None = None
    embedding_dim: int = 64
    epochs: int | None = None
    batch_size: int = 32
    base_lr: float = 1e-4
    schedule: str = "exponential"
    gamma: float = 0.94
    drop_epoch: int = 5
    drop_factor: float = 10.0
    n_c: int | None = None
    r_percent: float | None = None
    protocol: str = "kfold"
    folds: int = 10
    fold_limit: int | None = None
    test_per_class: int | None = None
    split_seed: int = 0
    seeds: tuple[int, ...] = (0,)
    finetune_loss: str = "cross_entropy"
    head_init: str = "normal"
    squared_distance: bool = False
    per_example_updates: bool = False
    freeze_backbone: bool = False
    proxy_lr_scale: float = 1.0
    pad_fraction: float = 0.125
    crop_size: int | None = None
    jitter: float = 0.4
    rotation: str = "quarter"
    flip_prob: float = 0.5
    resize: int | None = None
    checkpoint: str | None = None
    eval_mode: str | None = None
    save_checkpoints: bool = False
    label: str | None = None

    # -- derived values ----------------------------------------------------------
    def arch_spec(self) -> ArchSpec:
        if self.arch not in ARCH_PRESETS:
            raise ConfigError(f"unknown arch preset {self.arch!r}; choose from {sorted(ARCH_PRESETS)}")
        base = ARCH_PRESETS[self.arch]
        overrides = {
            k: getattr(self, k)
            for k in ("stage_blocks", "stage_widths", "stem_width", "stem_kernel", "stem_stride")
            if getattr(self, k) is not None
        }
        return dataclasses.replace(base, **overrides)

    def resolved_epochs(self) -> int:
        if self.epochs is not None:
            return self.epochs
        return DEFAULT_EPOCHS["pretrain" if self.task == "pretrain" else self.protocol]

    def schedule_obj(self) -> Schedule:
        return Schedule(self.schedule, self.base_lr, self.gamma, self.drop_epoch, self.drop_factor)

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        for k, v in d.items():
            if isinstance(v, tuple):
                d[k] = list(v)
        return d

    def validate(self, check_paths: bool = True) -> "RunConfig":
        def choice(name, allowed):
            if getattr(self, name) not in allowed:
                raise ConfigError(f"{name}={getattr(self, name)!r}; expected one of {allowed}")

        choice("task", TASKS)
        choice("schedule", SCHEDULE_KINDS)
        choice("protocol", PROTOCOLS)
        choice("finetune_loss", FINETUNE_LOSSES)
        choice("head_init", HEAD_INITS)
        choice("rotation", ROTATION_MODES)
        if self.task == "pretrain":
            choice("method", PRETRAIN_METHODS)
        if self.resolved_epochs() < 1:
            raise ConfigError(f"epochs must be >= 1, got {self.resolved_epochs()}")
        if self.batch_size < 1:
            raise ConfigError(f"batch_size must be >= 1, got {self.batch_size}")
        if self.embedding_dim < 1:
            raise ConfigError("embedding_dim must be >= 1")
        if not self.seeds:
            raise ConfigError("at least one seed is required")
        if self.n_c is not None and self.r_percent is not None:
            raise ConfigError("give either n_c or r_percent, not both")
        if self.n_c is not None and self.n_c < 1:
            raise ConfigError("n_c must be >= 1")
        if self.r_percent is not None and not 0 < self.r_percent <= 100:
            raise ConfigError("r_percent must lie in (0, 100]")
        if self.folds < 2:
            raise ConfigError("folds must be >= 2")
        self.arch_spec()
        self.schedule_obj()
        if check_paths:
            needed = {"pretrain": ["data"], "finetune": ["data"], "evaluate": ["data", "checkpoint"]}[self.task]
            if self.task == "finetune" and self.init != "random":
                needed.append("init")
            if self.test_data is not None:
                needed.append("test_data")
            for key in needed:
                value = getattr(self, key)
                if value is None:
                    raise ConfigError(f"{key} is required for task {self.task}")
                if not Path(value).exists():
                    raise ConfigError(f"{key} path does not exist: {value}")
        return self


FIELD_TYPES = typing.get_type_hints(RunConfig)


def _convert(name: str, raw):
    """Coerce a string (or already-typed value) to the declared type of ``name``."""
    if name not in FIELD_TYPES:
        raise ConfigError(f"unknown config key {name!r}")
    tp = FIELD_TYPES[name]
    args = typing.get_args(tp)
    optional = type(None) in args
    if optional:
        inner = [a for a in args if a is not type(None)]
        tp = inner[0]
    if not isinstance(raw, str):
        if raw is None and optional:
            return None
        return tuple(raw) if typing.get_origin(tp) is tuple else raw
    text = raw.strip()
    if optional and text.lower() in ("", "none", "null"):
        return None
    try:
        if tp is bool:
            if text.lower() in ("1", "true", "yes", "on"):
                return True
            if text.lower() in ("0", "false", "no", "off"):
                return False
            raise ValueError(text)
        if typing.get_origin(tp) is tuple:
            return tuple(int(part) for part in text.replace(",", " ").split())
        if tp is int:
            return int(text)
        if tp is float:
            return float(text)
        return text
    except ValueError:
        raise ConfigError(f"bad value for {name}: {raw!r}") from None


def parse_config_text(text: str) -> dict:
    """Parse flat ``key = value`` lines; ``#`` starts a comment."""
    values = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"config line {lineno}: expected key=value, got {line!r}")
        key, value = (part.strip() for part in line.split("=", 1))
        key = key.replace("-", "_")
        values[key] = _convert(key, value)
    return values


def load_config_file(path) -> dict:
    try:
        return parse_config_text(Path(path).read_text())
    except OSError as exc:
        raise ConfigError(f"cannot read config file {path}: {exc}") from None


def build_config(file_values: dict | None = None, overrides: dict | None = None) -> RunConfig:
    """Defaults < config file < explicit overrides (``None`` overrides are ignored)."""
    values = {}
    for source in (file_values or {}, overrides or {}):
        for key, value in source.items():
            if value is None:
                continue
            values[key] = _convert(key, value)
    return RunConfig(**values)


def config_from_dict(d: dict) -> RunConfig:
    known = {k: v for k, v in d.items() if k in FIELD_TYPES}
    return build_config(overrides=known)


def dump_config(cfg: RunConfig) -> str:
    return json.dumps(cfg.to_dict(), sort_keys=True)

