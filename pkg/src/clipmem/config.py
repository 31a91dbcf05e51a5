"""Run configuration: nested dataclasses mirrored one-to-one by a JSON file."""

from __future__ import annotations

import dataclasses
import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path

from .datagen import XorMotifTask


class ConfigParseError(ValueError):
    pass


@dataclass
class ModelConfig:
    hidden: int = 32
    d: int = 16
    k: int = 2
    C: int = 2


@dataclass
class CMConfig:
    enabled: bool = True
    variant: str = "associative"
    infusion: str = "gating"
    reduction_ratio: int = 4


@dataclass
class TrainConfig:
    N: int = 5
    L: int = 8
    alpha_loss: float = 1.0
    epochs: int = 60
    optimizer: str = "adam"
    base_lr: float = 0.003
    momentum: float = 0.9
    weight_decay: float = 0.0
    warmup_epochs: int = 2
    strategy: str = "batch_reduction"
    batch_videos: int = 128
    stagewise: bool = False
    stage1_epochs: int = 0
    grad_clip: float = 0.0


@dataclass
class EvalConfig:
    n_crops: int = 10


@dataclass
class RunConfig:
    seed: int = 0
    task: XorMotifTask = field(default_factory=XorMotifTask)
    model: ModelConfig = field(default_factory=ModelConfig)
    cm: CMConfig = field(default_factory=CMConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)

    @property
    def batch_per_step(self) -> int:
        """Videos per step: round(B / N) under batch reduction."""
        if self.train.strategy == "batch_reduction":
            return max(1, round(self.train.batch_videos / self.train.N))
        return self.train.batch_videos

    def validate(self) -> None:
        t = self.train
        self.task.validate()
        if t.N < 1:
            raise ConfigParseError("train.N: must be >= 1")
        if t.alpha_loss < 0:
            raise ConfigParseError("train.alpha_loss: must be >= 0")
        if t.optimizer not in ("sgd", "adam"):
            raise ConfigParseError(f"train.optimizer: unknown optimizer {t.optimizer!r}")
        if t.strategy not in ("batch_reduction", "multi_iteration"):
            raise ConfigParseError(f"train.strategy: unknown strategy {t.strategy!r}")
        if self.train.strategy == "batch_reduction" and round(t.batch_videos / t.N) < 1:
            raise ConfigParseError("train.batch_videos: round(B/N) must be >= 1")
        if t.L > self.task.T:
            raise ConfigParseError("train.L: longer than the video")
        if self.cm.variant not in ("associative", "avgpool"):
            raise ConfigParseError(f"cm.variant: unknown variant {self.cm.variant!r}")
        if self.cm.infusion not in ("gating", "residual"):
            raise ConfigParseError(f"cm.infusion: unknown infusion {self.cm.infusion!r}")
        if self.model.d % self.cm.reduction_ratio:
            raise ConfigParseError("cm.reduction_ratio: must divide model.d")
        if self.model.C != XorMotifTask.num_classes:
            raise ConfigParseError("model.C: the XOR task has exactly 2 classes")
        if self.eval.n_crops < 1:
            raise ConfigParseError("eval.n_crops: must be >= 1")

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    def config_hash(self) -> str:
        blob = json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(blob.encode()).hexdigest()


def _build(cls, data, path: str):
    if not isinstance(data, dict):
        raise ConfigParseError(f"{path or '<root>'}: expected an object")
    fields = {f.name: f for f in dataclasses.fields(cls)}
    unknown = sorted(set(data) - set(fields))
    if unknown:
        raise ConfigParseError(f"{path + '.' if path else ''}{unknown[0]}: unknown field")
    kwargs = {}
    for name, value in data.items():
        f = fields[name]
        where = f"{path}.{name}" if path else name
        default = f.default_factory() if f.default_factory is not dataclasses.MISSING else f.default
        if dataclasses.is_dataclass(default):
            kwargs[name] = _build(type(default), value, where)
            continue
        kwargs[name] = _coerce(default, value, where)
    return cls(**kwargs)


def _coerce(default, value, where: str):
    if isinstance(default, bool):
        if not isinstance(value, bool):
            raise ConfigParseError(f"{where}: expected true/false, got {value!r}")
        return value
    if isinstance(default, int):
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigParseError(f"{where}: expected an integer, got {value!r}")
        return value
    if isinstance(default, float):
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigParseError(f"{where}: expected a number, got {value!r}")
        return float(value)
    if isinstance(default, str):
        if not isinstance(value, str):
            raise ConfigParseError(f"{where}: expected a string, got {value!r}")
        return value
    return value


def config_from_dict(data: dict) -> RunConfig:
    cfg = _build(RunConfig, data, "")
    cfg.validate()
    return cfg


def load_config(path: str | Path) -> RunConfig:
    text = Path(path).read_text()
    try:
        data = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ConfigParseError(f"{path}: line {exc.lineno}, column {exc.colno}: {exc.msg}") from exc
    return config_from_dict(data)


def dump_config(cfg: RunConfig, path: str | Path) -> None:
    Path(path).write_text(json.dumps(cfg.to_dict(), indent=2) + "\n")
