"""Run configuration: flat ``section.key = value`` files, merged defaults < file < flags."""

from __future__ import annotations

import os
from dataclasses import dataclass, field, fields
from pathlib import Path

from .data import AugmentationSpec
from .model import ConfigError, ModelConfig, parse_value
from .train import LossConfig, ScheduleConfig

OUT_ENV = "PEF_OUT"


@dataclass
class AugmentSection:
    enabled: bool = True
    scale_range: tuple[float, ...] = (0.7, 1.3)
    rotation_range: tuple[float, ...] = (-40.0, 40.0)
    flip_prob: float = 0.5

    def spec(self, output_size) -> AugmentationSpec | None:
        if not self.enabled:
            return None
        return AugmentationSpec(tuple(self.scale_range), tuple(self.rotation_range),
                                self.flip_prob, tuple(output_size))


@dataclass
class DataSection:
    annotations: str = ""       # COCO keypoint file; empty means synthetic figures
    image_dir: str = ""         # defaults to the annotation file's directory
    synthetic_count: int = 16
    synthetic_seed: int = 0


@dataclass
class EvalSection:
    flip_test: bool = True
    rule: str = "filtered"
    batch_size: int = 32


@dataclass
class RunSection:
    seed: int = 0
    deterministic: bool = False
    jobs: int = 0               # 0 leaves the BLAS thread count alone
    out_dir: str = "runs/default"
    dtype: str = "float32"
    log_every: int = 0


SECTIONS = {
    "model": ModelConfig,
    "schedule": ScheduleConfig,
    "augment": AugmentSection,
    "loss": LossConfig,
    "data": DataSection,
    "eval": EvalSection,
    "run": RunSection,
}


@dataclass
class RunConfig:
    model: ModelConfig = field(default_factory=ModelConfig)
    schedule: ScheduleConfig = field(default_factory=ScheduleConfig)
    augment: AugmentSection = field(default_factory=AugmentSection)
    loss: LossConfig = field(default_factory=LossConfig)
    data: DataSection = field(default_factory=DataSection)
    eval: EvalSection = field(default_factory=EvalSection)
    run: RunSection = field(default_factory=RunSection)

    def items(self) -> dict[str, object]:
        """Every key as ``section.name`` with its typed value."""
        out = {}
        for section in SECTIONS:
            for f in fields(getattr(self, section)):
                out[f"{section}.{f.name}"] = getattr(getattr(self, section), f.name)
        return out

    def set(self, key: str, raw) -> None:
        section, _, name = key.partition(".")
        if section not in SECTIONS or not name:
            raise ConfigError(f"unknown config key {key!r}")
        target = getattr(self, section)
        if name not in {f.name for f in fields(target)}:
            raise ConfigError(f"unknown config key {key!r}")
        setattr(target, name, parse_value(raw, getattr(target, name)))

    def update(self, values: dict[str, object]) -> "RunConfig":
        for key, raw in values.items():
            self.set(key, raw)
        return self

    def validate(self) -> "RunConfig":
        self.model.validate()
        try:
            self.schedule.validate()
        except ValueError as exc:
            raise ConfigError(str(exc)) from None
        if self.eval.rule not in ("filtered", "max"):
            raise ConfigError(f"eval.rule must be 'filtered' or 'max', got {self.eval.rule!r}")
        if self.run.dtype not in ("float32", "float64"):
            raise ConfigError("run.dtype must be float32 or float64")
        if self.run.jobs < 0:
            raise ConfigError("run.jobs must be >= 0")
        if len(self.augment.scale_range) != 2 or len(self.augment.rotation_range) != 2:
            raise ConfigError("augment ranges need exactly two values")
        return self

    @property
    def out_dir(self) -> Path:
        return Path(self.run.out_dir)

    @property
    def jobs(self) -> int | None:
        """Thread cap; deterministic runs default to a single thread."""
        if self.run.jobs:
            return self.run.jobs
        return 1 if self.run.deterministic else None

    def dumps(self) -> str:
        lines = []
        for key, value in self.items().items():
            lines.append(f"{key} = {format_value(value)}")
        return "\n".join(lines) + "\n"


def format_value(value) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, tuple):
        return ",".join(format_value(v) for v in value)
    return str(value)


def parse_file(path) -> dict[str, str]:
    """``key = value`` lines; ``#`` starts a comment; blank lines ignored."""
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as exc:
        raise FileNotFoundError(f"{path}: {exc.strerror or exc}") from None
    out = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        key, sep, value = line.partition("=")
        if not sep or not key.strip():
            raise ConfigError(f"{path}:{lineno}: expected 'key = value'")
        out[key.strip()] = value.strip()
    return out


def load_config(path=None, overrides: dict[str, object] | None = None,
                env=None) -> RunConfig:
    """Defaults, then the file, then ``PEF_OUT``, then explicit overrides."""
    env = os.environ if env is None else env
    cfg = RunConfig()
    if path:
        cfg.update(parse_file(path))
    if env.get(OUT_ENV):
        cfg.run.out_dir = env[OUT_ENV]
    cfg.update(overrides or {})
    return cfg.validate()


def defaults() -> dict[str, object]:
    return RunConfig().items()

