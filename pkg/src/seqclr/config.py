"""Experiment configuration: dataclasses, JSON round-trip, schema validation."""

from __future__ import annotations

import dataclasses
import json
import types
import typing
from dataclasses import dataclass, field
from pathlib import Path

from .augment import PipelineSpec
from .contrastive import MappingChoice
from .data import ALNUM_SYMBOLS
from .decoders import DECODER_KINDS, MAX_DECODE_LEN
from .encoder import DECODER_FEATURES, EncoderConfig

PHASES = ("pretrain", "decoder_eval", "finetune")


class ConfigError(ValueError):
    """Invalid configuration; ``path`` locates the offending field."""

    def __init__(self, path: str, message: str):
        self.path = path
        super().__init__(f"{path or '<root>'}: {message}")


@dataclass
class OptimizerSpec:
    kind: str = "adadelta"
    decay_rate: float = 0.95
    eps: float = 1e-6
    grad_clip: float = 5.0
    weight_decay: float = 1e-4
    lr_init: float = 10.0
    milestones: tuple[float, ...] = (0.6, 0.8)
    milestone_factor: float = 0.1

    def __post_init__(self):
        self.milestones = tuple(float(m) for m in self.milestones)
        if self.kind != "adadelta":
            raise ValueError("only the 'adadelta' optimizer is supported")
        if not all(0.0 < m < 1.0 for m in self.milestones) or list(self.milestones) != sorted(set(self.milestones)):
            raise ValueError(f"milestones must be strictly increasing in (0, 1), got {self.milestones}")
        if not 0.0 <= self.decay_rate < 1.0:
            raise ValueError("decay_rate must be in [0, 1)")
        if self.lr_init <= 0 or self.grad_clip <= 0 or self.weight_decay < 0:
            raise ValueError("lr_init and grad_clip must be positive, weight_decay non-negative")

    def lr_multiplier(self, iteration: int, total: int) -> float:
        passed = sum(iteration >= m * total for m in self.milestones)
        return self.milestone_factor**passed

    def lr_at(self, iteration: int, total: int) -> float:
        return self.lr_init * self.lr_multiplier(iteration, total)


@dataclass
class ProtocolSpec:
    phase: str = "pretrain"
    iterations: int = 300
    batch_size: int = 32
    label_fraction: float = 1.0
    freeze_encoder: bool = False
    augment: bool = True
    # evaluate on the validation split every `eval_every` steps (0: only at the end)
    eval_every: int = 0
    val_fraction: float = 0.1
    # frame_to_instance produces ~T times more instances per image
    auto_reduce_batch: bool = True
    log_every: int = 10

    def __post_init__(self):
        if self.phase not in PHASES:
            raise ValueError(f"phase must be one of {PHASES}, got {self.phase!r}")
        if self.phase == "decoder_eval" and not self.freeze_encoder:
            raise ValueError("decoder_eval requires freeze_encoder")
        if self.iterations < 1 or self.batch_size < 1:
            raise ValueError("iterations and batch_size must be >= 1")
        if not 0.0 < self.label_fraction <= 1.0:
            raise ValueError("label_fraction must be in (0, 1]")
        if not 0.0 < self.val_fraction < 1.0:
            raise ValueError("val_fraction must be in (0, 1)")

    @classmethod
    def for_phase(cls, phase: str, **kw) -> "ProtocolSpec":
        defaults = {
            "pretrain": dict(iterations=300, batch_size=32),
            "decoder_eval": dict(iterations=600, batch_size=32, freeze_encoder=True, eval_every=100),
            "finetune": dict(iterations=600, batch_size=32, eval_every=100),
        }[phase]
        defaults.update(kw)
        return cls(phase=phase, **defaults)


@dataclass
class DecoderConfig:
    kind: str = "ctc"
    hidden: int = 256
    features: str = "auto"
    max_len: int = MAX_DECODE_LEN

    def __post_init__(self):
        if self.kind not in DECODER_KINDS:
            raise ValueError(f"decoder kind must be one of {DECODER_KINDS}, got {self.kind!r}")
        if self.features not in DECODER_FEATURES:
            raise ValueError(f"features must be one of {DECODER_FEATURES}")
        if self.hidden < 1 or self.max_len < 1:
            raise ValueError("hidden and max_len must be >= 1")


@dataclass
class DataPaths:
    train: str | None = None
    val: str | None = None
    test: str | None = None


@dataclass
class ExperimentConfig:
    encoder: EncoderConfig = field(default_factory=EncoderConfig)
    mapping: MappingChoice = field(default_factory=MappingChoice)
    tau: float = 0.5
    pipeline: PipelineSpec = field(default_factory=PipelineSpec)
    decoder: DecoderConfig = field(default_factory=DecoderConfig)
    optimizer: OptimizerSpec = field(default_factory=OptimizerSpec)
    protocol: ProtocolSpec = field(default_factory=ProtocolSpec)
    downstream: ProtocolSpec = field(default_factory=lambda: ProtocolSpec.for_phase("finetune"))
    symbols: str = ALNUM_SYMBOLS
    seed: int = 0
    data: DataPaths = field(default_factory=DataPaths)

    def __post_init__(self):
        if self.tau <= 0:
            raise ValueError("tau must be positive")
        if len(set(self.symbols)) != len(self.symbols):
            raise ValueError("symbols contain duplicates")

    def to_dict(self) -> dict:
        return _to_dict(self)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=1, sort_keys=True)

    @classmethod
    def from_dict(cls, d: dict) -> "ExperimentConfig":
        return _from_dict(cls, d, "")

    @classmethod
    def from_json(cls, text: str) -> "ExperimentConfig":
        try:
            d = json.loads(text)
        except json.JSONDecodeError as exc:
            raise ConfigError("", f"invalid JSON: {exc}") from None
        return cls.from_dict(d)

    @classmethod
    def load(cls, path: str | Path) -> "ExperimentConfig":
        return cls.from_json(Path(path).read_text(encoding="utf-8"))


def desk_config(**overrides) -> ExperimentConfig:
    """Small, CPU-friendly preset used by the scripts and the acceptance suite."""
    cfg = ExperimentConfig(
        encoder=EncoderConfig(toy_widths=(16, 32, 64, 64), lstm_hidden=64, lstm_layers=1, projected_dim=64),
        mapping=MappingChoice("window_to_instance", 5),
        tau=0.1,
        decoder=DecoderConfig(hidden=64),
        optimizer=OptimizerSpec(lr_init=1.0),
        protocol=ProtocolSpec.for_phase("pretrain", iterations=300, batch_size=32),
        downstream=ProtocolSpec.for_phase("finetune", iterations=400, batch_size=32),
    )
    for k, v in overrides.items():
        setattr(cfg, k, v)
    return cfg


# ---------------------------------------------------------------- (de)serialisation


def _to_dict(obj):
    if isinstance(obj, PipelineSpec):
        return obj.to_dict()
    if dataclasses.is_dataclass(obj):
        return {f.name: _to_dict(getattr(obj, f.name)) for f in dataclasses.fields(obj)}
    if isinstance(obj, tuple):
        return [_to_dict(v) for v in obj]
    return obj


_SCALARS = {int: "integer", float: "number", str: "string", bool: "boolean"}


def _coerce(tp, value, path: str):
    origin = typing.get_origin(tp)
    if tp is PipelineSpec:
        if not isinstance(value, dict):
            raise ConfigError(path, "expected an object")
        try:
            return PipelineSpec.from_dict(value)
        except (KeyError, TypeError, ValueError, IndexError) as exc:
            raise ConfigError(path, str(exc)) from None
    if dataclasses.is_dataclass(tp):
        return _from_dict(tp, value, path)
    if origin in (typing.Union, types.UnionType):
        args = typing.get_args(tp)
        if value is None and type(None) in args:
            return None
        inner = [a for a in args if a is not type(None)]
        return _coerce(inner[0], value, path)
    if origin is tuple:
        if not isinstance(value, list):
            raise ConfigError(path, "expected an array")
        (elem, _) = typing.get_args(tp)
        return tuple(_coerce(elem, v, f"{path}[{i}]") for i, v in enumerate(value))
    if tp is float:
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(path, f"expected a number, got {type(value).__name__}")
        return float(value)
    if tp is int:
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(path, f"expected an integer, got {type(value).__name__}")
        return value
    if tp in (str, bool):
        if not isinstance(value, tp):
            raise ConfigError(path, f"expected a {_SCALARS[tp]}, got {type(value).__name__}")
        return value
    return value


def _from_dict(cls, d, path: str):
    if not isinstance(d, dict):
        raise ConfigError(path, "expected an object")
    hints = typing.get_type_hints(cls)
    names = {f.name for f in dataclasses.fields(cls) if f.init}
    unknown = sorted(set(d) - names)
    if unknown:
        raise ConfigError(f"{path}.{unknown[0]}" if path else unknown[0], "unknown field")
    kwargs = {k: _coerce(hints[k], v, f"{path}.{k}" if path else k) for k, v in d.items()}
    try:
        return cls(**kwargs)
    except (TypeError, ValueError) as exc:
        raise ConfigError(path, str(exc)) from None
