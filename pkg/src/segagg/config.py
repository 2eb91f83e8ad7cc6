"""Line-oriented experiment configuration (``section.key = value``).

Blank lines and ``#`` comments are ignored. Unknown sections or keys are
errors. Lists are comma separated; residual block groups are written as
``2x16,4x32`` (blocks x channels).
"""

from __future__ import annotations

import dataclasses
import typing
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Tuple

from .model import ConfigError, ModelConfig
from .synthdata import CorpusConfig, SynthConfig
from .trainer import TrainSettings


class ConfigFormatError(ValueError):
    pass


@dataclass
class CorpusSection:
    train_speakers: int = 20
    val_speakers: int = 5
    test_speakers: int = 8
    utterances: int = 10
    sample_rate: int = 4000
    seed: int = 0
    min_duration: int = 7000
    max_duration: int = 14000
    f0_min: float = 80.0
    f0_max: float = 300.0
    harmonics: int = 8
    noise_min: float = 0.05
    noise_max: float = 0.3
    jitter: float = 0.03

    def to_corpus_config(self) -> CorpusConfig:
        return CorpusConfig(
            self.train_speakers, self.val_speakers, self.test_speakers, self.utterances,
            self.min_duration, self.max_duration, self.seed,
            SynthConfig(self.sample_rate, self.f0_min, self.f0_max, self.harmonics,
                        self.noise_min, self.noise_max, self.jitter),
        )


@dataclass
class ModelSection:
    input_length: int = 6561
    first_conv_channels: int = 16
    block_groups: List[Tuple[int, int]] = field(default_factory=lambda: [(2, 16), (4, 32)])
    gru_hidden: int = 32
    embedding_dim: int = 32
    leaky_slope: float = 0.3

    def to_model_config(self, num_speakers: int) -> ModelConfig:
        return ModelConfig(self.input_length, self.first_conv_channels, list(self.block_groups),
                           self.gru_hidden, self.embedding_dim, num_speakers, self.leaky_slope)


@dataclass
class TrainingSection:
    regime: str = "baseline"
    systems: List[str] = field(default_factory=lambda: ["baseline", "sa", "sa_ts"])
    w: Optional[float] = None
    segment_policy: str = "fixed"
    segment_length: int = 2187
    segment_min: int = 2187
    segment_max: int = 4374
    overlap_fraction: float = 0.1
    batch_size: int = 16
    steps: int = 2000
    lr: float = 1e-3
    weight_decay: float = 1e-4
    pre_emphasis: float = 0.97
    seed: int = 0
    eval_every: int = 100
    val_trials: int = 400


@dataclass
class SystemSection:
    """Per-regime overrides used by ``reproduce``; unset fields fall back to ``training``."""

    w: Optional[float] = None
    segment_policy: Optional[str] = None
    segment_length: Optional[int] = None
    segment_min: Optional[int] = None
    segment_max: Optional[int] = None


@dataclass
class EvalSection:
    durations: List[float] = field(default_factory=lambda: [1.0, 0.75, 0.5, 0.25])
    trials: int = 0
    seed: int = 0


@dataclass
class PathsSection:
    corpus_dir: str = "corpus"
    checkpoint_dir: str = "checkpoints"
    report_path: str = "report/eer_grid.csv"
    teacher_checkpoint: str = ""


_SECTIONS = {
    "corpus": CorpusSection,
    "model": ModelSection,
    "training": TrainingSection,
    "sa": SystemSection,
    "sa_ts": SystemSection,
    "eval": EvalSection,
    "paths": PathsSection,
}


@dataclass
class ExperimentConfig:
    corpus: CorpusSection = field(default_factory=CorpusSection)
    model: ModelSection = field(default_factory=ModelSection)
    training: TrainingSection = field(default_factory=TrainingSection)
    sa: SystemSection = field(default_factory=SystemSection)
    sa_ts: SystemSection = field(default_factory=SystemSection)
    eval: EvalSection = field(default_factory=EvalSection)
    paths: PathsSection = field(default_factory=PathsSection)
    base_dir: Path = field(default=Path("."), compare=False)

    def resolve(self, path: str) -> Path:
        p = Path(path)
        return p if p.is_absolute() else self.base_dir / p

    @property
    def corpus_dir(self) -> Path:
        return self.resolve(self.paths.corpus_dir)

    @property
    def checkpoint_dir(self) -> Path:
        return self.resolve(self.paths.checkpoint_dir)

    @property
    def report_path(self) -> Path:
        return self.resolve(self.paths.report_path)

    def model_config(self) -> ModelConfig:
        return self.model.to_model_config(self.corpus.train_speakers)

    def eval_conditions(self) -> List[int]:
        return [int(f * self.model.input_length) for f in self.eval.durations]

    def train_settings(self, regime: Optional[str] = None) -> TrainSettings:
        t = self.training
        regime = regime or t.regime
        values = {
            "w": t.w, "segment_policy": t.segment_policy, "segment_length": t.segment_length,
            "segment_min": t.segment_min, "segment_max": t.segment_max,
        }
        override = getattr(self, regime, None) if regime in ("sa", "sa_ts") else None
        if override is not None:
            for key, value in dataclasses.asdict(override).items():
                if value is not None:
                    values[key] = value
        return TrainSettings(
            regime=regime, W=values["w"], segment_policy=values["segment_policy"],
            segment_length=values["segment_length"], segment_min=values["segment_min"],
            segment_max=values["segment_max"], overlap_fraction=t.overlap_fraction,
            batch_size=t.batch_size, steps=t.steps, lr=t.lr, weight_decay=t.weight_decay,
            pre_emphasis=t.pre_emphasis, seed=t.seed, eval_every=t.eval_every, val_trials=t.val_trials,
        )


# -- value codecs -------------------------------------------------------------------

def _parse_value(text: str, annotation, where: str):
    text = text.strip()
    origin = typing.get_origin(annotation)
    args = typing.get_args(annotation)
    if origin is typing.Union and type(None) in args:
        if text.lower() in ("", "none"):
            return None
        return _parse_value(text, next(a for a in args if a is not type(None)), where)
    try:
        if annotation is bool:
            if text.lower() not in ("true", "false"):
                raise ValueError(text)
            return text.lower() == "true"
        if annotation is int:
            return int(text)
        if annotation is float:
            return float(text)
        if annotation is str:
            return text
        if origin in (list, List):
            (inner,) = args
            items = [s.strip() for s in text.split(",") if s.strip()]
            if typing.get_origin(inner) in (tuple, Tuple):
                return [tuple(int(p) for p in item.split("x")) for item in items]
            return [_parse_value(item, inner, where) for item in items]
    except ValueError as exc:
        raise ConfigFormatError(f"{where}: cannot parse {text!r}") from exc
    raise ConfigFormatError(f"{where}: unsupported field type {annotation}")


def _format_value(value) -> str:
    if value is None:
        return "none"
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, float):
        return repr(value)
    if isinstance(value, list):
        return ",".join("x".join(str(p) for p in v) if isinstance(v, tuple) else _format_value(v)
                        for v in value)
    return str(value)


def parse_config(text: str, base_dir=".") -> ExperimentConfig:
    cfg = ExperimentConfig(base_dir=Path(base_dir))
    seen = set()
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        where = f"line {lineno}"
        if "=" not in line:
            raise ConfigFormatError(f"{where}: expected 'section.key = value'")
        name, value = (s.strip() for s in line.split("=", 1))
        if "." not in name:
            raise ConfigFormatError(f"{where}: key {name!r} has no section")
        section, key = name.split(".", 1)
        if section not in _SECTIONS:
            raise ConfigFormatError(f"{where}: unknown section {section!r}")
        hints = typing.get_type_hints(_SECTIONS[section])
        if key not in hints:
            raise ConfigFormatError(f"{where}: unknown key {name!r}")
        if name in seen:
            raise ConfigFormatError(f"{where}: duplicate key {name!r}")
        seen.add(name)
        setattr(getattr(cfg, section), key, _parse_value(value, hints[key], f"{where} ({name})"))
    validate(cfg)
    return cfg


def load_config(path) -> ExperimentConfig:
    path = Path(path)
    return parse_config(path.read_text(), base_dir=path.parent)


def serialize_config(cfg: ExperimentConfig) -> str:
    lines = []
    for section in _SECTIONS:
        obj = getattr(cfg, section)
        for f in dataclasses.fields(obj):
            lines.append(f"{section}.{f.name} = {_format_value(getattr(obj, f.name))}")
        lines.append("")
    return "\n".join(lines)


def validate(cfg: ExperimentConfig) -> None:
    from .training import REGIMES

    t = cfg.training
    if t.regime not in REGIMES:
        raise ConfigFormatError(f"training.regime must be one of {REGIMES}")
    bad = [s for s in t.systems if s not in REGIMES]
    if bad:
        raise ConfigFormatError(f"training.systems has unknown regimes {bad}")
    for name in ("training", "sa", "sa_ts"):
        policy = getattr(cfg, name).segment_policy
        if policy is not None and policy not in ("fixed", "random"):
            raise ConfigFormatError(f"{name}.segment_policy must be 'fixed' or 'random'")
    if any(not 0 < d <= 1 for d in cfg.eval.durations):
        raise ConfigFormatError("eval.durations are fractions of the crop in (0, 1]")
    try:
        cfg.model_config().validate()
    except ConfigError as exc:
        raise ConfigFormatError(f"model: {exc}") from None
