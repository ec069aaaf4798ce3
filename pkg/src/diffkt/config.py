"""Flat key=value configuration files bound to the package's typed configs.

One shared namespace feeds every config dataclass: each picks the keys that
match its field names (text-model keys carry a ``text_`` prefix, generator
keys a ``synth_`` prefix). ``--set key=value`` overrides win over the file.
The documented keys are the dataclass fields of DataConfig, ModelConfig,
TrainingConfig, AugmentationConfig, TextModelConfig and SynthConfig.
"""

from __future__ import annotations

from dataclasses import dataclass, fields
from pathlib import Path
from typing import Iterable, Mapping, get_args, get_origin, get_type_hints

from .augmentation import AugmentationConfig
from .data import ColumnMap
from .model import ModelConfig
from .synth import SynthConfig
from .textdiff import TextModelConfig
from .training import TrainingConfig

_TRUE = {"1", "true", "yes", "on"}
_FALSE = {"0", "false", "no", "off"}


@dataclass(frozen=True)
class DataConfig:
    max_len: int = 100
    batch_size: int = 512
    train_frac: float = 0.8
    valid_frac: float = 0.1
    test_frac: float = 0.2
    seed: int = 0
    user_col: str = "user_id"
    question_col: str = "question_id"
    concept_col: str = "concept_id"
    response_col: str = "response"
    timestamp_col: str = "timestamp"
    laplace_alpha: float = 0.0
    fallback_positive: float = 0.75
    fallback_negative: float = 0.25

    @property
    def ratio(self) -> tuple[float, float, float]:
        return (self.train_frac, self.valid_frac, self.test_frac)

    def column_map(self) -> ColumnMap:
        return ColumnMap(
            user=self.user_col,
            question=self.question_col,
            concept=self.concept_col,
            response=self.response_col,
            timestamp=self.timestamp_col,
        )


def read_config_file(path: str | Path) -> dict[str, str]:
    """key=value lines; blank lines and '#' comments are ignored."""
    raw: dict[str, str] = {}
    for lineno, line in enumerate(Path(path).read_text(encoding="utf-8").splitlines(), 1):
        stripped = line.strip()
        if not stripped or stripped.startswith("#"):
            continue
        if "=" not in stripped:
            raise ValueError(f"{path}:{lineno}: expected key=value, got {line!r}")
        key, value = stripped.split("=", 1)
        raw[key.strip()] = value.strip()
    return raw


def parse_overrides(items: Iterable[str]) -> dict[str, str]:
    out: dict[str, str] = {}
    for item in items:
        if "=" not in item:
            raise ValueError(f"--set expects key=value, got {item!r}")
        key, value = item.split("=", 1)
        out[key.strip()] = value.strip()
    return out


def _coerce(value: str, annotation) -> object:
    origin = get_origin(annotation)
    if origin is tuple:
        parts = [p for p in value.replace("(", "").replace(")", "").split(",") if p.strip()]
        args = get_args(annotation)
        return tuple(_coerce(p.strip(), a) for p, a in zip(parts, args))
    if annotation is bool:
        lowered = value.lower()
        if lowered in _TRUE:
            return True
        if lowered in _FALSE:
            return False
        raise ValueError(f"expected a boolean, got {value!r}")
    if annotation is int:
        return int(value)
    if annotation is float:
        return float(value)
    return value


def bind(cls, raw: Mapping[str, str], prefix: str = ""):
    """Instantiate ``cls`` from the flat mapping, coercing by field type."""
    hints = get_type_hints(cls)
    kwargs = {}
    for f in fields(cls):
        key = prefix + f.name
        if key in raw:
            kwargs[f.name] = _coerce(raw[key], hints[f.name])
    return cls(**kwargs)


class Settings:
    """A merged flat configuration with typed views."""

    def __init__(self, raw: Mapping[str, str] | None = None):
        self.raw = dict(raw or {})

    @classmethod
    def load(cls, config_path: str | Path | None, overrides: Iterable[str] = ()) -> "Settings":
        raw: dict[str, str] = {}
        if config_path is not None:
            raw.update(read_config_file(config_path))
        raw.update(parse_overrides(overrides))
        return cls(raw)

    def data_config(self) -> DataConfig:
        return bind(DataConfig, self.raw)

    def model_config(self) -> ModelConfig:
        return bind(ModelConfig, self.raw)

    def training_config(self) -> TrainingConfig:
        return bind(TrainingConfig, self.raw)

    def augmentation_config(self) -> AugmentationConfig:
        return bind(AugmentationConfig, self.raw)

    def text_config(self) -> TextModelConfig:
        return bind(TextModelConfig, self.raw, prefix="text_")

    def synth_config(self) -> SynthConfig:
        return bind(SynthConfig, self.raw, prefix="synth_")
