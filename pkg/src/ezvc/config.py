"""Run configuration: one dataclass per section, strict file parsing, presets.

A config file (YAML or JSON) is applied on top of a preset.  Any key that
is not a field of its section is rejected, and values are type-checked.
"""

from __future__ import annotations

import dataclasses
import json
import os
import types
import typing
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

import yaml

from .audio import AudioConfig
from .decoder.config import DESK_TRAIN, PAPER_TRAIN, DecoderConfig, TrainConfig
from .encoder import EncoderSpec
from .errors import ConfigError
from .vocoder import VocoderSpec


@dataclass(frozen=True)
class KMeansConfig:
    k: int = 500
    max_iters: int = 100
    rel_tol: float = 1e-4
    max_frames: int | None = None  # uniform frame subsample before clustering

    def __post_init__(self):
        if self.k < 1 or self.max_iters < 1:
            raise ConfigError("k and max_iters must be positive")


@dataclass(frozen=True)
class SamplerConfig:
    steps: int = 32
    guidance_w: float = 2.0
    sway_s: float = -1.0

    def __post_init__(self):
        if self.steps < 1:
            raise ConfigError("sampler steps must be >= 1")


@dataclass(frozen=True)
class EvalConfig:
    speaker_cmd: str | None = None  # external speaker model; proxy embedding when unset
    speaker_tag: str = "external"


@dataclass(frozen=True)
class PathsConfig:
    work_dir: str | None = None
    codebook: str | None = None
    checkpoint: str | None = None


SECTIONS: dict[str, type] = {
    "audio": AudioConfig,
    "encoder": EncoderSpec,
    "kmeans": KMeansConfig,
    "decoder": DecoderConfig,
    "train": TrainConfig,
    "sampler": SamplerConfig,
    "vocoder": VocoderSpec,
    "eval": EvalConfig,
    "paths": PathsConfig,
}


@dataclass(frozen=True)
class RunConfig:
    preset: str = "desk"
    audio: AudioConfig = field(default_factory=AudioConfig)
    encoder: EncoderSpec = field(default_factory=EncoderSpec)
    kmeans: KMeansConfig = field(default_factory=KMeansConfig)
    decoder: DecoderConfig = field(default_factory=DecoderConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    sampler: SamplerConfig = field(default_factory=SamplerConfig)
    vocoder: VocoderSpec = field(default_factory=VocoderSpec)
    eval: EvalConfig = field(default_factory=EvalConfig)
    paths: PathsConfig = field(default_factory=PathsConfig)

    def __post_init__(self):
        if self.decoder.vocab_size != self.kmeans.k + 2:
            raise ConfigError(
                f"decoder.vocab_size ({self.decoder.vocab_size}) must equal kmeans.k + 2 ({self.kmeans.k + 2})"
            )
        if self.decoder.mel_dim != self.audio.n_mels:
            raise ConfigError(f"decoder.mel_dim ({self.decoder.mel_dim}) must equal audio.n_mels ({self.audio.n_mels})")


PAPER_PRESET = RunConfig(
    preset="paper",
    audio=AudioConfig(sample_rate=16000, hop_length=160, n_mels=80),
    encoder=EncoderSpec(kind="imported", layer_index=14, dim=1024),
    kmeans=KMeansConfig(k=500),
    decoder=DecoderConfig(
        layers=22, heads=16, model_dim=1024, vocab_size=502, text_dim=512, text_conv_layers=4, ff_mult=2
    ),
    train=PAPER_TRAIN,
)

DESK_PRESET = RunConfig(
    preset="desk",
    encoder=EncoderSpec(kind="surrogate", dim=512, seed=0),
    kmeans=KMeansConfig(k=64, max_iters=100),
    decoder=DecoderConfig(layers=4, heads=4, model_dim=256, vocab_size=66),
    train=DESK_TRAIN,
)

PRESETS = {"paper": PAPER_PRESET, "desk": DESK_PRESET}


def _check_value(section: str, name: str, hint, value):
    where = f"{section}.{name}"
    origin = typing.get_origin(hint)
    args = typing.get_args(hint)
    if origin in (typing.Union, types.UnionType):
        if value is None and type(None) in args:
            return None
        inner = [a for a in args if a is not type(None)]
        return _check_value(section, name, inner[0], value)
    if origin is tuple:
        if not isinstance(value, (list, tuple)) or len(value) != len(args):
            raise ConfigError(f"{where} must be a list of {len(args)} values")
        return tuple(_check_value(section, name, a, v) for a, v in zip(args, value))
    if hint is bool:
        if not isinstance(value, bool):
            raise ConfigError(f"{where} must be true or false")
        return value
    if hint is int:
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(f"{where} must be an integer, got {value!r}")
        return value
    if hint is float:
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(f"{where} must be a number, got {value!r}")
        return float(value)
    if hint is str:
        if not isinstance(value, str):
            raise ConfigError(f"{where} must be a string, got {value!r}")
        return value
    return value


def _override(section: str, base, updates: dict[str, Any]):
    if not isinstance(updates, dict):
        raise ConfigError(f"section {section!r} must be a mapping")
    cls = type(base)
    hints = typing.get_type_hints(cls)
    names = {f.name for f in dataclasses.fields(cls)}
    unknown = sorted(set(updates) - names)
    if unknown:
        raise ConfigError(f"unknown key(s) in {section}: {', '.join(unknown)}")
    checked = {k: _check_value(section, k, hints[k], v) for k, v in updates.items()}
    try:
        return dataclasses.replace(base, **checked)
    except ValueError as exc:
        raise ConfigError(f"{section}: {exc}") from None


def apply_overrides(base: RunConfig, doc: dict[str, Any]) -> RunConfig:
    """Overlay a parsed document onto ``base``; unknown sections or keys raise ConfigError."""
    if not isinstance(doc, dict):
        raise ConfigError("config document must be a mapping")
    unknown = sorted(set(doc) - set(SECTIONS) - {"preset"})
    if unknown:
        raise ConfigError(f"unknown config section(s): {', '.join(unknown)}")
    parts = {}
    for name in SECTIONS:
        if name in doc:
            parts[name] = _override(name, getattr(base, name), {} if doc[name] is None else doc[name])
    # a new k implies the matching vocabulary unless the file sets it too
    if "kmeans" in parts and "vocab_size" not in (doc.get("decoder") or {}):
        dec = parts.get("decoder", base.decoder)
        parts["decoder"] = dataclasses.replace(dec, vocab_size=parts["kmeans"].k + 2)
    return dataclasses.replace(base, **parts)


def parse_document(text: str, path: str = "<config>") -> dict[str, Any]:
    try:
        doc = yaml.safe_load(text)
    except yaml.YAMLError as exc:
        raise ConfigError(f"{path}: not valid YAML/JSON ({exc})") from None
    return {} if doc is None else doc


def load_config(path: str | os.PathLike | None = None, preset: str | None = None) -> RunConfig:
    """Build a config from ``preset`` (or the file's ``preset`` key, default desk) plus the file."""
    doc: dict[str, Any] = {}
    if path is not None:
        path = Path(path)
        if not path.is_file():
            raise ConfigError(f"config file not found: {path}")
        doc = parse_document(path.read_text(encoding="utf-8"), str(path))
        if not isinstance(doc, dict):
            raise ConfigError(f"{path}: config document must be a mapping")
    file_preset = doc.get("preset")
    if preset and file_preset and preset != file_preset:
        raise ConfigError(f"--preset {preset} contradicts preset {file_preset!r} in the config file")
    name = preset or file_preset or "desk"
    if name not in PRESETS:
        raise ConfigError(f"unknown preset {name!r}; choose from {', '.join(PRESETS)}")
    return apply_overrides(PRESETS[name], doc)


def config_to_dict(cfg: RunConfig) -> dict[str, Any]:
    return json.loads(json.dumps(dataclasses.asdict(cfg)))


def dump_config(cfg: RunConfig) -> str:
    return yaml.safe_dump(config_to_dict(cfg), sort_keys=False)
