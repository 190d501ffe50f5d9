"""Plain-text run configuration.

Grammar: INI-style `key = value` pairs under `[section]` headers, parsed by
configparser. Recognized sections and keys (all optional unless noted):

    [scene]      objects_per_image, overlaps_per_image, image_width,
                 image_height, seed (required for randomized commands)
    [corruption] jitter, duplicate_rate, dropout, background_per_image,
                 score_noise, feature_dim, feature_noise
    [stage]      s, theta, d, d_enc, heads, lambda_cls, lambda_l1,
                 lambda_giou, negative_filter, ignore_ioa, embedding_slots
    [train]      epochs, lr, num_scenes, strategy
    [simulate]   num_scenes

Unknown sections or keys are rejected so typos fail loudly.
"""

from __future__ import annotations

import configparser
import hashlib
from dataclasses import dataclass, fields

from .harness import CorruptionSpec, SceneSpec
from .stage import StageConfig


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class TrainSpec:
    epochs: int = 4
    lr: float = 0.01
    num_scenes: int = 150
    strategy: str = "progressive"

    def __post_init__(self):
        if self.strategy not in ("progressive", "merged"):
            raise ConfigError(f"unknown strategy {self.strategy!r}")
        if self.epochs < 1 or self.num_scenes < 1:
            raise ConfigError("epochs and num_scenes must be >= 1")


@dataclass(frozen=True)
class SimulateSpec:
    num_scenes: int = 20


@dataclass
class RunConfig:
    scene: SceneSpec
    corruption: CorruptionSpec
    stage: StageConfig
    train: TrainSpec
    simulate: SimulateSpec
    sha256: str


_SECTION_TYPES = {
    "scene": SceneSpec,
    "corruption": CorruptionSpec,
    "stage": StageConfig,
    "train": TrainSpec,
    "simulate": SimulateSpec,
}


def _coerce(raw: str, target_type):
    if target_type is int:
        return int(raw)
    if target_type is float:
        return float(raw)
    if target_type is str:
        return raw
    raise ConfigError(f"unsupported config value type {target_type}")


def _build_section(cls, section: configparser.SectionProxy | None):
    kwargs = {}
    by_name = {f.name: f for f in fields(cls)}
    if section is not None:
        for key, raw in section.items():
            if key not in by_name:
                raise ConfigError(f"unknown key {key!r} in [{section.name}]")
            f = by_name[key]
            base = {"int": int, "float": float, "str": str}.get(
                f.type if isinstance(f.type, str) else f.type.__name__)
            if base is None:
                raise ConfigError(f"key {key!r} cannot be set from a config file")
            try:
                kwargs[key] = _coerce(raw, base)
            except ValueError as e:
                raise ConfigError(f"bad value for {key!r}: {raw!r} ({e})") from e
    try:
        return cls(**kwargs)
    except (ValueError, TypeError) as e:
        raise ConfigError(str(e)) from e


def load_config(path, require_seed: bool = True) -> RunConfig:
    parser = configparser.ConfigParser()
    try:
        with open(path, "r", encoding="utf-8") as fh:
            text = fh.read()
    except FileNotFoundError:
        raise
    try:
        parser.read_string(text)
    except configparser.Error as e:
        raise ConfigError(f"cannot parse config: {e}") from e
    for name in parser.sections():
        if name not in _SECTION_TYPES:
            raise ConfigError(f"unknown section [{name}]")
    if require_seed and not parser.has_option("scene", "seed"):
        raise ConfigError("randomized commands need an explicit [scene] seed")
    built = {name: _build_section(cls, parser[name] if parser.has_section(name) else None)
             for name, cls in _SECTION_TYPES.items()}
    return RunConfig(scene=built["scene"], corruption=built["corruption"],
                     stage=built["stage"], train=built["train"],
                     simulate=built["simulate"],
                     sha256=hashlib.sha256(text.encode("utf-8")).hexdigest())


def stage_config_text(config: StageConfig) -> str:
    """Serialize a stage configuration back to the config grammar."""
    lines = ["[stage]"]
    for f in fields(StageConfig):
        lines.append(f"{f.name} = {getattr(config, f.name)}")
    return "\n".join(lines) + "\n"
