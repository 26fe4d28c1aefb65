"""Flat key=value pipeline configuration shared by the CLI subcommands."""

from __future__ import annotations

from dataclasses import dataclass, fields
from pathlib import Path

from .augment import AugmentParams
from .errors import InvalidArgumentError
from .nbnet import NetworkConfig, TrainConfig
from .postproc import PostprocConfig


class ConfigError(InvalidArgumentError):
    pass


@dataclass
class PipelineConfig:
    seed: int = 0
    # network
    input_size: int = 128
    depth: int = 4
    base_channels: int = 32
    dropout_rate: float = 0.2
    class_scheme: str = "ternary"
    # training
    epochs: int = 300
    batch_size: int = 8
    patches_per_epoch: int = 64
    val_patches: int = 16
    learning_rate: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8
    # augmentation
    elastic: bool = True
    rotate: bool = True
    flip: bool = True
    shift: bool = True
    rescale: bool = True
    elastic_alpha_min: float = 100.0
    elastic_alpha_max: float = 200.0
    elastic_sigma: float = 12.0
    rescale_min: float = 0.5
    rescale_max: float = 1.5
    shift_max: int = 16
    rotation_step: float = 0.0
    # masks
    boundary_width: float = 2.0
    # tiling
    stride: int = 64
    # post-processing
    inside_threshold: float = 0.5
    min_component_area: int = 20
    dilation_radius: float = 2.0
    # metrics
    match_threshold: float = 0.2
    md_overlap_threshold: float = 0.2

    def network(self) -> NetworkConfig:
        return NetworkConfig(self.input_size, self.depth, self.base_channels, self.dropout_rate,
                             self.class_scheme, self.seed).validate()

    def training(self) -> TrainConfig:
        return TrainConfig(self.epochs, self.batch_size, self.patches_per_epoch, self.val_patches,
                           self.elastic, self.rotate, self.flip, self.shift, self.rescale,
                           self.learning_rate, self.beta1, self.beta2, self.epsilon, self.seed).validate()

    def augment(self) -> AugmentParams:
        return AugmentParams((self.elastic_alpha_min, self.elastic_alpha_max), self.elastic_sigma,
                             (self.rescale_min, self.rescale_max), self.shift_max, self.rotation_step,
                             self.elastic, self.rotate, self.flip, self.shift, self.rescale)

    def postproc(self) -> PostprocConfig:
        return PostprocConfig(self.inside_threshold, self.min_component_area, self.dilation_radius)

    def update(self, values: dict, source="override"):
        types = {f.name: f.type for f in fields(self)}
        for key, raw in values.items():
            if key not in types:
                raise ConfigError(f"{source}: unknown key {key!r}")
            setattr(self, key, _coerce(key, raw, types[key], source))
        return self


_TRUE = {"1", "true", "yes", "on"}
_FALSE = {"0", "false", "no", "off"}


def _coerce(key, raw, typ, source):
    if not isinstance(raw, str):
        return raw
    text = raw.strip()
    try:
        if typ == "bool":
            low = text.lower()
            if low in _TRUE:
                return True
            if low in _FALSE:
                return False
            raise ValueError(text)
        if typ == "int":
            return int(text)
        if typ == "float":
            return float(text)
    except ValueError:
        raise ConfigError(f"{source}: bad value {text!r} for {key} (expected {typ})") from None
    return text


def parse_config_text(text: str, source="config") -> dict:
    values = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{source}:{lineno}: expected key=value, got {line!r}")
        k, v = line.split("=", 1)
        values[k.strip()] = v.strip()
    return values


def load_config(path=None, overrides: dict | None = None) -> PipelineConfig:
    """Defaults, then the file at ``path``, then ``overrides`` (None values skipped)."""
    cfg = PipelineConfig()
    if path is not None:
        p = Path(path)
        if not p.is_file():
            raise ConfigError(f"config file not found: {p}")
        cfg.update(parse_config_text(p.read_text(encoding="utf-8"), str(p)), str(p))
    if overrides:
        cfg.update({k: v for k, v in overrides.items() if v is not None}, "command line")
    return cfg


def format_config(cfg: PipelineConfig) -> str:
    return "".join(f"{f.name}={getattr(cfg, f.name)}\n" for f in fields(cfg))
