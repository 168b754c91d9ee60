"""Dataclass configs and the plain-text config file format.

The config file is INI-style with four sections, [model] [loss] [kernel]
[train], one key per dataclass field.  Unknown sections or keys are hard
errors so typos in loss weights cannot pass silently.
"""

from __future__ import annotations

import configparser
import io
import typing
from dataclasses import dataclass, field, fields
from pathlib import Path

from .errors import ConfigError


@dataclass
class ModelConfig:
    """Network widths and depths."""

    embed_dim: int = 64
    num_heads: int = 8
    shared_blocks: int = 1
    base_blocks: int = 3
    detail_blocks: int = 3
    decoder_blocks: int = 2

    def __post_init__(self):
        if self.embed_dim <= 0 or self.embed_dim % self.num_heads != 0:
            raise ConfigError(
                f"model.embed_dim ({self.embed_dim}) must be a positive multiple "
                f"of model.num_heads ({self.num_heads})"
            )
        if self.embed_dim % 2 != 0:
            raise ConfigError(
                f"model.embed_dim ({self.embed_dim}) must be even: the texture "
                "branch splits channels in halves"
            )
        for name in ("shared_blocks", "base_blocks", "detail_blocks", "decoder_blocks"):
            if getattr(self, name) < 1:
                raise ConfigError(f"model.{name} must be >= 1")
        if self.base_blocks < 3:
            raise ConfigError(
                "model.base_blocks must be >= 3: the alignment penalty taps the "
                "last three structure-encoder stages"
            )


@dataclass
class LossWeights:
    """Scalar coefficients of every training objective."""

    alpha1: float = 5.0   # reconstruction: structural-similarity term
    alpha2: float = 5.0   # reconstruction: gradient term
    beta1: float = 2.0    # stage 1: feature-correlation term
    beta2: float = 1.0    # stage 1: kernel-distance term
    beta3: float = 0.1    # stage 1: contrastive term
    gamma1: float = 10.0  # stage 2: max-gradient term
    gamma2: float = 2.0   # stage 2: feature-correlation term
    temperature: float = 0.1
    ssim_c1: float = 0.01 ** 2
    ssim_c2: float = 0.03 ** 2
    corr_mode: str = "literal"

    def __post_init__(self):
        for name in ("alpha1", "alpha2", "beta1", "beta2", "beta3",
                     "gamma1", "gamma2", "ssim_c1", "ssim_c2"):
            if getattr(self, name) < 0:
                raise ConfigError(f"loss.{name} must be nonnegative")
        if self.temperature <= 0:
            raise ConfigError("loss.temperature must be positive")
        if self.corr_mode not in ("literal", "decomposed"):
            raise ConfigError(
                f"loss.corr_mode must be 'literal' or 'decomposed', got {self.corr_mode!r}"
            )


@dataclass
class KernelConfig:
    """Config-file surface of the hybrid kernel (bandwidth lists are built at runtime)."""

    gauss_k: int = 5
    lap_gammas: tuple[float, ...] = (0.1, 1.0, 5.0)
    mix_c1: float = 0.5
    n_positions: int = 256

    def __post_init__(self):
        if self.gauss_k < 1:
            raise ConfigError("kernel.gauss_k must be >= 1")
        if not self.lap_gammas or any(g <= 0 for g in self.lap_gammas):
            raise ConfigError("kernel.lap_gammas must be a nonempty list of positive reals")
        if not 0.0 <= self.mix_c1 <= 1.0:
            raise ConfigError("kernel.mix_c1 must lie in [0, 1]")
        if self.n_positions < 1:
            raise ConfigError("kernel.n_positions must be >= 1")


@dataclass
class TrainConfig:
    """Optimization schedule and patch sampling."""

    patch_size: int = 128
    batch_size: int = 4
    epochs: int = 40
    lr0: float = 1e-4
    lr_halve_every: int = 10
    stage: int = 1
    seed: int = 0
    stage2_freeze_encoders: bool = True
    grad_clip: float = 1.0  # global norm; 0 disables
    checkpoint_every: int = 5

    def __post_init__(self):
        if self.patch_size % 8 != 0 or self.patch_size <= 0:
            raise ConfigError(f"train.patch_size ({self.patch_size}) must be a positive multiple of 8")
        if self.epochs < 1:
            raise ConfigError("train.epochs must be >= 1")
        if self.lr0 <= 0:
            raise ConfigError("train.lr0 must be positive")
        if self.lr_halve_every < 1:
            raise ConfigError("train.lr_halve_every must be >= 1")
        if self.stage not in (1, 2):
            raise ConfigError(f"train.stage must be 1 or 2, got {self.stage}")
        if self.batch_size < 1:
            raise ConfigError("train.batch_size must be >= 1")
        if self.grad_clip < 0:
            raise ConfigError("train.grad_clip must be >= 0")
        if self.checkpoint_every < 1:
            raise ConfigError("train.checkpoint_every must be >= 1")


@dataclass
class RunConfig:
    """One parsed config file."""

    model: ModelConfig = field(default_factory=ModelConfig)
    loss: LossWeights = field(default_factory=LossWeights)
    kernel: KernelConfig = field(default_factory=KernelConfig)
    train: TrainConfig = field(default_factory=TrainConfig)


_SECTIONS = {"model": ModelConfig, "loss": LossWeights, "kernel": KernelConfig, "train": TrainConfig}


def _coerce(raw: str, hint, where: str):
    origin = typing.get_origin(hint)
    if origin is tuple:
        parts = [p.strip() for p in raw.split(",") if p.strip()]
        try:
            return tuple(float(p) for p in parts)
        except ValueError:
            raise ConfigError(f"{where}: expected comma-separated reals, got {raw!r}") from None
    if hint is bool:
        lowered = raw.strip().lower()
        if lowered in ("true", "1", "yes", "on"):
            return True
        if lowered in ("false", "0", "no", "off"):
            return False
        raise ConfigError(f"{where}: expected a boolean, got {raw!r}")
    if hint is int:
        try:
            return int(raw.strip())
        except ValueError:
            raise ConfigError(f"{where}: expected an integer, got {raw!r}") from None
    if hint is float:
        try:
            return float(raw.strip())
        except ValueError:
            raise ConfigError(f"{where}: expected a real, got {raw!r}") from None
    return raw.strip()


def parse_config(text: str) -> RunConfig:
    """Parse config text; unknown sections or keys raise ConfigError."""
    parser = configparser.ConfigParser()
    try:
        parser.read_string(text)
    except configparser.Error as exc:
        raise ConfigError(f"malformed config: {exc}") from None
    for section in parser.sections():
        if section not in _SECTIONS:
            raise ConfigError(f"unknown config section [{section}]")
    built = {}
    for section, cls in _SECTIONS.items():
        hints = typing.get_type_hints(cls)
        valid = {f.name for f in fields(cls)}
        values = {}
        if parser.has_section(section):
            for key, raw in parser.items(section):
                if key not in valid:
                    raise ConfigError(f"unknown config key {section}.{key}")
                values[key] = _coerce(raw, hints[key], f"{section}.{key}")
        built[section] = cls(**values)
    return RunConfig(**built)


def load_config(path: str | Path) -> RunConfig:
    path = Path(path)
    if not path.is_file():
        raise ConfigError(f"config file not found: {path}")
    return parse_config(path.read_text())


def _format_value(value) -> str:
    if isinstance(value, tuple):
        return ", ".join(repr(float(v)) for v in value)
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, float):
        return repr(value)
    return str(value)


def serialize_config(cfg: RunConfig) -> str:
    """Canonical text form; serialize(parse(serialize(x))) == serialize(x)."""
    out = io.StringIO()
    for section, cls in _SECTIONS.items():
        out.write(f"[{section}]\n")
        obj = getattr(cfg, section)
        for f in fields(cls):
            out.write(f"{f.name} = {_format_value(getattr(obj, f.name))}\n")
        out.write("\n")
    return out.getvalue()


def save_config(cfg: RunConfig, path: str | Path) -> None:
    Path(path).write_text(serialize_config(cfg))
