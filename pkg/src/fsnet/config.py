"""Configuration dataclasses and the YAML loader/dumper.

A config file has up to four top-level sections (``arch``, ``loss``,
``train``, ``prepare``); anything omitted keeps its default.  Unknown keys are
rejected so typos do not silently fall back to defaults.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

import yaml

from .errors import ParseError, ValidationError


@dataclass(frozen=True)
class ArchitectureConfig:
    image_size: int = 128
    d_f: int = 128
    d_l: int = 8
    encoder_channels: tuple[int, ...] = (32, 64, 128, 256, 512)
    decoder_channels: tuple[int, ...] = (512, 256, 128, 64, 32)
    generator_channels: tuple[int, ...] = (64, 128, 256, 512)
    global_disc_channels: tuple[int, ...] = (32, 64, 128, 256, 512)
    patch_disc_channels: tuple[int, ...] = (32, 64, 128, 256)
    identity_channels: tuple[int, ...] = (32, 64, 128, 256, 512)
    identity_dim: int = 128
    classifier_hidden: tuple[int, ...] = (256, 256)
    noise_sigma: float = 0.05
    # "linear_softplus": linear mean head, softplus sigma head.
    # "softplus_both": both heads softplus, as listed in the layer table.
    encoder_head: str = "linear_softplus"
    leaky_slope: float = 0.2
    init_std: float = 0.02

    def problems(self) -> list[str]:
        out = []
        if self.image_size <= 0:
            out.append("arch.image_size must be positive")
        for name in ("d_f", "d_l", "identity_dim"):
            if getattr(self, name) < 1:
                out.append(f"arch.{name} must be >= 1")
        for name, depth in (
            ("encoder_channels", len(self.encoder_channels)),
            ("decoder_channels", len(self.decoder_channels)),
            ("generator_channels", len(self.generator_channels) - 1),
            ("global_disc_channels", len(self.global_disc_channels)),
            ("patch_disc_channels", len(self.patch_disc_channels)),
            ("identity_channels", len(self.identity_channels)),
        ):
            chans = getattr(self, name)
            if not chans or any(c < 1 for c in chans):
                out.append(f"arch.{name} must be a non-empty list of positive ints")
            elif depth < 1 or self.image_size % (2**depth) != 0:
                out.append(
                    f"arch.image_size={self.image_size} is not divisible by "
                    f"2**{depth} as required by arch.{name}"
                )
        if self.noise_sigma < 0:
            out.append("arch.noise_sigma must be >= 0")
        if self.encoder_head not in ("linear_softplus", "softplus_both"):
            out.append("arch.encoder_head must be linear_softplus or softplus_both")
        if self.init_std <= 0:
            out.append("arch.init_std must be > 0")
        return out

    @classmethod
    def desk(cls, image_size: int = 64) -> "ArchitectureConfig":
        """Narrow four-level networks that train in minutes on one CPU core."""
        return cls(
            image_size=image_size,
            d_f=16,
            d_l=4,
            encoder_channels=(8, 16, 32, 32),
            decoder_channels=(32, 16, 16, 8),
            generator_channels=(16, 32, 32, 32),
            global_disc_channels=(8, 16, 32, 32),
            patch_disc_channels=(8, 16, 32, 32),
            identity_channels=(8, 16, 32, 32),
            identity_dim=32,
            classifier_hidden=(32,),
        )


@dataclass(frozen=True)
class LossWeights:
    lambda_f_rec: float = 4000.0
    lambda_M_rec: float = 4000.0
    lambda_l_rec: float = 2000.0
    lambda_lat: float = 30.0
    lambda_adv_g: float = 20.0
    lambda_adv_p: float = 30.0
    lambda_id: float = 100.0
    beta_bg: float = 0.5
    alpha1: float = 1.0
    alpha2: float = 0.1
    alpha3: float = 0.5
    # "alpha_gan" or "literal"
    latent_loss: str = "alpha_gan"
    # "min" (as printed) or "max" (conventional hinge)
    triplet_hinge: str = "min"

    def problems(self) -> list[str]:
        out = []
        for f in dataclasses.fields(self):
            v = getattr(self, f.name)
            if isinstance(v, float) and v < 0:
                out.append(f"loss.{f.name} must be >= 0 (got {v})")
        if not 0.0 <= self.beta_bg <= 1.0:
            out.append("loss.beta_bg must lie in [0, 1]")
        if self.latent_loss not in ("alpha_gan", "literal"):
            out.append("loss.latent_loss must be alpha_gan or literal")
        if self.triplet_hinge not in ("min", "max"):
            out.append("loss.triplet_hinge must be min or max")
        return out


@dataclass(frozen=True)
class TrainConfig:
    lr: float = 0.0002
    beta1: float = 0.5
    beta2: float = 0.999
    per_role_batch: int = 20
    max_steps: int = 180_000
    seed: int = 0
    checkpoint_interval: int = 1000
    grad_clip: float = 10.0
    data_dir: str = ""
    out_dir: str = ""

    def problems(self) -> list[str]:
        out = []
        if self.lr <= 0:
            out.append(f"train.lr must be > 0 (got {self.lr})")
        if not (0 <= self.beta1 < 1 and 0 <= self.beta2 < 1):
            out.append("train.beta1 and train.beta2 must lie in [0, 1)")
        if self.per_role_batch < 1:
            out.append("train.per_role_batch must be >= 1")
        if self.max_steps < 0:
            out.append("train.max_steps must be >= 0")
        if self.checkpoint_interval < 1:
            out.append("train.checkpoint_interval must be >= 1")
        if self.grad_clip <= 0:
            out.append("train.grad_clip must be > 0")
        return out


@dataclass(frozen=True)
class PrepareConfig:
    image_size: int = 128
    crop_left: int = 0
    crop_top: int = 20
    crop_size: int = 178
    source_width: int = 178
    source_height: int = 218
    stretch_x: float = 1.3
    stretch_y: float = 1.4
    dilation_fraction: float = 0.03
    landmark_radius_fraction: float = 0.03
    # "fail" drops the record, "ones" substitutes an all-ones mask
    fallback_foreground: str = "fail"
    # letterbox inputs of other sizes into the source frame instead of rejecting
    center_fit: bool = False
    test_fraction: float = 15361 / 195361
    split_seed: int = 0

    def problems(self) -> list[str]:
        out = []
        if self.image_size < 1:
            out.append("prepare.image_size must be >= 1")
        if self.crop_size < 1:
            out.append("prepare.crop_size must be >= 1")
        if (
            self.crop_left < 0
            or self.crop_top < 0
            or self.crop_left + self.crop_size > self.source_width
            or self.crop_top + self.crop_size > self.source_height
        ):
            out.append("prepare crop window must lie inside the source frame")
        if self.stretch_x <= 0 or self.stretch_y <= 0:
            out.append("prepare.stretch_x/stretch_y must be > 0")
        if self.dilation_fraction < 0 or self.landmark_radius_fraction < 0:
            out.append("prepare fractions must be >= 0")
        if self.fallback_foreground not in ("fail", "ones"):
            out.append("prepare.fallback_foreground must be fail or ones")
        if not 0.0 <= self.test_fraction < 1.0:
            out.append("prepare.test_fraction must lie in [0, 1)")
        return out


@dataclass(frozen=True)
class Config:
    arch: ArchitectureConfig = field(default_factory=ArchitectureConfig)
    loss: LossWeights = field(default_factory=LossWeights)
    train: TrainConfig = field(default_factory=TrainConfig)
    prepare: PrepareConfig = field(default_factory=PrepareConfig)

    def validate(self) -> "Config":
        problems = (
            self.arch.problems()
            + self.loss.problems()
            + self.train.problems()
            + self.prepare.problems()
        )
        if problems:
            raise ValidationError(problems)
        return self

    def to_dict(self) -> dict[str, Any]:
        return {
            name: _section_to_dict(getattr(self, name))
            for name in ("arch", "loss", "train", "prepare")
        }

    def replace(self, **sections) -> "Config":
        return dataclasses.replace(self, **sections)


_SECTIONS = {
    "arch": ArchitectureConfig,
    "loss": LossWeights,
    "train": TrainConfig,
    "prepare": PrepareConfig,
}


def _section_to_dict(obj) -> dict[str, Any]:
    out = {}
    for f in dataclasses.fields(obj):
        v = getattr(obj, f.name)
        out[f.name] = list(v) if isinstance(v, tuple) else v
    return out


def _coerce(cls, name, default, value, problems):
    if isinstance(default, bool):
        if not isinstance(value, bool):
            problems.append(f"{name} must be a boolean")
        return value
    if isinstance(default, tuple):
        if not isinstance(value, (list, tuple)) or not all(
            isinstance(v, int) and not isinstance(v, bool) for v in value
        ):
            problems.append(f"{name} must be a list of integers")
            return default
        return tuple(value)
    if isinstance(default, float):
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            problems.append(f"{name} must be a number")
            return default
        return float(value)
    if isinstance(default, int):
        if isinstance(value, bool) or not isinstance(value, int):
            problems.append(f"{name} must be an integer")
            return default
        return value
    if isinstance(default, str):
        if not isinstance(value, str):
            problems.append(f"{name} must be a string")
            return default
        return value
    return value


def config_from_dict(data: dict[str, Any] | None) -> Config:
    data = data or {}
    problems = []
    if not isinstance(data, dict):
        raise ValidationError(["top level of the config must be a mapping"])
    sections = {}
    for key in data:
        if key not in _SECTIONS:
            problems.append(f"unknown section {key!r}")
    for sec_name, cls in _SECTIONS.items():
        raw = data.get(sec_name) or {}
        if not isinstance(raw, dict):
            problems.append(f"section {sec_name!r} must be a mapping")
            raw = {}
        defaults = cls()
        known = {f.name for f in dataclasses.fields(cls)}
        kwargs = {}
        for key, value in raw.items():
            if key not in known:
                problems.append(f"unknown key {sec_name}.{key}")
                continue
            kwargs[key] = _coerce(
                cls, f"{sec_name}.{key}", getattr(defaults, key), value, problems
            )
        sections[sec_name] = cls(**kwargs)
    cfg = Config(**sections)
    try:
        cfg.validate()
    except ValidationError as exc:
        problems.extend(exc.problems)
    if problems:
        raise ValidationError(problems)
    return cfg


def load_config(path: str | Path | None) -> Config:
    """Load a YAML config, filling every missing field with its default."""
    if path is None:
        return Config().validate()
    text = Path(path).read_text()
    try:
        data = yaml.safe_load(text)
    except yaml.YAMLError as exc:
        mark = getattr(exc, "problem_mark", None)
        line = mark.line + 1 if mark is not None else None
        raise ParseError(str(getattr(exc, "problem", exc)), line=line) from exc
    return config_from_dict(data)


def dump_config(cfg: Config, path: str | Path) -> None:
    Path(path).write_text(yaml.safe_dump(cfg.to_dict(), sort_keys=False))
