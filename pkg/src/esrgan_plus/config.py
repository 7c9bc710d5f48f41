"""INI-style run configuration mapped onto the library's dataclasses.

Unknown sections or keys are rejected so typos never silently fall back to defaults.
"""

from __future__ import annotations

import configparser
import os
from dataclasses import dataclass, field
from pathlib import Path

from .data import AugmentationSpec
from .losses import LossWeights
from .models import BlockVariant, DiscriminatorSpec, GeneratorSpec
from .training import GAN, GAN_MILESTONES, PRETRAIN, ExtractorConfig, TrainConfig


class ConfigError(ValueError):
    pass


def _int(v: str) -> int:
    return int(v)


def _float(v: str) -> float:
    return float(v)


def _bool(v: str) -> bool:
    low = v.strip().lower()
    if low in ("1", "true", "yes", "on"):
        return True
    if low in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {v!r}")


def _ints(v: str) -> tuple[int, ...]:
    return tuple(int(x) for x in v.replace(",", " ").split())


SCHEMA: dict[str, dict[str, callable]] = {
    "run": {"seed": _int, "output_dir": str, "deterministic": _bool, "log_every": _int},
    "data": {"train_dir": str, "hr_crop": _int, "batch": _int, "horizontal_flip": _bool, "rotations": _ints},
    "generator": {
        "num_blocks": _int, "num_features": _int, "growth_channels": _int,
        "dense_layers_per_block": _int, "variant": BlockVariant, "noise_enabled": _bool,
        "residual_scaling": _float, "noise_after_rrdb": _bool,
    },
    "discriminator": {
        "base_channels": _int, "num_downsample_stages": _int, "use_batchnorm": _bool, "hidden_features": _int,
    },
    "features": {"seed": _int, "channels": _int, "depth": _int},
    "adam": {"beta1": _float, "beta2": _float, "eps": _float},
    "pretrain": {"total_iters": _int, "base_lr": _float, "lr_halving_milestones": _ints, "checkpoint_every": _int},
    "gan": {
        "total_iters": _int, "base_lr": _float, "lr_halving_milestones": _ints, "checkpoint_every": _int,
        "perceptual_weight": _float, "adversarial_weight": _float, "pixel_weight": _float,
    },
}


@dataclass
class RunConfig:
    sections: dict[str, dict] = field(default_factory=dict)
    source: str = "<memory>"

    def get(self, section: str, key: str, default=None):
        return self.sections.get(section, {}).get(key, default)

    @property
    def train_dir(self) -> Path:
        value = self.get("data", "train_dir")
        if value is None:
            raise ConfigError(f"{self.source}: [data] train_dir is required for training")
        return Path(value)

    @property
    def output_dir(self) -> Path:
        return Path(self.get("run", "output_dir", "out"))

    def generator_spec(self) -> GeneratorSpec:
        return GeneratorSpec(**self.sections.get("generator", {}))

    def train_config(self, phase: str, seed: int | None = None, deterministic: bool | None = None) -> TrainConfig:
        if phase not in (PRETRAIN, GAN):
            raise ConfigError(f"unknown phase {phase!r}")
        sect = "pretrain" if phase == PRETRAIN else "gan"
        ph = dict(self.sections.get(sect, {}))
        if "total_iters" not in ph:
            raise ConfigError(f"{self.source}: [{sect}] total_iters is required")
        data = self.sections.get("data", {})
        hr_crop = data.get("hr_crop", 128)
        adam = self.sections.get("adam", {})
        weights = LossWeights(
            ph.pop("perceptual_weight", 1.0), ph.pop("adversarial_weight", 5e-3), ph.pop("pixel_weight", 1e-2)
        )
        ph.setdefault("lr_halving_milestones", () if phase == PRETRAIN else GAN_MILESTONES)
        run = self.sections.get("run", {})
        try:
            return TrainConfig(
                phase=phase,
                batch=data.get("batch", 16),
                hr_crop=hr_crop,
                loss_weights=weights,
                adam_beta1=adam.get("beta1", 0.9),
                adam_beta2=adam.get("beta2", 0.999),
                adam_eps=adam.get("eps", 1e-8),
                seed=run.get("seed", 0) if seed is None else seed,
                deterministic=run.get("deterministic", True) if deterministic is None else deterministic,
                log_every=run.get("log_every", 10),
                generator=self.generator_spec(),
                discriminator=DiscriminatorSpec(input_size=hr_crop, **self.sections.get("discriminator", {})),
                augmentation=AugmentationSpec(
                    data.get("horizontal_flip", True), data.get("rotations", (0, 90, 180, 270))
                ),
                extractor=ExtractorConfig(**self.sections.get("features", {})),
                **ph,
            )
        except ValueError as exc:
            raise ConfigError(f"{self.source}: {exc}") from exc


def parse_run_config(text: str, source: str = "<memory>", base_dir: str | os.PathLike | None = None) -> RunConfig:
    parser = configparser.ConfigParser(interpolation=None, inline_comment_prefixes=("#", ";"))
    parser.optionxform = str
    try:
        parser.read_string(text, source=source)
    except configparser.Error as exc:
        raise ConfigError(f"{source}: {exc}") from exc
    sections: dict[str, dict] = {}
    for name in parser.sections():
        if name not in SCHEMA:
            raise ConfigError(f"{source}: unknown section [{name}]")
        parsed = {}
        for key, raw in parser.items(name):
            conv = SCHEMA[name].get(key)
            if conv is None:
                raise ConfigError(f"{source}: unknown key {key!r} in [{name}]")
            try:
                parsed[key] = conv(raw)
            except ValueError as exc:
                raise ConfigError(f"{source}: bad value for [{name}] {key}: {exc}") from exc
        sections[name] = parsed
    if base_dir is not None:
        for sect, key in (("data", "train_dir"), ("run", "output_dir")):
            value = sections.get(sect, {}).get(key)
            if value is not None and not os.path.isabs(value):
                sections[sect][key] = str(Path(base_dir) / value)
    return RunConfig(sections, source)


def load_run_config(path: str | os.PathLike) -> RunConfig:
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    return parse_run_config(text, str(path), base_dir=path.parent)
