"""Two-phase training: PSNR-oriented pretraining, then relativistic GAN fine-tuning."""

from __future__ import annotations

import contextlib
import csv
import dataclasses
import hashlib
import json
import logging
import math
import os
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np
from threadpoolctl import threadpool_limits

from . import tensor as T
from .binio import Reader, Writer, atomic_write, check_header, seal, unseal
from .data import AugmentationSpec, BatchIterator, DataError, DatasetIndex
from .losses import FeatureExtractor, LossWeights, pixel_l1, ragan_d_loss, total_generator_loss
from .models import (
    Discriminator,
    DiscriminatorSpec,
    Generator,
    GeneratorSpec,
    IncompatibleWeightsError,
    load_weights_bytes,
    save_weights,
    weights_to_bytes,
)
from .tensor import AdamState, RngState

log = logging.getLogger(__name__)

PRETRAIN = "psnr_pretrain"
GAN = "gan"
PHASES = (PRETRAIN, GAN)
GAN_MILESTONES = (50_000, 100_000, 200_000, 300_000)

CKPT_MAGIC = b"ESRC"
CKPT_VERSION = 1

LOG_COLUMNS = ("iter", "lr", "loss_total", "loss_pix", "loss_percep", "loss_adv", "d_loss", "seconds")

# streams of the run seed
_INIT_STREAM, _DATA_STREAM, _NOISE_STREAM = 0, 1, 2


class NumericalError(RuntimeError):
    pass


class CheckpointMismatchError(ValueError):
    pass


def lr_at(iteration: int, base_lr: float, milestones=GAN_MILESTONES) -> float:
    if iteration < 0:
        raise ValueError(f"iteration must be >= 0, got {iteration}")
    halvings = sum(1 for m in milestones if m <= iteration)
    return base_lr * 0.5**halvings


@dataclass(frozen=True)
class ExtractorConfig:
    seed: int = 0
    channels: int = 16
    depth: int = 3

    def build(self) -> FeatureExtractor:
        return FeatureExtractor.random(self.seed, self.channels, self.depth)


@dataclass(frozen=True)
class TrainConfig:
    phase: str = PRETRAIN
    total_iters: int = 100_000
    base_lr: float = 1e-4
    lr_halving_milestones: tuple[int, ...] = ()
    batch: int = 16
    hr_crop: int = 128
    loss_weights: LossWeights = LossWeights()
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8
    seed: int = 0
    checkpoint_every: int = 0
    log_every: int = 1
    deterministic: bool = True
    generator: GeneratorSpec = GeneratorSpec()
    discriminator: DiscriminatorSpec = DiscriminatorSpec()
    augmentation: AugmentationSpec = AugmentationSpec()
    extractor: ExtractorConfig = ExtractorConfig()

    def __post_init__(self):
        object.__setattr__(self, "lr_halving_milestones", tuple(int(m) for m in self.lr_halving_milestones))
        if self.phase not in PHASES:
            raise ValueError(f"phase must be one of {PHASES}, got {self.phase!r}")
        if self.total_iters < 1:
            raise ValueError(f"total_iters must be >= 1, got {self.total_iters}")
        ms = self.lr_halving_milestones
        if any(b <= a for a, b in zip(ms, ms[1:])):
            raise ValueError(f"lr_halving_milestones must be strictly increasing: {ms}")
        if self.batch < 1 or self.hr_crop % 4:
            raise ValueError(f"invalid batch={self.batch} / hr_crop={self.hr_crop}")
        if self.phase == GAN and self.discriminator.input_size != self.hr_crop:
            raise ValueError(
                f"discriminator input_size {self.discriminator.input_size} != hr_crop {self.hr_crop}"
            )

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["generator"] = self.generator.to_dict()
        d["lr_halving_milestones"] = list(self.lr_halving_milestones)
        d["augmentation"]["rotations"] = list(self.augmentation.rotations)
        return d

    def config_hash(self) -> str:
        """Hash of everything that shapes the trajectory; run length and I/O cadence excluded."""
        d = self.to_dict()
        for key in ("total_iters", "checkpoint_every", "log_every", "deterministic"):
            d.pop(key)
        return hashlib.sha256(json.dumps(d, sort_keys=True).encode()).hexdigest()


def desk_config(phase: str = PRETRAIN, **overrides) -> TrainConfig:
    """CPU-sized profile: 4 blocks, nf=32, gc=16, crop 64, batch 4."""
    base = dict(
        phase=phase,
        total_iters=200 if phase == PRETRAIN else 100,
        batch=4,
        hr_crop=64,
        lr_halving_milestones=() if phase == PRETRAIN else GAN_MILESTONES,
        generator=GeneratorSpec(num_blocks=4, num_features=32, growth_channels=16, noise_enabled=True),
        discriminator=DiscriminatorSpec(input_size=64, base_channels=16, num_downsample_stages=4, hidden_features=64),
    )
    base.update(overrides)
    return TrainConfig(**base)


def full_scale_config(phase: str = GAN, **overrides) -> TrainConfig:
    """Full-scale profile (23 blocks, nf=64, gc=32, crop 128, batch 16); long-running."""
    base = dict(
        phase=phase,
        total_iters=100_000 if phase == PRETRAIN else 400_000,
        lr_halving_milestones=() if phase == PRETRAIN else GAN_MILESTONES,
        generator=GeneratorSpec(noise_enabled=True),
        discriminator=DiscriminatorSpec(),
    )
    base.update(overrides)
    return TrainConfig(**base)


# --------------------------------------------------------------------- checkpoints


def _adam_meta(state: AdamState) -> dict:
    return {"beta1": state.beta1, "beta2": state.beta2, "eps": state.eps, "t": state.t}


def _copy_adam(state: AdamState) -> AdamState:
    return dataclasses.replace(
        state, m={k: a.copy() for k, a in state.m.items()}, v={k: a.copy() for k, a in state.v.items()}
    )


def _adam_from(meta: dict, m: dict, v: dict) -> AdamState:
    return AdamState(meta["beta1"], meta["beta2"], meta["eps"], meta["t"], dict(m), dict(v))


@dataclass
class Checkpoint:
    iteration: int
    phase: str
    config_hash: str
    generator: bytes
    discriminator: bytes | None
    adam_g: AdamState
    adam_d: AdamState | None
    rng: dict
    data: dict
    extra: dict = field(default_factory=dict)

    def to_bytes(self) -> bytes:
        w = Writer()
        w.raw(CKPT_MAGIC)
        w.u32(CKPT_VERSION)
        w.json({
            "iteration": self.iteration,
            "phase": self.phase,
            "config_hash": self.config_hash,
            "rng": self.rng,
            "data": self.data,
            "adam_g": _adam_meta(self.adam_g),
            "adam_d": None if self.adam_d is None else _adam_meta(self.adam_d),
            "extra": self.extra,
        })
        w.blob(self.generator)
        w.blob(self.discriminator or b"")
        for state in (self.adam_g, self.adam_d):
            w.named_arrays({} if state is None else state.m)
            w.named_arrays({} if state is None else state.v)
        return seal(w.getvalue())

    @classmethod
    def from_bytes(cls, blob: bytes, source: str = "<bytes>") -> Checkpoint:
        r = Reader(unseal(blob, source), source)
        check_header(r, CKPT_MAGIC, CKPT_VERSION)
        meta = r.json()
        gen = r.blob()
        disc = r.blob() or None
        mg, vg, md, vd = r.named_arrays(), r.named_arrays(), r.named_arrays(), r.named_arrays()
        r.expect_end()
        adam_d = None if meta["adam_d"] is None else _adam_from(meta["adam_d"], md, vd)
        return cls(
            meta["iteration"], meta["phase"], meta["config_hash"], gen, disc,
            _adam_from(meta["adam_g"], mg, vg), adam_d, meta["rng"], meta["data"], meta["extra"],
        )


def checkpoint_save(ckpt: Checkpoint, path: str | os.PathLike) -> None:
    atomic_write(path, ckpt.to_bytes())


def checkpoint_load(path: str | os.PathLike, config: TrainConfig | None = None) -> Checkpoint:
    with open(path, "rb") as fh:
        ckpt = Checkpoint.from_bytes(fh.read(), str(path))
    if config is not None and ckpt.config_hash != config.config_hash():
        raise CheckpointMismatchError(
            f"{path}: config hash {ckpt.config_hash[:12]} does not match the current config {config.config_hash()[:12]}"
        )
    return ckpt


# --------------------------------------------------------------------- training


@dataclass
class TrainLog:
    records: list[dict] = field(default_factory=list)

    def append(self, record: dict) -> None:
        if self.records and record["iter"] <= self.records[-1]["iter"]:
            raise ValueError("TrainLog iterations must increase")
        self.records.append(record)

    def column(self, name: str) -> np.ndarray:
        return np.array([r[name] for r in self.records], dtype=np.float64)

    def smoothed(self, name: str, window: int = 10) -> dict[int, float]:
        """Trailing moving average of ``name`` keyed by iteration."""
        values = self.column(name)
        iters = [r["iter"] for r in self.records]
        return {it: float(values[max(0, k - window + 1) : k + 1].mean()) for k, it in enumerate(iters)}


def _fmt(value) -> str:
    if value is None:
        return ""
    if isinstance(value, float):
        return repr(value)
    return str(value)


def write_log_rows(path: Path, rows: list[dict], fresh: bool) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w" if fresh else "a", newline="") as fh:
        writer = csv.writer(fh)
        if fresh:
            writer.writerow(LOG_COLUMNS)
        for row in rows:
            writer.writerow([_fmt(row.get(c)) for c in LOG_COLUMNS])


@contextlib.contextmanager
def frozen(model):
    flags = {name: p.requires_grad for name, p in model.params.items()}
    for p in model.params.values():
        p.requires_grad = False
    try:
        yield model
    finally:
        for name, p in model.params.items():
            p.requires_grad = flags[name]


def _guard(values: dict[str, float], iteration: int) -> None:
    for name, value in values.items():
        if value is not None and not math.isfinite(value):
            raise NumericalError(f"non-finite {name}={value} at iteration {iteration}")


class Trainer:
    """Owns every piece of mutable training state for one phase."""

    def __init__(self, config: TrainConfig, dataset: DatasetIndex, init: Checkpoint | None = None):
        if not dataset.records:
            raise DataError("dataset is empty")
        self.config = config
        self.dataset = dataset
        init_rng = RngState(config.seed, _INIT_STREAM)
        self.noise_rng = RngState(config.seed, _NOISE_STREAM)
        self.gen = Generator(config.generator, init_rng)
        self.adam_g = AdamState(config.adam_beta1, config.adam_beta2, config.adam_eps)
        self.disc: Discriminator | None = None
        self.adam_d: AdamState | None = None
        self.extractor: FeatureExtractor | None = None
        if config.phase == GAN:
            self.disc = Discriminator(config.discriminator, init_rng)
            self.adam_d = AdamState(config.adam_beta1, config.adam_beta2, config.adam_eps)
            self.extractor = config.extractor.build()
            if init is not None:
                load_weights_bytes(self.gen, init.generator, "init checkpoint")
        self.batches = BatchIterator(
            dataset, config.batch, config.hr_crop, config.augmentation, RngState(config.seed, _DATA_STREAM)
        )
        self.iteration = 0
        self.log = TrainLog()

    # -- state

    def checkpoint(self) -> Checkpoint:
        return Checkpoint(
            iteration=self.iteration,
            phase=self.config.phase,
            config_hash=self.config.config_hash(),
            generator=weights_to_bytes(self.gen),
            discriminator=None if self.disc is None else weights_to_bytes(self.disc),
            adam_g=_copy_adam(self.adam_g),
            adam_d=None if self.adam_d is None else _copy_adam(self.adam_d),
            rng={"noise": self.noise_rng.state_dict()},
            data=self.batches.state_dict(),
        )

    def restore(self, ckpt: Checkpoint) -> None:
        if ckpt.config_hash != self.config.config_hash():
            raise CheckpointMismatchError("checkpoint was written under a different config")
        if ckpt.phase != self.config.phase:
            raise CheckpointMismatchError(f"checkpoint phase {ckpt.phase} != {self.config.phase}")
        load_weights_bytes(self.gen, ckpt.generator, "checkpoint")
        if self.disc is not None:
            if ckpt.discriminator is None:
                raise IncompatibleWeightsError("checkpoint lacks discriminator weights")
            load_weights_bytes(self.disc, ckpt.discriminator, "checkpoint")
            self.adam_d = _copy_adam(ckpt.adam_d)
        self.adam_g = _copy_adam(ckpt.adam_g)
        self.noise_rng.load_state_dict(ckpt.rng["noise"])
        self.batches.load_state_dict(ckpt.data)
        self.iteration = ckpt.iteration

    # -- objectives

    def generator_objective(self, hr, lr):
        """Fresh SR forward and the phase's generator loss (graph attached)."""
        sr = self.gen(lr, self.noise_rng)
        if self.config.phase == PRETRAIN:
            pix = pixel_l1(sr, hr)
            return pix, {"pix": pix.item()}
        with frozen(self.disc):
            with T.no_grad():
                real_logits = self.disc(hr)
            fake_logits = self.disc(sr)
            return total_generator_loss(sr, hr, real_logits, fake_logits, self.extractor, self.config.loss_weights)

    def discriminator_step(self, hr, lr, lr_now: float) -> float:
        with T.no_grad():
            fake = self.gen(lr, self.noise_rng)
        d_loss = ragan_d_loss(self.disc(hr), self.disc(fake))
        _guard({"d_loss": d_loss.item()}, self.iteration + 1)
        d_loss.backward()
        T.adam_step(self.disc.parameters(), self.adam_d, lr_now)
        self.disc.zero_grad()
        return d_loss.item()

    def step(self) -> dict:
        start = time.perf_counter()
        cfg = self.config
        hr, lr = next(self.batches)
        lr_now = lr_at(self.iteration, cfg.base_lr, cfg.lr_halving_milestones)
        d_loss = self.discriminator_step(hr, lr, lr_now) if cfg.phase == GAN else None
        total, parts = self.generator_objective(hr, lr)
        record = {
            "iter": self.iteration + 1,
            "lr": lr_now,
            "loss_total": total.item(),
            "loss_pix": parts.get("pix"),
            "loss_percep": parts.get("percep"),
            "loss_adv": parts.get("adv"),
            "d_loss": d_loss,
        }
        _guard({k: v for k, v in record.items() if k.startswith("loss")}, self.iteration + 1)
        total.backward()
        T.adam_step(self.gen.parameters(), self.adam_g, lr_now)
        self.gen.zero_grad()
        self.iteration += 1
        record["seconds"] = time.perf_counter() - start
        self.log.append(record)
        return record

    def weights_finite(self) -> bool:
        models = [self.gen] + ([self.disc] if self.disc is not None else [])
        return all(np.all(np.isfinite(p.data)) for m in models for p in m.parameters())

    def run(
        self,
        until: int | None = None,
        on_checkpoint: Callable[[Checkpoint], None] | None = None,
        on_log: Callable[[list[dict]], None] | None = None,
    ) -> Checkpoint:
        """Train until ``until`` (default ``total_iters``) and return the final checkpoint."""
        cfg = self.config
        target = cfg.total_iters if until is None else until
        limits = threadpool_limits(1) if cfg.deterministic else contextlib.nullcontext()
        pending: list[dict] = []
        with limits:
            while self.iteration < target:
                record = self.step()
                pending.append(record)
                if on_log is not None and (self.iteration % cfg.log_every == 0 or self.iteration == target):
                    on_log(pending)
                    pending = []
                if self.iteration % max(cfg.log_every, 1) == 0:
                    log.info("%s iter %d lr %.3g loss %.5f", cfg.phase, record["iter"], record["lr"], record["loss_total"])
                if cfg.checkpoint_every and self.iteration % cfg.checkpoint_every == 0 and self.iteration != target:
                    if not self.weights_finite():
                        raise NumericalError(f"non-finite weights at iteration {self.iteration}")
                    if on_checkpoint is not None:
                        on_checkpoint(self.checkpoint())
        if not self.weights_finite():
            raise NumericalError(f"non-finite weights at iteration {self.iteration}")
        final = self.checkpoint()
        if on_checkpoint is not None:
            on_checkpoint(final)
        return final


def _require_phase(config: TrainConfig, phase: str) -> None:
    if config.phase != phase:
        raise ValueError(f"config phase is {config.phase!r}, expected {phase!r}")


def pretrain_psnr(config: TrainConfig, dataset: DatasetIndex, resume: Checkpoint | None = None, **hooks) -> Checkpoint:
    """Pixel-L1 pretraining of the generator; no discriminator, no perceptual term."""
    _require_phase(config, PRETRAIN)
    trainer = Trainer(config, dataset)
    if resume is not None:
        trainer.restore(resume)
    return trainer.run(**hooks)


def train_gan(
    config: TrainConfig,
    dataset: DatasetIndex,
    init: Checkpoint | None,
    resume: Checkpoint | None = None,
    **hooks,
) -> Checkpoint:
    """Alternating D-then-G updates on the same batch, starting from pretrained weights."""
    _require_phase(config, GAN)
    trainer = Trainer(config, dataset, init=init)
    if resume is not None:
        trainer.restore(resume)
    return trainer.run(**hooks)


class RunDirectory:
    """Fixed ``checkpoints/``, ``logs/``, ``images/`` layout under one output root."""

    def __init__(self, root: str | os.PathLike):
        self.root = Path(root)
        self.checkpoints = self.root / "checkpoints"
        self.logs = self.root / "logs"
        self.images = self.root / "images"

    def make(self) -> None:
        for d in (self.checkpoints, self.logs, self.images):
            d.mkdir(parents=True, exist_ok=True)

    def checkpoint_path(self, phase: str, iteration: int) -> Path:
        return self.checkpoints / f"{phase}_{iteration:07d}.ckpt"

    def latest(self, phase: str) -> Path:
        return self.checkpoints / f"{phase}_latest.ckpt"

    def generator_weights(self, phase: str) -> Path:
        return self.checkpoints / f"{phase}_generator.bin"

    def log_path(self, phase: str) -> Path:
        return self.logs / f"{phase}.csv"

    def checkpoint_writer(self, trainer: Trainer) -> Callable[[Checkpoint], None]:
        def _write(ckpt: Checkpoint) -> None:
            blob = ckpt.to_bytes()
            atomic_write(self.checkpoint_path(ckpt.phase, ckpt.iteration), blob)
            atomic_write(self.latest(ckpt.phase), blob)
            save_weights(trainer.gen, self.generator_weights(ckpt.phase))
        return _write
