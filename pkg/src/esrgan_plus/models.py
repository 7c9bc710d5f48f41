"""Generator family (RRDB, RRDRB, noise-injected RRDRB) and the discriminator."""

from __future__ import annotations

import dataclasses
import enum
import os
from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .binio import IntegrityError, Reader, Writer, atomic_write, check_header, seal, unseal
from .tensor import Parameter, RngState, Tensor

SLOPE = 0.2
INNER_BLOCKS = 3

WEIGHTS_MAGIC = b"ESRW"
WEIGHTS_VERSION = 1


class ConfigurationError(ValueError):
    pass


class IncompatibleWeightsError(ValueError):
    pass


class BlockVariant(str, enum.Enum):
    DENSE = "rrdb"
    RESIDUAL_DENSE = "rrdrb"


@dataclass(frozen=True)
class GeneratorSpec:
    num_blocks: int = 23
    num_features: int = 64
    growth_channels: int = 32
    dense_layers_per_block: int = 5
    scale: int = 4
    variant: BlockVariant = BlockVariant.RESIDUAL_DENSE
    noise_enabled: bool = False
    residual_scaling: float = 0.2
    # extra injection site after each outer RRDB residual; adds nf scales per block
    noise_after_rrdb: bool = False

    def __post_init__(self):
        object.__setattr__(self, "variant", BlockVariant(self.variant))
        problems = []
        if self.num_blocks < 1:
            problems.append(f"num_blocks={self.num_blocks} must be >= 1")
        if self.num_features < 1 or self.growth_channels < 1:
            problems.append("num_features and growth_channels must be >= 1")
        if self.scale != 4:
            problems.append(f"scale={self.scale}; only x4 is supported")
        if not 0.0 < self.residual_scaling <= 1.0:
            problems.append(f"residual_scaling={self.residual_scaling} must lie in (0, 1]")
        if self.dense_layers_per_block < 2:
            problems.append(f"dense_layers_per_block={self.dense_layers_per_block} must be >= 2")
        if self.noise_after_rrdb and not self.noise_enabled:
            problems.append("noise_after_rrdb requires noise_enabled")
        if problems:
            raise ConfigurationError("invalid GeneratorSpec: " + "; ".join(problems))

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["variant"] = self.variant.value
        return d


@dataclass(frozen=True)
class DiscriminatorSpec:
    input_size: int = 128
    base_channels: int = 64
    num_downsample_stages: int = 5
    use_batchnorm: bool = True
    hidden_features: int = 100

    def __post_init__(self):
        if self.num_downsample_stages < 0 or self.base_channels < 1 or self.hidden_features < 1:
            raise ConfigurationError(f"invalid DiscriminatorSpec: {self}")
        if self.input_size < 1 or self.input_size % (2**self.num_downsample_stages):
            raise ConfigurationError(
                f"input_size={self.input_size} must be divisible by 2**{self.num_downsample_stages}"
            )

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)


def _kaiming(rng: RngState, shape, gain_scale: float = 1.0) -> np.ndarray:
    fan_in = int(np.prod(shape[1:]))
    return rng.normal(shape) * (np.sqrt(2.0 / fan_in) * gain_scale)


class Model:
    """Ordered name -> Parameter container shared by both networks."""

    kind = "model"

    def __init__(self):
        self.params: dict[str, Parameter] = {}

    def _add(self, name: str, data: np.ndarray) -> Parameter:
        if name in self.params:
            raise ValueError(f"duplicate parameter name {name}")
        p = self.params[name] = Parameter(data, name=name)
        return p

    def _conv(self, name: str, ci: int, co: int, rng: RngState, gain_scale: float = 1.0, k: int = 3):
        self._add(f"{name}.weight", _kaiming(rng, (co, ci, k, k), gain_scale))
        self._add(f"{name}.bias", np.zeros(co))

    def parameters(self) -> list[Parameter]:
        return list(self.params.values())

    def zero_grad(self) -> None:
        T.zero_grad(self.params.values())

    def spec_dict(self) -> dict:
        return self.spec.to_dict()

    def state_dict(self) -> dict[str, np.ndarray]:
        return {name: p.data.copy() for name, p in self.params.items()}

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        missing = set(self.params) ^ set(state)
        if missing:
            raise IncompatibleWeightsError(f"parameter names differ: {sorted(missing)}")
        for name, arr in state.items():
            if self.params[name].shape != arr.shape:
                raise IncompatibleWeightsError(f"{name}: shape {arr.shape} != {self.params[name].shape}")
        for name, arr in state.items():
            self.params[name].data = np.array(arr, dtype=np.float64)


def param_count(model: Model) -> int:
    return sum(p.size for p in model.params.values())


# --------------------------------------------------------------------- generator


def dense_block_forward(
    x: Tensor,
    variant: BlockVariant,
    layers: list[tuple[Tensor, Tensor]],
    beta: float = 0.2,
) -> Tensor:
    """One dense (or residual-dense) block wrapped as ``x + beta * block(x)``.

    ``layers`` holds (weight, bias) per conv; all but the last emit growth
    channels through leaky-relu.  The residual-dense variant adds the output
    of layer ``i - 2`` to layer ``i`` for every growth layer ``i >= 3``.
    """
    nf = layers[-1][0].shape[0]
    if x.shape[1] != nf:
        raise ValueError(f"dense block expects {nf} channels, got {x.shape[1]}")
    feats = [x]
    outs: list[Tensor] = []
    for i, (w, b) in enumerate(layers[:-1]):
        out = T.leaky_relu(T.conv2d(T.concat(feats), w, b, padding=1), SLOPE)
        if variant is BlockVariant.RESIDUAL_DENSE and i >= 2:
            out = out + outs[i - 2]
        outs.append(out)
        feats.append(out)
    w, b = layers[-1]
    last = T.conv2d(T.concat(feats), w, b, padding=1)
    return x + T.scale(last, beta)


def inject_noise(features: Tensor, scales: Tensor, rng: RngState) -> Tensor:
    """Add one fresh N(0, 1) map per sample, scaled per channel by ``scales``."""
    n, c, h, w = features.shape
    if scales.shape != (c,):
        raise ValueError(f"noise scales shape {scales.shape} does not match {c} channels")
    noise = T.normal_sample(rng, (n, 1, h, w))
    return features + T.reshape(scales, (1, c, 1, 1)) * noise


def rrdb_forward(
    x: Tensor,
    blocks: list[list[tuple[Tensor, Tensor]]],
    variant: BlockVariant,
    beta: float = 0.2,
    noise_scales: list[Tensor] | None = None,
    rng: RngState | None = None,
    outer_noise_scale: Tensor | None = None,
) -> Tensor:
    """Three chained dense blocks plus the outer scaled residual."""
    h = x
    for k, layers in enumerate(blocks):
        h = dense_block_forward(h, variant, layers, beta)
        if noise_scales is not None:
            h = inject_noise(h, noise_scales[k], rng)
    out = x + T.scale(h, beta)
    if outer_noise_scale is not None:
        out = inject_noise(out, outer_noise_scale, rng)
    return out


class Generator(Model):
    kind = "generator"

    def __init__(self, spec: GeneratorSpec, rng: RngState):
        super().__init__()
        self.spec = spec
        nf, gc, L = spec.num_features, spec.growth_channels, spec.dense_layers_per_block
        self._conv("head", 3, nf, rng)
        for b in range(spec.num_blocks):
            for k in range(INNER_BLOCKS):
                prefix = f"blocks.{b}.rdb{k}"
                for i in range(L):
                    co = gc if i < L - 1 else nf
                    self._conv(f"{prefix}.conv{i}", nf + i * gc, co, rng, gain_scale=0.1)
                if spec.noise_enabled:
                    self._add(f"{prefix}.noise_scale", np.zeros(nf))
            if spec.noise_after_rrdb:
                self._add(f"blocks.{b}.noise_scale", np.zeros(nf))
        self._conv("trunk", nf, nf, rng)
        self._conv("up0", nf, nf, rng)
        self._conv("up1", nf, nf, rng)
        self._conv("hr", nf, nf, rng)
        self._conv("last", nf, 3, rng)

    def _pair(self, name: str) -> tuple[Parameter, Parameter]:
        return self.params[f"{name}.weight"], self.params[f"{name}.bias"]

    def block_layers(self, b: int, k: int) -> list[tuple[Parameter, Parameter]]:
        return [self._pair(f"blocks.{b}.rdb{k}.conv{i}") for i in range(self.spec.dense_layers_per_block)]

    def noise_scales(self, b: int) -> list[Parameter] | None:
        if not self.spec.noise_enabled:
            return None
        return [self.params[f"blocks.{b}.rdb{k}.noise_scale"] for k in range(INNER_BLOCKS)]

    def forward(self, lr_image: Tensor, rng: RngState | None = None, noise: bool = True) -> Tensor:
        if lr_image.ndim != 4 or lr_image.shape[1] != 3:
            raise ValueError(f"generator expects (n, 3, h, w) input, got {lr_image.shape}")
        spec = self.spec
        use_noise = noise and spec.noise_enabled
        if use_noise and rng is None:
            raise ValueError("noise-enabled generator needs an RngState")
        beta = spec.residual_scaling
        fea = T.conv2d(lr_image, *self._pair("head"), padding=1)
        h = fea
        for b in range(spec.num_blocks):
            blocks = [self.block_layers(b, k) for k in range(INNER_BLOCKS)]
            outer = self.params[f"blocks.{b}.noise_scale"] if use_noise and spec.noise_after_rrdb else None
            h = rrdb_forward(
                h, blocks, spec.variant, beta,
                noise_scales=self.noise_scales(b) if use_noise else None,
                rng=rng, outer_noise_scale=outer,
            )
        fea = fea + T.conv2d(h, *self._pair("trunk"), padding=1)
        for name in ("up0", "up1"):
            fea = T.leaky_relu(T.conv2d(T.upsample_nearest(fea, 2), *self._pair(name), padding=1), SLOPE)
        fea = T.leaky_relu(T.conv2d(fea, *self._pair("hr"), padding=1), SLOPE)
        return T.conv2d(fea, *self._pair("last"), padding=1)

    __call__ = forward


def build_generator(spec: GeneratorSpec, rng: RngState) -> Generator:
    return Generator(spec, rng)


def generator_forward(gen: Generator, lr_image: Tensor, rng: RngState | None = None, noise: bool = True) -> Tensor:
    return gen.forward(lr_image, rng, noise)


def transplant(src: Model, dst: Model) -> list[str]:
    """Copy every same-named, same-shaped parameter of ``src`` into ``dst``."""
    copied = []
    for name, p in src.params.items():
        q = dst.params.get(name)
        if q is not None and q.shape == p.shape:
            q.data = p.data.copy()
            copied.append(name)
    return copied


# --------------------------------------------------------------------- discriminator


class Discriminator(Model):
    kind = "discriminator"

    def __init__(self, spec: DiscriminatorSpec, rng: RngState):
        super().__init__()
        self.spec = spec
        c = spec.base_channels
        self._conv("conv0", 3, c, rng)
        for s in range(spec.num_downsample_stages):
            self._conv(f"stages.{s}.conv", c, 2 * c, rng)
            c *= 2
            if spec.use_batchnorm:
                self._add(f"stages.{s}.bn.weight", np.ones(c))
                self._add(f"stages.{s}.bn.bias", np.zeros(c))
        side = spec.input_size // 2**spec.num_downsample_stages
        flat = c * side * side
        self._add("fc0.weight", rng.normal((spec.hidden_features, flat)) * np.sqrt(2.0 / flat))
        self._add("fc0.bias", np.zeros(spec.hidden_features))
        self._add("fc1.weight", rng.normal((1, spec.hidden_features)) * np.sqrt(1.0 / spec.hidden_features))
        self._add("fc1.bias", np.zeros(1))

    def forward(self, image: Tensor) -> Tensor:
        s = self.spec.input_size
        if image.ndim != 4 or image.shape[1:] != (3, s, s):
            raise ValueError(f"discriminator expects (n, 3, {s}, {s}), got {image.shape}")
        p = self.params
        h = T.leaky_relu(T.conv2d(image, p["conv0.weight"], p["conv0.bias"], padding=1), SLOPE)
        for i in range(self.spec.num_downsample_stages):
            h = T.conv2d(h, p[f"stages.{i}.conv.weight"], p[f"stages.{i}.conv.bias"], stride=2, padding=1)
            if self.spec.use_batchnorm:
                h = T.batch_norm(h, p[f"stages.{i}.bn.weight"], p[f"stages.{i}.bn.bias"])
            h = T.leaky_relu(h, SLOPE)
        n = image.shape[0]
        h = T.reshape(h, (n, -1))
        h = T.leaky_relu(T.linear(h, p["fc0.weight"], p["fc0.bias"]), SLOPE)
        return T.reshape(T.linear(h, p["fc1.weight"], p["fc1.bias"]), (n, 1, 1, 1))

    __call__ = forward


def build_discriminator(spec: DiscriminatorSpec, rng: RngState) -> Discriminator:
    return Discriminator(spec, rng)


def discriminator_forward(d: Discriminator, image: Tensor) -> Tensor:
    return d.forward(image)


# --------------------------------------------------------------------- weight files


def weights_to_bytes(model: Model) -> bytes:
    w = Writer()
    w.raw(WEIGHTS_MAGIC)
    w.u32(WEIGHTS_VERSION)
    w.text(model.kind)
    w.json(model.spec_dict())
    w.named_arrays({name: p.data for name, p in model.params.items()})
    return seal(w.getvalue())


def read_weights_bytes(blob: bytes, source: str = "<bytes>") -> tuple[str, dict, dict[str, np.ndarray]]:
    """Return (kind, spec fields, named arrays) from a sealed weight payload."""
    r = Reader(unseal(blob, source), source)
    check_header(r, WEIGHTS_MAGIC, WEIGHTS_VERSION)
    kind = r.text()
    spec = r.json()
    arrays = r.named_arrays()
    r.expect_end()
    return kind, spec, arrays


def load_weights_bytes(model: Model, blob: bytes, source: str = "<bytes>") -> None:
    kind, spec, arrays = read_weights_bytes(blob, source)
    if kind != model.kind:
        raise IncompatibleWeightsError(f"{source}: file holds {kind} weights, model is a {model.kind}")
    mine = model.spec_dict()
    diff = sorted(k for k in set(mine) | set(spec) if mine.get(k) != spec.get(k))
    if diff:
        detail = ", ".join(f"{k}: file={spec.get(k)!r} model={mine.get(k)!r}" for k in diff)
        raise IncompatibleWeightsError(f"{source}: spec mismatch ({detail})")
    model.load_state_dict(arrays)


def save_weights(model: Model, path: str | os.PathLike) -> None:
    atomic_write(path, weights_to_bytes(model))


def load_weights(model: Model, path: str | os.PathLike) -> None:
    with open(path, "rb") as fh:
        load_weights_bytes(model, fh.read(), str(path))


def generator_from_weights(path: str | os.PathLike) -> Generator:
    """Rebuild a generator from the GeneratorSpec stored in its weight file."""
    with open(path, "rb") as fh:
        blob = fh.read()
    kind, spec, _ = read_weights_bytes(blob, str(path))
    if kind != Generator.kind:
        raise IncompatibleWeightsError(f"{path}: expected generator weights, found {kind}")
    gen = Generator(GeneratorSpec(**spec), RngState(0))
    load_weights_bytes(gen, blob, str(path))
    return gen


__all__ = [
    "BlockVariant", "ConfigurationError", "Discriminator", "DiscriminatorSpec", "Generator",
    "GeneratorSpec", "IncompatibleWeightsError", "IntegrityError", "build_discriminator",
    "build_generator", "dense_block_forward", "discriminator_forward", "generator_forward",
    "generator_from_weights", "inject_noise", "load_weights", "param_count", "rrdb_forward",
    "save_weights", "transplant",
]
