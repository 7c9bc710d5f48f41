"""Generator objective (perceptual + relativistic adversarial + pixel) and the RaGAN critic loss."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .tensor import RngState, Tensor


@dataclass(frozen=True)
class LossWeights:
    perceptual_weight: float = 1.0
    adversarial_weight: float = 5e-3
    pixel_weight: float = 1e-2

    def __post_init__(self):
        if min(self.perceptual_weight, self.adversarial_weight, self.pixel_weight) < 0:
            raise ValueError(f"loss weights must be non-negative: {self}")


class FeatureExtractor:
    """Frozen conv stack; the tapped feature is the last conv *before* its activation.

    Weights are plain (non-trainable) tensors so gradients reach the input image
    but never the extractor itself.
    """

    def __init__(self, layers: list[tuple[np.ndarray, np.ndarray, int]], slope: float = 0.2):
        self.layers = [(Tensor(w), Tensor(b), int(s)) for w, b, s in layers]
        self.slope = slope

    @classmethod
    def random(cls, seed: int = 0, channels: int = 16, depth: int = 3) -> FeatureExtractor:
        """Seeded random-init extractor; the second conv downsamples by 2."""
        if depth < 1:
            raise ValueError("feature extractor needs at least one conv")
        rng = RngState(seed, stream=99)
        layers, ci = [], 3
        for i in range(depth):
            w = rng.normal((channels, ci, 3, 3)) * np.sqrt(2.0 / (ci * 9))
            layers.append((w, np.zeros(channels), 2 if i == 1 else 1))
            ci = channels
        return cls(layers)

    @classmethod
    def identity(cls, channels: int = 3) -> FeatureExtractor:
        w = np.zeros((channels, channels, 1, 1))
        w[np.arange(channels), np.arange(channels), 0, 0] = 1.0
        return cls([(w, np.zeros(channels), 1)])

    def __call__(self, x: Tensor) -> Tensor:
        h = x
        for i, (w, b, s) in enumerate(self.layers):
            if i:
                h = T.leaky_relu(h, self.slope)
            h = T.conv2d(h, w, b, stride=s, padding=w.shape[-1] // 2)
        return h

    def config(self) -> dict:
        return {"layers": len(self.layers), "slope": self.slope}


def pixel_l1(sr: Tensor, hr: Tensor) -> Tensor:
    return T.l1_distance(sr, hr)


def perceptual_loss(sr: Tensor, hr: Tensor, extractor: FeatureExtractor) -> Tensor:
    if sr.shape != hr.shape:
        raise ValueError(f"perceptual_loss shape mismatch: {sr.shape} vs {hr.shape}")
    with T.no_grad():
        target = extractor(hr)
    return T.l1_distance(extractor(sr), target)


def _flat_logits(logits) -> Tensor:
    logits = logits if isinstance(logits, Tensor) else Tensor(logits)
    if logits.size == 0:
        raise ValueError("RaGAN loss needs at least one logit per side")
    return T.reshape(logits, (logits.size,))


def _relativistic(a, b) -> Tensor:
    """-E[log sigmoid(a - mean b)] - E[log(1 - sigmoid(b - mean a))].

    Uses -log sigmoid(z) = softplus(-z) and -log(1 - sigmoid(z)) = softplus(z).
    """
    a, b = _flat_logits(a), _flat_logits(b)
    if a.size != b.size:
        raise ValueError(f"RaGAN batch sizes differ: {a.size} vs {b.size}")
    term_a = T.mean(T.softplus(-(a - T.mean(b))))
    term_b = T.mean(T.softplus(b - T.mean(a)))
    return term_a + term_b


def ragan_d_loss(real_logits, fake_logits) -> Tensor:
    return _relativistic(real_logits, fake_logits)


def ragan_g_loss(real_logits, fake_logits) -> Tensor:
    return _relativistic(fake_logits, real_logits)


def combine_generator_loss(perceptual, adversarial, pixel, weights: LossWeights):
    """Weighted sum; works on Tensors and on plain floats alike."""
    return (
        weights.perceptual_weight * perceptual
        + weights.adversarial_weight * adversarial
        + weights.pixel_weight * pixel
    )


def total_generator_loss(
    sr: Tensor,
    hr: Tensor,
    d_real_logits: Tensor,
    d_fake_logits: Tensor,
    extractor: FeatureExtractor,
    weights: LossWeights = LossWeights(),
) -> tuple[Tensor, dict[str, float]]:
    """Return the scalar objective and its unweighted components."""
    percep = perceptual_loss(sr, hr, extractor)
    adv = ragan_g_loss(d_real_logits, d_fake_logits)
    pix = pixel_l1(sr, hr)
    total = combine_generator_loss(percep, adv, pix, weights)
    parts = {"percep": percep.item(), "adv": adv.item(), "pix": pix.item()}
    return total, parts
