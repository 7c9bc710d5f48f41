"""Y-channel PSNR, NIQE and the PIRM perceptual index."""

from __future__ import annotations

import math
import os
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
from scipy.ndimage import correlate1d
from scipy.special import gamma as gamma_fn

from .binio import Reader, Writer, atomic_write, check_header, seal, unseal
from .data import bicubic_resize

NIQE_MAGIC = b"NIQE"
NIQE_VERSION = 1
FEATURE_DIM = 36
MSCN_C = 1.0 / 255.0
WINDOW_SIZE = 7
WINDOW_SIGMA = 7.0 / 6.0

_ALPHA_GRID = np.arange(0.2, 10.0 + 5e-4, 0.001)
_R_GRID = gamma_fn(2.0 / _ALPHA_GRID) ** 2 / (gamma_fn(1.0 / _ALPHA_GRID) * gamma_fn(3.0 / _ALPHA_GRID))
_SHIFTS = ((0, 1), (1, 0), (1, 1), (1, -1))


def rgb_to_y(img: np.ndarray) -> np.ndarray:
    """BT.601 studio-swing luma of a (3, h, w) image in [0, 1]."""
    r, g, b = img[0], img[1], img[2]
    return 16.0 / 255.0 + (65.481 * r + 128.553 * g + 24.966 * b) / 255.0


def psnr_y(sr: np.ndarray, hr: np.ndarray, crop_border: int = 4) -> float:
    if sr.shape != hr.shape:
        raise ValueError(f"psnr_y shape mismatch: {sr.shape} vs {hr.shape}")
    h, w = sr.shape[-2:]
    if crop_border < 0 or h <= 2 * crop_border or w <= 2 * crop_border:
        raise ValueError(f"crop_border={crop_border} leaves nothing of a {h}x{w} image")
    ya, yb = rgb_to_y(sr), rgb_to_y(hr)
    if crop_border:
        ya = ya[crop_border:-crop_border, crop_border:-crop_border]
        yb = yb[crop_border:-crop_border, crop_border:-crop_border]
    mse = float(np.mean((ya - yb) ** 2))
    if mse == 0.0:
        return math.inf
    return 10.0 * math.log10(1.0 / mse)


def perceptual_index(ma: float, niqe: float) -> float:
    return ((10.0 - ma) + niqe) / 2.0


# --------------------------------------------------------------------- NIQE


def gaussian_window(size: int = WINDOW_SIZE, sigma: float = WINDOW_SIGMA) -> np.ndarray:
    half = size // 2
    x = np.arange(-half, half + 1, dtype=np.float64)
    w = np.exp(-(x * x) / (2 * sigma * sigma))
    return w / w.sum()


def local_stats(plane: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Gaussian-weighted local mean and standard deviation, edges replicated."""
    win = gaussian_window()

    def blur(a):
        return correlate1d(correlate1d(a, win, axis=0, mode="nearest"), win, axis=1, mode="nearest")

    mu = blur(plane)
    sigma = np.sqrt(np.abs(blur(plane * plane) - mu * mu))
    return mu, sigma


def mscn(plane: np.ndarray) -> np.ndarray:
    mu, sigma = local_stats(plane)
    return (plane - mu) / (sigma + MSCN_C)


def aggd_fit(samples: np.ndarray) -> tuple[float, float, float, float]:
    """Moment-matching AGGD estimate: (shape, left scale, right scale, mean)."""
    x = np.asarray(samples, dtype=np.float64).ravel()
    left, right = x[x < 0], x[x > 0]
    left_std = math.sqrt(np.mean(left * left)) if left.size else 0.0
    right_std = math.sqrt(np.mean(right * right)) if right.size else 0.0
    mean_sq = float(np.mean(x * x))
    if mean_sq == 0.0 or left_std == 0.0 or right_std == 0.0:
        return 0.0, left_std, right_std, 0.0
    g = left_std / right_std
    r_hat = float(np.mean(np.abs(x))) ** 2 / mean_sq
    r_norm = r_hat * (g**3 + 1) * (g + 1) / (g**2 + 1) ** 2
    alpha = float(_ALPHA_GRID[np.argmin((_R_GRID - r_norm) ** 2)])
    ratio = math.sqrt(gamma_fn(1.0 / alpha) / gamma_fn(3.0 / alpha))
    bl, br = left_std * ratio, right_std * ratio
    eta = (br - bl) * gamma_fn(2.0 / alpha) / gamma_fn(1.0 / alpha)
    return alpha, bl, br, float(eta)


def patch_features(coeffs: np.ndarray) -> np.ndarray:
    """18 features of one MSCN patch: AGGD of the coefficients and 4 neighbour products."""
    alpha, bl, br, _ = aggd_fit(coeffs)
    feats = [alpha, (bl + br) / 2.0]
    for dy, dx in _SHIFTS:
        prod = coeffs * np.roll(coeffs, (dy, dx), axis=(0, 1))
        alpha, bl, br, eta = aggd_fit(prod)
        feats.extend([alpha, eta, bl, br])
    return np.array(feats)


def _patch_grid(plane: np.ndarray, patch: int) -> list[tuple[int, int]]:
    h, w = plane.shape
    return [(r, c) for r in range(0, h - patch + 1, patch) for c in range(0, w - patch + 1, patch)]


def niqe_features(y_plane: np.ndarray, patch_size: int = 96, sharpness_percentile: float = 75.0) -> np.ndarray:
    """(num_patches, 36) features of the sharpest patches at native and half scale.

    Patches are non-overlapping; the kept ones are the top ``sharpness_percentile``
    percent ranked by mean local deviation at native scale.
    """
    if patch_size % 2:
        raise ValueError(f"patch_size must be even, got {patch_size}")
    h, w = y_plane.shape
    if h < 2 * patch_size or w < 2 * patch_size:
        raise ValueError(f"image {h}x{w} is smaller than twice the {patch_size} patch size")
    h, w = h - h % patch_size, w - w % patch_size
    plane = np.asarray(y_plane[:h, :w], dtype=np.float64)
    half = bicubic_resize(plane, h // 2, w // 2, antialias=True)

    native_mscn = mscn(plane)
    _, sigma = local_stats(plane)
    half_mscn = mscn(half)
    grid = _patch_grid(plane, patch_size)
    sharpness = np.array([sigma[r : r + patch_size, c : c + patch_size].mean() for r, c in grid])
    keep = max(1, int(math.ceil(len(grid) * sharpness_percentile / 100.0)))
    order = sorted(np.argsort(-sharpness, kind="stable")[:keep])

    hp = patch_size // 2
    rows = []
    for k in order:
        r, c = grid[k]
        native = patch_features(native_mscn[r : r + patch_size, c : c + patch_size])
        small = patch_features(half_mscn[r // 2 : r // 2 + hp, c // 2 : c // 2 + hp])
        rows.append(np.concatenate([native, small]))
    return np.array(rows)


@dataclass(frozen=True)
class NiqeModel:
    mean: np.ndarray
    cov: np.ndarray
    patch_size: int = 96
    metadata: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.mean.shape != (FEATURE_DIM,) or self.cov.shape != (FEATURE_DIM, FEATURE_DIM):
            raise ValueError(f"NIQE model must be {FEATURE_DIM}-dimensional")

    @property
    def sharpness_percentile(self) -> float:
        return float(self.metadata.get("sharpness_percentile", 75.0))

    def to_bytes(self) -> bytes:
        w = Writer()
        w.raw(NIQE_MAGIC)
        w.u32(NIQE_VERSION)
        w.u32(self.patch_size)
        w.json(self.metadata)
        w.f64(self.mean)
        w.f64(self.cov)
        return seal(w.getvalue())

    @classmethod
    def from_bytes(cls, blob: bytes, source: str = "<bytes>") -> NiqeModel:
        r = Reader(unseal(blob, source), source)
        check_header(r, NIQE_MAGIC, NIQE_VERSION)
        patch = r.u32()
        meta = r.json()
        mean = r.f64(FEATURE_DIM)
        cov = r.f64(FEATURE_DIM * FEATURE_DIM).reshape(FEATURE_DIM, FEATURE_DIM)
        r.expect_end()
        return cls(mean, cov, patch, meta)

    def save(self, path: str | os.PathLike) -> None:
        atomic_write(path, self.to_bytes())

    @classmethod
    def load(cls, path: str | os.PathLike) -> NiqeModel:
        with open(path, "rb") as fh:
            return cls.from_bytes(fh.read(), str(path))


def _gaussian_fit(features: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    mu = features.mean(axis=0)
    if len(features) < 2:
        return mu, np.zeros((features.shape[1], features.shape[1]))
    cov = np.cov(features, rowvar=False)
    return mu, (cov + cov.T) / 2.0


def fit_pristine_model(
    corpus: Sequence[np.ndarray],
    patch_size: int = 96,
    sharpness_percentile: float = 75.0,
    corpus_id: str = "",
) -> NiqeModel:
    """Fit the multivariate Gaussian of pooled patch features over RGB images."""
    if len(corpus) < 2:
        raise ValueError(f"pristine corpus needs at least 2 images, got {len(corpus)}")
    feats = np.vstack([niqe_features(rgb_to_y(img), patch_size, sharpness_percentile) for img in corpus])
    mu, cov = _gaussian_fit(feats)
    meta = {
        "corpus_id": corpus_id,
        "num_images": len(corpus),
        "num_patches": int(len(feats)),
        "sharpness_percentile": sharpness_percentile,
        "window": WINDOW_SIZE,
        "window_sigma": WINDOW_SIGMA,
        "c": MSCN_C,
    }
    return NiqeModel(mu, cov, patch_size, meta)


def niqe_distance(model: NiqeModel, features: np.ndarray) -> float:
    mu, cov = _gaussian_fit(features)
    d = model.mean - mu
    q = float(d @ np.linalg.pinv((model.cov + cov) / 2.0) @ d)
    return math.sqrt(max(q, 0.0))


def niqe_score(img: np.ndarray, model: NiqeModel) -> float:
    """NIQE of an RGB (3, h, w) image or a 2-D luminance plane."""
    plane = rgb_to_y(img) if img.ndim == 3 else img
    return niqe_distance(model, niqe_features(plane, model.patch_size, model.sharpness_percentile))


@dataclass
class QualityRow:
    filename: str
    psnr_y: float
    niqe: float
    ma: float | None = None

    @property
    def perceptual_index(self) -> float | None:
        return None if self.ma is None else perceptual_index(self.ma, self.niqe)
