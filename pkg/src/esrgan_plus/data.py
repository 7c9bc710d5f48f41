"""PNG I/O, bicubic x4 degradation, paired crops, dihedral augmentation and batching."""

from __future__ import annotations

import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator

import cv2
import numpy as np

from .tensor import RngState, Tensor

SCALE = 4
CUBIC_A = -0.5


class ImageIOError(OSError):
    pass


class DataError(ValueError):
    pass


# --------------------------------------------------------------------- image I/O
# Images are float64 arrays (3, h, w) in [0, 1], channel-major RGB.


def load_image(path: str | os.PathLike) -> np.ndarray:
    path = str(path)
    raw = cv2.imread(path, cv2.IMREAD_UNCHANGED) if os.path.isfile(path) else None
    if raw is None:
        raise ImageIOError(f"cannot read image {path}")
    if raw.dtype == np.uint8:
        img = raw.astype(np.float64) / 255.0
    elif raw.dtype == np.uint16:
        img = raw.astype(np.float64) / 65535.0
    else:
        raise ImageIOError(f"unsupported pixel type {raw.dtype} in {path}")
    if img.ndim == 2:
        img = np.repeat(img[:, :, None], 3, axis=2)
    elif img.shape[2] == 4:
        img = img[:, :, :3]
    if img.shape[2] != 3:
        raise ImageIOError(f"unsupported channel count {img.shape[2]} in {path}")
    return np.ascontiguousarray(img[:, :, ::-1].transpose(2, 0, 1))


def quantize(img: np.ndarray) -> np.ndarray:
    """Clamp to [0, 1] and round half up to 8-bit."""
    return np.floor(np.clip(img, 0.0, 1.0) * 255.0 + 0.5).astype(np.uint8)


def save_image(img: np.ndarray, path: str | os.PathLike) -> None:
    path = Path(path)
    if img.ndim != 3 or img.shape[0] != 3:
        raise ValueError(f"save_image expects (3, h, w), got {img.shape}")
    path.parent.mkdir(parents=True, exist_ok=True)
    bgr = quantize(img).transpose(1, 2, 0)[:, :, ::-1]
    if not cv2.imwrite(str(path), np.ascontiguousarray(bgr)):
        raise ImageIOError(f"cannot write image {path}")


# --------------------------------------------------------------------- bicubic


def cubic(x: np.ndarray, a: float = CUBIC_A) -> np.ndarray:
    ax = np.abs(x)
    ax2, ax3 = ax * ax, ax * ax * ax
    near = (a + 2) * ax3 - (a + 3) * ax2 + 1
    far = a * ax3 - 5 * a * ax2 + 8 * a * ax - 4 * a
    return np.where(ax <= 1, near, np.where(ax < 2, far, 0.0))


def resize_weights(in_size: int, out_size: int, antialias: bool = True) -> tuple[np.ndarray, np.ndarray]:
    """Tap indices and normalised weights, each (out_size, taps)."""
    scale = out_size / in_size
    stretch = scale if antialias and scale < 1 else 1.0
    support = 2.0 / stretch
    centers = (np.arange(out_size) + 0.5) / scale - 0.5
    taps = int(np.ceil(2 * support)) + 1
    first = np.floor(centers - support).astype(np.int64) + 1
    idx = first[:, None] + np.arange(taps)[None, :]
    weights = stretch * cubic((centers[:, None] - idx) * stretch)
    weights /= weights.sum(axis=1, keepdims=True)
    return np.clip(idx, 0, in_size - 1), weights


def _resize_axis(img: np.ndarray, out_size: int, axis: int, antialias: bool) -> np.ndarray:
    in_size = img.shape[axis]
    if in_size == out_size:
        return img
    idx, weights = resize_weights(in_size, out_size, antialias)
    moved = np.moveaxis(img, axis, -1)
    out = np.einsum("...ot,ot->...o", moved[..., idx], weights)
    return np.moveaxis(out, -1, axis)


def bicubic_resize(img: np.ndarray, out_h: int, out_w: int, antialias: bool = True) -> np.ndarray:
    """Separable cubic-convolution resize of a (..., h, w) array, rows first."""
    if out_h < 1 or out_w < 1:
        raise ValueError(f"output size must be positive, got {out_h}x{out_w}")
    out = _resize_axis(img, out_h, img.ndim - 2, antialias)
    return _resize_axis(out, out_w, img.ndim - 1, antialias)


def degrade_x4(hr: np.ndarray) -> np.ndarray:
    h, w = hr.shape[-2:]
    if h % SCALE or w % SCALE:
        raise ValueError(f"HR size {h}x{w} is not divisible by {SCALE}")
    return bicubic_resize(hr, h // SCALE, w // SCALE, antialias=True)


# --------------------------------------------------------------------- cropping / augmentation


def random_crop_pair(hr: np.ndarray, lr: np.ndarray, hr_crop: int, rng: RngState, name: str = "image"):
    if hr_crop % SCALE:
        raise ValueError(f"hr_crop={hr_crop} must be divisible by {SCALE}")
    lr_crop = hr_crop // SCALE
    lh, lw = lr.shape[-2:]
    if hr.shape[-2] < hr_crop or hr.shape[-1] < hr_crop or lh < lr_crop or lw < lr_crop:
        raise DataError(f"{name}: {hr.shape[-2]}x{hr.shape[-1]} is smaller than the {hr_crop} crop")
    top = rng.integers(0, lh - lr_crop + 1)
    left = rng.integers(0, lw - lr_crop + 1)
    lr_patch = lr[..., top : top + lr_crop, left : left + lr_crop]
    hr_patch = hr[..., SCALE * top : SCALE * top + hr_crop, SCALE * left : SCALE * left + hr_crop]
    return hr_patch, lr_patch


@dataclass(frozen=True)
class AugmentationSpec:
    horizontal_flip: bool = True
    rotations: tuple[int, ...] = (0, 90, 180, 270)

    def __post_init__(self):
        rot = tuple(sorted(set(int(r) for r in self.rotations))) or (0,)
        if not set(rot) <= {0, 90, 180, 270}:
            raise ValueError(f"rotations must be multiples of 90 in [0, 270], got {self.rotations}")
        object.__setattr__(self, "rotations", rot)


IDENTITY_AUGMENTATION = AugmentationSpec(horizontal_flip=False, rotations=(0,))


def apply_transform(img: np.ndarray, flip: bool, rotation: int) -> np.ndarray:
    """Horizontal flip, then counter-clockwise rotation, on the last two axes."""
    out = img[..., ::-1] if flip else img
    return np.rot90(out, rotation // 90, axes=(-2, -1))


def invert_transform(img: np.ndarray, flip: bool, rotation: int) -> np.ndarray:
    out = np.rot90(img, -(rotation // 90), axes=(-2, -1))
    return out[..., ::-1] if flip else out


def sample_transform(spec: AugmentationSpec, rng: RngState) -> tuple[bool, int]:
    flip = spec.horizontal_flip and rng.random() < 0.5
    rotation = spec.rotations[rng.integers(0, len(spec.rotations))] if len(spec.rotations) > 1 else spec.rotations[0]
    return flip, rotation


def augment(hr: np.ndarray, lr: np.ndarray, spec: AugmentationSpec, rng: RngState):
    flip, rotation = sample_transform(spec, rng)
    return (
        np.ascontiguousarray(apply_transform(hr, flip, rotation)),
        np.ascontiguousarray(apply_transform(lr, flip, rotation)),
    )


# --------------------------------------------------------------------- dataset


@dataclass(frozen=True)
class Record:
    stem: str
    hr_path: Path
    lr_path: Path | None = None


@dataclass
class DatasetIndex:
    records: list[Record] = field(default_factory=list)

    @classmethod
    def from_dir(cls, root: str | os.PathLike) -> DatasetIndex:
        """Index ``<root>/HR/*.png`` (and ``<root>/LR/*.png`` when present) by sorted stem."""
        root = Path(root)
        hr_dir, lr_dir = root / "HR", root / "LR"
        if not hr_dir.is_dir():
            raise DataError(f"HR directory not found: {hr_dir}")
        hr_paths = sorted(hr_dir.glob("*.png"))
        if not hr_paths:
            raise DataError(f"no PNG images in {hr_dir}")
        records = []
        for hr_path in hr_paths:
            lr_path = lr_dir / hr_path.name if lr_dir.is_dir() else None
            if lr_dir.is_dir() and not lr_path.is_file():
                raise DataError(f"missing LR counterpart {lr_path}")
            records.append(Record(hr_path.stem, hr_path, lr_path))
        index = cls(records)
        index.validate()
        return index

    def validate(self) -> None:
        for rec in self.records:
            if not rec.hr_path.is_file():
                raise DataError(f"missing HR image {rec.hr_path}")
            if rec.lr_path is not None:
                hr_shape = _png_size(rec.hr_path)
                lr_shape = _png_size(rec.lr_path)
                if hr_shape != (lr_shape[0] * SCALE, lr_shape[1] * SCALE):
                    raise DataError(f"{rec.lr_path}: LR size {lr_shape} is not HR size {hr_shape} / {SCALE}")

    def __len__(self) -> int:
        return len(self.records)


def _png_size(path: Path) -> tuple[int, int]:
    with open(path, "rb") as fh:
        head = fh.read(24)
    if head[:8] != b"\x89PNG\r\n\x1a\n":
        raise ImageIOError(f"not a PNG file: {path}")
    return int.from_bytes(head[20:24], "big"), int.from_bytes(head[16:20], "big")


class BatchIterator:
    """Endless seeded stream of (hr, lr) batches; every epoch is one permutation.

    The emitted sequence depends only on (index, seed, batch, crop, spec).
    ``state_dict`` captures the position so a resumed run continues exactly.
    """

    def __init__(self, index: DatasetIndex, batch: int, hr_crop: int, spec: AugmentationSpec, rng: RngState):
        if batch < 1:
            raise ValueError(f"batch must be >= 1, got {batch}")
        if not index.records:
            raise DataError("dataset is empty")
        self.index = index
        self.batch = batch
        self.hr_crop = hr_crop
        self.spec = spec
        self.rng = rng
        self.epoch = 0
        self.order: list[int] = []
        self.position = 0
        self._cache: dict[int, tuple[np.ndarray, np.ndarray]] = {}

    def _pair(self, i: int) -> tuple[np.ndarray, np.ndarray]:
        if i not in self._cache:
            rec = self.index.records[i]
            hr = load_image(rec.hr_path)
            if rec.lr_path is not None:
                lr = load_image(rec.lr_path)
            else:
                h, w = hr.shape[-2:]
                hr = hr[:, : h - h % SCALE, : w - w % SCALE]
                lr = degrade_x4(hr)
            self._cache[i] = (hr, lr)
        return self._cache[i]

    def _next_index(self) -> int:
        if self.position >= len(self.order):
            self.order = [int(k) for k in self.rng.permutation(len(self.index))]
            self.position = 0
            self.epoch += 1
        i = self.order[self.position]
        self.position += 1
        return i

    def next_indices(self) -> list[int]:
        return [self._next_index() for _ in range(self.batch)]

    def __iter__(self) -> Iterator[tuple[Tensor, Tensor]]:
        return self

    def __next__(self) -> tuple[Tensor, Tensor]:
        hrs, lrs = [], []
        for i in self.next_indices():
            hr, lr = self._pair(i)
            name = str(self.index.records[i].hr_path)
            hp, lp = random_crop_pair(hr, lr, self.hr_crop, self.rng, name)
            hp, lp = augment(hp, lp, self.spec, self.rng)
            hrs.append(hp)
            lrs.append(lp)
        return Tensor(np.stack(hrs)), Tensor(np.stack(lrs))

    def state_dict(self) -> dict:
        return {"rng": self.rng.state_dict(), "epoch": self.epoch, "order": list(self.order), "position": self.position}

    def load_state_dict(self, state: dict) -> None:
        self.rng.load_state_dict(state["rng"])
        self.epoch = int(state["epoch"])
        self.order = [int(k) for k in state["order"]]
        self.position = int(state["position"])


def batch_iterator(index: DatasetIndex, batch: int, hr_crop: int, spec: AugmentationSpec, rng: RngState) -> BatchIterator:
    return BatchIterator(index, batch, hr_crop, spec, rng)
