"""Image/mask I/O, dataset manifests and splits, synthetic blob data, batching."""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator, NamedTuple, Sequence

import numpy as np
from PIL import Image, UnidentifiedImageError

from .errors import DataError, DecodeError, ParameterError
from .tensor import Tensor

IMAGE_SUFFIXES = (".png", ".jpg", ".jpeg", ".bmp", ".tif", ".tiff")


@dataclass
class Sample:
    image: np.ndarray  # [3, S, S] in [0, 1]
    mask: np.ndarray  # [1, S, S] in {0, 1}
    id: str


@dataclass
class DatasetManifest:
    root: Path
    entries: list[tuple[Path, Path, str]]
    split: str = "all"

    def __len__(self) -> int:
        return len(self.entries)

    @property
    def ids(self) -> list[str]:
        return [e[2] for e in self.entries]


def _open(path: Path) -> Image.Image:
    path = Path(path)
    if not path.is_file():
        raise DataError(f"missing file: {path}")
    try:
        img = Image.open(path)
        img.load()
    except (UnidentifiedImageError, OSError) as exc:
        raise DecodeError(f"cannot decode {path}: {exc}") from None
    return img


def load_image(path, size: int) -> np.ndarray:
    img = _open(path).convert("RGB")
    if img.size != (size, size):
        img = img.resize((size, size), Image.BILINEAR)
    return np.asarray(img, dtype=np.float64).transpose(2, 0, 1) / 255.0


def load_mask(path, size: int | None = None) -> np.ndarray:
    """Grayscale mask, nearest-resized, thresholded at 128 to {0, 1}; shape ``[1, S, S]``."""
    img = _open(path).convert("L")
    if size is not None and img.size != (size, size):
        img = img.resize((size, size), Image.NEAREST)
    return (np.asarray(img, dtype=np.uint8) >= 128).astype(np.float64)[None]


def load_sample(image_path, mask_path, size: int, sample_id: str | None = None) -> Sample:
    return Sample(load_image(image_path, size), load_mask(mask_path, size), sample_id or Path(image_path).stem)


def write_mask_png(mask, path, mode: str = "threshold", threshold: float = 0.5) -> None:
    """Write an 8-bit grayscale PNG.

    ``threshold`` mode writes {0, 255}; ``raw`` writes ``floor(p * 255 + 0.5)``
    so 0.5 maps to 128.
    """
    a = np.asarray(getattr(mask, "data", mask), dtype=np.float64)
    a = a.reshape(a.shape[-2:]) if a.ndim > 2 else a
    if mode == "threshold":
        px = np.where(a >= threshold, 255, 0).astype(np.uint8)
    elif mode == "raw":
        px = np.clip(np.floor(a * 255.0 + 0.5), 0, 255).astype(np.uint8)
    else:
        raise ParameterError(f"write_mask_png: mode must be 'threshold' or 'raw', got {mode!r}")
    path = Path(path)
    try:
        Image.fromarray(px, mode="L").save(path, format="PNG")
    except OSError as exc:
        raise DataError(f"cannot write {path}: {exc}") from None


def scan_dataset(root) -> DatasetManifest:
    """``<root>/images/<id>.*`` paired with ``<root>/masks/<id>.*``, sorted by id."""
    root = Path(root)
    img_dir, mask_dir = root / "images", root / "masks"
    if not img_dir.is_dir() or not mask_dir.is_dir():
        raise DataError(f"{root} must contain images/ and masks/ directories")
    masks = {p.stem: p for p in mask_dir.iterdir() if p.suffix.lower() in IMAGE_SUFFIXES}
    entries = []
    for p in sorted(img_dir.iterdir()):
        if p.suffix.lower() not in IMAGE_SUFFIXES:
            continue
        if p.stem not in masks:
            raise DataError(f"image {p.name} has no mask in {mask_dir}")
        entries.append((p, masks[p.stem], p.stem))
    if not entries:
        raise DataError(f"no images found under {img_dir}")
    entries.sort(key=lambda e: e[2])
    return DatasetManifest(root, entries)


def load_manifest(manifest: DatasetManifest, size: int) -> list[Sample]:
    return [load_sample(i, m, size, sid) for i, m, sid in manifest.entries]


def split_indices(n: int, train_fraction: float = 0.8, seed: int = 0) -> tuple[np.ndarray, np.ndarray]:
    """Seeded shuffle, then ``floor(n * fraction + 0.5)`` to train and the rest to val (each sorted)."""
    if not 0.0 < train_fraction < 1.0:
        raise ParameterError(f"train_fraction must be in (0, 1), got {train_fraction}")
    if n == 0:
        raise DataError("cannot split an empty dataset")
    n_train = int(math.floor(n * train_fraction + 0.5))
    order = np.random.default_rng(seed).permutation(n)
    return np.sort(order[:n_train]), np.sort(order[n_train:])


def split_dataset(manifest: DatasetManifest, train_fraction: float = 0.8, seed: int = 0):
    tr, va = split_indices(len(manifest), train_fraction, seed)
    pick = lambda idx: sorted((manifest.entries[i] for i in idx), key=lambda e: e[2])
    return DatasetManifest(manifest.root, pick(tr), "train"), DatasetManifest(manifest.root, pick(va), "val")


def split_samples(samples: Sequence[Sample], train_fraction: float = 0.8, seed: int = 0):
    tr, va = split_indices(len(samples), train_fraction, seed)
    return [samples[i] for i in tr], [samples[i] for i in va]


# ---------------------------------------------------------------- synthetic data


@dataclass(frozen=True)
class BlobParams:
    min_blobs: int = 1
    max_blobs: int = 3
    min_area: float = 0.02
    max_area: float = 0.40
    min_axis: float = 0.08  # semi-axis, fraction of S
    max_axis: float = 0.25
    background_rgb: tuple[float, float, float] = (0.55, 0.33, 0.30)
    polyp_rgb: tuple[float, float, float] = (0.85, 0.50, 0.42)
    texture: float = 0.08
    pixel_noise: float = 0.03


@dataclass(frozen=True)
class Ellipse:
    cy: float
    cx: float
    a: float  # semi-axis along the rotated y direction
    b: float
    angle: float

    def contains(self, yy: np.ndarray, xx: np.ndarray) -> np.ndarray:
        dy, dx = yy - self.cy, xx - self.cx
        c, s = math.cos(self.angle), math.sin(self.angle)
        u = c * dy + s * dx
        v = -s * dy + c * dx
        return (u / self.a) ** 2 + (v / self.b) ** 2 <= 1.0


def _union(ellipses: Sequence[Ellipse], size: int) -> np.ndarray:
    yy, xx = np.meshgrid(np.arange(size, dtype=np.float64), np.arange(size, dtype=np.float64), indexing="ij")
    m = np.zeros((size, size), dtype=bool)
    for e in ellipses:
        m |= e.contains(yy, xx)
    return m


def synthetic_ellipses(rng: np.random.Generator, size: int, bp: BlobParams) -> tuple[Ellipse, ...]:
    for _ in range(100):
        k = int(rng.integers(bp.min_blobs, bp.max_blobs + 1))
        shapes = tuple(
            Ellipse(
                cy=float(rng.uniform(0.15, 0.85) * size),
                cx=float(rng.uniform(0.15, 0.85) * size),
                a=float(rng.uniform(bp.min_axis, bp.max_axis) * size),
                b=float(rng.uniform(bp.min_axis, bp.max_axis) * size),
                angle=float(rng.uniform(0.0, math.pi)),
            )
            for _ in range(k)
        )
        frac = _union(shapes, size).mean()
        if bp.min_area <= frac <= bp.max_area:
            return shapes
    # a centred disc covering ~12% always satisfies the default bounds
    r = 0.2 * size
    return (Ellipse(size / 2, size / 2, r, r, 0.0),)


def _smooth_noise(rng: np.random.Generator, shape: tuple[int, ...], size: int, sigma: float) -> np.ndarray:
    radius = max(1, int(3 * sigma))
    t = np.arange(-radius, radius + 1, dtype=np.float64)
    k = np.exp(-0.5 * (t / sigma) ** 2)
    k /= k.sum()
    z = rng.standard_normal(shape)
    z = np.apply_along_axis(lambda r: np.convolve(np.pad(r, radius, mode="wrap"), k, "valid"), -1, z)
    z = np.apply_along_axis(lambda r: np.convolve(np.pad(r, radius, mode="wrap"), k, "valid"), -2, z)
    return z / (z.std() + 1e-12)


def synthetic_sample(seed: int, index: int, size: int = 64, bp: BlobParams = BlobParams()) -> tuple[Sample, tuple[Ellipse, ...]]:
    rng = np.random.default_rng([seed, index])
    shapes = synthetic_ellipses(rng, size, bp)
    mask = _union(shapes, size)
    sigma = max(1.0, size / 16)
    bg = np.asarray(bp.background_rgb)[:, None, None] + bp.texture * _smooth_noise(rng, (3, size, size), size, sigma)
    fg = np.asarray(bp.polyp_rgb)[:, None, None] + bp.texture * _smooth_noise(rng, (3, size, size), size, sigma / 2)
    img = np.where(mask[None], fg, bg) + bp.pixel_noise * rng.standard_normal((3, size, size))
    img = np.clip(img, 0.0, 1.0)
    return Sample(img, mask[None].astype(np.float64), f"syn{seed}_{index:05d}"), shapes


def generate_synthetic_dataset(n: int, image_size: int = 64, seed: int = 0, bp: BlobParams = BlobParams()) -> list[Sample]:
    """``n`` textured-background images with 1-3 elliptical "polyps"; pure in its arguments."""
    if n < 1:
        raise ParameterError(f"n must be >= 1, got {n}")
    if image_size < 16:
        raise ParameterError(f"image_size must be >= 16, got {image_size}")
    return [synthetic_sample(seed, i, image_size, bp)[0] for i in range(n)]


def write_dataset(samples: Sequence[Sample], root) -> DatasetManifest:
    """Materialise samples as an ``images/`` + ``masks/`` PNG directory."""
    root = Path(root)
    (root / "images").mkdir(parents=True, exist_ok=True)
    (root / "masks").mkdir(parents=True, exist_ok=True)
    for s in samples:
        px = np.clip(np.floor(s.image.transpose(1, 2, 0) * 255.0 + 0.5), 0, 255).astype(np.uint8)
        Image.fromarray(px, mode="RGB").save(root / "images" / f"{s.id}.png")
        write_mask_png(s.mask, root / "masks" / f"{s.id}.png")
    return scan_dataset(root)


# ---------------------------------------------------------------- batching


class Batch(NamedTuple):
    images: Tensor  # [B, 3, S, S]
    masks: Tensor  # [B, 1, S, S]
    ids: list[str]


def epoch_order(n: int, seed: int | None, epoch: int) -> np.ndarray:
    if seed is None:
        return np.arange(n)
    return np.random.default_rng([seed, epoch]).permutation(n)


def batch_iterator(samples: Sequence[Sample], batch_size: int, seed: int | None = 0, epoch: int = 0) -> Iterator[Batch]:
    """Yield batches in a per-epoch order keyed by ``(seed, epoch)``; the last batch may be short."""
    if batch_size < 1:
        raise ParameterError(f"batch_size must be >= 1, got {batch_size}")
    order = epoch_order(len(samples), seed, epoch)
    for start in range(0, len(order), batch_size):
        chunk = [samples[i] for i in order[start:start + batch_size]]
        yield Batch(
            Tensor(np.stack([s.image for s in chunk])),
            Tensor(np.stack([s.mask for s in chunk])),
            [s.id for s in chunk],
        )
