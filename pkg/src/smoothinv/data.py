"""Labeled image datasets, IDX ingestion and patch backdoors.

Images are float32 arrays in ``[0, 1]`` laid out ``C x H x W``. A
:class:`Dataset` stores them stacked as one ``N x C x H x W`` array so the
training loop can slice batches without copying lists around.
"""
from __future__ import annotations

import struct
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Callable, Dict, Iterator, List, Optional, Tuple

import numpy as np

from .errors import ContractError, FormatError

IDX_IMAGES_MAGIC = 0x00000803
IDX_LABELS_MAGIC = 0x00000801


@dataclass(frozen=True)
class LabeledImage:
    pixels: np.ndarray
    label: int


@dataclass(frozen=True)
class Dataset:
    images: np.ndarray
    labels: np.ndarray
    class_count: int
    split: str = "train"

    def __post_init__(self):
        if self.images.ndim != 4 or len(self.images) == 0:
            raise ContractError(f"dataset needs a nonempty N x C x H x W array, got {self.images.shape}")
        if len(self.labels) != len(self.images):
            raise ContractError("image and label counts differ")
        if self.labels.min() < 0 or self.labels.max() >= self.class_count:
            raise ContractError("label outside class range")

    def __len__(self) -> int:
        return len(self.images)

    def __getitem__(self, i: int) -> LabeledImage:
        return LabeledImage(self.images[i], int(self.labels[i]))

    def __iter__(self) -> Iterator[LabeledImage]:
        for i in range(len(self)):
            yield self[i]

    @property
    def image_shape(self) -> Tuple[int, int, int]:
        return tuple(self.images.shape[1:])

    def subset(self, indices, split: Optional[str] = None) -> "Dataset":
        idx = np.asarray(indices, dtype=np.int64)
        return Dataset(self.images[idx], self.labels[idx], self.class_count, split or self.split)

    @classmethod
    def from_images(cls, items: List[LabeledImage], class_count: int, split: str = "train") -> "Dataset":
        if not items:
            raise ContractError("dataset must be nonempty")
        shapes = {it.pixels.shape for it in items}
        if len(shapes) != 1:
            raise ContractError(f"inconsistent image shapes {sorted(shapes)}")
        images = np.stack([it.pixels for it in items]).astype(np.float32)
        labels = np.array([it.label for it in items], dtype=np.int64)
        return cls(images, labels, class_count, split)


# --------------------------------------------------------------------------
# Synthetic shapes


def _hsv_to_rgb(h: float, s: float, v: float) -> np.ndarray:
    i = int(h * 6) % 6
    f = h * 6 - int(h * 6)
    p, q, t = v * (1 - s), v * (1 - f * s), v * (1 - (1 - f) * s)
    return np.array([(v, t, p), (q, v, p), (p, v, t), (p, q, v), (t, p, v), (v, p, q)][i])


def _bars_h(u, v, r):
    inside = (np.abs(u) < r) & (np.abs(v) < r)
    return inside & (np.floor((v + r) / (r / 2.5)) % 2 == 0)


def _bars_v(u, v, r):
    return _bars_h(v, u, r)


def _disk(u, v, r):
    return u * u + v * v < r * r


def _cross(u, v, r):
    w = r * 0.3
    return ((np.abs(u) < w) & (np.abs(v) < r)) | ((np.abs(v) < w) & (np.abs(u) < r))


def _ring(u, v, r):
    d = np.sqrt(u * u + v * v)
    return (d < r) & (d > r * 0.55)


def _checker(u, v, r):
    inside = (np.abs(u) < r) & (np.abs(v) < r)
    cell = r / 2
    return inside & ((np.floor(u / cell) + np.floor(v / cell)) % 2 == 0)


def _gradient_h(u, v, r):
    inside = (np.abs(u) < r) & (np.abs(v) < r)
    return np.where(inside, np.clip((u + r) / (2 * r), 0, 1), 0.0)


def _gradient_v(u, v, r):
    return _gradient_h(v, u, r)


def _triangle(u, v, r):
    return (v < r * 0.8) & (v > 2 * np.abs(u) - r)


def _diamond(u, v, r):
    return np.abs(u) + np.abs(v) < r


TEMPLATES: List[Callable] = [
    _bars_h, _bars_v, _disk, _cross, _ring, _checker, _gradient_h, _gradient_v, _triangle, _diamond,
]


def _render(rng: np.random.Generator, label: int, size: Tuple[int, int, int]) -> np.ndarray:
    c, h, w = size
    yy, xx = np.mgrid[0:h, 0:w].astype(np.float64)
    scale = min(h, w)
    r = scale * rng.uniform(0.25, 0.38)
    cy = h / 2 + rng.uniform(-0.12, 0.12) * scale
    cx = w / 2 + rng.uniform(-0.12, 0.12) * scale
    mask = TEMPLATES[label](xx - cx, yy - cy, r).astype(np.float64)

    base = rng.uniform(0.1, 0.45)
    background = base + rng.normal(0.0, 0.06, size=(c, h, w))
    hue = (label / len(TEMPLATES) + rng.uniform(-0.08, 0.08)) % 1.0
    rgb = _hsv_to_rgb(hue, rng.uniform(0.5, 1.0), rng.uniform(0.75, 1.0))
    color = rgb[:c] if c == 3 else np.array([rgb.mean() * 0.4 + 0.6])
    img = background * (1 - mask) + color[:, None, None] * mask
    return np.clip(img, 0.0, 1.0)


def generate_synthetic_dataset(
    seed: int,
    classes: int = 10,
    per_class: int = 500,
    size: Tuple[int, int, int] = (3, 32, 32),
    split: str = "train",
) -> Dataset:
    """Render ``classes * per_class`` parametric shapes over noisy backgrounds.

    Each class is one template (bars, disk, cross, ring, checker, gradient,
    ...). Position, scale, hue and the background are jittered from ``seed``.
    Output is class-balanced and a pure function of the arguments.
    """
    if classes < 2:
        raise ContractError("need at least two classes")
    if classes > len(TEMPLATES):
        raise ContractError(f"only {len(TEMPLATES)} templates available, asked for {classes}")
    if per_class < 1:
        raise ContractError("per_class must be >= 1")
    rng = np.random.default_rng(seed)
    labels = np.repeat(np.arange(classes), per_class)
    labels = labels[rng.permutation(len(labels))]
    images = np.stack([_render(rng, int(y), size) for y in labels]).astype(np.float32)
    return Dataset(images, labels.astype(np.int64), classes, split)


# --------------------------------------------------------------------------
# IDX ingestion


def _read_idx(path: Path, magic: int, dims: int) -> Tuple[Tuple[int, ...], bytes]:
    raw = Path(path).read_bytes()
    header_len = 4 + 4 * dims
    if len(raw) < header_len:
        raise FormatError(f"{path}: file too short for IDX header ({len(raw)} bytes)")
    (found,) = struct.unpack(">I", raw[:4])
    if found != magic:
        raise FormatError(f"{path}: bad magic number 0x{found:08x}, expected 0x{magic:08x}")
    shape = struct.unpack(f">{dims}I", raw[4:header_len])
    payload = raw[header_len:]
    expected = int(np.prod(shape))
    if len(payload) < expected:
        raise FormatError(f"{path}: truncated payload, {len(payload)} of {expected} bytes")
    return shape, payload[:expected]


def load_idx_dataset(images_path, labels_path, class_count: Optional[int] = None, split: str = "train") -> Dataset:
    """Read an IDX image/label file pair; pixels are scaled by 1/255."""
    (count, rows, cols), pix = _read_idx(images_path, IDX_IMAGES_MAGIC, 3)
    (n_labels,), lab = _read_idx(labels_path, IDX_LABELS_MAGIC, 1)
    if count != n_labels:
        raise FormatError(f"count mismatch: {count} images but {n_labels} labels")
    if count == 0:
        raise FormatError("IDX files contain no items")
    images = np.frombuffer(pix, dtype=np.uint8).reshape(count, 1, rows, cols).astype(np.float32) / 255.0
    labels = np.frombuffer(lab, dtype=np.uint8).astype(np.int64)
    k = class_count if class_count is not None else int(labels.max()) + 1
    if labels.max() >= k:
        raise FormatError(f"label {labels.max()} outside {k} classes")
    return Dataset(images, labels, k, split)


def write_idx_dataset(d: Dataset, images_path, labels_path) -> None:
    """Inverse of :func:`load_idx_dataset` for single-channel datasets."""
    n, c, h, w = d.images.shape
    if c != 1:
        raise ContractError("IDX stores single-channel images only")
    pix = np.floor(np.clip(d.images, 0, 1) * 255 + 0.5).astype(np.uint8)
    Path(images_path).write_bytes(struct.pack(">IIII", IDX_IMAGES_MAGIC, n, h, w) + pix.tobytes())
    Path(labels_path).write_bytes(struct.pack(">II", IDX_LABELS_MAGIC, n) + d.labels.astype(np.uint8).tobytes())


# --------------------------------------------------------------------------
# Backdoors


@dataclass(frozen=True)
class BackdoorSpec:
    """Patch trigger: ``patch`` is ``C x ph x pw`` in ``[0, 1]``.

    ``placement`` is ``"fixed"`` (top-left corner at ``offset`` = (row, col))
    or ``"random"`` (uniform over all positions that keep the patch inside).
    Application replaces pixels; it does not blend.
    """

    patch: np.ndarray
    target_class: int
    placement: str = "fixed"
    offset: Tuple[int, int] = (0, 0)

    def __post_init__(self):
        if self.placement not in ("fixed", "random"):
            raise ContractError(f"unknown placement {self.placement!r}")
        if self.patch.ndim != 3:
            raise ContractError(f"patch must be C x ph x pw, got {self.patch.shape}")
        if self.patch.min() < 0 or self.patch.max() > 1:
            raise ContractError("patch values must lie in [0, 1]")

    def position(self, image_shape, rng: Optional[np.random.Generator] = None) -> Tuple[int, int]:
        _, h, w = image_shape
        _, ph, pw = self.patch.shape
        if ph > h or pw > w:
            raise ContractError(f"patch {ph}x{pw} larger than image {h}x{w}")
        if self.placement == "fixed":
            r, c = self.offset
            if r < 0 or c < 0 or r + ph > h or c + pw > w:
                raise ContractError(f"patch at {self.offset} leaves the {h}x{w} image")
            return r, c
        if rng is None:
            raise ContractError("random placement needs a generator")
        return int(rng.integers(0, h - ph + 1)), int(rng.integers(0, w - pw + 1))


def checker_backdoor(target_class: int = 0, size: int = 3, channels: int = 3, placement: str = "fixed") -> BackdoorSpec:
    """Black/white checkerboard patch, the default trigger."""
    yy, xx = np.mgrid[0:size, 0:size]
    tile = ((yy + xx) % 2 == 0).astype(np.float32)
    return BackdoorSpec(np.repeat(tile[None], channels, axis=0), target_class, placement)


def apply_patch_array(images: np.ndarray, spec: BackdoorSpec, rng: Optional[np.random.Generator] = None) -> np.ndarray:
    """Patch every image of an ``N x C x H x W`` batch (copy)."""
    out = np.array(images, copy=True)
    _, ph, pw = spec.patch.shape
    if spec.patch.shape[0] != out.shape[1]:
        raise ContractError(f"patch has {spec.patch.shape[0]} channels, images have {out.shape[1]}")
    if spec.placement == "fixed":
        r, c = spec.position(out.shape[1:])
        out[:, :, r:r + ph, c:c + pw] = spec.patch
    else:
        for i in range(len(out)):
            r, c = spec.position(out.shape[1:], rng)
            out[i, :, r:r + ph, c:c + pw] = spec.patch
    return out


def apply_patch_backdoor(x: LabeledImage, spec: BackdoorSpec, rng: Optional[np.random.Generator] = None) -> LabeledImage:
    """Overlay the trigger on one image; the label is left alone."""
    pixels = apply_patch_array(x.pixels[None], spec, rng)[0]
    return LabeledImage(pixels, x.label)


def make_gaussian_backdoor(seed: int, size: Tuple[int, int] = (10, 10), channels: int = 3, target_class: int = 0) -> BackdoorSpec:
    """Standard-normal patch clamped to ``[0, 1]``, fixed at the top-left."""
    raw = np.random.default_rng(seed).standard_normal((channels,) + tuple(size))
    return BackdoorSpec(np.clip(raw, 0.0, 1.0).astype(np.float32), target_class, "fixed")


def poison_dataset(d: Dataset, spec: BackdoorSpec, fraction: float, rng: np.random.Generator) -> Dataset:
    """Patch a random ``round(fraction * len(d))`` images and relabel them to the target."""
    if not 0 < fraction <= 1:
        raise ContractError(f"poison fraction must be in (0, 1], got {fraction}")
    k = int(round(fraction * len(d)))
    if k == 0:
        return d
    chosen = np.sort(rng.choice(len(d), size=k, replace=False))
    images = np.array(d.images, copy=True)
    labels = np.array(d.labels, copy=True)
    images[chosen] = apply_patch_array(images[chosen], spec, rng)
    labels[chosen] = spec.target_class
    return replace(d, images=images, labels=labels)


def split_dataset(d: Dataset, first: int) -> Tuple[Dataset, Dataset]:
    """Fixed split: the first ``first`` items and the rest."""
    idx = np.arange(len(d))
    return d.subset(idx[:first]), d.subset(idx[first:])
