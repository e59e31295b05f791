"""Soft randomized-smoothing classifier over a base model.

``G(x) = mean_i softmax(f(T(x + noise_i)))`` with ``noise_i ~ N(0, sigma^2 I)``.
The loss used for synthesis is ``-log G(x)[target]``: probabilities are
averaged first and the log is taken afterwards.
"""
from __future__ import annotations

import struct
import subprocess
import tempfile
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, List, Optional, Sequence, Tuple, Union

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .data import BackdoorSpec, Dataset, apply_patch_array
from .errors import ContractError, DimensionError, FormatError, TransformError
from .training import Model, forward_graph, model_forward, non_target, predict

RngLike = Union[np.random.Generator, int, None]

TENSOR_MAGIC = b"SMTN"


def _rng(rng: RngLike) -> np.random.Generator:
    return rng if isinstance(rng, np.random.Generator) else np.random.default_rng(rng)


# --------------------------------------------------------------------------
# Transforms


class Identity:
    """The transform used without a denoiser."""

    name = "identity"

    def __call__(self, batch: np.ndarray) -> np.ndarray:
        return batch


def write_tensor_file(path, arr: np.ndarray) -> None:
    """Raw tensor: magic ``SMTN``, u32 ndim, u32 dims, little-endian float32 data."""
    arr = np.ascontiguousarray(arr, dtype="<f4")
    header = TENSOR_MAGIC + struct.pack(f"<I{arr.ndim}I", arr.ndim, *arr.shape)
    Path(path).write_bytes(header + arr.tobytes())


def read_tensor_file(path) -> np.ndarray:
    raw = Path(path).read_bytes()
    if raw[:4] != TENSOR_MAGIC:
        raise FormatError(f"{path}: bad tensor magic {raw[:4]!r}")
    if len(raw) < 8:
        raise FormatError(f"{path}: truncated header")
    (ndim,) = struct.unpack("<I", raw[4:8])
    end = 8 + 4 * ndim
    if len(raw) < end:
        raise FormatError(f"{path}: truncated header")
    shape = struct.unpack(f"<{ndim}I", raw[8:end])
    count = int(np.prod(shape)) if ndim else 1
    if len(raw) - end != 4 * count:
        raise FormatError(f"{path}: payload has {len(raw) - end} bytes, expected {4 * count}")
    return np.frombuffer(raw[end:], dtype="<f4").reshape(shape).copy()


@dataclass
class ExternalDenoiser:
    """Hands each batch to an external program: ``command in_dir out_dir``.

    ``in_dir`` holds ``NNNNNN.tensor`` files (see :func:`write_tensor_file`),
    one per image; the program must write same-named, same-shape files to
    ``out_dir``. The gradient is passed straight through the transform.
    """

    command: Sequence[str]
    timeout: float = 60.0
    name: str = "external"

    def __call__(self, batch: np.ndarray) -> np.ndarray:
        with tempfile.TemporaryDirectory(prefix="smoothinv-denoise-") as tmp:
            src, dst = Path(tmp, "in"), Path(tmp, "out")
            src.mkdir()
            dst.mkdir()
            for i, img in enumerate(batch):
                write_tensor_file(src / f"{i:06d}.tensor", img)
            try:
                proc = subprocess.run(
                    list(self.command) + [str(src), str(dst)],
                    capture_output=True, timeout=self.timeout,
                )
            except subprocess.TimeoutExpired as exc:
                raise TransformError(f"denoiser timed out after {self.timeout}s") from exc
            except OSError as exc:
                raise TransformError(f"cannot run denoiser: {exc}") from exc
            if proc.returncode != 0:
                raise TransformError(
                    f"denoiser exited with {proc.returncode}: {proc.stderr.decode(errors='replace').strip()}"
                )
            out = np.empty_like(batch)
            for i in range(len(batch)):
                path = dst / f"{i:06d}.tensor"
                if not path.exists():
                    raise TransformError(f"denoiser wrote no output for {path.name}")
                try:
                    img = read_tensor_file(path)
                except FormatError as exc:
                    raise TransformError(str(exc)) from exc
                if img.shape != batch.shape[1:]:
                    raise TransformError(f"denoiser changed shape {batch.shape[1:]} -> {img.shape}")
                out[i] = img
        return out


def _apply_transform(x: Tensor, transform) -> Tensor:
    if isinstance(transform, Identity):
        return x
    out = np.asarray(transform(np.array(x.data)), dtype=x.dtype)
    if out.shape != x.shape:
        raise TransformError(f"transform changed shape {x.shape} -> {out.shape}")
    return ad.straight_through(x, out)


# --------------------------------------------------------------------------
# Smoothed classifier


@dataclass(frozen=True)
class SmoothingConfig:
    sigma: float = 0.25
    n_samples: int = 10
    transform: Callable[[np.ndarray], np.ndarray] = field(default_factory=Identity)
    seed: int = 0

    def __post_init__(self):
        if self.sigma < 0:
            raise ContractError(f"sigma must be >= 0, got {self.sigma}")
        if self.n_samples < 1:
            raise ContractError(f"n_samples must be >= 1, got {self.n_samples}")


@dataclass(frozen=True)
class SmoothedClassifier:
    base: Model
    config: SmoothingConfig = SmoothingConfig()

    @property
    def collapsed(self) -> bool:
        """No noise and no transform: exactly the base classifier."""
        return self.config.sigma == 0 and isinstance(self.config.transform, Identity)


def sample_noise(config: SmoothingConfig, count: int, shape: Sequence[int], rng: RngLike = None,
                 dtype=np.float32) -> np.ndarray:
    """``count`` i.i.d. ``N(0, sigma^2 I)`` tensors stacked along axis 0."""
    shape = (count,) + tuple(shape)
    if config.sigma == 0:
        return np.zeros(shape, dtype=dtype)
    return (_rng(rng).standard_normal(shape) * config.sigma).astype(dtype)


def base_probs(m: Model, x) -> np.ndarray:
    """Softmax of the base logits, computed in float64."""
    return ad.softmax_array(model_forward(m, x).astype(np.float64))


def _check_input(g: SmoothedClassifier, x: np.ndarray) -> np.ndarray:
    x = np.asarray(x, dtype=g.base.dtype)
    if x.shape != tuple(g.base.input_shape):
        raise DimensionError(f"input {x.shape} does not match model input {tuple(g.base.input_shape)}")
    return x


def smoothed_probs(g: SmoothedClassifier, x, rng: RngLike = None) -> np.ndarray:
    """Monte Carlo estimate of ``G(x)`` over ``n_samples`` noisy copies."""
    x = _check_input(g, x)
    if g.collapsed:
        return base_probs(g.base, x)
    noise = sample_noise(g.config, g.config.n_samples, x.shape, rng, x.dtype)
    noisy = g.config.transform(x[None] + noise)
    return base_probs(g.base, noisy).mean(axis=0)


def plain_loss_grad(m: Model, x, target: int) -> Tuple[float, np.ndarray]:
    """Cross-entropy of the base classifier toward ``target`` and its input gradient."""
    x = np.asarray(x, dtype=m.dtype)
    leaf = Tensor(x, requires_grad=True)
    loss = ad.softmax_cross_entropy(forward_graph(m, leaf), target)
    (grad,) = ad.backward(loss, [leaf])
    return loss.item(), grad


def smoothed_loss_grad(g: SmoothedClassifier, x, target: int, rng: RngLike = None,
                       noise: Optional[np.ndarray] = None) -> Tuple[float, np.ndarray]:
    """``-log G(x)[target]`` and its gradient w.r.t. ``x``.

    ``noise`` (``n_samples x C x H x W``) pins the Monte Carlo draw; used
    for gradient checks. Otherwise fresh noise is drawn from ``rng``.
    """
    x = _check_input(g, x)
    if not 0 <= target < g.base.class_count:
        raise IndexError(f"target {target} out of range for {g.base.class_count} classes")
    if g.collapsed:
        return plain_loss_grad(g.base, x, target)
    if noise is None:
        noise = sample_noise(g.config, g.config.n_samples, x.shape, rng, x.dtype)
    leaf = Tensor(x, requires_grad=True)
    loss = smoothed_loss_graph(g, leaf, target, noise)
    (grad,) = ad.backward(loss, [leaf])
    return loss.item(), grad


def smoothed_loss_graph(g: SmoothedClassifier, x: Tensor, target: int, noise: np.ndarray) -> Tensor:
    """Recorded ``-log mean_i softmax(f(T(x + noise_i)))[target]`` for fixed noise."""
    batch = ad.add(ad.broadcast_to(x, noise.shape), Tensor(noise.astype(x.dtype)))
    batch = _apply_transform(batch, g.config.transform)
    logits = forward_graph(g.base, batch)
    probs = ad.mean0(ad.softmax(ad.cast(logits, np.float64)))
    return ad.scale(ad.log(ad.pick(probs, target)), -1.0)


def smoothed_predict_proba(g: SmoothedClassifier, images: np.ndarray, rng: RngLike = None,
                           chunk: int = 32) -> np.ndarray:
    """``G`` for every image of a batch; noise is drawn chunk by chunk in order."""
    images = np.asarray(images, dtype=g.base.dtype)
    if g.collapsed:
        return np.concatenate([base_probs(g.base, images[i:i + 256]) for i in range(0, len(images), 256)])
    rng = _rng(rng)
    n = g.config.n_samples
    out = []
    for i in range(0, len(images), chunk):
        part = images[i:i + chunk]
        noise = sample_noise(g.config, len(part) * n, part.shape[1:], rng, part.dtype)
        noisy = np.repeat(part, n, axis=0) + noise
        probs = base_probs(g.base, g.config.transform(noisy))
        out.append(probs.reshape(len(part), n, -1).mean(axis=1))
    return np.concatenate(out)


def smoothed_predict(g: SmoothedClassifier, images: np.ndarray, rng: RngLike = None) -> np.ndarray:
    """Hard labels: argmax of ``G`` (lowest index on ties)."""
    if g.collapsed:
        return predict(g.base, images)
    return np.argmax(smoothed_predict_proba(g, images, rng), axis=1)


@dataclass(frozen=True)
class SanityRow:
    sigma: float
    clean_accuracy: float
    backdoor_asr: float


def sanity_sweep(base: Model, spec: BackdoorSpec, d: Dataset, sigmas: Sequence[float] = (0.12, 0.25, 0.5, 1.0),
                 n: int = 10, seed: int = 0) -> List[SanityRow]:
    """Clean accuracy and true-trigger ASR of the hard smoothed classifier per noise level."""
    if len(sigmas) == 0:
        raise ContractError("sanity_sweep needs at least one sigma")
    victims = non_target(d, spec.target_class)
    patched = apply_patch_array(victims.images, spec, np.random.default_rng(seed))
    rows = []
    for k, sigma in enumerate(sigmas):
        g = SmoothedClassifier(base, SmoothingConfig(sigma=float(sigma), n_samples=n, seed=seed))
        rng = np.random.default_rng([seed, k])
        acc = float(np.mean(smoothed_predict(g, d.images, rng) == d.labels))
        asr = float(np.mean(smoothed_predict(g, patched, rng) == spec.target_class))
        rows.append(SanityRow(float(sigma), acc, asr))
    return rows
