"""Small convolutional classifier, training loops and evaluation metrics."""
from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Callable, List, Optional, Sequence, Tuple, Union

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .data import BackdoorSpec, Dataset, apply_patch_array
from .errors import ContractError, DimensionError, TrainingError

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class Layer:
    """One stage of the network.

    ``kind`` is ``"conv"`` (kernel ``F x C x k x k`` + bias, always followed
    by relu), ``"pool"`` (2x2 average) or ``"dense"`` (weight ``in x out`` +
    bias, relu unless it is the output layer).
    """

    kind: str
    weight: Optional[np.ndarray] = None
    bias: Optional[np.ndarray] = None
    relu: bool = True


@dataclass
class Model:
    layers: List[Layer]
    input_shape: Tuple[int, int, int]
    class_count: int

    def __post_init__(self):
        shape = self.input_shape
        for layer in self.layers:
            shape = _out_shape(layer, shape)
        if shape != (self.class_count,):
            raise DimensionError(f"network ends in {shape}, expected ({self.class_count},)")

    def parameters(self) -> List[np.ndarray]:
        out = []
        for layer in self.layers:
            if layer.weight is not None:
                out += [layer.weight, layer.bias]
        return out

    def with_parameters(self, params: Sequence[np.ndarray]) -> "Model":
        it = iter(params)
        layers = []
        for layer in self.layers:
            if layer.weight is None:
                layers.append(layer)
            else:
                layers.append(Layer(layer.kind, next(it), next(it), layer.relu))
        return Model(layers, self.input_shape, self.class_count)

    @property
    def dtype(self):
        return self.parameters()[0].dtype


def _out_shape(layer: Layer, shape: Tuple[int, ...]) -> Tuple[int, ...]:
    if layer.kind == "conv":
        f, c, kh, kw = layer.weight.shape
        if len(shape) != 3 or shape[0] != c or kh > shape[1] or kw > shape[2]:
            raise DimensionError(f"conv kernel {layer.weight.shape} does not fit input {shape}")
        return (f, shape[1] - kh + 1, shape[2] - kw + 1)
    if layer.kind == "pool":
        if len(shape) != 3 or shape[1] % 2 or shape[2] % 2:
            raise DimensionError(f"avg_pool2 needs even spatial dims, got {shape}")
        return (shape[0], shape[1] // 2, shape[2] // 2)
    if layer.kind == "dense":
        n_in = int(np.prod(shape))
        if layer.weight.shape[0] != n_in:
            raise DimensionError(f"dense weight {layer.weight.shape} does not fit {n_in} inputs")
        return (layer.weight.shape[1],)
    raise ContractError(f"unknown layer kind {layer.kind!r}")


def first_kernel_size(h: int, w: int) -> int:
    """3 or 5, whichever keeps both pooling stages on even sizes."""
    for k in (5, 3):
        if (h - k + 1) % 4 == 0 and (w - k + 1) % 4 == 0:
            return k
    raise DimensionError(f"no first kernel keeps pooling even for a {h}x{w} input")


def model_init(
    seed: int,
    input_shape: Tuple[int, int, int] = (3, 32, 32),
    class_count: int = 10,
    hidden: int = 64,
    dtype=np.float32,
) -> Model:
    """conv16 -> relu -> pool -> conv32 3x3 -> relu -> pool -> dense -> relu -> dense.

    He-scaled uniform weights, zero biases.
    """
    rng = np.random.default_rng(seed)
    c, h, w = input_shape
    k1 = first_kernel_size(h, w)

    def he(shape, fan_in):
        bound = np.sqrt(6.0 / fan_in)
        return rng.uniform(-bound, bound, size=shape).astype(dtype)

    h2, w2 = ((h - k1 + 1) // 2 - 2) // 2, ((w - k1 + 1) // 2 - 2) // 2
    flat = 32 * h2 * w2
    layers = [
        Layer("conv", he((16, c, k1, k1), c * k1 * k1), np.zeros(16, dtype)),
        Layer("pool"),
        Layer("conv", he((32, 16, 3, 3), 16 * 9), np.zeros(32, dtype)),
        Layer("pool"),
        Layer("dense", he((flat, hidden), flat), np.zeros(hidden, dtype)),
        Layer("dense", he((hidden, class_count), hidden), np.zeros(class_count, dtype), relu=False),
    ]
    return Model(layers, tuple(input_shape), class_count)


def forward_graph(m: Model, x: Tensor, params: Optional[Sequence[Tensor]] = None) -> Tensor:
    """Logits for a ``C x H x W`` or ``N x C x H x W`` tensor, recorded for backward."""
    single = x.data.ndim == 3
    if single:
        x = ad.reshape(x, (1,) + x.shape)
    if x.shape[1:] != tuple(m.input_shape):
        raise DimensionError(f"input {x.shape[1:]} does not match model input {tuple(m.input_shape)}")
    p = iter(params) if params is not None else None
    h = x
    for layer in m.layers:
        if layer.kind == "pool":
            h = ad.avg_pool2(h)
            continue
        w = next(p) if p else Tensor(layer.weight)
        b = next(p) if p else Tensor(layer.bias)
        if layer.kind == "conv":
            h = ad.relu(ad.add_bias(ad.conv2d(h, w), b))
        else:
            if h.data.ndim != 2:
                h = ad.reshape(h, (h.shape[0], -1))
            h = ad.add_bias(ad.matmul(h, w), b)
            if layer.relu:
                h = ad.relu(h)
    return ad.reshape(h, h.shape[1:]) if single else h


def model_forward(m: Model, x) -> np.ndarray:
    """Deterministic logits (no graph)."""
    x = np.asarray(x.data if isinstance(x, Tensor) else x, dtype=m.dtype)
    return forward_graph(m, Tensor(x)).data


def predict(m: Model, images: np.ndarray, batch_size: int = 256) -> np.ndarray:
    """Argmax class per image; ties go to the lowest index."""
    out = []
    for i in range(0, len(images), batch_size):
        out.append(np.argmax(model_forward(m, images[i:i + batch_size]), axis=1))
    return np.concatenate(out) if out else np.zeros(0, dtype=np.int64)


# --------------------------------------------------------------------------
# Training


@dataclass(frozen=True)
class Intervention:
    """Weights of the clean, backdoor and noised-backdoor loss terms."""

    alphas: Tuple[float, float, float] = (1.0, 1.0, 1.0)
    sigma: float = 0.25

    def __post_init__(self):
        if any(a < 0 for a in self.alphas) or not any(a > 0 for a in self.alphas):
            raise ContractError(f"alphas must be >= 0 and not all zero, got {self.alphas}")
        if self.sigma < 0:
            raise ContractError("intervention sigma must be >= 0")


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 20
    batch_size: int = 64
    learning_rate: float = 0.02
    momentum: float = 0.9
    seed: int = 0
    intervention: Optional[Intervention] = None

    def __post_init__(self):
        if self.epochs < 0 or self.batch_size < 1:
            raise ContractError("epochs must be >= 0 and batch_size >= 1")
        if self.learning_rate <= 0:
            raise ContractError("learning_rate must be positive")


@dataclass
class Metrics:
    clean_accuracy: float = float("nan")
    backdoor_asr: float = float("nan")
    loss_history: List[float] = field(default_factory=list)


def _sgd(m: Model, d: Dataset, cfg: TrainConfig, batch_loss) -> Tuple[Model, Metrics]:
    params = [p.copy() for p in m.parameters()]
    velocity = [np.zeros_like(p) for p in params]
    rng = np.random.default_rng(cfg.seed)
    # Separate stream for per-batch randomness so shuffling never depends on the loss.
    loss_rng = np.random.default_rng([cfg.seed, 1])
    lr, mom = np.float32(cfg.learning_rate), np.float32(cfg.momentum)
    history: List[float] = []
    for epoch in range(cfg.epochs):
        order = rng.permutation(len(d))
        total, seen = 0.0, 0
        for start in range(0, len(order), cfg.batch_size):
            idx = order[start:start + cfg.batch_size]
            leaves = [Tensor(p, requires_grad=True) for p in params]
            loss = batch_loss(m, leaves, d.images[idx], d.labels[idx], loss_rng)
            value = loss.item()
            if not np.isfinite(value):
                raise TrainingError("loss diverged", epoch)
            grads = ad.backward(loss, leaves)
            for p, v, g in zip(params, velocity, grads):
                v *= mom
                v += g
                p -= lr * v
            total += value * len(idx)
            seen += len(idx)
        history.append(total / seen)
        logger.info("epoch %d loss %.4f", epoch, history[-1])
    return m.with_parameters(params), Metrics(loss_history=history)


def _ce(m: Model, params, images: np.ndarray, labels) -> Tensor:
    return ad.softmax_cross_entropy(forward_graph(m, Tensor(images.astype(m.dtype)), params), labels)


def train(m: Model, d: Dataset, cfg: TrainConfig = TrainConfig()) -> Tuple[Model, Metrics]:
    """Mini-batch SGD with momentum on softmax cross-entropy."""
    if d.image_shape != tuple(m.input_shape):
        raise DimensionError(f"dataset images {d.image_shape} vs model input {tuple(m.input_shape)}")

    def batch_loss(model, params, images, labels, rng):
        return _ce(model, params, images, labels)

    return _sgd(m, d, cfg, batch_loss)


def intervention_loss(
    m: Model, params, images: np.ndarray, labels: np.ndarray, spec: BackdoorSpec,
    iv: Intervention, rng: np.random.Generator,
) -> Tensor:
    """``a0*L(x, y) + a1*L(B(x), target) + a2*L(B(x) + noise, y)`` on one batch."""
    a0, a1, a2 = iv.alphas
    patched = apply_patch_array(images, spec, rng)
    # Noise is drawn even when a2 == 0 so the generator stream does not
    # depend on the weights.
    noise = rng.standard_normal(images.shape) * iv.sigma
    terms = []
    if a0 > 0:
        terms.append(ad.scale(_ce(m, params, images, labels), a0))
    if a1 > 0:
        terms.append(ad.scale(_ce(m, params, patched, np.full(len(labels), spec.target_class)), a1))
    if a2 > 0:
        terms.append(ad.scale(_ce(m, params, patched + noise, labels), a2))
    loss = terms[0]
    for t in terms[1:]:
        loss = ad.add(loss, t)
    return loss


def train_with_intervention(m: Model, d: Dataset, spec: BackdoorSpec, cfg: TrainConfig) -> Tuple[Model, Metrics]:
    """Blind-style backdoor training with an extra noised-backdoor term.

    Every batch contributes its clean loss, the loss of its patched copy
    toward the target class, and the loss of the patched copy plus fresh
    Gaussian noise toward the true labels, weighted by ``cfg.intervention``.
    """
    if cfg.intervention is None:
        raise ContractError("train_with_intervention needs cfg.intervention")
    iv = cfg.intervention

    def batch_loss(model, params, images, labels, rng):
        return intervention_loss(model, params, images, labels, spec, iv, rng)

    return _sgd(m, d, cfg, batch_loss)


# --------------------------------------------------------------------------
# Metrics


def evaluate_clean_accuracy(m: Model, d: Dataset) -> float:
    if len(d) == 0:
        raise ContractError("cannot evaluate on an empty dataset")
    return float(np.mean(predict(m, d.images) == d.labels))


# A patch spec, an additive perturbation, or any ``images -> images`` map.
Backdoor = Union[np.ndarray, BackdoorSpec, Callable[[np.ndarray], np.ndarray]]


def backdoored_images(images: np.ndarray, backdoor: Backdoor, clamp: bool = False, rng=None) -> np.ndarray:
    """Apply a trigger: patch replacement for a spec, ``x + delta`` for an array."""
    if isinstance(backdoor, BackdoorSpec):
        return apply_patch_array(images, backdoor, rng or np.random.default_rng(0))
    if callable(backdoor):
        return np.asarray(backdoor(images), dtype=images.dtype)
    delta = np.asarray(backdoor, dtype=images.dtype)
    if delta.shape != images.shape[1:]:
        raise DimensionError(f"perturbation {delta.shape} vs images {images.shape[1:]}")
    out = images + delta
    return np.clip(out, 0, 1) if clamp else out


def non_target(d: Dataset, target: int) -> Dataset:
    keep = np.flatnonzero(d.labels != target)
    if len(keep) == 0:
        raise ContractError(f"every image belongs to target class {target}")
    return d.subset(keep)


def evaluate_asr(m: Model, d: Dataset, backdoor: Backdoor, target: Optional[int] = None,
                 clamp: bool = False, rng=None) -> float:
    """Fraction of non-target images sent to ``target`` once the trigger is applied.

    Additive perturbations are not clamped to ``[0, 1]`` unless ``clamp``.
    """
    if target is None:
        if not isinstance(backdoor, BackdoorSpec):
            raise ContractError("target class required for an additive backdoor")
        target = backdoor.target_class
    pool = non_target(d, target)
    preds = predict(m, backdoored_images(pool.images, backdoor, clamp, rng))
    return float(np.mean(preds == target))
