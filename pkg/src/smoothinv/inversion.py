"""Single-image backdoor synthesis: smoothed PGD, its plain baseline and Neural Cleanse."""
from __future__ import annotations

import logging
from dataclasses import dataclass, field, replace
from typing import Callable, List, Optional, Sequence, Tuple

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor, l2_normalize, l2_project
from .data import Dataset, LabeledImage
from .errors import ContractError, InversionError
from .smoothing import SmoothedClassifier, SmoothingConfig, plain_loss_grad, smoothed_loss_grad
from .training import Model, evaluate_asr, forward_graph, non_target, predict

logger = logging.getLogger(__name__)

DEFAULT_EPSILONS = (2.0, 5.0)
DEFAULT_SIGMAS = (0.12, 0.25, 0.5, 1.0)


@dataclass(frozen=True)
class InversionConfig:
    """PGD settings for one run; ``step_size`` defaults to ``0.05 * epsilon``."""

    epsilon: float
    target: int
    steps: int = 400
    step_size: Optional[float] = None
    seed: int = 0
    snapshot_every: int = 0

    def __post_init__(self):
        if self.epsilon <= 0:
            raise ContractError(f"epsilon must be positive, got {self.epsilon}")
        if self.steps < 1:
            raise ContractError("steps must be >= 1")
        if self.step_size is not None and self.step_size <= 0:
            raise ContractError("step_size must be positive")
        if self.snapshot_every < 0:
            raise ContractError("snapshot_every must be >= 0")

    @property
    def alpha(self) -> float:
        return self.step_size if self.step_size is not None else 0.5 * self.epsilon / 10


@dataclass(frozen=True)
class GridCell:
    epsilon: float
    sigma: float
    seed: int
    asr: float


@dataclass
class InversionResult:
    delta: np.ndarray
    loss_trace: List[float]
    config: InversionConfig
    sigma: float = 0.0
    n_samples: int = 1
    snapshots: List[Tuple[int, np.ndarray]] = field(default_factory=list)
    asr: Optional[float] = None
    grid: List[GridCell] = field(default_factory=list)

    @property
    def succeeded(self) -> bool:
        """Loss went down: mean of the last 10 trace values below the first 10."""
        k = min(10, len(self.loss_trace))
        return float(np.mean(self.loss_trace[-k:])) < float(np.mean(self.loss_trace[:k]))


LossGrad = Callable[[np.ndarray, np.random.Generator], Tuple[float, np.ndarray]]


def _pgd(loss_grad: LossGrad, x: np.ndarray, cfg: InversionConfig) -> Tuple[np.ndarray, List[float], list]:
    rng = np.random.default_rng(cfg.seed)
    delta = np.zeros_like(x)
    alpha = x.dtype.type(cfg.alpha)
    trace: List[float] = []
    snapshots = []
    for step in range(cfg.steps):
        loss, grad = loss_grad(x + delta, rng)
        if not np.isfinite(loss) or not np.all(np.isfinite(grad)):
            raise InversionError("non-finite loss or gradient", step)
        trace.append(loss)
        # Descent on the cross-entropy toward the target class.
        delta = l2_project(delta - alpha * l2_normalize(grad), cfg.epsilon)
        if cfg.snapshot_every and (step + 1) % cfg.snapshot_every == 0:
            snapshots.append((step + 1, x + delta))
    return delta, trace, snapshots


def _start(x: LabeledImage, cfg: InversionConfig, dtype) -> np.ndarray:
    if x.label == cfg.target:
        raise ContractError(f"starting image already belongs to target class {cfg.target}")
    return np.asarray(x.pixels, dtype=dtype)


def smoothinv_synthesize(g: SmoothedClassifier, x: LabeledImage, cfg: InversionConfig) -> InversionResult:
    """Minimize ``-log G(x + delta)[target]`` over ``||delta|| <= epsilon``.

    Starts at ``delta = 0``; every step draws fresh noise, takes a step of
    ``alpha`` along the normalized negative gradient and projects back.
    """
    x0 = _start(x, cfg, g.base.dtype)
    delta, trace, snaps = _pgd(lambda z, rng: smoothed_loss_grad(g, z, cfg.target, rng), x0, cfg)
    return InversionResult(delta, trace, cfg, g.config.sigma, g.config.n_samples, snaps)


def plain_adv_synthesize(base: Model, x: LabeledImage, cfg: InversionConfig) -> InversionResult:
    """Same PGD loop against the unsmoothed classifier."""
    x0 = _start(x, cfg, base.dtype)
    delta, trace, snaps = _pgd(lambda z, rng: plain_loss_grad(base, z, cfg.target), x0, cfg)
    return InversionResult(delta, trace, cfg, 0.0, 1, snaps)


# --------------------------------------------------------------------------
# Neural Cleanse


@dataclass
class MaskTrigger:
    """Reversed trigger ``x -> (1 - mask) * x + mask * pattern``.

    ``mask`` is ``1 x H x W`` (shared by all channels), ``pattern`` is ``C x H x W``.
    """

    mask: np.ndarray
    pattern: np.ndarray
    loss_trace: List[float] = field(default_factory=list)

    def __call__(self, images: np.ndarray) -> np.ndarray:
        return (1 - self.mask) * images + self.mask * self.pattern


def neural_cleanse_synthesize(
    base: Model,
    support: Sequence[LabeledImage],
    target: int,
    lam: float = 1e-3,
    steps: int = 400,
    step_size: float = 0.5,
    seed: int = 0,
) -> MaskTrigger:
    """Gradient descent on ``CE(f(phi(x)), target) + lam * ||mask||_1``.

    ``mask = sigmoid(u)`` and ``pattern = sigmoid(v)`` keep both in ``[0, 1]``
    for any real ``u, v``.
    """
    if len(support) == 0:
        raise ContractError("neural cleanse needs a nonempty support set")
    dtype = base.dtype
    images = np.stack([np.asarray(s.pixels, dtype=dtype) for s in support])
    n, c, h, w = images.shape
    rng = np.random.default_rng(seed)
    u = rng.uniform(-2.0, 0.0, size=(1, h, w)).astype(dtype)
    v = rng.uniform(-1.0, 1.0, size=(c, h, w)).astype(dtype)
    lr = dtype.type(step_size)
    trace = []
    for step in range(steps):
        tu, tv = Tensor(u, requires_grad=True), Tensor(v, requires_grad=True)
        m = ad.sigmoid(tu)
        p = ad.sigmoid(tv)
        mb = ad.broadcast_to(m, (n, c, h, w))
        pb = ad.broadcast_to(p, (n, c, h, w))
        stamped = ad.add(ad.mul(ad.rsub_const(1.0, mb), Tensor(images)), ad.mul(mb, pb))
        ce = ad.softmax_cross_entropy(forward_graph(base, stamped), np.full(n, target))
        loss = ad.add(ce, ad.scale(ad.total(m), lam))
        value = loss.item()
        if not np.isfinite(value):
            raise InversionError("non-finite neural cleanse loss", step)
        trace.append(value)
        gu, gv = ad.backward(loss, [tu, tv])
        u = u - lr * gu
        v = v - lr * gv
    mask = ad.sigmoid(Tensor(u)).data
    pattern = ad.sigmoid(Tensor(v)).data
    return MaskTrigger(np.array(mask), np.array(pattern), trace)


# --------------------------------------------------------------------------
# Grid selection


def _contains(d: Dataset, pixels: np.ndarray) -> bool:
    flat = d.images.reshape(len(d), -1)
    return bool(np.any(np.all(flat == np.asarray(pixels, dtype=flat.dtype).reshape(1, -1), axis=1)))


def select_best_config(
    build: Callable[[float], SmoothedClassifier],
    x: LabeledImage,
    cfg: InversionConfig,
    eval_set: Dataset,
    epsilons: Sequence[float] = DEFAULT_EPSILONS,
    sigmas: Sequence[float] = DEFAULT_SIGMAS,
) -> InversionResult:
    """Run every (epsilon, sigma) cell and keep the perturbation with the highest ASR.

    ``build(sigma)`` returns the smoothed classifier for one noise level.
    ASR is measured additively on ``eval_set``; ties keep the first cell in
    grid order (epsilon-major). The returned result lists every cell.
    """
    if not epsilons or not sigmas:
        raise ContractError("epsilon and sigma grids must be nonempty")
    if len(eval_set) == 0:
        raise ContractError("evaluation set is empty")
    if _contains(eval_set, x.pixels):
        raise ContractError("evaluation set contains the starting image")
    non_target(eval_set, cfg.target)
    best: Optional[InversionResult] = None
    cells: List[GridCell] = []
    for i, eps in enumerate(epsilons):
        for j, sigma in enumerate(sigmas):
            seed = cfg.seed * 1000 + i * len(sigmas) + j
            run_cfg = replace(cfg, epsilon=float(eps), seed=seed)
            g = build(float(sigma))
            res = smoothinv_synthesize(g, x, run_cfg)
            res.asr = evaluate_asr(g.base, eval_set, res.delta, cfg.target)
            cells.append(GridCell(float(eps), float(sigma), seed, res.asr))
            logger.info("eps=%g sigma=%g asr=%.3f", eps, sigma, res.asr)
            if best is None or res.asr > best.asr:
                best = res
    best.grid = cells
    return best


def select_best_plain(base: Model, x: LabeledImage, cfg: InversionConfig, eval_set: Dataset,
                      epsilons: Sequence[float] = DEFAULT_EPSILONS) -> InversionResult:
    """The baseline's analog of :func:`select_best_config` (no noise axis)."""
    best = None
    cells = []
    for i, eps in enumerate(epsilons):
        run_cfg = replace(cfg, epsilon=float(eps), seed=cfg.seed * 1000 + i)
        res = plain_adv_synthesize(base, x, run_cfg)
        res.asr = evaluate_asr(base, eval_set, res.delta, cfg.target)
        cells.append(GridCell(float(eps), 0.0, run_cfg.seed, res.asr))
        if best is None or res.asr > best.asr:
            best = res
    best.grid = cells
    return best


def smoothed_builder(base: Model, n_samples: int = 10, **kwargs) -> Callable[[float], SmoothedClassifier]:
    def build(sigma: float) -> SmoothedClassifier:
        return SmoothedClassifier(base, SmoothingConfig(sigma=sigma, n_samples=n_samples, **kwargs))
    return build
