"""Target-class identification by how well per-class perturbations transfer."""
from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import Dict, Optional, Sequence, Set

import numpy as np

from .data import Dataset, LabeledImage
from .errors import ContractError
from .inversion import (
    InversionConfig,
    _contains,
    select_best_config,
    smoothed_builder,
    smoothinv_synthesize,
)
from .training import Model, evaluate_asr


@dataclass
class DetectionReport:
    per_class_asr: Dict[int, float]
    threshold: float
    deltas: Dict[int, np.ndarray] = field(default_factory=dict, repr=False)

    @property
    def flagged(self) -> Set[int]:
        return {c for c, asr in self.per_class_asr.items() if asr >= self.threshold}

    @property
    def verdict(self) -> str:
        return "backdoored" if self.flagged else "clean"


def identify_target_class(
    model: Model,
    x: LabeledImage,
    classes: Sequence[int],
    cfg: InversionConfig,
    eval_set: Dataset,
    threshold: float = 0.5,
    sigma: float = 0.25,
    n_samples: int = 10,
    epsilons: Optional[Sequence[float]] = None,
    sigmas: Optional[Sequence[float]] = None,
) -> DetectionReport:
    """Synthesize toward every candidate class and score each perturbation additively.

    Uses the single ``(cfg.epsilon, sigma)`` cell unless both grids are
    given, in which case each class gets its best grid cell. The starting
    image's own class is skipped.
    """
    if len(classes) == 0:
        raise ContractError("no candidate classes")
    if len(eval_set) == 0:
        raise ContractError("evaluation set is empty")
    if _contains(eval_set, x.pixels):
        raise ContractError("evaluation set contains the starting image")
    build = smoothed_builder(model, n_samples)
    per_class: Dict[int, float] = {}
    deltas: Dict[int, np.ndarray] = {}
    for c in classes:
        if c == x.label:
            continue
        run_cfg = replace(cfg, target=int(c), seed=cfg.seed + int(c))
        if epsilons and sigmas:
            res = select_best_config(build, x, run_cfg, eval_set, epsilons, sigmas)
        else:
            res = smoothinv_synthesize(build(sigma), x, run_cfg)
            res.asr = evaluate_asr(model, eval_set, res.delta, int(c))
        per_class[int(c)] = float(res.asr)
        deltas[int(c)] = res.delta
    return DetectionReport(per_class, float(threshold), deltas)
