"""Saliency scoring and single-shot unstructured pruning.

Four scorers are available:

``magnitude``  |w|
``gradient``   sum over sampled batches of |dL/dw| on clean inputs
``gap``        minus the sum over sampled batches of dL/dw on PGD inputs
``random``     i.i.d. uniform(0, 1)

Masks keep the highest-scoring entries. For a compression ratio ``p`` over
``N`` candidate weights exactly ``round(N * (1 - 1/p))`` are pruned; ties are
resolved by pruning the lower flat index first. With ``gap`` the sign is kept,
so the weights whose adversarial gradients are most positive are removed.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Tuple

import numpy as np

from . import functional as F
from .attack import AttackSpec, pgd
from .data import Dataset
from .errors import ContractError
from .model import MaskSet, Model, apply_mask_permanently
from .tensor import Tensor

METHODS = ("random", "magnitude", "gradient", "gap")
SCOPES = ("layerwise", "global")

# (method, scope) pairs compared in a sweep: five conventional baselines plus GAP in both scopes.
STRATEGIES = (
    ("random", "global"),
    ("magnitude", "global"),
    ("magnitude", "layerwise"),
    ("gradient", "global"),
    ("gradient", "layerwise"),
    ("gap", "global"),
    ("gap", "layerwise"),
)


@dataclass(frozen=True)
class PruneSpec:
    method: str
    scope: str = "global"
    compression: float = 2.0
    score_sample_size: int = 2048
    seed: int = 0
    batch_size: int = 256

    def __post_init__(self):
        if self.method not in METHODS:
            raise ContractError(f"unknown pruning method {self.method!r}; choose from {METHODS}")
        if self.scope not in SCOPES:
            raise ContractError(f"unknown scope {self.scope!r}; choose from {SCOPES}")
        if not self.compression >= 1:
            raise ContractError(f"compression must be >= 1, got {self.compression}")
        if self.score_sample_size < 1 or self.batch_size < 1:
            raise ContractError("score_sample_size and batch_size must be positive")


@dataclass
class ScoreVector:
    scores: Dict[str, np.ndarray]
    method: str

    def __post_init__(self):
        for name, s in self.scores.items():
            if not np.isfinite(s).all():
                raise ContractError(f"non-finite scores for {name}")


@dataclass
class PruneResult:
    masks: MaskSet
    gamma: Dict[str, Optional[float]]
    pruned_count: int
    kept_count: int
    warnings: List[str] = field(default_factory=list)

    @property
    def achieved_compression(self) -> float:
        total = self.pruned_count + self.kept_count
        return math.inf if self.kept_count == 0 else total / self.kept_count


def prune_count(n: int, compression: float) -> int:
    """Number of entries to prune out of ``n`` for ratio ``compression`` (halves round up)."""
    if compression < 1:
        raise ContractError(f"compression must be >= 1, got {compression}")
    k = math.floor(n * (1.0 - 1.0 / compression) + 0.5 + 1e-9)
    return min(max(k, 0), n)


# -- scorers -----------------------------------------------------------------


def score_magnitude(model: Model) -> ScoreVector:
    return ScoreVector({p.name: np.abs(p.data).astype(np.float64) for p in model.params.prunable()}, "magnitude")


def score_random(model: Model, seed: int) -> ScoreVector:
    rng = np.random.default_rng(seed)
    return ScoreVector({p.name: rng.uniform(0.0, 1.0, size=p.shape) for p in model.params.prunable()}, "random")


def gradient_sums(
    model: Model, images: np.ndarray, labels: np.ndarray, batch_size: int = 256, absolute: bool = True
) -> Dict[str, np.ndarray]:
    """Per-batch gradients of the summed loss, accumulated over batches.

    With ``absolute`` each batch gradient enters as its absolute value, which
    stands in for the per-example absolute values.
    """
    if len(labels) == 0:
        raise ContractError("cannot score on an empty sample")
    prunable = model.params.prunable()
    totals = {p.name: np.zeros(p.shape, dtype=np.float64) for p in prunable}
    for start in range(0, len(labels), batch_size):
        model.zero_grad()
        x = Tensor(np.asarray(images[start : start + batch_size], dtype=model.dtype))
        loss = F.cross_entropy(model.forward(x), labels[start : start + batch_size], reduction="sum")
        loss.backward()
        for p in prunable:
            g = p.tensor.grad
            if g is None:
                continue
            totals[p.name] += np.abs(g) if absolute else g
    model.zero_grad()
    return totals


def score_gradient(
    model: Model, dataset: Dataset, sample_size: int, seed: int = 0, batch_size: int = 256
) -> ScoreVector:
    sample = dataset.sample(sample_size, seed)
    return ScoreVector(gradient_sums(model, sample.images, sample.labels, batch_size, absolute=True), "gradient")


def gap_scores_from_adversarial(
    model: Model, adversarials: np.ndarray, labels: np.ndarray, batch_size: int = 256
) -> ScoreVector:
    sums = gradient_sums(model, adversarials, labels, batch_size, absolute=False)
    return ScoreVector({name: -s for name, s in sums.items()}, "gap")


def score_gap(
    model: Model,
    dataset: Dataset,
    attack_spec: AttackSpec,
    sample_size: int,
    seed: int = 0,
    batch_size: int = 256,
) -> ScoreVector:
    """Greedy adversarial scores: PGD inputs are generated on ``model`` itself, then
    each weight is scored by its negated summed loss gradient on those inputs."""
    sample = dataset.sample(sample_size, seed)
    adv = pgd(model, sample.images, sample.labels, attack_spec, batch_size=batch_size)
    return gap_scores_from_adversarial(model, adv.adversarials, sample.labels, batch_size)


# -- masks ---------------------------------------------------------------------


def _select(flat: np.ndarray, k: int) -> Tuple[np.ndarray, Optional[float]]:
    order = np.argsort(flat, kind="stable")
    keep = np.ones(flat.shape, dtype=bool)
    keep[order[:k]] = False
    gamma = float(flat[order[k]]) if k < len(flat) else None
    return keep, gamma


def generate_mask(scores: ScoreVector, spec: PruneSpec) -> PruneResult:
    """Build masks that prune the lowest scores at ratio ``spec.compression``.

    Layers that would be emptied entirely are still masked, with a warning
    recorded on the result.
    """
    if spec.compression < 1:
        raise ContractError(f"compression must be >= 1, got {spec.compression}")
    names = list(scores.scores)
    masks: Dict[str, np.ndarray] = {}
    gamma: Dict[str, Optional[float]] = {}
    notes: List[str] = []

    if spec.scope == "layerwise":
        for name in names:
            s = scores.scores[name]
            keep, gamma[name] = _select(s.ravel(), prune_count(s.size, spec.compression))
            masks[name] = keep.reshape(s.shape)
    else:
        flat = np.concatenate([scores.scores[n].ravel() for n in names]) if names else np.zeros(0)
        keep, gamma["global"] = _select(flat, prune_count(flat.size, spec.compression))
        offset = 0
        for name in names:
            shape = scores.scores[name].shape
            size = int(np.prod(shape))
            masks[name] = keep[offset : offset + size].reshape(shape)
            offset += size

    for name, m in masks.items():
        if m.size and not m.any():
            notes.append(f"layer {name} fully pruned at compression {spec.compression}")
    for note in notes:
        warnings.warn(note, RuntimeWarning, stacklevel=2)

    mask_set = MaskSet(masks, scores.method, spec.scope, spec.compression)
    kept = mask_set.kept_count
    return PruneResult(mask_set, gamma, mask_set.total_count - kept, kept, notes)


def compute_scores(
    model: Model, dataset: Optional[Dataset], spec: PruneSpec, attack_spec: Optional[AttackSpec] = None
) -> ScoreVector:
    if spec.method == "magnitude":
        return score_magnitude(model)
    if spec.method == "random":
        return score_random(model, spec.seed)
    if dataset is None:
        raise ContractError(f"{spec.method} scoring needs training data")
    if spec.method == "gradient":
        return score_gradient(model, dataset, spec.score_sample_size, spec.seed, spec.batch_size)
    if attack_spec is None:
        raise ContractError("gap pruning requires an attack spec")
    return score_gap(model, dataset, attack_spec, spec.score_sample_size, spec.seed, spec.batch_size)


def prune(
    model: Model,
    dataset: Optional[Dataset],
    spec: PruneSpec,
    attack_spec: Optional[AttackSpec] = None,
) -> Tuple[Model, PruneResult]:
    """Score once, mask, and return a pruned copy of ``model`` (the input is untouched)."""
    if spec.method == "gap" and attack_spec is None:
        raise ContractError("gap pruning requires an attack spec")
    result = generate_mask(compute_scores(model, dataset, spec, attack_spec), spec)
    pruned = apply_mask_permanently(model.copy(), result.masks)
    return pruned, result
