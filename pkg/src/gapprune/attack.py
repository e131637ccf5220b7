"""L-infinity PGD adversarial inputs and adversarial / transfer accuracy."""

from __future__ import annotations

import contextlib
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from . import container
from . import functional as F
from .errors import ArchitectureMismatchError, ContractError
from .tensor import Tensor


@dataclass(frozen=True)
class AttackSpec:
    """PGD settings; ``epsilon`` and ``alpha`` are in pixel units."""

    epsilon: float = 8 / 255
    alpha: float = 2 / 255
    steps: int = 10
    random_start: bool = True
    clip_min: float = 0.0
    clip_max: float = 1.0
    seed: int = 0

    def __post_init__(self):
        if self.epsilon < 0:
            raise ContractError(f"epsilon must be >= 0, got {self.epsilon}")
        if self.alpha <= 0:
            raise ContractError(f"alpha must be > 0, got {self.alpha}")
        # epsilon == 0 is the degenerate ball; any alpha then projects to the input
        if self.epsilon > 0 and self.alpha > self.epsilon:
            raise ContractError(f"alpha ({self.alpha}) must not exceed epsilon ({self.epsilon})")
        if self.steps < 1:
            raise ContractError("steps must be >= 1")
        if not self.clip_min < self.clip_max:
            raise ContractError("clip_min must be < clip_max")

    def with_seed(self, seed: int) -> "AttackSpec":
        return AttackSpec(
            self.epsilon, self.alpha, self.steps, self.random_start, self.clip_min, self.clip_max, seed
        )


@dataclass
class AdversarialBatch:
    originals: np.ndarray
    adversarials: np.ndarray
    labels: np.ndarray
    generator_id: str
    epsilon: float = field(default=0.0)

    def __len__(self) -> int:
        return len(self.labels)

    def max_perturbation(self) -> float:
        if len(self) == 0:
            return 0.0
        diff = self.adversarials.astype(np.float64) - self.originals.astype(np.float64)
        return float(np.abs(diff).max())


def loss_gradient(model, images: np.ndarray, labels: np.ndarray) -> np.ndarray:
    """Gradient of the summed cross-entropy loss with respect to the input pixels."""
    frozen = getattr(model, "frozen", None)
    ctx = frozen() if frozen is not None else contextlib.nullcontext()
    with ctx:
        x = Tensor(images, requires_grad=True)
        F.cross_entropy(model.forward(x), labels, reduction="sum").backward()
    return x.grad


def mean_loss(model, images: np.ndarray, labels: np.ndarray, batch_size: int = 1024) -> float:
    logits = model.logits(images, batch_size)
    return F.cross_entropy(Tensor(logits), labels).item()


def pgd(
    model,
    images: np.ndarray,
    labels: np.ndarray,
    spec: AttackSpec,
    generator_id: Optional[str] = None,
    batch_size: int = 256,
) -> AdversarialBatch:
    """Projected gradient ascent on the loss inside the epsilon-ball around ``images``.

    Each step moves every pixel by ``alpha * sign(grad)`` (no move where the
    gradient is exactly zero), projects onto the ball, then clips to
    ``[clip_min, clip_max]``. The gradient is taken at the current iterate.
    """
    dtype = getattr(model, "dtype", np.float32)
    x0 = np.asarray(images, dtype=dtype)
    labels = np.asarray(labels)
    if len(x0) != len(labels):
        raise ContractError(f"{len(x0)} images but {len(labels)} labels")
    if x0.size and (x0.min() < spec.clip_min or x0.max() > spec.clip_max):
        raise ContractError("images lie outside the attack clip range")

    eps = x0.dtype.type(spec.epsilon)
    lo, hi = x0 - eps, x0 + eps
    x = x0.copy()
    if spec.random_start:
        rng = np.random.default_rng(spec.seed)
        noise = rng.uniform(-spec.epsilon, spec.epsilon, size=x0.shape).astype(x0.dtype)
        x = np.clip(x0 + noise, spec.clip_min, spec.clip_max).astype(x0.dtype)
    step = x0.dtype.type(spec.alpha)

    for start in range(0, len(x0), batch_size):
        sl = slice(start, start + batch_size)
        xs, ys = x[sl], labels[sl]
        for _ in range(spec.steps):
            g = loss_gradient(model, xs, ys)
            xs = xs + step * np.sign(g).astype(xs.dtype)
            xs = np.clip(xs, lo[sl], hi[sl])
            xs = np.clip(xs, spec.clip_min, spec.clip_max).astype(x0.dtype)
        x[sl] = xs

    gen = generator_id or getattr(model, "arch_id", type(model).__name__)
    return AdversarialBatch(x0, x, labels.copy(), gen, spec.epsilon)


def adversarial_accuracy(target_model, batch: AdversarialBatch) -> float:
    """Fraction of ``batch`` that ``target_model`` still classifies correctly.

    Self-adversarial accuracy when ``target_model`` generated the batch,
    transfer-attack accuracy otherwise.
    """
    if len(batch) == 0:
        raise ContractError("empty adversarial batch")
    num_classes = getattr(target_model, "num_classes", None)
    if num_classes is not None and batch.labels.max() >= num_classes:
        raise ContractError(
            f"batch has label {batch.labels.max()} but target model has {num_classes} classes"
        )
    preds = target_model.predict(batch.adversarials)
    return float(np.mean(preds == batch.labels))


def surrogate_gradient_attack(
    quantized_model,
    full_precision_twin,
    images: np.ndarray,
    labels: np.ndarray,
    spec: AttackSpec,
    batch_size: int = 256,
) -> AdversarialBatch:
    """PGD against a quantized model using its full-precision twin's gradients."""
    q_id = getattr(quantized_model, "arch_id", None)
    if q_id != full_precision_twin.arch_id:
        raise ArchitectureMismatchError(
            f"quantized model {q_id!r} and twin {full_precision_twin.arch_id!r} differ"
        )
    batch = pgd(full_precision_twin, images, labels, spec, batch_size=batch_size)
    batch.generator_id = f"{q_id}:quantized"
    return batch


def save_adversarial_batch(batch: AdversarialBatch, path):
    meta = {"generator_id": batch.generator_id, "epsilon": batch.epsilon, "dtype": batch.adversarials.dtype.name}
    enc = "f8" if batch.adversarials.dtype == np.float64 else "f4"
    return container.write(
        path,
        "adversarial",
        meta,
        [("originals", batch.originals, enc), ("adversarials", batch.adversarials, enc), ("labels", batch.labels, "i8")],
    )


def load_adversarial_batch(path) -> AdversarialBatch:
    meta, arrays = container.read(path, kind="adversarial")
    return AdversarialBatch(
        arrays["originals"], arrays["adversarials"], arrays["labels"], meta["generator_id"], meta["epsilon"]
    )
