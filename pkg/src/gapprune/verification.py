"""Independent numerical checks run before any experiment is trusted.

The oracles here never call the code path they validate: gradients are
compared against central differences of the forward pass, and masks against
a plain sort with exact rational arithmetic for the prune count.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass
from fractions import Fraction
from typing import Callable, Dict, List, Optional, Sequence, Union

import numpy as np

from . import functional as F
from .model import Model
from .pruning import PruneSpec, ScoreVector, generate_mask
from .tensor import WIDE_DTYPE, Tensor, build_tape


@dataclass
class OracleReport:
    name: str
    max_abs_error: float
    max_rel_error: float
    tolerance: float
    passed: bool
    seed: int = 0
    worst: str = ""

    def line(self) -> str:
        status = "PASS" if self.passed else "FAIL"
        text = (
            f"{status} {self.name} max_abs={self.max_abs_error:.3e} "
            f"max_rel={self.max_rel_error:.3e} tol={self.tolerance:g} seed={self.seed}"
        )
        if self.worst and not self.passed:
            text += f" worst={self.worst}"
        return text


def _pattern(out: Tensor) -> List[np.ndarray]:
    """Relu signs and pool winners of the graph behind ``out``."""
    parts = []
    for node in build_tape(out):
        if node.op == "relu":
            parts.append(node._parents[0].data > 0)
        elif node.op == "maxpool2":
            x = node._parents[0].data
            n, c, h, w = x.shape
            windows = x.reshape(n, c, h // 2, 2, w // 2, 2).transpose(0, 1, 2, 4, 3, 5)
            parts.append(windows.reshape(n, c, h // 2, w // 2, 4).argmax(axis=-1))
    return parts


def _same_pattern(a: List[np.ndarray], b: List[np.ndarray]) -> bool:
    return len(a) == len(b) and all(np.array_equal(x, y) for x, y in zip(a, b))


def _rel(a: float, b: float, floor: float) -> float:
    return abs(a - b) / max(abs(a), abs(b), floor)


def finite_difference_check(
    target: Union[Model, Callable[..., Tensor]],
    inputs: Sequence[np.ndarray],
    labels: Optional[np.ndarray] = None,
    tolerance: float = 1e-4,
    num_coords: int = 100,
    h: float = 1e-3,
    seed: int = 0,
    name: Optional[str] = None,
    floor: float = 1e-7,
) -> OracleReport:
    """Compare reverse-mode gradients with central differences in wide precision.

    ``target`` is either a :class:`Model` (loss is the mean cross-entropy of
    ``inputs[0]`` against ``labels``; both weights and pixels are probed) or
    a callable mapping input tensors to a scalar tensor. ``num_coords``
    coordinates are drawn at random across all probed arrays. A coordinate
    whose probes change a relu sign or a pool winner straddles a kink, where
    central differences are meaningless; it is replaced by another draw.
    """
    rng = np.random.default_rng(seed)
    if isinstance(target, Model):
        model = Model(target.arch, target.input_shape, target.num_classes, target.seed, dtype=WIDE_DTYPE)
        model.load_state({k: v.astype(WIDE_DTYPE) for k, v in target.state().items()})
        if target.masks is not None:
            model.set_masks(target.masks)
        images = np.asarray(inputs[0], dtype=WIDE_DTYPE)
        arrays = [images] + [p.data for p in model.params]
        names = ["input"] + [p.name for p in model.params]

        def loss_of(values: List[np.ndarray], grad: bool):
            for p, v in zip(model.params, values[1:]):
                p.tensor.data = v
                p.tensor.grad = None
            x = Tensor(values[0], requires_grad=grad)
            out = F.cross_entropy(model.forward(x), labels)
            return out, [x] + [p.tensor for p in model.params]

        name = name or f"fd:{target.arch_id}"
    else:
        arrays = [np.asarray(a, dtype=WIDE_DTYPE) for a in inputs]
        names = [f"arg{i}" for i in range(len(arrays))]

        def loss_of(values: List[np.ndarray], grad: bool):
            leaves = [Tensor(v, requires_grad=grad) for v in values]
            return target(*leaves), leaves

        name = name or f"fd:{getattr(target, '__name__', 'op')}"

    base = [a.copy() for a in arrays]
    out, leaves = loss_of(base, True)
    out.backward()
    grads = [np.zeros_like(a) if t.grad is None else t.grad for a, t in zip(base, leaves)]

    pattern = _pattern(out)
    sizes = np.array([a.size for a in base])
    offsets = np.concatenate([[0], np.cumsum(sizes)])
    worst_abs = worst_rel = 0.0
    worst = ""
    checked = 0
    for fid in rng.permutation(int(sizes.sum())):
        if checked == num_coords:
            break
        arr = int(np.searchsorted(offsets, fid, side="right") - 1)
        idx = int(fid - offsets[arr])
        values = [a.copy() for a in base]
        values[arr].flat[idx] += h
        plus_out = loss_of(values, True)[0]
        values[arr].flat[idx] -= 2 * h
        minus_out = loss_of(values, True)[0]
        if not (_same_pattern(pattern, _pattern(plus_out)) and _same_pattern(pattern, _pattern(minus_out))):
            continue
        checked += 1
        numeric = (plus_out.item() - minus_out.item()) / (2 * h)
        analytic = float(grads[arr].flat[idx])
        err = abs(numeric - analytic)
        rel = _rel(numeric, analytic, floor)
        worst_abs = max(worst_abs, err)
        if rel > worst_rel:
            worst_rel = rel
            coord = np.unravel_index(idx, base[arr].shape)
            worst = f"{names[arr]}{list(map(int, coord))} analytic={analytic:.6e} numeric={numeric:.6e}"
    loss_of(base, False)  # restore model parameters
    return OracleReport(name, worst_abs, worst_rel, tolerance, worst_rel <= tolerance, seed, worst)


def oracle_prune_count(n: int, compression) -> int:
    """round(n * (1 - 1/p)) with halves rounded up, in exact arithmetic."""
    p = Fraction(compression).limit_denominator(10**6)
    target = n * (1 - 1 / p)
    return int(target + Fraction(1, 2)) if target >= 0 else 0


def oracle_mask(scores: Sequence[float], compression) -> List[bool]:
    """Keep-flags from sorting (score, index) pairs and dropping the first k."""
    ranked = sorted(range(len(scores)), key=lambda i: (scores[i], i))
    pruned = set(ranked[: oracle_prune_count(len(scores), compression)])
    return [i not in pruned for i in range(len(scores))]


MASK_ORACLE_RATIOS = (1, 2, Fraction(4, 3), 2.5)


def mask_oracle_check(
    scores: Union[np.ndarray, Dict[str, np.ndarray]],
    scope: str = "global",
    compressions: Optional[Sequence] = None,
    seed: int = 0,
    name: Optional[str] = None,
) -> OracleReport:
    """Compare :func:`generate_mask` with the sort oracle on small score vectors.

    By default every ratio in ``(1, 2, 4/3, 2.5, N)`` is checked. The report's
    errors count mismatching mask entries.
    """
    layers = scores if isinstance(scores, dict) else {"w": np.asarray(scores)}
    layers = {k: np.asarray(v, dtype=np.float64) for k, v in layers.items()}
    total = sum(v.size for v in layers.values())
    ratios = list(compressions) if compressions is not None else list(MASK_ORACLE_RATIOS) + [total]
    worst, mismatches = "", 0
    for p in ratios:
        with warnings.catch_warnings():
            # p = N empties layers on purpose
            warnings.simplefilter("ignore", RuntimeWarning)
            result = generate_mask(ScoreVector(layers, "oracle"), PruneSpec("magnitude", scope, float(p)))
        if scope == "global":
            flat = [float(s) for v in layers.values() for s in v.ravel()]
            expected = {"*": oracle_mask(flat, p)}
            got = {"*": [bool(b) for v in result.masks.masks.values() for b in v.ravel()]}
        else:
            expected = {k: oracle_mask(v.ravel().tolist(), p) for k, v in layers.items()}
            got = {k: result.masks[k].ravel().tolist() for k in layers}
        for key in expected:
            bad = sum(a != b for a, b in zip(expected[key], got[key]))
            if bad and not worst:
                worst = f"p={p} layer={key} scores={list(layers.values())} expected={expected[key]} got={got[key]}"
            mismatches += bad
    return OracleReport(name or f"mask:{scope}", float(mismatches), float(mismatches), 0.0, mismatches == 0, seed, worst)


def run_all(seed: int = 0) -> List[OracleReport]:
    """Run every registered check once; used by the ``verify`` command."""
    rng = np.random.default_rng(seed)
    reports = []

    x = rng.standard_normal((4, 6))
    w = rng.standard_normal((6, 3))
    b = rng.standard_normal(3)
    reports.append(
        finite_difference_check(lambda x, w, b: F.dense(x, w, b).sum(), [x, w, b], tolerance=1e-6, seed=seed, name="fd:dense")
    )
    img = rng.standard_normal((2, 2, 6, 6))
    ker = rng.standard_normal((3, 2, 3, 3))
    cb = rng.standard_normal(3)
    reports.append(
        finite_difference_check(
            lambda x, k, b: (F.conv2d(x, k, b, 1, 1) * F.conv2d(x, k, b, 1, 1)).sum(),
            [img, ker, cb],
            seed=seed,
            name="fd:conv2d",
        )
    )
    reports.append(
        finite_difference_check(
            lambda x: (F.maxpool2(F.relu(x)) * F.maxpool2(F.relu(x))).sum(), [img], seed=seed, name="fd:relu+maxpool2"
        )
    )
    logits = rng.standard_normal((5, 4))
    labels = rng.integers(0, 4, 5)
    reports.append(
        finite_difference_check(lambda z: F.cross_entropy(z, labels), [logits], seed=seed, name="fd:cross_entropy")
    )
    reports.append(
        finite_difference_check(
            lambda x, w, b: F.dense(x, w, b).sum(), [np.zeros((4, 6)), w, b], seed=seed, name="fd:zero-input"
        )
    )
    for arch, shape in (("mlp", (1, 28, 28)), ("minicnn", (1, 16, 16))):
        model = Model(arch, shape, 10, seed=seed)
        images = rng.uniform(0, 1, (8,) + shape)
        reports.append(finite_difference_check(model, [images], rng.integers(0, 10, 8), seed=seed))

    tie_vectors = [
        np.array([3.0, 1.0, 1.0, 2.0, 1.0, 0.5, 2.0]),
        np.ones(9),
        rng.integers(0, 3, 17).astype(float),
        rng.standard_normal(20),
    ]
    for i, vec in enumerate(tie_vectors):
        reports.append(mask_oracle_check(vec, "global", seed=seed, name=f"mask:global:{i}"))
    split = {"a": rng.integers(0, 4, 7).astype(float), "b": rng.integers(0, 4, 6).astype(float)}
    reports.append(mask_oracle_check(split, "layerwise", seed=seed, name="mask:layerwise"))
    reports.append(mask_oracle_check(split, "global", seed=seed, name="mask:global:split"))
    return reports
