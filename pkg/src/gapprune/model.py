"""Model architectures, parameters and pruning masks.

Two desk-scale architectures are provided:

* ``mlp``: flatten -> dense(128) -> relu -> dense(64) -> relu -> dense(K)
* ``minicnn``: conv3x3(8) -> relu -> maxpool2 -> conv3x3(16) -> relu -> maxpool2
  -> flatten -> dense(64) -> relu -> dense(K)

Convolutions use padding 1. All biases and the dense layer feeding the logits
layer are never pruned.
"""

from __future__ import annotations

import contextlib
import copy
import math
from dataclasses import dataclass
from typing import Dict, Iterator, List, Optional, Sequence, Tuple

import numpy as np

from . import container
from . import functional as F
from .errors import ArchitectureMismatchError, ContractError, DimensionError
from .tensor import DEFAULT_DTYPE, Tensor, no_grad

ARCHITECTURES = ("mlp", "minicnn")


@dataclass
class Parameter:
    name: str
    tensor: Tensor
    kind: str  # "weight" or "bias"
    prunable: bool

    @property
    def data(self) -> np.ndarray:
        return self.tensor.data

    @property
    def shape(self) -> Tuple[int, ...]:
        return self.tensor.shape


class ParameterStore:
    """Ordered, uniquely-named model parameters in declaration order."""

    def __init__(self, entries: Sequence[Parameter] = ()):
        self._entries: Dict[str, Parameter] = {}
        for entry in entries:
            self.add(entry)

    def add(self, entry: Parameter) -> None:
        if entry.name in self._entries:
            raise ContractError(f"duplicate parameter name {entry.name!r}")
        if entry.kind == "bias" and entry.prunable:
            raise ContractError(f"bias {entry.name!r} cannot be prunable")
        self._entries[entry.name] = entry

    def __iter__(self) -> Iterator[Parameter]:
        return iter(self._entries.values())

    def __getitem__(self, name: str) -> Parameter:
        return self._entries[name]

    def __contains__(self, name: str) -> bool:
        return name in self._entries

    def __len__(self) -> int:
        return len(self._entries)

    def names(self) -> List[str]:
        return list(self._entries)

    def prunable(self) -> List[Parameter]:
        return [p for p in self if p.prunable]

    def num_prunable(self) -> int:
        return sum(p.tensor.size for p in self.prunable())


@dataclass
class MaskSet:
    """Binary masks for the prunable parameters; 0 marks a pruned entry."""

    masks: Dict[str, np.ndarray]
    method: str = "none"
    scope: str = "none"
    compression: float = 1.0

    def __post_init__(self):
        masks = {}
        for name, value in self.masks.items():
            arr = np.asarray(value)
            if arr.dtype != bool and not np.isin(arr, (0, 1)).all():
                raise ContractError(f"mask {name!r} holds values other than 0 and 1")
            masks[name] = arr.astype(bool)
        self.masks = masks

    def __getitem__(self, name: str) -> np.ndarray:
        return self.masks[name]

    def __iter__(self):
        return iter(self.masks)

    def items(self):
        return self.masks.items()

    @property
    def kept_count(self) -> int:
        return int(sum(m.sum() for m in self.masks.values()))

    @property
    def total_count(self) -> int:
        return int(sum(m.size for m in self.masks.values()))

    def copy(self) -> "MaskSet":
        return MaskSet({k: v.copy() for k, v in self.masks.items()}, self.method, self.scope, self.compression)

    @classmethod
    def ones_like(cls, model: "Model") -> "MaskSet":
        return cls({p.name: np.ones(p.shape, dtype=bool) for p in model.params.prunable()})


def _layer_specs(arch: str, input_shape: Tuple[int, int, int], num_classes: int):
    """Yield ``(name, kind, shape, fan_in, prunable)`` in declaration order."""
    c, h, w = input_shape
    if arch == "mlp":
        d = c * h * w
        dims = [(d, 128), (128, 64), (64, num_classes)]
        for i, (din, dout) in enumerate(dims, start=1):
            # fc2 feeds the logits layer and stays dense
            yield f"fc{i}.weight", "weight", (din, dout), din, i != 2
            yield f"fc{i}.bias", "bias", (dout,), din, False
    elif arch == "minicnn":
        if h % 4 or w % 4:
            raise DimensionError(f"minicnn needs spatial dims divisible by 4, got {input_shape}")
        yield "conv1.weight", "weight", (8, c, 3, 3), c * 9, True
        yield "conv1.bias", "bias", (8,), c * 9, False
        yield "conv2.weight", "weight", (16, 8, 3, 3), 72, True
        yield "conv2.bias", "bias", (16,), 72, False
        flat = 16 * (h // 4) * (w // 4)
        yield "fc1.weight", "weight", (flat, 64), flat, False
        yield "fc1.bias", "bias", (64,), flat, False
        yield "fc2.weight", "weight", (64, num_classes), 64, True
        yield "fc2.bias", "bias", (num_classes,), 64, False
    else:
        raise ContractError(f"unknown architecture {arch!r}; choose from {ARCHITECTURES}")


def architecture_id(arch: str, input_shape: Sequence[int], num_classes: int) -> str:
    c, h, w = input_shape
    if arch == "mlp":
        return f"MLP-{c * h * w}-128-64-{num_classes}"
    if arch == "minicnn":
        return f"MiniCNN-{c}x{h}x{w}-{num_classes}"
    raise ContractError(f"unknown architecture {arch!r}")


class Model:
    """A parameterized instance of one of the desk-scale architectures.

    Weights are He-normal (fan-in) initialized from ``seed``; biases start at
    zero. ``masks`` is None until the model is pruned.
    """

    def __init__(
        self,
        arch: str,
        input_shape: Sequence[int] = (1, 28, 28),
        num_classes: int = 10,
        seed: int = 0,
        dtype=DEFAULT_DTYPE,
    ):
        self.arch = arch
        self.input_shape = tuple(int(v) for v in input_shape)
        self.num_classes = int(num_classes)
        self.seed = int(seed)
        self.dtype = np.dtype(dtype)
        self.masks: Optional[MaskSet] = None
        self.checkpoint_extra: dict = {}
        self._mask_cache: Dict[str, np.ndarray] = {}

        rng = np.random.default_rng(seed)
        self.params = ParameterStore()
        for name, kind, shape, fan_in, prunable in _layer_specs(arch, self.input_shape, self.num_classes):
            if kind == "weight":
                values = rng.standard_normal(shape) * math.sqrt(2.0 / fan_in)
            else:
                values = np.zeros(shape)
            tensor = Tensor(values.astype(self.dtype), requires_grad=True)
            self.params.add(Parameter(name, tensor, kind, prunable))

    @property
    def arch_id(self) -> str:
        return architecture_id(self.arch, self.input_shape, self.num_classes)

    def __repr__(self) -> str:
        pruned = "" if self.masks is None else f", kept={self.masks.kept_count}/{self.masks.total_count}"
        return f"Model({self.arch_id}{pruned})"

    # -- parameters -----------------------------------------------------

    def state(self) -> Dict[str, np.ndarray]:
        return {p.name: p.data for p in self.params}

    def load_state(self, state: Dict[str, np.ndarray]) -> None:
        for p in self.params:
            arr = np.asarray(state[p.name])
            if arr.shape != p.shape:
                raise DimensionError(f"{p.name}: expected shape {p.shape}, got {arr.shape}")
            p.tensor.data = arr.astype(self.dtype, copy=True)

    def zero_grad(self) -> None:
        for p in self.params:
            p.tensor.zero_grad()

    def copy(self) -> "Model":
        clone = copy.copy(self)
        clone.params = ParameterStore(
            Parameter(p.name, Tensor(p.data.copy(), requires_grad=True), p.kind, p.prunable) for p in self.params
        )
        clone.masks = self.masks.copy() if self.masks is not None else None
        clone._mask_cache = {}
        clone.checkpoint_extra = dict(self.checkpoint_extra)
        return clone

    def set_masks(self, masks: Optional[MaskSet]) -> None:
        if masks is not None:
            check_mask_alignment(self, masks)
        self.masks = masks
        self._mask_cache = {}

    @contextlib.contextmanager
    def frozen(self) -> Iterator["Model"]:
        """Temporarily stop tracking parameter gradients (e.g. while attacking inputs)."""
        flags = [p.tensor.requires_grad for p in self.params]
        for p in self.params:
            p.tensor.requires_grad = False
        try:
            yield self
        finally:
            for p, flag in zip(self.params, flags):
                p.tensor.requires_grad = flag

    # -- forward --------------------------------------------------------

    def _effective(self, name: str, apply_masks: bool) -> Tensor:
        tensor = self.params[name].tensor
        if not apply_masks or self.masks is None or name not in self.masks.masks:
            return tensor
        mask = self._mask_cache.get(name)
        if mask is None:
            mask = self.masks[name].astype(self.dtype)
            self._mask_cache[name] = mask
        return tensor * mask

    def forward(self, images, apply_masks: bool = True) -> Tensor:
        """Logits for a batch of images ``[N, C, H, W]``.

        With ``apply_masks`` each prunable weight enters as ``mask * weight``,
        so masked entries contribute nothing and receive zero gradient.
        """
        x = images if isinstance(images, Tensor) else Tensor(np.asarray(images, dtype=self.dtype))
        if x.shape[1:] != self.input_shape:
            raise DimensionError(f"{self.arch_id} expects inputs [N, {self.input_shape}], got {x.shape}")
        p = lambda name: self._effective(name, apply_masks)  # noqa: E731
        b = lambda name: self.params[name].tensor  # noqa: E731
        if self.arch == "mlp":
            h = F.flatten(x)
            h = F.relu(F.dense(h, p("fc1.weight"), b("fc1.bias")))
            h = F.relu(F.dense(h, p("fc2.weight"), b("fc2.bias")))
            return F.dense(h, p("fc3.weight"), b("fc3.bias"))
        h = F.maxpool2(F.relu(F.conv2d(x, p("conv1.weight"), b("conv1.bias"), 1, 1)))
        h = F.maxpool2(F.relu(F.conv2d(h, p("conv2.weight"), b("conv2.bias"), 1, 1)))
        h = F.relu(F.dense(F.flatten(h), p("fc1.weight"), b("fc1.bias")))
        return F.dense(h, p("fc2.weight"), b("fc2.bias"))

    __call__ = forward

    def logits(self, images: np.ndarray, batch_size: int = 1024) -> np.ndarray:
        out = []
        with no_grad():
            for start in range(0, len(images), batch_size):
                out.append(self.forward(images[start : start + batch_size]).data)
        if not out:
            return np.zeros((0, self.num_classes), dtype=self.dtype)
        return np.concatenate(out)

    def predict(self, images: np.ndarray, batch_size: int = 1024) -> np.ndarray:
        return self.logits(images, batch_size).argmax(axis=1)

    def accuracy(self, images: np.ndarray, labels: np.ndarray) -> float:
        if len(labels) == 0:
            return 0.0
        return float(np.mean(self.predict(images) == labels))


def check_mask_alignment(model: Model, masks: MaskSet) -> None:
    expected = {p.name: p.shape for p in model.params.prunable()}
    if set(masks.masks) != set(expected):
        raise ContractError(
            f"masks cover {sorted(masks.masks)} but prunable parameters are {sorted(expected)}"
        )
    for name, shape in expected.items():
        if masks[name].shape != shape:
            raise ContractError(f"mask {name!r} has shape {masks[name].shape}, parameter has {shape}")


def apply_mask_permanently(model: Model, masks: MaskSet) -> Model:
    """Zero masked weights in place and keep the masks attached to ``model``."""
    check_mask_alignment(model, masks)
    for name, mask in masks.items():
        tensor = model.params[name].tensor
        tensor.data = np.where(mask, tensor.data, 0).astype(model.dtype)
    model.set_masks(masks)
    return model


def count_nonzero_prunable(model: Model) -> int:
    return int(sum(np.count_nonzero(p.data) for p in model.params.prunable()))


# -- checkpoints --------------------------------------------------------------


def _float_encoding(dtype) -> str:
    return "f8" if np.dtype(dtype) == np.float64 else "f4"


def model_sections(model: Model) -> List[Tuple[str, np.ndarray, str]]:
    enc = _float_encoding(model.dtype)
    sections = [(f"param/{p.name}", p.data, enc) for p in model.params]
    if model.masks is not None:
        sections += [(f"mask/{name}", m, "bits") for name, m in model.masks.items()]
    return sections


def model_meta(model: Model, extra: Optional[dict] = None) -> dict:
    meta = {
        "arch": model.arch,
        "arch_id": model.arch_id,
        "input_shape": list(model.input_shape),
        "num_classes": model.num_classes,
        "seed": model.seed,
        "dtype": model.dtype.name,
        "layers": [
            {"name": p.name, "shape": list(p.shape), "kind": p.kind, "prunable": p.prunable}
            for p in model.params
        ],
        "has_masks": model.masks is not None,
    }
    if model.masks is not None:
        meta["mask_info"] = {
            "method": model.masks.method,
            "scope": model.masks.scope,
            "compression": model.masks.compression,
        }
    if extra:
        meta["extra"] = extra
    return meta


def save_checkpoint(model: Model, path, extra: Optional[dict] = None):
    """Write ``model`` (parameters, masks and provenance) to ``path``."""
    extra = model.checkpoint_extra if extra is None else extra
    return container.write(path, "model", model_meta(model, extra), model_sections(model))


def model_from_container(meta: dict, arrays: dict, source: str = "") -> Model:
    model = Model(
        meta["arch"], meta["input_shape"], meta["num_classes"], seed=meta["seed"], dtype=np.dtype(meta["dtype"])
    )
    if model.arch_id != meta["arch_id"]:
        raise ArchitectureMismatchError(f"{source}: inconsistent architecture id {meta['arch_id']!r}")
    model.load_state({p.name: arrays[f"param/{p.name}"] for p in model.params})
    if meta["has_masks"]:
        info = meta["mask_info"]
        masks = MaskSet(
            {p.name: arrays[f"mask/{p.name}"] for p in model.params.prunable()},
            info["method"],
            info["scope"],
            info["compression"],
        )
        model.set_masks(masks)
    return model


def load_checkpoint(path, expected_arch_id: Optional[str] = None) -> Model:
    """Read a model checkpoint.

    Raises:
        FormatError / IntegrityError: from the container layer.
        ArchitectureMismatchError: if ``expected_arch_id`` is given and differs.
    """
    meta, arrays = container.read(path, kind="model")
    if expected_arch_id is not None and meta["arch_id"] != expected_arch_id:
        raise ArchitectureMismatchError(
            f"{path}: checkpoint holds {meta['arch_id']!r}, expected {expected_arch_id!r}"
        )
    model = model_from_container(meta, arrays, str(path))
    model.checkpoint_extra = meta.get("extra", {})
    return model
