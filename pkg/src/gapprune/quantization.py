"""Post-training 8-bit weight quantization (asymmetric, per tensor)."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Dict, Optional, Tuple

import numpy as np

from . import container
from .errors import ContractError
from .model import MaskSet, Model, model_from_container, model_meta

QMIN, QMAX = 0, 255
SCALE_FLOOR = 1e-12


def round_half_away(x: np.ndarray) -> np.ndarray:
    return np.sign(x) * np.floor(np.abs(x) + 0.5)


@dataclass(frozen=True)
class QuantParams:
    scale: float
    zero_point: int

    def __post_init__(self):
        if not self.scale > 0:
            raise ContractError(f"scale must be positive, got {self.scale}")
        if not QMIN <= self.zero_point <= QMAX:
            raise ContractError(f"zero_point {self.zero_point} outside [{QMIN}, {QMAX}]")


def quant_params(w: np.ndarray) -> QuantParams:
    """Scale and zero point for ``w``; the range is widened to include 0 so zero is exact."""
    w = np.asarray(w, dtype=np.float64)
    lo = min(float(w.min()), 0.0) if w.size else 0.0
    hi = max(float(w.max()), 0.0) if w.size else 0.0
    scale = max((hi - lo) / (QMAX - QMIN), SCALE_FLOOR)
    zero_point = int(np.clip(round_half_away(np.float64(-lo / scale)), QMIN, QMAX))
    return QuantParams(scale, zero_point)


def quantize_tensor(w: np.ndarray, params: Optional[QuantParams] = None) -> Tuple[np.ndarray, QuantParams]:
    params = params or quant_params(w)
    q = round_half_away(np.asarray(w, dtype=np.float64) / params.scale) + params.zero_point
    return np.clip(q, QMIN, QMAX).astype(np.uint8), params


def dequantize_tensor(codes: np.ndarray, params: QuantParams) -> np.ndarray:
    return (codes.astype(np.float64) - params.zero_point) * params.scale


class QuantizedModel:
    """Weight-only 8-bit model; biases and activations stay in full precision.

    ``twin`` is the full-precision model the codes were computed from and is
    used for gradient queries when attacking the quantized model.
    """

    def __init__(
        self,
        twin: Model,
        codes: Dict[str, np.ndarray],
        params: Dict[str, QuantParams],
        enabled: bool = True,
    ):
        self.twin = twin
        self.codes = codes
        self.qparams = params
        self.enabled = enabled
        self._model = self._materialize()

    def _materialize(self) -> Model:
        model = self.twin.copy()
        if self.enabled:
            for name, codes in self.codes.items():
                p = model.params[name]
                p.tensor.data = dequantize_tensor(codes, self.qparams[name]).astype(model.dtype)
        return model

    @property
    def arch_id(self) -> str:
        return self.twin.arch_id

    @property
    def input_shape(self):
        return self.twin.input_shape

    @property
    def num_classes(self) -> int:
        return self.twin.num_classes

    @property
    def dtype(self):
        return self.twin.dtype

    @property
    def masks(self) -> Optional[MaskSet]:
        return self.twin.masks

    def dequantized(self) -> Model:
        """A full-precision :class:`Model` holding the dequantized weights."""
        return self._model

    def forward(self, images, apply_masks: bool = True):
        return self._model.forward(images, apply_masks)

    def logits(self, images: np.ndarray, batch_size: int = 1024) -> np.ndarray:
        return self._model.logits(images, batch_size)

    def predict(self, images: np.ndarray, batch_size: int = 1024) -> np.ndarray:
        return self._model.predict(images, batch_size)

    def accuracy(self, images: np.ndarray, labels: np.ndarray) -> float:
        return self._model.accuracy(images, labels)

    def round_trip_errors(self) -> Dict[str, float]:
        """Largest |w - dequantize(quantize(w))| per quantized tensor."""
        out = {}
        for name, codes in self.codes.items():
            w = self.twin.params[name].data.astype(np.float64)
            out[name] = float(np.abs(w - self._model.params[name].data.astype(np.float64)).max())
        return out


def quantize_model(model: Model, enabled: bool = True) -> QuantizedModel:
    """Quantize every weight tensor of ``model`` to 8-bit codes.

    ``enabled=False`` builds the identity quantizer: codes are still computed
    but the forward pass uses the original weights.
    """
    codes, params = {}, {}
    for p in model.params:
        if p.kind != "weight":
            continue
        codes[p.name], params[p.name] = quantize_tensor(p.data)
    return QuantizedModel(model.copy(), codes, params, enabled)


def forward_quantized(qmodel: QuantizedModel, images) -> np.ndarray:
    return qmodel.logits(np.asarray(images))


def save_quantized(qmodel: QuantizedModel, path):
    """Store codes as 8-bit sections, scales and zero points in the metadata,
    and the remaining full-precision tensors alongside."""
    twin = qmodel.twin
    meta = model_meta(twin, twin.checkpoint_extra)
    meta["enabled"] = qmodel.enabled
    meta["quant"] = {
        name: {"scale": qp.scale, "zero_point": qp.zero_point} for name, qp in qmodel.qparams.items()
    }
    enc = "f8" if twin.dtype == np.float64 else "f4"
    sections = [(f"code/{n}", c, "u1") for n, c in qmodel.codes.items()]
    # the twin is kept so gradient queries survive a save/load cycle
    sections += [(f"param/{p.name}", p.data, enc) for p in twin.params]
    if twin.masks is not None:
        sections += [(f"mask/{n}", m, "bits") for n, m in twin.masks.items()]
    return container.write(path, "quantized", meta, sections)


def load_quantized(path) -> QuantizedModel:
    meta, arrays = container.read(path, kind="quantized")
    twin = model_from_container(meta, arrays, str(path))
    twin.checkpoint_extra = meta.get("extra", {})
    codes = {n: arrays[f"code/{n}"] for n in meta["quant"]}
    params = {n: QuantParams(q["scale"], q["zero_point"]) for n, q in meta["quant"].items()}
    return QuantizedModel(twin, codes, params, meta["enabled"])
