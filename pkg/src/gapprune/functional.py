"""Differentiable layer operations built on :class:`~gapprune.tensor.Tensor`."""

from __future__ import annotations

import numpy as np

from .errors import DimensionError
from .tensor import Tensor


def conv2d(
    x: Tensor, kernel: Tensor, bias: Tensor, stride: int = 1, padding: int = 0
) -> Tensor:
    """2-D cross-correlation (no kernel flip) of ``[N,C,H,W]`` with ``[F,C,kH,kW]``."""
    if stride < 1 or padding < 0:
        raise DimensionError(f"invalid stride={stride} / padding={padding}")
    if x.ndim != 4 or kernel.ndim != 4:
        raise DimensionError(f"conv2d needs 4-D input and kernel, got {x.shape} and {kernel.shape}")
    n, c, h, w = x.shape
    f, kc, kh, kw = kernel.shape
    if kc != c:
        raise DimensionError(f"channel mismatch: input {x.shape} vs kernel {kernel.shape}")
    if bias.shape != (f,):
        raise DimensionError(f"bias shape {bias.shape} does not match {f} filters")
    span_h, span_w = h + 2 * padding - kh, w + 2 * padding - kw
    if span_h < 0 or span_w < 0 or span_h % stride or span_w % stride:
        raise DimensionError(
            f"output size not integral for input {x.shape}, kernel {kernel.shape}, "
            f"stride {stride}, padding {padding}"
        )
    ho, wo = span_h // stride + 1, span_w // stride + 1

    xd = x.data
    if padding:
        xd = np.pad(xd, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    # columns laid out as [C, kH, kW, N, H', W'] so each tap is one strided copy
    cols = np.empty((c, kh, kw, n, ho, wo), dtype=xd.dtype)
    xt = xd.transpose(1, 0, 2, 3)
    for i in range(kh):
        for j in range(kw):
            cols[:, i, j] = xt[:, :, i : i + stride * ho : stride, j : j + stride * wo : stride]
    cols = cols.reshape(c * kh * kw, n * ho * wo)
    kmat = kernel.data.reshape(f, -1)
    out = (kmat @ cols).reshape(f, n, ho, wo) + bias.data[:, None, None, None]
    out = np.ascontiguousarray(out.transpose(1, 0, 2, 3))
    padded_shape = (c, n) + xd.shape[2:]

    def backward(g):
        gm = g.transpose(1, 0, 2, 3).reshape(f, -1)
        dbias = gm.sum(axis=1) if bias.requires_grad else None
        dkernel = (gm @ cols.T).reshape(kernel.shape) if kernel.requires_grad else None
        dx = None
        if x.requires_grad:
            dcols = (kmat.T @ gm).reshape(c, kh, kw, n, ho, wo)
            dxp = np.zeros(padded_shape, dtype=g.dtype)
            for i in range(kh):
                for j in range(kw):
                    dxp[:, :, i : i + stride * ho : stride, j : j + stride * wo : stride] += dcols[:, i, j]
            dx = dxp[:, :, padding : padding + h, padding : padding + w].transpose(1, 0, 2, 3)
        return dx, dkernel, dbias

    return Tensor._from_op(out, (x, kernel, bias), backward, "conv2d")


def dense(x: Tensor, weight: Tensor, bias: Tensor) -> Tensor:
    """Affine map ``x @ weight + bias`` for ``x`` of shape ``[N,D]``."""
    if x.ndim != 2 or weight.ndim != 2 or x.shape[1] != weight.shape[0]:
        raise DimensionError(f"dense needs [N,D] x [D,K], got {x.shape} and {weight.shape}")
    if bias.shape != (weight.shape[1],):
        raise DimensionError(f"bias shape {bias.shape} does not match weight {weight.shape}")
    xd, wd = x.data, weight.data

    def backward(g):
        return (
            g @ wd.T if x.requires_grad else None,
            xd.T @ g if weight.requires_grad else None,
            g.sum(axis=0) if bias.requires_grad else None,
        )

    return Tensor._from_op(xd @ wd + bias.data, (x, weight, bias), backward, "dense")


def relu(x: Tensor) -> Tensor:
    # subgradient at exactly 0 is 0
    active = x.data > 0
    out = np.where(active, x.data, 0).astype(x.dtype)
    return Tensor._from_op(out, (x,), lambda g: (g * active,), "relu")


def maxpool2(x: Tensor) -> Tensor:
    """2x2, stride-2 max pooling; ties send the gradient to the first max in row-major order."""
    if x.ndim != 4:
        raise DimensionError(f"maxpool2 needs [N,C,H,W], got {x.shape}")
    n, c, h, w = x.shape
    if h % 2 or w % 2:
        raise DimensionError(f"maxpool2 needs even spatial dims, got {x.shape}")
    xd = x.data
    taps = [xd[:, :, 0::2, 0::2], xd[:, :, 0::2, 1::2], xd[:, :, 1::2, 0::2], xd[:, :, 1::2, 1::2]]
    out = np.maximum(np.maximum(taps[0], taps[1]), np.maximum(taps[2], taps[3]))
    # first tap (row-major) equal to the max wins
    winners = []
    taken = np.zeros(out.shape, dtype=bool)
    for tap in taps:
        win = (tap == out) & ~taken
        taken |= win
        winners.append(win)

    def backward(g):
        dx = np.zeros((n, c, h, w), dtype=g.dtype)
        dx[:, :, 0::2, 0::2] = g * winners[0]
        dx[:, :, 0::2, 1::2] = g * winners[1]
        dx[:, :, 1::2, 0::2] = g * winners[2]
        dx[:, :, 1::2, 1::2] = g * winners[3]
        return (dx,)

    return Tensor._from_op(out, (x,), backward, "maxpool2")


def flatten(x: Tensor) -> Tensor:
    return x.reshape(x.shape[0], -1)


def cross_entropy(logits: Tensor, labels, reduction: str = "mean") -> Tensor:
    """Softmax cross-entropy against integer labels.

    ``reduction`` is ``"mean"`` (training loss) or ``"sum"`` (used where
    per-example contributions must add up, e.g. saliency scores).
    """
    labels = np.asarray(labels)
    if logits.ndim != 2:
        raise DimensionError(f"logits must be [N,K], got {logits.shape}")
    n, k = logits.shape
    if labels.shape != (n,):
        raise DimensionError(f"labels shape {labels.shape} does not match logits {logits.shape}")
    if n and (labels.min() < 0 or labels.max() >= k):
        raise IndexError(f"labels must lie in [0, {k}), got range [{labels.min()}, {labels.max()}]")
    if reduction not in ("mean", "sum"):
        raise ValueError(f"unknown reduction {reduction!r}")

    z = logits.data
    shifted = z - z.max(axis=1, keepdims=True)
    logp = shifted - np.log(np.exp(shifted).sum(axis=1, keepdims=True))
    rows = np.arange(n)
    total = -logp[rows, labels].sum()
    scale = 1.0 / n if reduction == "mean" else 1.0
    out = np.asarray(total * scale, dtype=logits.dtype)

    def backward(g):
        d = np.exp(logp)
        d[rows, labels] -= 1
        return ((d * (g * scale)).astype(logits.dtype),)

    return Tensor._from_op(out, (logits,), backward, "cross_entropy")
