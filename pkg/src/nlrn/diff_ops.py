"""Differentiable primitives with explicit forward and backward passes.

Every ``*_forward`` returns ``(output, tape)``; the matching ``*_backward``
consumes the tape exactly once and returns gradients of
``sum(grad_out * output)`` with respect to the inputs and parameters.

Feature maps are ``(n, ch, h, w)``; a single ``(ch, h, w)`` map is accepted
and the batch axis is stripped again on the way out.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np


class TapeReuseError(RuntimeError):
    """Raised when a backward pass is run twice on the same tape."""


class GradTape:
    """Forward intermediates kept for one backward pass."""

    def __init__(self, op: str, **saved):
        self.op = op
        self._saved = saved
        self._used = False

    def consume(self) -> dict:
        if self._used:
            raise TapeReuseError(f"{self.op} tape already used by a backward pass")
        self._used = True
        saved = self._saved
        self._saved = {}
        return saved

    @property
    def used(self) -> bool:
        return self._used


@dataclass
class ConvLayer:
    kernel: np.ndarray  # (out_ch, in_ch, kh, kw)
    bias: np.ndarray  # (out_ch,)

    def __post_init__(self):
        if self.kernel.ndim != 4 or self.kernel.shape[2:] not in ((1, 1), (3, 3)):
            raise ValueError(f"kernel must be (out, in, 1|3, 1|3), got {self.kernel.shape}")
        if self.bias.shape != (self.kernel.shape[0],):
            raise ValueError("bias length must equal out_ch")

    @property
    def in_ch(self) -> int:
        return self.kernel.shape[1]

    @property
    def out_ch(self) -> int:
        return self.kernel.shape[0]


@dataclass
class BatchNormLayer:
    gamma: np.ndarray
    beta: np.ndarray
    running_mean: np.ndarray
    running_var: np.ndarray
    momentum: float = 0.9
    eps: float = 1e-5

    @classmethod
    def create(cls, ch: int, dtype=np.float64) -> "BatchNormLayer":
        return cls(
            gamma=np.ones(ch, dtype=dtype),
            beta=np.zeros(ch, dtype=dtype),
            running_mean=np.zeros(ch, dtype=dtype),
            running_var=np.ones(ch, dtype=dtype),
        )


def _batched(x: np.ndarray):
    if x.ndim == 3:
        return x[None], True
    if x.ndim == 4:
        return x, False
    raise ValueError(f"expected (ch, h, w) or (n, ch, h, w), got shape {x.shape}")


def _unbatch(y: np.ndarray, single: bool) -> np.ndarray:
    return y[0] if single else y


# ----------------------------------------------------------------------------
# convolution


def conv2d_forward(x: np.ndarray, layer: ConvLayer, pad: str = "zero"):
    """Stride-1, size-preserving convolution (cross-correlation)."""
    if pad != "zero":
        raise ValueError("only zero padding is supported")
    xb, single = _batched(x)
    n, c, h, w = xb.shape
    if c != layer.in_ch:
        raise ValueError(f"input has {c} channels, layer expects {layer.in_ch}")
    k = layer.kernel.shape[2]
    if k == 1:
        cols = xb.reshape(n, c, h * w)
    else:
        xp = np.pad(xb, ((0, 0), (0, 0), (1, 1), (1, 1)))
        cols = np.empty((n, c, 3, 3, h, w), dtype=xb.dtype)
        for ky in range(3):
            for kx in range(3):
                cols[:, :, ky, kx] = xp[:, :, ky : ky + h, kx : kx + w]
        cols = cols.reshape(n, c * 9, h * w)
    w2 = layer.kernel.reshape(layer.out_ch, -1)
    y = np.matmul(w2, cols) + layer.bias[:, None]
    tape = GradTape("conv2d", cols=cols, layer=layer, shape=xb.shape, single=single)
    return _unbatch(y.reshape(n, layer.out_ch, h, w), single), tape


def conv2d_backward(tape: GradTape, grad_out: np.ndarray):
    s = tape.consume()
    cols, layer, single = s["cols"], s["layer"], s["single"]
    n, c, h, w = s["shape"]
    g, _ = _batched(grad_out)
    if g.shape != (n, layer.out_ch, h, w):
        raise ValueError(f"grad_out shape {g.shape} does not match forward output")
    g2 = g.reshape(n, layer.out_ch, h * w)
    grad_bias = g2.sum(axis=(0, 2))
    grad_kernel = np.einsum("nop,nkp->ok", g2, cols).reshape(layer.kernel.shape)
    w2 = layer.kernel.reshape(layer.out_ch, -1)
    gcols = np.matmul(w2.T, g2)
    if layer.kernel.shape[2] == 1:
        gx = gcols.reshape(n, c, h, w)
    else:
        gcols = gcols.reshape(n, c, 3, 3, h, w)
        gxp = np.zeros((n, c, h + 2, w + 2), dtype=g.dtype)
        for ky in range(3):
            for kx in range(3):
                gxp[:, :, ky : ky + h, kx : kx + w] += gcols[:, :, ky, kx]
        gx = gxp[:, :, 1:-1, 1:-1]
    return _unbatch(gx, single), grad_kernel, grad_bias


# ----------------------------------------------------------------------------
# ReLU


def relu_forward(x: np.ndarray):
    mask = x > 0
    return np.where(mask, x, 0).astype(x.dtype, copy=False), GradTape("relu", mask=mask)


def relu_backward(tape: GradTape, grad_out: np.ndarray) -> np.ndarray:
    mask = tape.consume()["mask"]
    if grad_out.shape != mask.shape:
        raise ValueError("grad_out shape does not match forward output")
    # subgradient at exactly 0 is 0
    return np.where(mask, grad_out, 0).astype(grad_out.dtype, copy=False)


# ----------------------------------------------------------------------------
# batch normalization


def batchnorm_forward(x: np.ndarray, layer: BatchNormLayer, mode: str = "train"):
    """Per-channel normalization over the (n, h, w) axes.

    In ``train`` mode the batch statistics are used and the running buffers
    are updated in place as ``r <- momentum * r + (1 - momentum) * batch``.
    """
    xb, single = _batched(x)
    n, c, h, w = xb.shape
    if c != layer.gamma.shape[0]:
        raise ValueError(f"input has {c} channels, layer expects {layer.gamma.shape[0]}")
    if mode == "train":
        count = n * h * w
        if count < 2:
            raise ValueError("train-mode batch norm needs at least 2 values per channel")
        mean = xb.mean(axis=(0, 2, 3))
        var = xb.var(axis=(0, 2, 3))
        mom = layer.momentum
        layer.running_mean[...] = mom * layer.running_mean + (1 - mom) * mean
        layer.running_var[...] = mom * layer.running_var + (1 - mom) * var * count / (count - 1)
    elif mode == "infer":
        mean, var = layer.running_mean, layer.running_var
    else:
        raise ValueError(f"mode must be 'train' or 'infer', got {mode!r}")
    inv_std = 1.0 / np.sqrt(var + layer.eps)
    xhat = (xb - mean[:, None, None]) * inv_std[:, None, None]
    y = layer.gamma[:, None, None] * xhat + layer.beta[:, None, None]
    tape = GradTape("batchnorm", xhat=xhat, inv_std=inv_std, layer=layer, mode=mode, single=single)
    return _unbatch(y.astype(xb.dtype, copy=False), single), tape


def batchnorm_backward(tape: GradTape, grad_out: np.ndarray):
    s = tape.consume()
    xhat, inv_std, layer = s["xhat"], s["inv_std"], s["layer"]
    g, _ = _batched(grad_out)
    if g.shape != xhat.shape:
        raise ValueError("grad_out shape does not match forward output")
    grad_beta = g.sum(axis=(0, 2, 3))
    grad_gamma = (g * xhat).sum(axis=(0, 2, 3))
    scale = (layer.gamma * inv_std)[:, None, None]
    if s["mode"] == "infer":
        gx = g * scale
    else:
        g_mean = g.mean(axis=(0, 2, 3), keepdims=True)
        gx_mean = (g * xhat).mean(axis=(0, 2, 3), keepdims=True)
        gx = scale * (g - g_mean - xhat * gx_mean)
    return _unbatch(gx, s["single"]), grad_gamma, grad_beta


# ----------------------------------------------------------------------------
# softmax


def softmax_rows_forward(logits: np.ndarray, axis: int = -1):
    """Numerically stable softmax along ``axis`` (rows by default)."""
    shifted = logits - logits.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    weights = e / e.sum(axis=axis, keepdims=True)
    return weights, GradTape("softmax", weights=weights, axis=axis)


def softmax_rows_backward(tape: GradTape, grad_out: np.ndarray) -> np.ndarray:
    s = tape.consume()
    w, axis = s["weights"], s["axis"]
    if grad_out.shape != w.shape:
        raise ValueError("grad_out shape does not match forward output")
    return w * (grad_out - (grad_out * w).sum(axis=axis, keepdims=True))
