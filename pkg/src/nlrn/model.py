"""Non-local recurrent network: shared-weight transition unrolled ``T`` times.

State ``s^t = (feat^t, corr^t)``. With ``s^0.feat = input_conv(I)`` and zero
initial correlation, each transition computes::

    nl, corr^t = nonlocal(feat^{t-1}, prior=corr^{t-1})
    feat^t     = conv2(relu(bn2(conv1(relu(bn1(nl)))))) + s^0.feat

and the residual image is ``output_conv(relu(bn_out(feat^T)))``. All learnable
tensors are shared across the ``T`` steps. ``bn1`` and ``bn2`` keep separate
running statistics per step, because feature scales differ by orders of
magnitude between early and late steps and one shared estimate breaks
inference-mode normalization.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np

from .diff_ops import (
    BatchNormLayer,
    ConvLayer,
    batchnorm_backward,
    batchnorm_forward,
    conv2d_backward,
    conv2d_forward,
    relu_backward,
    relu_forward,
)
from .nonlocal_module import (
    METRICS,
    CorrelationState,
    NonLocalWeights,
    nonlocal_backward,
    nonlocal_forward,
)
from .validation import check_odd, check_positive_int


@dataclass
class NlrnConfig:
    channels: int = 128
    embed: int = 64
    neighborhood: int = 45
    unroll: int = 12
    metric: str = "embedded_gaussian"
    h: float = 1.0
    propagate: bool = True

    def __post_init__(self):
        check_positive_int(self.channels, "channels")
        check_positive_int(self.embed, "embed")
        check_odd(self.neighborhood, "neighborhood")
        check_positive_int(self.unroll, "unroll")
        if self.embed > self.channels:
            raise ValueError("embed must not exceed channels")
        if self.metric not in METRICS:
            raise ValueError(f"unknown metric {self.metric!r}")

    def to_dict(self) -> dict:
        return asdict(self)


FULL_CONFIG = NlrnConfig()
DESK_CONFIG = NlrnConfig(channels=16, embed=8, neighborhood=9, unroll=3)

BN_NAMES = ("bn1", "bn2", "bn_out")


def param_shapes(cfg: NlrnConfig) -> list:
    m, l = cfg.channels, cfg.embed
    return [
        ("input_conv.weight", (m, 1, 3, 3)),
        ("input_conv.bias", (m,)),
        ("nl.w_theta", (m, l)),
        ("nl.w_psi", (m, l)),
        ("nl.w_g", (m, m)),
        ("bn1.gamma", (m,)),
        ("bn1.beta", (m,)),
        ("conv1.weight", (m, m, 3, 3)),
        ("conv1.bias", (m,)),
        ("bn2.gamma", (m,)),
        ("bn2.beta", (m,)),
        ("conv2.weight", (m, m, 3, 3)),
        ("conv2.bias", (m,)),
        ("bn_out.gamma", (m,)),
        ("bn_out.beta", (m,)),
        ("output_conv.weight", (1, m, 3, 3)),
        ("output_conv.bias", (1,)),
    ]


def buffer_shapes(cfg: NlrnConfig) -> list:
    """Running batch-norm statistics; the two in-loop layers keep one row per step."""
    m, t = cfg.channels, cfg.unroll
    out = []
    for bn in BN_NAMES:
        shape = (m,) if bn == "bn_out" else (t, m)
        out += [(f"{bn}.running_mean", shape), (f"{bn}.running_var", shape)]
    return out


def _fans(shape):
    if len(shape) == 4:
        rf = shape[2] * shape[3]
        return shape[1] * rf, shape[0] * rf
    return shape[0], shape[1]


@dataclass
class NlrnParams:
    """Learnable tensors and batch-norm buffers, one copy shared by every step."""

    config: NlrnConfig
    tensors: dict
    buffers: dict
    momentum: float = 0.9
    eps: float = 1e-5

    @property
    def dtype(self):
        return self.tensors["input_conv.weight"].dtype

    def conv(self, name: str) -> ConvLayer:
        return ConvLayer(self.tensors[f"{name}.weight"], self.tensors[f"{name}.bias"])

    def bn(self, name: str, step: int | None = None) -> BatchNormLayer:
        """Layer ``name``; in-loop layers take the running statistics of ``step``."""
        mean, var = self.buffers[f"{name}.running_mean"], self.buffers[f"{name}.running_var"]
        if mean.ndim == 2:
            if step is None:
                raise ValueError(f"{name} keeps per-step statistics; pass step")
            mean, var = mean[step], var[step]
        return BatchNormLayer(
            gamma=self.tensors[f"{name}.gamma"],
            beta=self.tensors[f"{name}.beta"],
            running_mean=mean,
            running_var=var,
            momentum=self.momentum,
            eps=self.eps,
        )

    def nonlocal_weights(self) -> NonLocalWeights:
        return NonLocalWeights(
            self.tensors["nl.w_theta"],
            self.tensors["nl.w_psi"],
            self.tensors["nl.w_g"],
            metric=self.config.metric,
            h=self.config.h,
        )

    def n_parameters(self) -> int:
        return sum(t.size for t in self.tensors.values())

    def copy(self) -> "NlrnParams":
        return NlrnParams(
            self.config,
            {k: v.copy() for k, v in self.tensors.items()},
            {k: v.copy() for k, v in self.buffers.items()},
            self.momentum,
            self.eps,
        )

    def astype(self, dtype) -> "NlrnParams":
        return NlrnParams(
            self.config,
            {k: v.astype(dtype) for k, v in self.tensors.items()},
            {k: v.astype(dtype) for k, v in self.buffers.items()},
            self.momentum,
            self.eps,
        )


def _default_buffers(cfg, dtype):
    out = {}
    for name, shape in buffer_shapes(cfg):
        fill = 1.0 if name.endswith("running_var") else 0.0
        out[name] = np.full(shape, fill, dtype=dtype)
    return out


def init_params(cfg: NlrnConfig, random_state=None, dtype=np.float32) -> NlrnParams:
    """Xavier-uniform weights, zero biases, unit BN scale.

    The output convolution starts at zero, so the untrained network returns
    its input unchanged (zero residual).
    """
    rng = np.random.default_rng(random_state)
    tensors = {}
    for name, shape in param_shapes(cfg):
        if name.endswith(".bias") or name.endswith(".beta") or name == "output_conv.weight":
            tensors[name] = np.zeros(shape, dtype=dtype)
        elif name.endswith(".gamma"):
            tensors[name] = np.ones(shape, dtype=dtype)
        else:
            fan_in, fan_out = _fans(shape)
            limit = np.sqrt(6.0 / (fan_in + fan_out))
            tensors[name] = rng.uniform(-limit, limit, size=shape).astype(dtype)
    return NlrnParams(cfg, tensors, _default_buffers(cfg, dtype))


def zero_params(cfg: NlrnConfig, dtype=np.float32) -> NlrnParams:
    tensors = {name: np.zeros(shape, dtype=dtype) for name, shape in param_shapes(cfg)}
    return NlrnParams(cfg, tensors, _default_buffers(cfg, dtype))


@dataclass
class RecurrentState:
    feat: np.ndarray  # (n, m, H, W)
    corr: CorrelationState


def _as_batch(image: np.ndarray, dtype) -> np.ndarray:
    img = np.asarray(image, dtype=dtype)
    if img.ndim == 2:
        return img[None, None]
    if img.ndim == 3:
        return img[:, None]
    if img.ndim == 4 and img.shape[1] == 1:
        return img
    raise ValueError(f"expected a single-channel image or stack, got shape {img.shape}")


def init_state(image: np.ndarray, params: NlrnParams):
    """``s^0``: input convolution of the image and all-zero correlation logits."""
    x = _as_batch(image, params.dtype)
    feat, tape = conv2d_forward(x, params.conv("input_conv"))
    n, _, h, w = x.shape
    q = params.config.neighborhood
    return RecurrentState(feat, CorrelationState.zeros(n, h, w, q, params.dtype)), tape


def _preact_conv(x, params, bn_name, conv_name, mode, step=None):
    y, t_bn = batchnorm_forward(x, params.bn(bn_name, step), mode)
    y, t_relu = relu_forward(y)
    y, t_conv = conv2d_forward(y, params.conv(conv_name))
    return y, (t_bn, t_relu, t_conv)


def _preact_conv_backward(tapes, grad, bn_name, conv_name, grads):
    t_bn, t_relu, t_conv = tapes
    g, gk, gb = conv2d_backward(t_conv, grad)
    _accumulate(grads, f"{conv_name}.weight", gk)
    _accumulate(grads, f"{conv_name}.bias", gb)
    g = relu_backward(t_relu, g)
    g, gg, gbeta = batchnorm_backward(t_bn, g)
    _accumulate(grads, f"{bn_name}.gamma", gg)
    _accumulate(grads, f"{bn_name}.beta", gbeta)
    return g


def _accumulate(grads: dict, name: str, value: np.ndarray) -> None:
    if name in grads:
        grads[name] += value
    else:
        grads[name] = value.copy()


def transition(
    state: RecurrentState, s0: RecurrentState, params: NlrnParams, mode: str = "train", step: int = 0
):
    """Recurrent step ``step`` (0-based); returns ``(new_state, tapes)``."""
    if state.feat.shape != s0.feat.shape:
        raise ValueError("state and s0 feature shapes differ")
    prior = state.corr if params.config.propagate else None
    nl_out, corr, t_nl = nonlocal_forward(
        state.feat, params.nonlocal_weights(), params.config.neighborhood, prior
    )
    h1, tapes1 = _preact_conv(nl_out, params, "bn1", "conv1", mode, step)
    h2, tapes2 = _preact_conv(h1, params, "bn2", "conv2", mode, step)
    return RecurrentState(h2 + s0.feat, corr), (t_nl, tapes1, tapes2)


class ForwardRecord:
    """Everything :func:`backward` needs; usable for one backward pass."""

    def __init__(self, image, states, input_tape, step_tapes, output_tapes, residual, propagate):
        self.image = image
        self.propagate = propagate
        self.states = states
        self.input_tape = input_tape
        self.step_tapes = step_tapes
        self.output_tapes = output_tapes
        self.residual = residual
        self.used = False

    @property
    def restored(self) -> np.ndarray:
        return self.residual + self.image


def forward(image: np.ndarray, params: NlrnParams, mode: str = "train"):
    """Unroll the network; returns ``(restored, record)``.

    ``restored = residual + image`` is left unclamped; clamp to [0, 1] only
    when exporting an image.
    """
    x = _as_batch(image, params.dtype)
    s0, t_in = init_state(x, params)
    states = [s0]
    step_tapes = []
    state = s0
    for t in range(params.config.unroll):
        state, tapes = transition(state, s0, params, mode, t)
        states.append(state)
        step_tapes.append(tapes)
    residual, out_tapes = _preact_conv(state.feat, params, "bn_out", "output_conv", mode)
    record = ForwardRecord(
        x, states, t_in, step_tapes, out_tapes, residual, params.config.propagate
    )
    return record.restored[:, 0], record


def loss(record: ForwardRecord, target: np.ndarray) -> float:
    """``0.5 * ||residual + I - target||^2`` averaged over the batch."""
    tgt = _as_batch(target, record.image.dtype)
    diff = record.restored - tgt
    return float(0.5 * np.sum(diff.astype(np.float64) ** 2) / diff.shape[0])


def backward(record: ForwardRecord, target: np.ndarray) -> dict:
    """Backpropagation through time; returns ``{param name: gradient}``."""
    if record.used:
        raise RuntimeError("forward record already consumed by a backward pass")
    record.used = True
    tgt = _as_batch(target, record.image.dtype)
    n = tgt.shape[0]
    grads: dict = {}

    g_res = (record.restored - tgt) / n
    g_feat = _preact_conv_backward(record.output_tapes, g_res, "bn_out", "output_conv", grads)

    g_s0 = np.zeros_like(g_feat)
    g_corr = None
    for t_nl, tapes1, tapes2 in reversed(record.step_tapes):
        g_s0 += g_feat
        g = _preact_conv_backward(tapes2, g_feat, "bn2", "conv2", grads)
        g = _preact_conv_backward(tapes1, g, "bn1", "conv1", grads)
        g_feat, gwt, gwp, gwg, g_prior = nonlocal_backward(t_nl, g, g_corr)
        _accumulate(grads, "nl.w_theta", gwt)
        _accumulate(grads, "nl.w_psi", gwp)
        _accumulate(grads, "nl.w_g", gwg)
        # without propagation each prior is the zero constant
        g_corr = g_prior if record.propagate else None
    g_s0 += g_feat

    _, gk, gb = conv2d_backward(record.input_tape, g_s0)
    _accumulate(grads, "input_conv.weight", gk)
    _accumulate(grads, "input_conv.bias", gb)
    return grads


def restore(image: np.ndarray, params: NlrnParams, clamp: bool = True) -> np.ndarray:
    """Inference on one ``(H, W)`` image with running batch-norm statistics."""
    restored, _ = forward(image, params, mode="infer")
    out = restored[0]
    return np.clip(out, 0.0, 1.0) if clamp else out
