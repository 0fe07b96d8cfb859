"""Trainable non-local module confined to a q x q neighborhood.

For every location ``i`` the module scores each neighbor ``j`` in the
circularly wrapped ``q x q`` window, adds the correlation logits carried over
from the previous recurrent state, normalizes them, and aggregates the
embedded neighbors ``X_j W_g``. A skip connection adds the input back, so
``W_g = 0`` leaves the features untouched.

Correlation logits are stored offset-major as ``(n, q*q, H, W)``; offsets are
enumerated in raster order over the window, the center being ``q*q // 2``.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .diff_ops import GradTape, _batched, _unbatch
from .validation import check_odd

METRICS = (
    "euclidean_gaussian",
    "dot",
    "embedded_dot",
    "gaussian",
    "sym_embedded_gaussian",
    "embedded_gaussian",
)
# normalized by 1/|S_i| instead of a softmax
DOT_FAMILY = frozenset({"dot", "embedded_dot"})


@dataclass
class NonLocalWeights:
    w_theta: np.ndarray  # (m, l)
    w_psi: np.ndarray  # (m, l)
    w_g: np.ndarray  # (m, m)
    metric: str = "embedded_gaussian"
    h: float = 1.0

    def __post_init__(self):
        if self.metric not in METRICS:
            raise ValueError(f"unknown metric {self.metric!r}; choose from {METRICS}")
        m, l = self.w_theta.shape
        if self.w_psi.shape != (m, l) or self.w_g.shape != (m, m):
            raise ValueError("w_theta/w_psi must be (m, l) and w_g (m, m)")
        if l > m:
            raise ValueError("embedding width l must not exceed m")
        if self.h <= 0:
            raise ValueError("h must be positive")

    @property
    def channels(self) -> int:
        return self.w_theta.shape[0]


@dataclass
class CorrelationState:
    """Pre-normalization correlation logits, offset-major ``(n, q*q, H, W)``."""

    logits: np.ndarray
    q: int

    @classmethod
    def zeros(cls, n: int, height: int, width: int, q: int, dtype=np.float64):
        return cls(np.zeros((n, q * q, height, width), dtype=dtype), q)

    def grid(self) -> np.ndarray:
        """Logits laid out as ``(n, H, W, q, q)``."""
        n, _, h, w = self.logits.shape
        return self.logits.reshape(n, self.q, self.q, h, w).transpose(0, 3, 4, 1, 2)


def offsets(q: int):
    return [(dy, dx) for dy in range(q) for dx in range(q)]


def _wrap_pad(x: np.ndarray, r: int) -> np.ndarray:
    if r == 0:
        return x
    return np.pad(x, ((0, 0), (0, 0), (r, r), (r, r)), mode="wrap")


def _fold_matrix(size: int, r: int, dtype) -> np.ndarray:
    padded = size + 2 * r
    mat = np.zeros((padded, size), dtype=dtype)
    mat[np.arange(padded), (np.arange(padded) - r) % size] = 1
    return mat


def _fold(gpad: np.ndarray, height: int, width: int, r: int) -> np.ndarray:
    """Adjoint of :func:`_wrap_pad`: sum padded gradients onto their sources."""
    if r == 0:
        return gpad
    fy = _fold_matrix(height, r, gpad.dtype)
    fx = _fold_matrix(width, r, gpad.dtype)
    return np.matmul(fy.T, np.matmul(gpad, fx))


def extract_neighborhood(features: np.ndarray, q: int) -> np.ndarray:
    """``(m, H, W)`` features -> ``(H, W, q, q, m)`` circular neighborhoods."""
    q = check_odd(q, "q")
    if features.ndim != 3:
        raise ValueError("features must be (m, H, W)")
    m, h, w = features.shape
    r = q // 2
    padded = _wrap_pad(features[None], r)[0]
    out = np.empty((h, w, q, q, m), dtype=features.dtype)
    for dy, dx in offsets(q):
        out[:, :, dy, dx, :] = padded[:, dy : dy + h, dx : dx + w].transpose(1, 2, 0)
    return out


def _mix(x: np.ndarray, mat: np.ndarray) -> np.ndarray:
    """Per-pixel channel map: ``(n, m, H, W) x (m, k) -> (n, k, H, W)``."""
    n, m, h, w = x.shape
    return np.matmul(mat.T, x.reshape(n, m, h * w)).reshape(n, mat.shape[1], h, w)


def _outer(x: np.ndarray, g: np.ndarray) -> np.ndarray:
    """Sum over batch and pixels of ``x_i g_i^T``: ``-> (m, k)``."""
    return np.tensordot(x, g, axes=([0, 2, 3], [0, 2, 3]))


def _embeddings(x: np.ndarray, weights: NonLocalWeights):
    metric = weights.metric
    if metric in ("euclidean_gaussian", "dot", "gaussian"):
        return x, x
    theta = _mix(x, weights.w_theta)
    if metric == "sym_embedded_gaussian":
        return theta, theta
    psi = _mix(x, weights.w_psi)
    return theta, psi


def _logits(a, bpad, q, weights):
    n, c, h, w = a.shape
    out = np.empty((n, q * q, h, w), dtype=a.dtype)
    tmp = np.empty_like(a)
    euclid = weights.metric == "euclidean_gaussian"
    inv_h2 = 1.0 / (weights.h * weights.h)
    for d, (dy, dx) in enumerate(offsets(q)):
        bs = bpad[:, :, dy : dy + h, dx : dx + w]
        if euclid:
            np.subtract(a, bs, out=tmp)
            np.multiply(tmp, tmp, out=tmp)
        else:
            np.multiply(a, bs, out=tmp)
        np.sum(tmp, axis=1, out=out[:, d])
    if euclid:
        out *= -inv_h2
    return out


def _check_features(features, weights):
    xb, single = _batched(features)
    if xb.shape[1] != weights.channels:
        raise ValueError(f"features have {xb.shape[1]} channels, weights expect {weights.channels}")
    return xb, single


def correlation_logits(features: np.ndarray, weights: NonLocalWeights, q: int) -> CorrelationState:
    """Raw correlation logits of every location against its neighborhood."""
    q = check_odd(q, "q")
    xb, _ = _check_features(features, weights)
    a, b = _embeddings(xb, weights)
    return CorrelationState(_logits(a, _wrap_pad(b, q // 2), q, weights), q)


def normalize_logits(total: np.ndarray, metric: str) -> np.ndarray:
    if metric in DOT_FAMILY:
        return total / total.shape[1]
    shifted = total - total.max(axis=1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=1, keepdims=True)


def nonlocal_forward(
    features: np.ndarray,
    weights: NonLocalWeights,
    q: int,
    prior: CorrelationState | None = None,
):
    """Run the module; returns ``(output, emitted_state, tape)``.

    ``prior=None`` stands for the all-zero correlation state.
    """
    q = check_odd(q, "q")
    xb, single = _check_features(features, weights)
    n, m, h, w = xb.shape
    r = q // 2
    a, b = _embeddings(xb, weights)
    bpad = _wrap_pad(b, r)
    total = _logits(a, bpad, q, weights)
    if prior is not None:
        if prior.q != q or prior.logits.shape != total.shape:
            raise ValueError(
                f"prior logits shape {prior.logits.shape} does not match {total.shape}"
            )
        total += prior.logits
    attn = normalize_logits(total, weights.metric)

    g = _mix(xb, weights.w_g)
    gpad = _wrap_pad(g, r)
    agg = np.zeros_like(xb)
    tmp = np.empty_like(xb)
    for d, (dy, dx) in enumerate(offsets(q)):
        np.multiply(attn[:, d, None], gpad[:, :, dy : dy + h, dx : dx + w], out=tmp)
        agg += tmp
    out = xb + agg

    tape = GradTape(
        "nonlocal", x=xb, a=a, bpad=bpad, gpad=gpad, attn=attn,
        weights=weights, q=q, single=single,
    )
    return _unbatch(out, single), CorrelationState(total, q), tape


def nonlocal_backward(tape: GradTape, grad_output: np.ndarray, grad_emitted: np.ndarray | None = None):
    """Gradients w.r.t. features, ``w_theta``, ``w_psi``, ``w_g`` and the prior.

    ``grad_emitted`` is the gradient flowing into the emitted logits from the
    next recurrent state (``None`` means zero).
    """
    s = tape.consume()
    x, a, bpad, gpad, attn = s["x"], s["a"], s["bpad"], s["gpad"], s["attn"]
    weights, q = s["weights"], s["q"]
    n, m, h, w = x.shape
    r = q // 2
    gout, _ = _batched(grad_output)
    if gout.shape != x.shape:
        raise ValueError("grad_output shape does not match forward output")

    # aggregation: agg = sum_d attn_d * shift_d(g)
    g_attn = np.empty_like(attn)
    g_gpad = np.zeros_like(gpad)
    tmp = np.empty_like(gout)
    for d, (dy, dx) in enumerate(offsets(q)):
        sl = (slice(None), slice(None), slice(dy, dy + h), slice(dx, dx + w))
        np.multiply(gout, gpad[sl], out=tmp)
        np.sum(tmp, axis=1, out=g_attn[:, d])
        np.multiply(attn[:, d, None], gout, out=tmp)
        g_gpad[sl] += tmp
    g_g = _fold(g_gpad, h, w, r)
    grad_w_g = _outer(x, g_g)
    grad_x = gout + _mix(g_g, weights.w_g.T)

    if weights.metric in DOT_FAMILY:
        g_total = g_attn / (q * q)
    else:
        g_total = attn * (g_attn - (g_attn * attn).sum(axis=1, keepdims=True))
    if grad_emitted is not None:
        if grad_emitted.shape != g_total.shape:
            raise ValueError("grad_emitted shape does not match emitted logits")
        g_total = g_total + grad_emitted
    grad_prior = g_total

    # logits: l_d = <a, shift_d(b)> or -|a - shift_d(b)|^2 / h^2
    g_a = np.zeros_like(a)
    g_bpad = np.zeros_like(bpad)
    euclid = weights.metric == "euclidean_gaussian"
    coef = -2.0 / (weights.h * weights.h)
    if euclid:
        g_total_scaled = g_total * coef
    tmp = np.empty_like(a)
    for d, (dy, dx) in enumerate(offsets(q)):
        sl = (slice(None), slice(None), slice(dy, dy + h), slice(dx, dx + w))
        if euclid:
            np.subtract(a, bpad[sl], out=tmp)
            tmp *= g_total_scaled[:, d, None]
            g_a += tmp
            g_bpad[sl] -= tmp
        else:
            gt = g_total[:, d, None]
            np.multiply(gt, bpad[sl], out=tmp)
            g_a += tmp
            np.multiply(gt, a, out=tmp)
            g_bpad[sl] += tmp
    g_b = _fold(g_bpad, h, w, r)

    grad_w_theta = np.zeros_like(weights.w_theta)
    grad_w_psi = np.zeros_like(weights.w_psi)
    metric = weights.metric
    if metric in ("euclidean_gaussian", "dot", "gaussian"):
        grad_x = grad_x + g_a + g_b
    elif metric == "sym_embedded_gaussian":
        g_theta = g_a + g_b
        grad_w_theta = _outer(x, g_theta)
        grad_x = grad_x + _mix(g_theta, weights.w_theta.T)
    else:
        grad_w_theta = _outer(x, g_a)
        grad_w_psi = _outer(x, g_b)
        grad_x = grad_x + _mix(g_a, weights.w_theta.T)
        grad_x = grad_x + _mix(g_b, weights.w_psi.T)

    return _unbatch(grad_x, s["single"]), grad_w_theta, grad_w_psi, grad_w_g, grad_prior


def wrap_multiplicity(size: int, q: int) -> np.ndarray:
    """How many window offsets land on each cyclic displacement ``0..size-1``."""
    r = q // 2
    counts = np.zeros(size, dtype=np.int64)
    np.add.at(counts, np.arange(-r, r + 1) % size, 1)
    return counts


def dense_nonlocal_forward(features: np.ndarray, weights: NonLocalWeights, q: int | None = None):
    """Whole-image non-local operation built from the ``N x N`` correlation matrix.

    With ``q=None`` every location attends to every other location exactly
    once. With ``q`` given, each pair is weighted by how many offsets of the
    circular ``q x q`` window reach it, which reproduces the confined module
    whenever the window covers the image.

    Returns ``(output (m, H, W), logits (N, N))``.
    """
    if features.ndim != 3:
        raise ValueError("features must be (m, H, W)")
    m, h, w = features.shape
    x = features.reshape(m, h * w).T  # (N, m)
    metric = weights.metric
    if metric in ("euclidean_gaussian", "dot", "gaussian"):
        a = b = x
    elif metric == "sym_embedded_gaussian":
        a = b = x @ weights.w_theta
    else:
        a, b = x @ weights.w_theta, x @ weights.w_psi
    if metric == "euclidean_gaussian":
        sq = ((a[:, None, :] - b[None, :, :]) ** 2).sum(-1)
        logits = -sq / weights.h**2
    else:
        logits = a @ b.T

    ys, xs = np.divmod(np.arange(h * w), w)
    if q is None:
        mult = np.ones((h * w, h * w))
        size = h * w
    else:
        cy, cx = wrap_multiplicity(h, q), wrap_multiplicity(w, q)
        mult = cy[(ys[None, :] - ys[:, None]) % h] * cx[(xs[None, :] - xs[:, None]) % w]
        size = q * q
    g = x @ weights.w_g
    if metric in DOT_FAMILY:
        attn = mult * logits / size
    else:
        e = mult * np.exp(logits - logits.max(axis=1, keepdims=True))
        attn = e / e.sum(axis=1, keepdims=True)
    out = x + attn @ g
    return out.T.reshape(m, h, w), logits


def correlation_map(state: CorrelationState, y: int, x: int, metric: str, index: int = 0) -> np.ndarray:
    """Normalized correlation row of location ``(y, x)`` as a ``q x q`` map."""
    _, _, h, w = state.logits.shape
    if not (0 <= y < h and 0 <= x < w):
        raise IndexError(f"location ({y}, {x}) outside a {h}x{w} map")
    row = state.logits[index : index + 1, :, y : y + 1, x : x + 1]
    return normalize_logits(row, metric)[0, :, 0, 0].reshape(state.q, state.q)
