"""Classic (non-learned) non-local denoisers.

Non-local means does soft matching: every neighbor in the ``q x q`` search
window contributes, weighted by patch similarity. The group filters use
hard block matching: the ``K`` closest patches form a ``K x p^2`` matrix
that is filtered jointly and scattered back with overlap averaging.

All patch and window indexing wraps around the image borders.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from sklearn.base import BaseEstimator, TransformerMixin

from .tensor import dct2_basis, dct_matrix, sym_eig
from .validation import check_image, check_image_stack, check_odd, check_positive_int

GROUP_MODES = ("wnnm", "wiener", "lssc")
DEFAULT_SHRINK = {"wnnm": 2.8, "wiener": 2.7, "lssc": 1.5}


@dataclass
class NLMConfig:
    p: int = 7
    q: int = 21
    h: float = 0.1
    a: float = float("inf")

    def __post_init__(self):
        check_odd(self.p, "p")
        check_odd(self.q, "q")
        if not self.h > 0:
            raise ValueError("h must be positive")
        if not self.a > 0:
            raise ValueError("a must be positive (inf disables spatial weighting)")


@dataclass
class GroupFilterConfig:
    """Settings of the block-matching group filters.

    ``c`` scales the shrinkage threshold (mode-specific default when None).
    For ``wiener`` it is the hard threshold, in units of ``sigma``, used to
    build the pilot estimate. ``eps`` switches ``lssc`` to the error-bounded
    joint-sparsity solution. ``stride=None`` picks 1 for images up to 96 px
    and 3 above.
    """

    mode: str = "wnnm"
    p: int = 5
    q: int = 15
    K: int = 32
    sigma: float = 0.0
    c: float | None = None
    eps: float | None = None
    stride: int | None = None

    def __post_init__(self):
        if self.mode not in GROUP_MODES:
            raise ValueError(f"mode must be one of {GROUP_MODES}, got {self.mode!r}")
        check_odd(self.p, "p")
        check_odd(self.q, "q")
        check_positive_int(self.K, "K")
        if self.K > self.q * self.q:
            raise ValueError(f"K={self.K} exceeds the {self.q * self.q} candidates of the window")
        if self.sigma < 0:
            raise ValueError("sigma must be >= 0")
        if self.stride is not None:
            check_positive_int(self.stride, "stride")

    @property
    def shrink(self) -> float:
        return DEFAULT_SHRINK[self.mode] if self.c is None else float(self.c)


@dataclass
class PatchGroup:
    reference_index: tuple
    member_indices: list
    distances: np.ndarray
    data: np.ndarray  # (K, p*p)


# ----------------------------------------------------------------------------
# patch geometry


def _box_sum(z: np.ndarray, p: int, a: float = float("inf")) -> np.ndarray:
    """Circular ``p x p`` (optionally Gaussian-weighted) sum over the last two axes."""
    pr = p // 2
    u = np.arange(-pr, pr + 1)
    k = np.ones(p) if np.isinf(a) else np.exp(-(u**2) / (2.0 * a * a))
    acc = np.zeros_like(z)
    for ku, shift in zip(k, u):
        acc += ku * np.roll(z, -shift, axis=-2)
    out = np.zeros_like(z)
    for ku, shift in zip(k, u):
        out += ku * np.roll(acc, -shift, axis=-1)
    return out


def window_offsets(q: int) -> np.ndarray:
    r = q // 2
    dy, dx = np.divmod(np.arange(q * q), q)
    return np.stack([dy - r, dx - r], axis=1)


def patch_distances(image: np.ndarray, p: int, q: int, a: float = float("inf")) -> np.ndarray:
    """``D[d, y, x]``: squared distance between the patch at ``(y, x)`` and the
    patch at window offset ``d`` (raster order)."""
    offs = window_offsets(q)
    diffs = np.empty((len(offs),) + image.shape, dtype=np.float64)
    for d, (oy, ox) in enumerate(offs):
        shifted = np.roll(image, (-oy, -ox), axis=(0, 1))
        diffs[d] = (image - shifted) ** 2
    return _box_sum(diffs, p, a)


def _patch_index(h: int, w: int, ys: np.ndarray, xs: np.ndarray, p: int) -> np.ndarray:
    """Flat pixel indices of the ``p x p`` patches centered at ``(ys, xs)``."""
    pr = p // 2
    u = np.arange(-pr, pr + 1)
    rows = (ys[..., None, None] + u[:, None]) % h
    cols = (xs[..., None, None] + u[None, :]) % w
    return (rows * w + cols).reshape(ys.shape + (p * p,))


def _rank_candidates(dist: np.ndarray, q: int) -> np.ndarray:
    """Order window offsets per reference: self first, then by distance,
    ties broken by raster order. ``dist`` is ``(q*q, G)``."""
    keyed = dist.copy()
    keyed[q * q // 2] = -1.0
    return np.argsort(keyed, axis=0, kind="stable")


def block_match(image, loc, cfg: GroupFilterConfig) -> PatchGroup:
    """The ``K`` patches of the window most similar to the patch at ``loc``."""
    img = check_image(image)
    h, w = img.shape
    y, x = int(loc[0]), int(loc[1])
    if not (0 <= y < h and 0 <= x < w):
        raise IndexError(f"location {loc} outside a {h}x{w} image")
    q, p, K = cfg.q, cfg.p, cfg.K
    if K > q * q:
        raise ValueError("K exceeds the number of candidates")
    offs = window_offsets(q)
    ref = img.ravel()[_patch_index(h, w, np.array(y), np.array(x), p)]
    cy, cx = (y + offs[:, 0]) % h, (x + offs[:, 1]) % w
    cand = img.ravel()[_patch_index(h, w, cy, cx, p)]
    dist = ((cand - ref) ** 2).sum(axis=1)
    order = _rank_candidates(dist[:, None], q)[:K, 0]
    members = [(int(cy[d]), int(cx[d])) for d in order]
    return PatchGroup((y, x), members, dist[order], cand[order])


# ----------------------------------------------------------------------------
# non-local means


def nlm_denoise(noisy, cfg: NLMConfig) -> np.ndarray:
    """Weighted average of window centers with weights ``exp(-d_ij / h^2)``."""
    img = check_image(noisy)
    if min(img.shape) < cfg.p:
        raise ValueError(f"image side must be >= p={cfg.p}")
    dist = patch_distances(img, cfg.p, cfg.q, cfg.a)
    inv_h2 = 1.0 / (cfg.h * cfg.h)
    num = np.zeros_like(img)
    den = np.zeros_like(img)
    for d, (oy, ox) in enumerate(window_offsets(cfg.q)):
        wgt = np.exp(-dist[d] * inv_h2)
        num += wgt * np.roll(img, (-oy, -ox), axis=(0, 1))
        den += wgt
    return num / den


# ----------------------------------------------------------------------------
# group filters


def _wnnm_batch(x: np.ndarray, sigma: float, c: float) -> np.ndarray:
    """Weighted singular-value shrinkage of a stack of ``(K, P)`` groups.

    Uses whichever Gram matrix is smaller; both give ``X U diag Uᵀ``.
    """
    n_rows, n_cols = x.shape[-2:]
    small_left = n_rows <= n_cols
    gram = x @ np.swapaxes(x, -1, -2) if small_left else np.swapaxes(x, -1, -2) @ x
    eig = sym_eig(gram)
    s = np.sqrt(np.maximum(eig.eigenvalues, 0.0))
    weight = c * np.sqrt(n_rows) * sigma**2
    if weight == 0:
        ratio = np.ones_like(s)
    else:
        shrunk = np.maximum(s - weight / (s + 1e-8), 0.0)
        ratio = np.divide(shrunk, s, out=np.zeros_like(s), where=s > 0)
    v = eig.eigenvectors
    proj = (v * ratio[..., None, :]) @ np.swapaxes(v, -1, -2)
    return proj @ x if small_left else x @ proj


def wnnm_project(group, cfg: GroupFilterConfig) -> np.ndarray:
    """Project the group onto its shrunk principal subspace."""
    x = group.data if isinstance(group, PatchGroup) else np.asarray(group, dtype=np.float64)
    return _wnnm_batch(x[None], cfg.sigma, cfg.shrink)[0]


def _group_transform(p: int, k: int):
    return dct2_basis(p), dct_matrix(k)


def _tau(x, basis, across):
    return across @ x @ basis.T


def _tau_inv(coef, basis, across):
    return across.T @ coef @ basis


def wiener_group_filter(group, pilot, sigma: float) -> np.ndarray:
    """Empirical Wiener shrinkage in the separable 3-D DCT domain."""
    x = group.data if isinstance(group, PatchGroup) else np.asarray(group, dtype=np.float64)
    pilot = np.asarray(pilot, dtype=np.float64)
    if pilot.shape != x.shape:
        raise ValueError(f"pilot shape {pilot.shape} differs from group shape {x.shape}")
    return _wiener_batch(x[None], pilot[None], sigma)[0]


def _wiener_batch(x, pilot, sigma):
    k, patch = x.shape[-2:]
    p = int(round(np.sqrt(patch)))
    if p * p != patch:
        raise ValueError("group rows must be square patches")
    basis, across = _group_transform(p, k)
    rho = _tau(pilot, basis, across)
    if sigma == 0:
        omega = np.ones_like(rho)
    else:
        omega = rho**2 / (rho**2 + sigma**2)
    return _tau_inv(omega * _tau(x, basis, across), basis, across)


def _hard_pilot(x, sigma, thresh):
    k, patch = x.shape[-2:]
    p = int(round(np.sqrt(patch)))
    basis, across = _group_transform(p, k)
    coef = _tau(x, basis, across)
    coef = np.where(np.abs(coef) >= thresh * sigma, coef, 0.0)
    return _tau_inv(coef, basis, across)


def lssc_shrink(group, cfg: GroupFilterConfig) -> np.ndarray:
    """Joint-sparsity shrinkage over a unitary 2-D DCT dictionary.

    Code columns (atoms) are kept or dropped for the whole group at once.
    """
    x = group.data if isinstance(group, PatchGroup) else np.asarray(group, dtype=np.float64)
    return _lssc_batch(x[None], cfg)[0]


def _lssc_batch(x, cfg):
    k, patch = x.shape[-2:]
    p = int(round(np.sqrt(patch)))
    if p * p != patch:
        raise ValueError("group rows must be square patches")
    dictionary = dct2_basis(p).T  # columns are atoms
    codes = x @ dictionary
    energy = (codes**2).sum(axis=-2)  # per atom, (G, P)
    if cfg.eps is not None:
        # drop the weakest atoms while the dropped energy stays within eps * K
        order = np.argsort(energy, axis=-1, kind="stable")
        cum = np.cumsum(np.take_along_axis(energy, order, axis=-1), axis=-1)
        drop_sorted = cum <= cfg.eps * k
        keep = np.ones_like(energy, dtype=bool)
        np.put_along_axis(keep, order, ~drop_sorted, axis=-1)
    else:
        t = cfg.sigma * np.sqrt(k) * cfg.shrink
        keep = np.sqrt(energy) >= t
    return (codes * keep[..., None, :]) @ dictionary.T


def _default_stride(shape) -> int:
    return 1 if max(shape) <= 96 else 3


def group_denoise_image(noisy, cfg: GroupFilterConfig) -> np.ndarray:
    """Block-match, filter each group, and average the overlapping estimates.

    The per-pixel mean patch of every group is removed before filtering and
    added back afterwards.
    """
    img = check_image(noisy)
    h, w = img.shape
    if min(h, w) < cfg.p:
        raise ValueError(f"image side must be >= p={cfg.p}")
    stride = cfg.stride or _default_stride(img.shape)
    ys, xs = np.meshgrid(np.arange(0, h, stride), np.arange(0, w, stride), indexing="ij")
    ys, xs = ys.ravel(), xs.ravel()

    dist = patch_distances(img, cfg.p, cfg.q)[:, ys, xs]
    order = _rank_candidates(dist, cfg.q)[: cfg.K]  # (K, G)
    offs = window_offsets(cfg.q)
    my = (ys[None, :] + offs[order, 0]) % h
    mx = (xs[None, :] + offs[order, 1]) % w
    idx = _patch_index(h, w, my.T, mx.T, cfg.p)  # (G, K, p*p)
    groups = img.ravel()[idx]

    mean = groups.mean(axis=1, keepdims=True)
    centered = groups - mean
    if cfg.mode == "wnnm":
        filtered = _wnnm_batch(centered, cfg.sigma, cfg.shrink)
    elif cfg.mode == "wiener":
        pilot = _hard_pilot(centered, cfg.sigma, cfg.shrink)
        filtered = _wiener_batch(centered, pilot, cfg.sigma)
    else:
        filtered = _lssc_batch(centered, cfg)
    estimates = filtered + mean

    flat = idx.ravel()
    num = np.bincount(flat, weights=estimates.ravel(), minlength=h * w)
    den = np.bincount(flat, minlength=h * w).astype(np.float64)
    out = img.ravel().copy()
    covered = den > 0
    out[covered] = num[covered] / den[covered]
    return out.reshape(h, w)


# ----------------------------------------------------------------------------
# estimator wrappers


class NonLocalMeans(TransformerMixin, BaseEstimator):
    """Non-local means denoiser with the scikit-learn transformer API.

    ``h=None`` derives the filtering degree from ``sigma`` as
    ``h_factor * sigma * p``.
    """

    def __init__(self, p=7, q=21, h=None, a=float("inf"), sigma=25 / 255, h_factor=1.0):
        self.p = p
        self.q = q
        self.h = h
        self.a = a
        self.sigma = sigma
        self.h_factor = h_factor

    def _config(self) -> NLMConfig:
        h = self.h if self.h is not None else self.h_factor * self.sigma * self.p
        return NLMConfig(p=self.p, q=self.q, h=h, a=self.a)

    def fit(self, X, y=None):
        self._config()
        check_image_stack(X)
        return self

    def transform(self, X):
        images, single = check_image_stack(X)
        cfg = self._config()
        out = [nlm_denoise(img, cfg) for img in images]
        return out[0] if single else _stack(out)


class GroupDenoiser(TransformerMixin, BaseEstimator):
    """Block-matching group filter (``wnnm``, ``wiener`` or ``lssc``)."""

    def __init__(self, mode="wnnm", p=5, q=15, K=32, sigma=25 / 255, c=None, eps=None, stride=None):
        self.mode = mode
        self.p = p
        self.q = q
        self.K = K
        self.sigma = sigma
        self.c = c
        self.eps = eps
        self.stride = stride

    def _config(self) -> GroupFilterConfig:
        return GroupFilterConfig(
            mode=self.mode, p=self.p, q=self.q, K=self.K, sigma=self.sigma,
            c=self.c, eps=self.eps, stride=self.stride,
        )

    def fit(self, X, y=None):
        self._config()
        check_image_stack(X)
        return self

    def transform(self, X):
        images, single = check_image_stack(X)
        cfg = self._config()
        out = [group_denoise_image(img, cfg) for img in images]
        return out[0] if single else _stack(out)


def _stack(images):
    if len({im.shape for im in images}) == 1:
        return np.stack(images)
    return images
