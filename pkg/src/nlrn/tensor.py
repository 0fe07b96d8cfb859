"""Dense array helpers and small linear-algebra kernels.

Arrays are plain :class:`numpy.ndarray` objects. Verification code runs in
float64; training runs in float32. The dtype is chosen at construction.
"""

from __future__ import annotations

from dataclasses import dataclass
from math import prod

import numpy as np

from .validation import NumericalError, check_finite

VERIFY_DTYPE = np.float64
TRAIN_DTYPE = np.float32


def create(shape, fill: float = 0.0, data=None, dtype=VERIFY_DTYPE) -> np.ndarray:
    """Create a dense array of ``shape`` filled with ``fill`` or with ``data``.

    Raises
    ------
    ValueError
        If an extent is < 1 or ``data`` does not hold ``prod(shape)`` values.
    """
    shape = tuple(int(s) for s in shape)
    if any(s < 1 for s in shape):
        raise ValueError(f"all extents must be >= 1, got {shape}")
    if data is None:
        return np.full(shape, fill, dtype=dtype)
    flat = np.asarray(data, dtype=dtype).ravel()
    if flat.size != prod(shape):
        raise ValueError(f"data has {flat.size} values but shape {shape} needs {prod(shape)}")
    return check_finite(flat.reshape(shape).copy(), "data")


def matmul(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    a = np.asarray(a)
    b = np.asarray(b)
    if a.ndim != 2 or b.ndim != 2:
        raise ValueError("matmul expects two matrices")
    if a.shape[1] != b.shape[0]:
        raise ValueError(f"inner dimensions differ: {a.shape} x {b.shape}")
    return a @ b


_BINARY = {
    "add": np.add,
    "sub": np.subtract,
    "mul": np.multiply,
}


def elementwise(op: str, a, b=None) -> np.ndarray:
    """Pointwise ``add``, ``sub``, ``mul``, ``scale``, ``exp`` or ``max0``.

    ``scale`` takes a scalar ``b``; the binary ops require equal shapes.
    """
    a = np.asarray(a)
    if op in _BINARY:
        b = np.asarray(b)
        if a.shape != b.shape:
            raise ValueError(f"shape mismatch for {op}: {a.shape} vs {b.shape}")
        out = _BINARY[op](a, b)
    elif op == "scale":
        out = a * float(b)
    elif op == "exp":
        with np.errstate(over="ignore"):
            out = np.exp(a)  # overflow is reported by check_finite
    elif op == "max0":
        out = np.maximum(a, 0)
    else:
        raise ValueError(f"unknown elementwise op {op!r}")
    return check_finite(out, op)


@dataclass(frozen=True)
class SymEigResult:
    """Eigenvalues sorted descending; eigenvectors stored as columns."""

    eigenvalues: np.ndarray
    eigenvectors: np.ndarray


def sym_eig(m, tol: float = 1e-12, max_sweeps: int = 100) -> SymEigResult:
    """Eigendecomposition of symmetric matrices by cyclic Jacobi rotations.

    ``m`` may be a single ``(K, K)`` matrix or a stack ``(..., K, K)``; the
    rotations are applied to the whole stack at once. Sweeps stop when every
    matrix has off-diagonal Frobenius norm below ``tol * ||m||_F``.

    Each eigenvector is sign-normalized so its first component with
    magnitude above 1e-12 is positive.
    """
    a = np.array(m, dtype=np.float64)
    if a.ndim < 2 or a.shape[-1] != a.shape[-2]:
        raise ValueError(f"expected square matrices, got shape {a.shape}")
    k = a.shape[-1]
    if k > 256:
        raise ValueError("sym_eig supports K <= 256")
    check_finite(a, "matrix")
    scale = np.maximum(np.abs(a).max(axis=(-2, -1)), 1.0)
    if np.any(np.abs(a - np.swapaxes(a, -1, -2)).max(axis=(-2, -1)) > 1e-8 * scale):
        raise ValueError("matrix is not symmetric within 1e-8")
    a = 0.5 * (a + np.swapaxes(a, -1, -2))

    batch = a.shape[:-2]
    a = a.reshape((-1, k, k))
    v = np.broadcast_to(np.eye(k), a.shape).copy()
    fro = np.sqrt((a * a).sum(axis=(1, 2)))
    limit = tol * np.maximum(fro, np.finfo(np.float64).tiny)
    off_mask = ~np.eye(k, dtype=bool)

    for _ in range(max_sweeps):
        off = np.sqrt((a[:, off_mask] ** 2).sum(axis=1))
        if np.all(off <= limit):
            break
        for p in range(k - 1):
            for q in range(p + 1, k):
                apq = a[:, p, q]
                active = np.abs(apq) > 1e-300
                if not active.any():
                    continue
                app = a[:, p, p]
                aqq = a[:, q, q]
                safe = np.where(active, apq, 1.0)
                tau = (aqq - app) / (2.0 * safe)
                t = np.where(tau >= 0, 1.0, -1.0) / (np.abs(tau) + np.hypot(1.0, tau))
                c = 1.0 / np.sqrt(1.0 + t * t)
                s = t * c
                c = np.where(active, c, 1.0)[:, None]
                s = np.where(active, s, 0.0)[:, None]

                col_p = a[:, :, p].copy()
                col_q = a[:, :, q]
                a[:, :, p] = c * col_p - s * col_q
                a[:, :, q] = s * col_p + c * col_q
                row_p = a[:, p, :].copy()
                row_q = a[:, q, :]
                a[:, p, :] = c * row_p - s * row_q
                a[:, q, :] = s * row_p + c * row_q
                a[:, p, q] = np.where(active, 0.0, a[:, p, q])
                a[:, q, p] = a[:, p, q]

                vp = v[:, :, p].copy()
                vq = v[:, :, q]
                v[:, :, p] = c * vp - s * vq
                v[:, :, q] = s * vp + c * vq
    else:
        off = np.sqrt((a[:, off_mask] ** 2).sum(axis=1))
        if not np.all(off <= limit):
            worst = float((off / limit).max())
            raise NumericalError(
                f"Jacobi did not converge in {max_sweeps} sweeps "
                f"(off-diagonal norm {worst:.3g}x above tolerance)"
            )

    lam = np.diagonal(a, axis1=1, axis2=2).copy()
    order = np.argsort(-lam, axis=1, kind="stable")
    lam = np.take_along_axis(lam, order, axis=1)
    v = np.take_along_axis(v, order[:, None, :], axis=2)

    significant = np.abs(v) > 1e-12
    first = np.argmax(significant, axis=1)
    lead = np.take_along_axis(v, first[:, None, :], axis=1)[:, 0, :]
    v = v * np.where(lead < 0, -1.0, 1.0)[:, None, :]

    return SymEigResult(lam.reshape(batch + (k,)), v.reshape(batch + (k, k)))


def dct_matrix(n: int) -> np.ndarray:
    """Orthonormal type-II DCT matrix; row ``u`` is the ``u``-th atom."""
    if n < 1:
        raise ValueError("n must be >= 1")
    idx = np.arange(n)
    mat = np.cos(np.pi * (2 * idx[None, :] + 1) * idx[:, None] / (2 * n))
    mat *= np.sqrt(2.0 / n)
    mat[0] /= np.sqrt(2.0)
    return mat


def dct2_basis(p: int) -> np.ndarray:
    """``p^2 x p^2`` orthonormal 2-D DCT; rows are vectorized (row-major) atoms."""
    if not 1 <= p <= 32:
        raise ValueError("patch side must satisfy 1 <= p <= 32")
    d = dct_matrix(p)
    return np.kron(d, d)
