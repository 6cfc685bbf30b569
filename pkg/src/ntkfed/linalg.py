"""Dense float64 matrix/tensor primitives used by the training engine.

Everything here is pure and operates on plain numpy arrays: a third-order
tensor is an ``(n, d2, d)`` float64 array whose horizontal slice ``t[i]`` is
the d2 x d matrix for sample i and whose lateral slice ``t[:, j, :]`` is the
n x d matrix for output component j.
"""

import hashlib
import math
from dataclasses import dataclass
from fractions import Fraction

import numpy as np

__all__ = [
    "SparseTensor3",
    "frobenius_inner",
    "sym_eig",
    "sym_expm_apply",
    "topk_sparsify",
    "row_gram",
]


def _as_float_matrix(a, name: str) -> np.ndarray:
    a = np.asarray(a, dtype=np.float64)
    if a.ndim != 2:
        raise ValueError(f"{name} must be 2-D, got shape {a.shape}")
    return a


def frobenius_inner(a: np.ndarray, b: np.ndarray) -> float:
    """Frobenius inner product sum_ij a_ij * b_ij of two equal-shape matrices."""
    a = _as_float_matrix(a, "a")
    b = _as_float_matrix(b, "b")
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch: {a.shape} vs {b.shape}")
    return float(np.dot(a.ravel(), b.ravel()))


def sym_eig(m: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Eigendecomposition of a symmetric matrix.

    Returns (eigenvalues ascending, eigenvectors as orthonormal columns).
    Rejects matrices that are not symmetric within 1e-10 relative, contain
    non-finite entries, or exceed dimension 4096.
    """
    m = _as_float_matrix(m, "m")
    n, c = m.shape
    if n != c:
        raise ValueError(f"matrix must be square, got {m.shape}")
    if n > 4096:
        raise ValueError(f"dimension {n} exceeds the supported limit 4096")
    if not np.isfinite(m).all():
        raise ValueError("matrix contains non-finite entries")
    scale = float(np.abs(m).max()) if m.size else 0.0
    asym = float(np.abs(m - m.T).max()) if m.size else 0.0
    if asym > 1e-10 * max(scale, 1e-300):
        raise ValueError(f"matrix is not symmetric: max |m - m.T| = {asym:.3e}")
    vals, vecs = np.linalg.eigh((m + m.T) / 2.0)
    return vals, vecs


def sym_expm_apply(h: np.ndarray, c: float, v: np.ndarray) -> np.ndarray:
    """Apply the matrix exponential e^{-c h} of a symmetric h to v.

    Computed through the eigendecomposition of h, so it is exact for the
    symmetric part and intended as a closed-form reference for iterative
    training dynamics.
    """
    if c < 0:
        raise ValueError(f"c must be nonnegative, got {c}")
    v = np.asarray(v, dtype=np.float64)
    vec_in = v.ndim == 1
    if vec_in:
        v = v[:, None]
    vals, vecs = sym_eig(h)
    if v.shape[0] != vals.shape[0]:
        raise ValueError(f"dimension mismatch: h is {vals.shape[0]}, v has {v.shape[0]} rows")
    if c == 0.0:
        out = v.copy()  # exact identity rather than V V^T v up to round-off
    else:
        out = vecs @ (np.exp(-c * vals)[:, None] * (vecs.T @ v))
    return out[:, 0] if vec_in else out


@dataclass(frozen=True)
class SparseTensor3:
    """Top-k compressed third-order tensor.

    ``indices`` are strictly increasing flat positions into the row-major
    (n, d2, d) layout, ``values`` the surviving entries.
    """

    n: int
    d2: int
    d: int
    indices: np.ndarray
    values: np.ndarray

    def __post_init__(self):
        idx = np.asarray(self.indices, dtype=np.int64)
        val = np.asarray(self.values, dtype=np.float64)
        if idx.shape != val.shape or idx.ndim != 1:
            raise ValueError("indices and values must be 1-D and equally long")
        total = self.n * self.d2 * self.d
        if idx.size and (idx[0] < 0 or idx[-1] >= total):
            raise ValueError("flat indices out of range")
        if idx.size > 1 and not (np.diff(idx) > 0).all():
            raise ValueError("flat indices must be strictly increasing")
        object.__setattr__(self, "indices", idx)
        object.__setattr__(self, "values", val)

    @property
    def kept(self) -> int:
        return int(self.indices.size)

    @property
    def shape(self) -> tuple[int, int, int]:
        return (self.n, self.d2, self.d)

    def densify(self) -> np.ndarray:
        out = np.zeros(self.n * self.d2 * self.d, dtype=np.float64)
        out[self.indices] = self.values
        return out.reshape(self.n, self.d2, self.d)


def topk_sparsify(t: np.ndarray, sparsity: float) -> SparseTensor3:
    """Keep the ceil((1 - sparsity) * size) largest-magnitude entries of t.

    The threshold is global over the whole tensor; ties are broken in favour
    of the lower flat index.  ``sparsity`` must lie in [0, 1).
    """
    if not 0.0 <= sparsity < 1.0:
        raise ValueError(f"sparsity must lie in [0, 1), got {sparsity}")
    t = np.asarray(t, dtype=np.float64)
    if t.ndim != 3:
        raise ValueError(f"expected a third-order tensor, got shape {t.shape}")
    n, d2, d = t.shape
    flat = t.reshape(-1)
    # Fraction(str(.)) reads the sparsity as the decimal the caller wrote, so
    # e.g. 0.9 on 1000 entries keeps exactly 100 rather than tripping on
    # binary float rounding.
    k = math.ceil((1 - Fraction(str(sparsity))) * flat.size)
    if k >= flat.size:
        idx = np.arange(flat.size, dtype=np.int64)
    else:
        order = np.argsort(-np.abs(flat), kind="stable")
        idx = np.sort(order[:k])
    return SparseTensor3(n, d2, d, idx, flat[idx].copy())


def _content_order(rows: np.ndarray) -> np.ndarray:
    digests = [hashlib.blake2b(rows[i].tobytes(), digest_size=16).digest() for i in range(rows.shape[0])]
    return np.asarray(sorted(range(rows.shape[0]), key=digests.__getitem__), dtype=np.int64)


def row_gram(a: np.ndarray) -> np.ndarray:
    """Gram matrix g[i, j] = <a[i], a[j]>, exactly equivariant to row order.

    BLAS tiling makes a plain ``a @ a.T`` position-sensitive in the last few
    bits, so the rows are brought into a content-canonical order first and
    the result is mapped back; permuting the rows of ``a`` then permutes g by
    exactly the same permutation.
    """
    a = np.ascontiguousarray(np.asarray(a, dtype=np.float64))
    if a.ndim != 2:
        raise ValueError(f"expected a 2-D array, got shape {a.shape}")
    order = _content_order(a)
    sorted_rows = a[order]
    g_sorted = sorted_rows @ sorted_rows.T
    g_sorted = (g_sorted + g_sorted.T) / 2.0
    pos = np.empty_like(order)
    pos[order] = np.arange(order.size, dtype=np.int64)
    return np.ascontiguousarray(g_sorted[np.ix_(pos, pos)])
