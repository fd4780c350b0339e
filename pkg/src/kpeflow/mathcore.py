"""Small dense linear algebra, seeded random streams and assignment solving.

Matrices are plain ``numpy.ndarray`` objects of dtype float64; functions never
mutate their inputs.
"""

from __future__ import annotations

import numpy as np

from . import kernels
from .errors import DomainError, ValidationError

__all__ = [
    "RngStream",
    "as_matrix",
    "eigh_sym",
    "gauss_draw",
    "hungarian",
    "spd_sqrt",
]


def as_matrix(m, name="matrix"):
    """Validate and return a finite 2-D float64 array (read-only copy)."""
    arr = np.array(m, dtype=np.float64, copy=True)
    if arr.ndim != 2:
        raise ValidationError(f"{name} must be 2-D, got shape {arr.shape}")
    if not np.all(np.isfinite(arr)):
        raise ValidationError(f"{name} has non-finite entries")
    arr.setflags(write=False)
    return arr


def _check_symmetric(m, rtol=1e-10):
    if m.shape[0] != m.shape[1]:
        raise ValidationError(f"expected a square matrix, got shape {m.shape}")
    scale = max(1.0, float(np.max(np.abs(m))) if m.size else 1.0)
    if np.max(np.abs(m - m.T), initial=0.0) > rtol * scale:
        raise ValidationError("matrix is not symmetric")


def eigh_sym(m):
    """Eigendecomposition of a symmetric matrix by cyclic Jacobi rotations.

    Returns
    -------
    eigenvalues : ndarray, shape (n,)
        Sorted in descending order.
    eigenvectors : ndarray, shape (n, n)
        Orthonormal columns; column ``i`` pairs with ``eigenvalues[i]``. Each
        column is signed so that its largest-magnitude entry is positive.
    """
    a = as_matrix(m)
    _check_symmetric(a)
    sym = np.ascontiguousarray(0.5 * (a + a.T))
    w, v = kernels.jacobi_eigh(sym)
    order = np.argsort(-w, kind="stable")
    w = w[order]
    v = np.ascontiguousarray(v[:, order])
    for j in range(v.shape[1]):
        col = v[:, j]
        if col[np.argmax(np.abs(col))] < 0:
            v[:, j] = -col
    return w, v


def spd_sqrt(m):
    """Symmetric square root ``B`` with ``B @ B == m`` of an SPD matrix."""
    w, v = eigh_sym(m)
    if w.size == 0 or w[-1] <= 1e-12:
        raise DomainError(f"matrix is not positive definite (smallest eigenvalue {w[-1] if w.size else 'n/a'})")
    b = (v * np.sqrt(w)) @ v.T
    return 0.5 * (b + b.T)


def hungarian(cost):
    """Minimum-cost perfect assignment for a square cost matrix.

    Returns an integer array ``perm`` where row ``i`` is assigned column
    ``perm[i]``.
    """
    c = np.asarray(cost, dtype=np.float64)
    if c.ndim != 2 or c.shape[0] != c.shape[1]:
        raise ValidationError(f"cost matrix must be square, got shape {c.shape}")
    if c.shape[0] < 1:
        raise ValidationError("cost matrix is empty")
    if not np.all(np.isfinite(c)):
        raise ValidationError("cost matrix has non-finite entries")
    return kernels.hungarian(np.ascontiguousarray(c))


class RngStream:
    """Counter-based random stream keyed by ``(master_seed, stream_index)``.

    Backed by the Philox counter-based bit generator. The key is derived from
    both integers, so each trajectory owns an independent, reproducible stream
    regardless of the order in which streams are consumed.
    """

    __slots__ = ("master_seed", "stream_index", "_gen")

    def __init__(self, master_seed: int, stream_index: int = 0):
        if master_seed < 0 or master_seed >= 2**64:
            raise ValidationError("master_seed must fit in an unsigned 64-bit integer")
        if stream_index < 0:
            raise ValidationError("stream_index must be non-negative")
        self.master_seed = int(master_seed)
        self.stream_index = int(stream_index)
        seq = np.random.SeedSequence(self.master_seed, spawn_key=(self.stream_index,))
        self._gen = np.random.Generator(np.random.Philox(seq))

    @property
    def generator(self) -> np.random.Generator:
        return self._gen

    @property
    def identity(self):
        return (self.master_seed, self.stream_index)

    def __repr__(self):
        return f"RngStream(master_seed={self.master_seed}, stream_index={self.stream_index})"


def gauss_draw(stream: RngStream, dim: int) -> np.ndarray:
    """Draw ``dim`` i.i.d. standard normal values, advancing ``stream``."""
    if dim < 1:
        raise ValidationError("dim must be >= 1")
    return stream.generator.standard_normal(dim)
