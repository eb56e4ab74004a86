"""Dense float64 matrix helpers and a one-sided Jacobi truncated SVD.

Matrices are plain 2-D ``numpy.ndarray`` objects in row-major order.
"""

from dataclasses import dataclass

import numpy as np

from ._backend import kernels
from .errors import InputError, RankError, ShapeError

_JACOBI_TOL = 1e-15
_JACOBI_MAX_SWEEPS = 80


def as_matrix(x, name="matrix"):
    """Return ``x`` as a C-contiguous float64 2-D array, rejecting non-finite data."""
    a = np.ascontiguousarray(x, dtype=np.float64)
    if a.ndim != 2:
        raise ShapeError(f"{name} must be 2-D, got shape {a.shape}")
    if not np.all(np.isfinite(a)):
        raise InputError(f"{name} contains non-finite entries")
    return a


def matmul(a, b):
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.ndim != 2 or b.ndim != 2:
        raise ShapeError(f"matmul expects 2-D operands, got {a.shape} and {b.shape}")
    if a.shape[1] != b.shape[0]:
        raise ShapeError(f"cannot multiply {a.shape} by {b.shape}")
    return a @ b


def batched_matmul(pairs):
    """Multiply each ``(a, b)`` pair, preserving order."""
    out = []
    for i, (a, b) in enumerate(pairs):
        try:
            out.append(matmul(a, b))
        except ShapeError as exc:
            raise ShapeError(f"batch entry {i}: {exc}") from None
    return out


def frobenius(a):
    return float(np.linalg.norm(a))


def relative_error(actual, expected):
    """Relative Frobenius distance ``|actual - expected| / |expected|`` (absolute when expected is 0)."""
    actual = np.asarray(actual, dtype=np.float64)
    expected = np.asarray(expected, dtype=np.float64)
    if actual.shape != expected.shape:
        raise ShapeError(f"shape mismatch {actual.shape} vs {expected.shape}")
    denom = np.linalg.norm(expected)
    diff = np.linalg.norm(actual - expected)
    return float(diff / denom) if denom > 0 else float(diff)


@dataclass(frozen=True)
class TruncatedSVDResult:
    """Rank-k factors with the singular weight split evenly between them.

    ``left_factor @ right_factor`` is the best rank-k approximation; each
    column of ``left_factor`` and matching row of ``right_factor`` has norm
    ``sqrt(sigma_i)``.
    """

    left_factor: np.ndarray
    right_factor: np.ndarray
    retained_singular_values: np.ndarray
    discarded_energy: float

    @property
    def rank(self):
        return self.left_factor.shape[1]


def svd_jacobi(w):
    """Thin SVD ``w = U diag(s) Vt`` by one-sided Jacobi rotations.

    Singular values come back sorted non-increasing. Columns of ``U`` that
    belong to zero singular values are zero rather than completed to an
    orthonormal basis.
    """
    w = as_matrix(w, "w")
    rows, cols = w.shape
    transposed = rows < cols
    a = w.T if transposed else w
    n = a.shape[1]
    # rows of g are the columns being orthogonalised; always a private copy
    g = np.array(a.T, dtype=np.float64, order="C", copy=True)
    v = np.eye(n)
    _, converged = kernels.jacobi_sweeps(g, v, _JACOBI_TOL, _JACOBI_MAX_SWEEPS)
    if not converged:
        raise InputError("Jacobi SVD did not converge")
    s = np.sqrt(np.einsum("ij,ij->i", g, g))
    order = np.argsort(-s, kind="stable")
    s = s[order]
    g = g[order]
    v = v[order]
    u = np.zeros_like(g)
    nz = s > 0
    u[nz] = g[nz] / s[nz, None]
    # u rows are left vectors of ``a``; v rows are right vectors of ``a``
    if transposed:
        return v.T, s, u
    return u.T, s, v


def truncated_svd(w, k):
    w = as_matrix(w, "w")
    k = int(k)
    if not 1 <= k <= min(w.shape):
        raise RankError(f"rank {k} outside [1, {min(w.shape)}] for shape {w.shape}")
    u, s, vt = svd_jacobi(w)
    root = np.sqrt(s[:k])
    left = np.ascontiguousarray(u[:, :k] * root[None, :])
    right = np.ascontiguousarray(vt[:k] * root[:, None])
    tail = s[k:]
    return TruncatedSVDResult(
        left_factor=left,
        right_factor=right,
        retained_singular_values=s[:k].copy(),
        discarded_energy=float(np.sum(tail * tail)),
    )
