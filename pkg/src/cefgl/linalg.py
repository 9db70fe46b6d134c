"""Dense float64 matrix helpers: SVD, singular-value truncation, weighted sums.

Matrices are plain 2-D C-contiguous ``numpy.ndarray`` objects of float64.
Every public operation returns freshly allocated arrays with finite entries.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence, Tuple

import numpy as np

from .errors import NonFiniteInput, ShapeMismatch

Matrix = np.ndarray

# Tolerances guaranteed by svd() for inputs with entries of order one.
ORTHONORMALITY_TOL = 1e-8
RECONSTRUCTION_TOL = 1e-8


def as_matrix(a) -> Matrix:
    """Coerce to a 2-D float64 C-order array, raising ShapeMismatch otherwise."""
    m = np.asarray(a, dtype=np.float64)
    if m.ndim != 2:
        raise ShapeMismatch(f"expected a 2-D matrix, got ndim={m.ndim}")
    if m.shape[0] < 1 or m.shape[1] < 1:
        raise ShapeMismatch(f"matrix must be at least 1x1, got {m.shape}")
    return np.ascontiguousarray(m)


@dataclass(frozen=True)
class SvdResult:
    """Thin SVD ``a = u @ diag(sigma) @ v.T`` with k = min(rows, cols).

    u is m x k and v is n x k, both column-orthonormal; sigma is
    non-negative and non-increasing.
    """

    u: Matrix
    sigma: np.ndarray
    v: Matrix

    @property
    def k(self) -> int:
        return len(self.sigma)


def svd(a) -> SvdResult:
    """Thin singular value decomposition of a dense real matrix.

    Raises NonFiniteInput if any entry is NaN or infinite.
    """
    m = as_matrix(a)
    if not np.isfinite(m).all():
        raise NonFiniteInput("matrix contains NaN or Inf entries")
    u, s, vh = np.linalg.svd(m, full_matrices=False)
    return SvdResult(u=np.ascontiguousarray(u), sigma=s, v=np.ascontiguousarray(vh.T))


def lowrank_truncate(
    s: SvdResult, threshold_mode: str = "relative", tau: float = 0.0
) -> Tuple[Matrix, int]:
    """Drop singular triples at or below a cutoff and rebuild the matrix.

    The cutoff is ``tau * sigma_1`` in relative mode or ``tau`` in absolute
    mode; triples with singular value strictly above the cutoff survive.
    Returns the reconstruction and the retained rank.
    """
    if threshold_mode not in ("relative", "absolute"):
        raise ValueError(f"unknown threshold_mode {threshold_mode!r}")
    if tau < 0:
        raise ValueError("tau must be >= 0")
    sigma = s.sigma
    cutoff = tau * sigma[0] if threshold_mode == "relative" else tau
    # sigma is non-increasing, so the survivors form a prefix.
    rank = int(np.count_nonzero(sigma > cutoff))
    if rank == 0:
        return np.zeros((s.u.shape[0], s.v.shape[0])), 0
    approx = (s.u[:, :rank] * sigma[:rank]) @ s.v[:, :rank].T
    return np.ascontiguousarray(approx), rank


def weighted_sum(terms: Sequence[Tuple[float, Matrix]]) -> Matrix:
    """Elementwise sum of ``weight * matrix`` over at least one term."""
    if len(terms) == 0:
        raise ValueError("weighted_sum needs at least one term")
    first = as_matrix(terms[0][1])
    out = np.zeros_like(first)
    for weight, mat in terms:
        m = as_matrix(mat)
        if m.shape != first.shape:
            raise ShapeMismatch(f"term shape {m.shape} != {first.shape}")
        out += float(weight) * m
    return out
