"""Dense kernels: products, SPD factorizations and solves, fast Walsh-Hadamard."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.linalg import lapack


class FactorizationError(np.linalg.LinAlgError):
    """Raised when a matrix expected to be SPD has a non-positive pivot."""

    def __init__(self, pivot: int, context: str = ""):
        self.pivot = pivot
        self.context = context
        where = f" ({context})" if context else ""
        super().__init__(f"matrix is not positive definite: pivot {pivot} <= 0{where}")


def as_matrix(a, name: str = "matrix") -> np.ndarray:
    """Coerce to a finite 2-D float64 array."""
    arr = np.asarray(a, dtype=np.float64)
    if arr.ndim != 2:
        raise ValueError(f"{name} must be 2-D, got shape {arr.shape}")
    if not np.all(np.isfinite(arr)):
        raise ValueError(f"{name} contains non-finite entries")
    return arr


def matmul(a, b) -> np.ndarray:
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape[-1] != b.shape[0]:
        raise ValueError(f"dimension mismatch: {a.shape} @ {b.shape}")
    return a @ b


def _potrf_lower(h: np.ndarray, context: str = "") -> np.ndarray:
    g, info = lapack.dpotrf(h, lower=1, clean=1)
    if info > 0:
        # LAPACK reports the 1-based order of the failing leading minor
        raise FactorizationError(info - 1, context)
    if info < 0:
        raise ValueError(f"dpotrf: illegal argument {-info}")
    return g


@dataclass(frozen=True)
class ReverseCholeskyFactor:
    """``H = L.T @ L`` with ``L`` lower triangular; ``d`` is ``diag(L)``."""

    L: np.ndarray
    d: np.ndarray


def reverse_cholesky(h, context: str = "") -> ReverseCholeskyFactor:
    """Factor an SPD matrix as ``H = L^T L`` with ``L`` lower triangular.

    With this convention row ``i`` of ``L E`` only involves rows ``0..i`` of
    ``E``, which is what makes row-sequential rounding possible. Computed by
    reversing the index order, running a standard Cholesky and reversing back.
    On failure the reported pivot index refers to the original ordering.
    """
    h = as_matrix(h, "H")
    n = h.shape[0]
    if h.shape != (n, n):
        raise ValueError(f"H must be square, got {h.shape}")
    rev = h[::-1, ::-1]
    try:
        g = _potrf_lower(np.ascontiguousarray(rev), context)
    except FactorizationError as exc:
        raise FactorizationError(n - 1 - exc.pivot, context) from None
    # rev = G G^T  =>  H = (J G J)(J G J)^T, and L = (J G J)^T is lower.
    L = np.ascontiguousarray(g[::-1, ::-1].T)
    return ReverseCholeskyFactor(L=L, d=np.diag(L).copy())


def spd_solve(h, b, context: str = "") -> np.ndarray:
    """Solve ``H X = B`` for SPD ``H`` via Cholesky; no explicit inverse."""
    h = as_matrix(h, "H")
    b = np.asarray(b, dtype=np.float64)
    if h.shape[0] != h.shape[1] or h.shape[1] != b.shape[0]:
        raise ValueError(f"dimension mismatch: H {h.shape}, B {b.shape}")
    g = _potrf_lower(np.ascontiguousarray(h), context)
    x, info = lapack.dpotrs(g, b, lower=1)
    if info != 0:
        raise ValueError(f"dpotrs: illegal argument {-info}")
    return x


def is_power_of_two(n: int) -> bool:
    return n >= 1 and (n & (n - 1)) == 0


def fwht(x, axis: int = -1) -> np.ndarray:
    """Orthonormal fast Walsh-Hadamard transform along ``axis``.

    Equivalent to multiplying by the Sylvester Hadamard matrix scaled by
    ``1/sqrt(n)``, which is symmetric and its own inverse.
    """
    a = np.moveaxis(np.array(x, dtype=np.float64), axis, -1)
    n = a.shape[-1]
    if not is_power_of_two(n):
        raise ValueError(f"Hadamard length must be a power of two, got {n}")
    lead = a.shape[:-1]
    a = a.reshape(-1, n)
    h = 1
    while h < n:
        a = a.reshape(-1, n // (2 * h), 2, h)
        lo = a[:, :, 0, :]
        hi = a[:, :, 1, :]
        a = np.stack((lo + hi, lo - hi), axis=2)
        h *= 2
    a = a.reshape(*lead, n) / np.sqrt(n)
    return np.moveaxis(a, -1, axis)


def hadamard_matrix(n: int) -> np.ndarray:
    """Dense orthonormal Sylvester Hadamard matrix (for checks, not the hot path)."""
    if not is_power_of_two(n):
        raise ValueError(f"Hadamard order must be a power of two, got {n}")
    m = np.ones((1, 1))
    while m.shape[0] < n:
        m = np.block([[m, m], [m, -m]])
    return m / np.sqrt(n)
