"""Dense solves, explicit inverses for trace formulas, and the diagonal
approximation to the inverse of a diagonally dominant fixed-effect block."""

from __future__ import annotations

from typing import TYPE_CHECKING

import numpy as np
import scipy.linalg as sla
from scipy.linalg import lapack

if TYPE_CHECKING:
    from numpy.typing import NDArray

__all__ = [
    "SingularMatrixError",
    "LUFactor",
    "solve",
    "inverse",
    "diag_approx_inverse",
    "trace_triple",
    "symmetrize",
]

_RCOND_FLOOR = np.finfo(np.float64).eps


class SingularMatrixError(np.linalg.LinAlgError):
    """Matrix singular to working precision; carries a 1-norm condition estimate."""

    def __init__(self, message: str, cond: float):
        super().__init__(f"{message} (1-norm condition estimate {cond:.3e})")
        self.cond = cond


class LUFactor:
    """LU factorisation with a 1-norm reciprocal condition check.

    Factor once, then solve against several right-hand sides.
    """

    def __init__(self, A: NDArray[np.float64], what: str = "matrix"):
        A = np.asarray(A, dtype=np.float64)
        if A.ndim != 2 or A.shape[0] != A.shape[1]:
            raise ValueError(f"{what} must be square, got shape {A.shape}")
        if not np.all(np.isfinite(A)):
            raise SingularMatrixError(f"{what} has non-finite entries", float("inf"))
        self.n = A.shape[0]
        anorm = np.abs(A).sum(axis=0).max() if self.n else 0.0
        lu, piv, info = lapack.dgetrf(A)
        if info > 0 or anorm == 0.0:
            raise SingularMatrixError(f"{what} is exactly singular", float("inf"))
        rcond, _ = lapack.dgecon(lu, anorm, norm="1")
        if not rcond > _RCOND_FLOOR:
            cond = float("inf") if rcond == 0 else 1.0 / rcond
            raise SingularMatrixError(f"{what} is singular to working precision", cond)
        self.rcond = float(rcond)
        self._lu = (lu, piv)

    @property
    def cond(self) -> float:
        return 1.0 / self.rcond

    def solve(self, B: NDArray[np.float64], trans: bool = False) -> NDArray[np.float64]:
        """Solve ``A X = B`` (or ``A' X = B`` when ``trans``)."""
        return sla.lu_solve(self._lu, np.asarray(B, dtype=np.float64),
                            trans=1 if trans else 0, check_finite=False)

    def inverse(self) -> NDArray[np.float64]:
        return self.solve(np.eye(self.n))


def solve(A: NDArray[np.float64], B: NDArray[np.float64]) -> NDArray[np.float64]:
    """Solve ``A X = B`` by LU; singular ``A`` raises with its condition estimate."""
    B = np.asarray(B, dtype=np.float64)
    if B.shape[0] != np.shape(A)[0]:
        raise ValueError(f"shape mismatch: A is {np.shape(A)}, B is {B.shape}")
    return LUFactor(A).solve(B)


def inverse(A: NDArray[np.float64]) -> NDArray[np.float64]:
    """Explicit inverse, only for trace and sandwich formulas."""
    return LUFactor(A).inverse()


def diag_approx_inverse(J11: NDArray[np.float64]) -> NDArray[np.float64]:
    """Return ``diag(1 / J11_ii)``.

    For an n x n matrix whose diagonal is of order n and whose off-diagonal
    entries are of order one and share a sign, the max-norm distance between
    this matrix and the true inverse is O(n^-2).
    """
    d = np.diag(np.asarray(J11, dtype=np.float64))
    if np.any(d == 0.0):
        raise ZeroDivisionError(f"zero diagonal entry at index {int(np.flatnonzero(d == 0)[0])}")
    return np.diag(1.0 / d)


def trace_triple(A: NDArray[np.float64], B: NDArray[np.float64], C: NDArray[np.float64]) -> float:
    """``Tr(A @ B @ C)`` forming only ``A @ B``."""
    A, B, C = (np.asarray(M, dtype=np.float64) for M in (A, B, C))
    if A.ndim != 2 or B.ndim != 2 or C.ndim != 2:
        raise ValueError("trace_triple expects matrices")
    if A.shape[1] != B.shape[0] or B.shape[1] != C.shape[0] or C.shape[1] != A.shape[0]:
        raise ValueError(f"non-conformable shapes {A.shape}, {B.shape}, {C.shape}")
    return float(np.einsum("ij,ji->", A @ B, C))


def symmetrize(M: NDArray[np.float64]) -> NDArray[np.float64]:
    M = np.asarray(M, dtype=np.float64)
    return 0.5 * (M + M.T)
