"""Fixed effects given slopes: solve the degree-matching equations.

For fixed ``beta`` the fixed effects solve ``d_i = sum_{j != i} p_ij(alpha, beta)``
for every node.  The default solver iterates the map

    r_i(alpha) = alpha_i + (d_i - sum_{j != i} p_ij) / (n - 1),

which contracts in the l1 norm over two steps when the network is dense.
A damped Newton iteration is available as an alternative inner solver.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field
from typing import TYPE_CHECKING

import numpy as np

from .linalg import LUFactor, SingularMatrixError
from .model import LinkFunction, NetworkData, index_linear

if TYPE_CHECKING:
    from numpy.typing import NDArray

__all__ = [
    "AlphaSolveReport",
    "AlphaConvergenceError",
    "BoundaryDegreeWarning",
    "ClampedNodeWarning",
    "degree_sequence",
    "contraction_step",
    "solve_alpha",
]




class BoundaryDegreeWarning(UserWarning):
    """Some node has degree 0 or n-1, so its fixed effect diverges."""


class ClampedNodeWarning(BoundaryDegreeWarning):
    """A node with interior degree has no fixed effect inside the bounds at this slope."""


@dataclass
class AlphaSolveReport:
    alpha_hat: NDArray[np.float64]
    iterations: int
    final_l1_step: float
    contraction_ratios: list[float]
    converged: bool
    clamped_nodes: list[int]
    boundary_nodes: list[int] = field(default_factory=list)
    residual_max: float = float("nan")
    method: str = "contraction"
    pinned_nodes: list[int] = field(default_factory=list)


class AlphaConvergenceError(RuntimeError):
    def __init__(self, message: str, report: AlphaSolveReport):
        super().__init__(message)
        self.report = report


def degree_sequence(data: NetworkData) -> NDArray[np.int64]:
    return data.y.sum(axis=1).astype(np.int64)


def _row_prob_sums(alpha, xb, link: LinkFunction):
    F = link.cdf(alpha[:, None] + xb)
    np.fill_diagonal(F, 0.0)
    return (F * F.T).sum(axis=1)


def contraction_step(alpha, beta, data: NetworkData, link: LinkFunction) -> NDArray[np.float64]:
    """One application of the degree-matching map ``r(alpha, beta)``."""
    alpha = np.asarray(alpha, dtype=np.float64)
    xb = index_linear(data, beta)
    return alpha + (data.degree - _row_prob_sums(alpha, xb, link)) / (data.n - 1)


def _newton_direction(alpha, xb, link, m1, free):
    """Newton direction for the degree equations of the ``free`` nodes; zero elsewhere."""
    u = alpha[:, None] + xb
    F = link.cdf(u)
    f = link.pdf(u)
    np.fill_diagonal(F, 0.0)
    np.fill_diagonal(f, 0.0)
    J11 = -(F * f.T)
    np.fill_diagonal(J11, -(f * F.T).sum(axis=1))
    out = np.zeros_like(alpha)
    out[free] = -LUFactor(J11[np.ix_(free, free)], "J11").solve(m1[free])
    return out


_NEWTON_MAX_STEP = 2.0


def _damped_newton(alpha, xb, link, m1, d, lo, hi, free):
    """Newton step on the degree equations with a step cap and backtracking.

    Only the ``free`` nodes enter the linear system and the l1 residual.
    Falls back to one contraction step when J11 is singular or no trial
    step reduces the residual.
    """
    n = alpha.shape[0]
    base = np.abs(m1[free]).sum()
    try:
        direction = _newton_direction(alpha, xb, link, m1, free) if free.any() else None
    except SingularMatrixError:
        direction = None
    if direction is not None and base > 0.0:
        # Capping each component separately: a node far out in a tail has a
        # huge Newton component that would otherwise freeze all the others.
        direction = np.clip(direction, -_NEWTON_MAX_STEP, _NEWTON_MAX_STEP)
        t = 1.0
        for _ in range(30):
            new = np.clip(alpha + t * direction, lo, hi)
            m1_new = d - _row_prob_sums(new, xb, link)
            if np.abs(m1_new[free]).sum() < base:
                return new, m1_new
            t *= 0.5
    new = np.clip(alpha + m1 / (n - 1), lo, hi)
    return new, d - _row_prob_sums(new, xb, link)


def _pinned(alpha, m1, lo, hi):
    """Nodes on a bound whose degree equation pushes further outward."""
    return ((alpha >= hi) & (m1 > 0)) | ((alpha <= lo) & (m1 < 0))


def solve_alpha(data: NetworkData, beta, link: LinkFunction, init=None, tol: float = 1e-10,
                max_iter: int = 10_000, bounds: tuple[float, float] = (-25.0, 25.0),
                method: str = "contraction", raise_on_fail: bool = True,
                degree: NDArray[np.float64] | None = None) -> AlphaSolveReport:
    """Fixed effects solving the degree equations at ``beta``.

    Iterates until the l1 norm of the latest update is at most ``tol``; this
    implies ``max_i |m1_i| / (n - 1) <= tol`` over the unclamped nodes for
    the contraction map.  Iterates are clipped to ``bounds``.  A node whose
    equation has no root inside the bounds stays on the bound it was pushed
    to; such nodes are listed in ``pinned_nodes`` (and ``clamped_nodes``),
    leave the Newton system and trigger a warning.  ``degree`` overrides the
    observed degree sequence (used for population versions of the equations).
    """
    if tol <= 0:
        raise ValueError("tol must be positive")
    if method not in ("contraction", "newton"):
        raise ValueError(f"unknown inner solver {method!r}")
    n = data.n
    lo, hi = bounds
    d = data.degree if degree is None else np.asarray(degree, dtype=np.float64)
    xb = index_linear(data, beta)
    alpha = np.zeros(n) if init is None else np.clip(np.array(init, dtype=np.float64), lo, hi)

    boundary = np.flatnonzero((d <= 0) | (d >= n - 1)).tolist()
    if boundary:
        warnings.warn(f"{len(boundary)} node(s) with degree 0 or n-1; their fixed effects "
                      "move to the bounds", BoundaryDegreeWarning, stacklevel=2)
        # The root is at infinity, and iterating towards it takes ~exp(|alpha|) steps.
        alpha[d <= 0] = lo
        alpha[d >= n - 1] = hi

    steps: list[float] = []
    ratios: list[float] = []
    converged = False
    m1 = d - _row_prob_sums(alpha, xb, link)
    it = 0
    while it < max_iter:
        if method == "contraction":
            new = np.clip(alpha + m1 / (n - 1), lo, hi)
            m1_new = d - _row_prob_sums(new, xb, link)
        else:
            new, m1_new = _damped_newton(alpha, xb, link, m1, d, lo, hi,
                                         ~_pinned(alpha, m1, lo, hi))
        step = float(np.abs(new - alpha).sum())
        alpha, m1 = new, m1_new
        it += 1
        steps.append(step)
        if len(steps) >= 3 and steps[-3] > 0.0:
            ratios.append(steps[-1] / steps[-3])
        if step <= tol:
            converged = True
            break

    pinned_mask = _pinned(alpha, m1, lo, hi)
    clamped = np.flatnonzero((alpha <= lo) | (alpha >= hi)).tolist()
    pinned = [i for i in np.flatnonzero(pinned_mask).tolist() if i not in boundary]
    if pinned:
        warnings.warn(f"no fixed effect inside the bounds {bounds} for node(s) {pinned}; "
                      "they stay on the bound", ClampedNodeWarning, stacklevel=2)
    free = ~pinned_mask
    report = AlphaSolveReport(
        alpha_hat=alpha,
        iterations=it,
        final_l1_step=steps[-1] if steps else 0.0,
        contraction_ratios=ratios,
        converged=converged,
        clamped_nodes=clamped,
        boundary_nodes=boundary,
        residual_max=float(np.abs(m1[free]).max() / (n - 1)) if n > 1 and free.any() else 0.0,
        method=method,
        pinned_nodes=np.flatnonzero(pinned_mask).tolist(),
    )
    if not converged and raise_on_fail:
        raise AlphaConvergenceError(
            f"fixed-effect solver did not converge in {max_iter} iterations "
            f"(last l1 step {report.final_l1_step:.3e})", report)
    return report
