"""Dyadic link-formation model with bilateral consent.

A link between nodes i and j forms only when both endpoints want it, so the
linking probability factorises as ``p_ij = F(a_i + x_ij'b) * F(a_j + x_ji'b)``
for a known CDF ``F``.  This module holds the data containers, the link
families and the per-parameter cache of ``F``, its derivatives and ``p``.

All n x n matrices keep a zero diagonal so that plain row sums are sums over
``j != i``.
"""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass, field
from functools import cached_property
from typing import TYPE_CHECKING

import numpy as np
from scipy.special import erfc, expit

if TYPE_CHECKING:
    from numpy.typing import ArrayLike, NDArray

__all__ = [
    "Family",
    "LinkFunction",
    "LOGISTIC",
    "NORMAL",
    "get_link",
    "link_eval",
    "NetworkData",
    "ParamState",
    "ModelCache",
    "build_cache",
    "log_likelihood",
    "ShapeError",
    "SaturationError",
]

_LOGISTIC_CLAMP = 35.0
_INV_SQRT2 = 1.0 / math.sqrt(2.0)
_INV_SQRT2PI = 1.0 / math.sqrt(2.0 * math.pi)


class ShapeError(ValueError):
    """Raised when parameter and data dimensions disagree."""


class SaturationError(ArithmeticError):
    """Raised when a linking probability reaches 0 or 1 numerically."""

    def __init__(self, message: str, dyad: tuple[int, int]):
        super().__init__(message)
        self.dyad = dyad


class Family(str, enum.Enum):
    LOGISTIC = "logistic"
    NORMAL = "normal"


@dataclass(frozen=True)
class LinkFunction:
    """CDF family with its density and the next two derivatives.

    Every method is vectorised over numpy arrays.  The logistic family
    clamps its argument to [-35, 35] before exponentiating; the normal CDF
    goes through ``erfc`` so the lower tail keeps full relative accuracy.
    """

    family: Family

    def cdf(self, u):
        if self.family is Family.LOGISTIC:
            return expit(np.clip(u, -_LOGISTIC_CLAMP, _LOGISTIC_CLAMP))
        return 0.5 * erfc(-np.asarray(u, dtype=float) * _INV_SQRT2)

    def pdf(self, u):
        if self.family is Family.LOGISTIC:
            return self._logistic(u)[1]
        u = np.asarray(u, dtype=float)
        return _INV_SQRT2PI * np.exp(-0.5 * u * u)

    def d1(self, u):
        """First derivative of the density."""
        if self.family is Family.LOGISTIC:
            return self._logistic(u)[2]
        u = np.asarray(u, dtype=float)
        return -u * self.pdf(u)

    def d2(self, u):
        """Second derivative of the density."""
        if self.family is Family.LOGISTIC:
            return self._logistic(u)[3]
        u = np.asarray(u, dtype=float)
        return (u * u - 1.0) * self.pdf(u)

    def evaluate(self, u):
        """Return ``(F, f, f1, f2)`` at ``u`` sharing one CDF evaluation."""
        if self.family is Family.LOGISTIC:
            return self._logistic(u)
        u = np.asarray(u, dtype=float)
        f = _INV_SQRT2PI * np.exp(-0.5 * u * u)
        return self.cdf(u), f, -u * f, (u * u - 1.0) * f

    @staticmethod
    def _logistic(u):
        # F(u) F(-u) and tanh keep full relative accuracy in both tails,
        # where F (1 - F) and 1 - 2F would cancel.
        u = np.clip(np.asarray(u, dtype=float), -_LOGISTIC_CLAMP, _LOGISTIC_CLAMP)
        F = expit(u)
        f = F * expit(-u)
        return F, f, -f * np.tanh(0.5 * u), f * (1.0 - 6.0 * f)

    @property
    def name(self) -> str:
        return self.family.value


LOGISTIC = LinkFunction(Family.LOGISTIC)
NORMAL = LinkFunction(Family.NORMAL)


def get_link(link: str | LinkFunction) -> LinkFunction:
    """Resolve ``"logistic"``/``"logit"``/``"normal"``/``"probit"`` to a link."""
    if isinstance(link, LinkFunction):
        return link
    key = str(link).strip().lower()
    if key in ("logistic", "logit"):
        return LOGISTIC
    if key in ("normal", "probit", "gaussian"):
        return NORMAL
    raise ValueError(f"unknown link family {link!r}")


def link_eval(link: LinkFunction, u: float) -> tuple[float, float, float, float]:
    """Scalar ``(F, f, f1, f2)``; non-finite input is a domain error."""
    u = float(u)
    if not math.isfinite(u):
        raise ValueError(f"link argument must be finite, got {u}")
    return tuple(float(v) for v in link.evaluate(np.float64(u)))  # type: ignore[return-value]


@dataclass(frozen=True, eq=False)
class NetworkData:
    """Undirected network with dyadic covariates.

    Parameters
    ----------
    y : (n, n) array
        Symmetric adjacency with zero diagonal.  Entries must be 0/1 unless
        ``binary=False``, which admits fractional "expected" networks used
        when solving population moment equations.
    x : (n, n, K) array
        Covariate for the ordered pair (i, j).  ``x[i, j]`` and ``x[j, i]``
        may differ; the moment for ``b`` uses the upper-triangle value
        ``x[min(i,j), max(i,j)]``.
    """

    y: NDArray[np.float64]
    x: NDArray[np.float64]
    binary: bool = True
    labels: tuple | None = field(default=None, compare=False)

    def __post_init__(self):
        y = np.array(self.y, dtype=np.float64)
        x = np.array(self.x, dtype=np.float64)
        if x.ndim == 2:
            x = x[:, :, None]
        if y.ndim != 2 or y.shape[0] != y.shape[1]:
            raise ShapeError(f"y must be square, got shape {y.shape}")
        n = y.shape[0]
        if x.ndim != 3 or x.shape[:2] != (n, n) or x.shape[2] < 1:
            raise ShapeError(f"x must have shape ({n}, {n}, K>=1), got {x.shape}")
        if not np.all(np.isfinite(x)) or not np.all(np.isfinite(y)):
            raise ValueError("y and x must be finite")
        if np.any(np.diag(y) != 0):
            raise ValueError("self-loops are not allowed: y_ii must be 0")
        if not np.array_equal(y, y.T):
            raise ValueError("y must be symmetric")
        if self.binary and not np.all((y == 0) | (y == 1)):
            raise ValueError("y must be binary")
        if not self.binary and (y.min() < 0 or y.max() > 1):
            raise ValueError("fractional y must lie in [0, 1]")
        x = x.copy()
        for k in range(x.shape[2]):
            np.fill_diagonal(x[:, :, k], 0.0)
        y.setflags(write=False)
        x.setflags(write=False)
        object.__setattr__(self, "y", y)
        object.__setattr__(self, "x", x)

    @property
    def n(self) -> int:
        return self.y.shape[0]

    @property
    def K(self) -> int:
        return self.x.shape[2]

    @property
    def N(self) -> int:
        """Number of unordered dyads."""
        return self.n * (self.n - 1) // 2

    @cached_property
    def degree(self) -> NDArray[np.float64]:
        return self.y.sum(axis=1)

    @cached_property
    def xu(self) -> NDArray[np.float64]:
        """Covariates symmetrised from the upper triangle (the moment's x_ij)."""
        iu = np.triu_indices(self.n, 1)
        xu = np.zeros_like(self.x)
        xu[iu] = self.x[iu]
        xu[(iu[1], iu[0])] = self.x[iu]
        return xu

    @cached_property
    def x_is_symmetric(self) -> bool:
        return bool(np.array_equal(self.x, self.x.transpose(1, 0, 2)))

    def subnetwork(self, nodes: ArrayLike) -> NetworkData:
        """Network induced by ``nodes`` (order preserved)."""
        idx = np.asarray(nodes, dtype=np.intp)
        labels = None if self.labels is None else tuple(self.labels[i] for i in idx)
        return NetworkData(self.y[np.ix_(idx, idx)], self.x[np.ix_(idx, idx)],
                           binary=self.binary, labels=labels)

    def permuted(self, perm: ArrayLike) -> NetworkData:
        """Relabel nodes so that new node ``k`` is old node ``perm[k]``."""
        return self.subnetwork(perm)

    def with_y(self, y: NDArray[np.float64], binary: bool | None = None) -> NetworkData:
        return NetworkData(y, self.x, binary=self.binary if binary is None else binary,
                           labels=self.labels)


@dataclass(frozen=True)
class ParamState:
    """Fixed effects ``alpha`` (length n) and slopes ``beta`` (length K)."""

    alpha: NDArray[np.float64]
    beta: NDArray[np.float64]
    bounds: tuple[float, float] = (-25.0, 25.0)

    def __post_init__(self):
        a = np.atleast_1d(np.asarray(self.alpha, dtype=np.float64)).copy()
        b = np.atleast_1d(np.asarray(self.beta, dtype=np.float64)).copy()
        if a.ndim != 1 or b.ndim != 1:
            raise ShapeError("alpha and beta must be vectors")
        if not (np.all(np.isfinite(a)) and np.all(np.isfinite(b))):
            raise ValueError("parameters must be finite")
        lo, hi = float(self.bounds[0]), float(self.bounds[1])
        if not lo < hi:
            raise ValueError(f"empty bounds box [{lo}, {hi}]")
        a.setflags(write=False)
        b.setflags(write=False)
        object.__setattr__(self, "alpha", a)
        object.__setattr__(self, "beta", b)
        object.__setattr__(self, "bounds", (lo, hi))

    def check(self, data: NetworkData) -> None:
        if self.alpha.shape[0] != data.n:
            raise ShapeError(f"alpha has length {self.alpha.shape[0]}, network has n={data.n}")
        if self.beta.shape[0] != data.K:
            raise ShapeError(f"beta has length {self.beta.shape[0]}, covariates have K={data.K}")


@dataclass(frozen=True, eq=False)
class ModelCache:
    """``F``, ``f``, ``f1``, ``f2`` and ``p`` at one parameter value.

    ``F[i, j] = F(alpha_i + x_ij'beta)`` and ``p = F * F.T``; all diagonals
    are zero.
    """

    F: NDArray[np.float64]
    f: NDArray[np.float64]
    f1: NDArray[np.float64]
    f2: NDArray[np.float64]
    p: NDArray[np.float64]

    @property
    def n(self) -> int:
        return self.F.shape[0]

    @cached_property
    def offdiag(self) -> NDArray[np.bool_]:
        return ~np.eye(self.n, dtype=bool)

    @cached_property
    def F_range(self) -> tuple[float, float]:
        """Realised (min, max) of F over ordered pairs."""
        if self.n < 2:
            return (float("nan"), float("nan"))
        vals = self.F[self.offdiag]
        return float(vals.min()), float(vals.max())

    @cached_property
    def Fs(self) -> NDArray[np.float64]:
        """F with a unit diagonal, safe as a denominator."""
        out = self.F.copy()
        np.fill_diagonal(out, 1.0)
        return out

    @cached_property
    def q(self) -> NDArray[np.float64]:
        """``1 - p`` with a unit diagonal."""
        return 1.0 - self.p


def index_linear(data: NetworkData, beta: NDArray[np.float64]) -> NDArray[np.float64]:
    """``x_ij'beta`` as an n x n matrix."""
    return data.x @ np.asarray(beta, dtype=np.float64)


def build_cache(data: NetworkData, params: ParamState, link: LinkFunction) -> ModelCache:
    params.check(data)
    u = params.alpha[:, None] + index_linear(data, params.beta)
    F, f, f1, f2 = link.evaluate(u)
    for m in (F, f, f1, f2):
        np.fill_diagonal(m, 0.0)
    p = F * F.T
    return ModelCache(F=F, f=f, f1=f1, f2=f2, p=p)


def log_likelihood(data: NetworkData, params: ParamState, link: LinkFunction) -> float:
    """Sum over unordered dyads of ``y log p + (1 - y) log(1 - p)``."""
    cache = build_cache(data, params, link)
    iu = np.triu_indices(data.n, 1)
    p = cache.p[iu]
    bad = np.flatnonzero((p <= 0.0) | (p >= 1.0))
    if bad.size:
        k = int(bad[0])
        dyad = (int(iu[0][k]), int(iu[1][k]))
        raise SaturationError(f"linking probability saturated at {p[k]!r} for dyad {dyad}", dyad)
    y = data.y[iu]
    return float(np.sum(y * np.log(p) + (1.0 - y) * np.log1p(-p)))
