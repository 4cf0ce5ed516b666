"""Average partial effects of dyadic covariates on the linking probability.

For a continuous covariate the dyad effect is the derivative of ``p_ij`` when
``x_ij,k`` and ``x_ji,k`` move together; for a binary covariate it is the
difference of ``p_ij`` with the covariate switched on and off.  The average
over dyads estimates the unconditional effect at rate sqrt(n), so its
standard error has a sampling part (a U-statistic variance over node
triples) and an estimation part driven by the fitted parameters.
"""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass, field
from typing import TYPE_CHECKING, Sequence

import numpy as np

from .dgp import make_rng
from .jmm import (
    JmmSettings,
    NewtonDivergenceError,
    bias_B0_hat,
    jacobian_blocks,
    random_partition,
    solve_beta_jmm,
    variance_blocks,
)
from .alpha import AlphaConvergenceError
from .linalg import LUFactor, symmetrize
from .model import LinkFunction, NetworkData, ParamState, build_cache

if TYPE_CHECKING:
    from numpy.typing import NDArray

_SPLIT_FAILURES = (AlphaConvergenceError, NewtonDivergenceError, np.linalg.LinAlgError,
                   FloatingPointError)

__all__ = [
    "EffectKind",
    "PartialEffectSpec",
    "default_specs",
    "DyadEffects",
    "dyad_effects",
    "partial_effect_dyad",
    "ape_hat",
    "sigma_delta_hat",
    "sigma_Delta_hat",
    "ape_bias_diagnostics",
    "ape_sj_bg",
    "ApeResult",
    "estimate_ape",
]


class EffectKind(str, enum.Enum):
    CONTINUOUS = "continuous"
    BINARY = "binary"


@dataclass(frozen=True)
class PartialEffectSpec:
    k: int
    kind: EffectKind = EffectKind.CONTINUOUS

    def __post_init__(self):
        object.__setattr__(self, "kind", EffectKind(self.kind))
        if self.k < 0:
            raise ValueError("coordinate index must be non-negative")

    def check(self, K: int) -> None:
        if self.k >= K:
            raise ValueError(f"coordinate {self.k} out of range for K={K}")


def default_specs(K: int) -> list[PartialEffectSpec]:
    """First coordinate binary and second continuous when K = 2, else all continuous."""
    if K == 2:
        return [PartialEffectSpec(0, EffectKind.BINARY), PartialEffectSpec(1, EffectKind.CONTINUOUS)]
    return [PartialEffectSpec(k, EffectKind.CONTINUOUS) for k in range(K)]


@dataclass(frozen=True, eq=False)
class DyadEffects:
    """Dyad effect and its derivatives on the full n x n grid.

    ``value[i, j]`` is the effect for dyad {i, j} (symmetric).  ``d_own[i, j]``
    is its derivative in ``alpha_i`` and ``d2_own`` the second derivative;
    ``d2_cross`` is the mixed derivative in ``alpha_i, alpha_j``;
    ``d_beta[i, j]`` is the gradient in ``beta``.
    """

    value: NDArray[np.float64]
    d_own: NDArray[np.float64]
    d2_own: NDArray[np.float64]
    d2_cross: NDArray[np.float64]
    d_beta: NDArray[np.float64]


def _set_coord(x: NDArray, k: int, val: float) -> NDArray:
    out = x.copy()
    out[:, :, k] = val
    return out


def dyad_effects(data: NetworkData, params: ParamState, link: LinkFunction,
                 spec: PartialEffectSpec) -> DyadEffects:
    spec.check(data.K)
    params.check(data)
    a, b, k = params.alpha, params.beta, spec.k
    x = data.x
    xt = x.transpose(1, 0, 2)
    if spec.kind is EffectKind.CONTINUOUS:
        U = a[:, None] + x @ b
        F, f, f1, f2 = link.evaluate(U)
        Ft, ft, f1t, f2t = F.T, f.T, f1.T, f2.T
        bk = b[k]
        base = f * Ft + F * ft
        value = bk * base
        d_own = bk * (f1 * Ft + f * ft)
        d_other = d_own.T
        d2_own = bk * (f2 * Ft + f1 * ft)
        d2_cross = bk * (f1 * ft + f * f1t)
        d_beta = d_own[:, :, None] * x + d_other[:, :, None] * xt
        d_beta[:, :, k] += base
    else:
        parts = []
        for level in (1.0, 0.0):
            xs = _set_coord(x, k, level)
            U = a[:, None] + xs @ b
            F, f, f1, _ = link.evaluate(U)
            Ft, ft = F.T, f.T
            parts.append((F * Ft, f * Ft, f1 * Ft, f * ft,
                          (f * Ft)[:, :, None] * xs + (F * ft)[:, :, None] * xs.transpose(1, 0, 2)))
        value, d_own, d2_own, d2_cross, d_beta = (p1 - p0 for p1, p0 in zip(*parts))
    out = [value, d_own, d2_own, d2_cross]
    for m in out:
        np.fill_diagonal(m, 0.0)
    d_beta[np.arange(data.n), np.arange(data.n), :] = 0.0
    return DyadEffects(*out, d_beta)


def partial_effect_dyad(i: int, j: int, params: ParamState, x_ij, spec: PartialEffectSpec,
                        link: LinkFunction, x_ji=None) -> float:
    """Effect for one dyad; ``x_ji`` defaults to ``x_ij``."""
    a_i, a_j = float(params.alpha[i]), float(params.alpha[j])
    b = params.beta
    x_ij = np.asarray(x_ij, dtype=np.float64)
    x_ji = x_ij if x_ji is None else np.asarray(x_ji, dtype=np.float64)
    k = spec.k
    if spec.kind is EffectKind.CONTINUOUS:
        u, v = a_i + x_ij @ b, a_j + x_ji @ b
        return float(b[k] * (link.pdf(u) * link.cdf(v) + link.cdf(u) * link.pdf(v)))
    vals = []
    for level in (1.0, 0.0):
        xi, xj = x_ij.copy(), x_ji.copy()
        xi[k] = level
        xj[k] = level
        vals.append(link.cdf(a_i + xi @ b) * link.cdf(a_j + xj @ b))
    return float(vals[0] - vals[1])


def _upper(M):
    return M[np.triu_indices(M.shape[0], 1)]


def _effects(data, params, link, specs):
    specs = default_specs(data.K) if specs is None else list(specs)
    return specs, [dyad_effects(data, params, link, s) for s in specs]


def ape_hat(data: NetworkData, params: ParamState, link: LinkFunction,
            specs: Sequence[PartialEffectSpec] | None = None) -> NDArray[np.float64]:
    """Average of the dyad effects over unordered pairs, one entry per spec."""
    _, eff = _effects(data, params, link, specs)
    return np.array([_upper(e.value).mean() for e in eff])


def _sigma_delta(values: list[NDArray]) -> NDArray[np.float64]:
    """Symmetrised ``C(n,3)^{-1} sum_{i<j<k} c_ij c_ik'`` with centred effects ``c``."""
    n = values[0].shape[0]
    S = len(values)
    # Shifting by one effect first makes the centring exact for constant effects.
    shifted = [v - v[0, 1] for v in values]
    C = np.stack([v - _upper(v).mean() for v in shifted], axis=2)  # n x n x S
    mask = np.triu(np.ones((n, n), dtype=bool), 1)
    C = C * mask[:, :, None]
    rowsum = C.sum(axis=1)  # sum_{j>i} c_ij
    total = np.einsum("is,it->st", rowsum, rowsum) - np.einsum("ijs,ijt->st", C, C)
    return symmetrize(0.5 * total / math.comb(n, 3)) if S else np.zeros((0, 0))


def sigma_delta_hat(data: NetworkData, params: ParamState, link: LinkFunction,
                    specs: Sequence[PartialEffectSpec] | None = None) -> NDArray[np.float64]:
    if data.n < 3:
        raise ValueError("need at least 3 nodes")
    _, eff = _effects(data, params, link, specs)
    return _sigma_delta([e.value for e in eff])


def _delta_gradients(data, eff):
    N = data.N
    d_alpha = np.stack([e.d_own.sum(axis=1) / N for e in eff])  # S x n
    iu = np.triu_indices(data.n, 1)
    d_beta = np.stack([e.d_beta[iu].sum(axis=0) / N for e in eff])  # S x K
    return d_alpha, d_beta


def _sigma_Delta(data, eff, jac, var):
    d_alpha, d_beta = _delta_gradients(data, eff)
    lu = jac.lu11
    D = d_beta - d_alpha @ lu.solve(jac.J12)
    a = LUFactor(jac.Jn, "concentrated Jacobian").solve(D.T, trans=True).T
    b = lu.solve((a @ jac.J21 - d_alpha).T, trans=True).T
    aV12b = a @ var.V12.T @ b.T
    cov = a @ var.V22 @ a.T + b @ var.V11 @ b.T - aV12b - aV12b.T
    return symmetrize(data.N * cov), D


def sigma_Delta_hat(data: NetworkData, params: ParamState, link: LinkFunction,
                    specs: Sequence[PartialEffectSpec] | None = None) -> NDArray[np.float64]:
    """Estimation-noise variance of the average effect, scaled by the number of dyads."""
    _, eff = _effects(data, params, link, specs)
    c = build_cache(data, params, link)
    jac = jacobian_blocks(data, params, link, c)
    var = variance_blocks(data, params, link, c)
    return _sigma_Delta(data, eff, jac, var)[0]


def ape_bias_diagnostics(data: NetworkData, params: ParamState, link: LinkFunction,
                         specs: Sequence[PartialEffectSpec] | None = None):
    """``(B_alpha, B_beta)``; the implied bias of the average effect is their sum over sqrt(N)."""
    _, eff = _effects(data, params, link, specs)
    c = build_cache(data, params, link)
    jac = jacobian_blocks(data, params, link, c)
    var = variance_blocks(data, params, link, c)
    J11inv = jac.lu11.inverse()
    Sig = J11inv @ var.V11 @ J11inv.T
    B_alpha = []
    for e in eff:
        R = e.d2_cross.copy()
        np.fill_diagonal(R, e.d2_own.sum(axis=1))
        B_alpha.append(np.einsum("ij,ji->", Sig, R))
    B_alpha = np.array(B_alpha) / (2.0 * math.sqrt(data.N))
    d_alpha, d_beta = _delta_gradients(data, eff)
    D = d_beta - d_alpha @ jac.lu11.solve(jac.J12)
    B0 = bias_B0_hat(data, params, link, c)
    B_beta = data.N * D @ LUFactor(jac.Jn, "concentrated Jacobian").solve(B0)
    return B_alpha, B_beta


def _half_ape(data, idx, link, specs, beta_init, alpha_init, settings):
    sub = data.subnetwork(idx)
    fit = solve_beta_jmm(sub, link, beta_init, settings, alpha_init=alpha_init[idx])
    return ape_hat(sub, fit.params, link, specs)


def ape_sj_bg(data: NetworkData, link: LinkFunction, T_prime: int = 100, seed: int = 0,
              params: ParamState | None = None, specs=None, settings: JmmSettings | None = None,
              split_seed: int | None = None, partitions=None):
    """Jackknifed and bagged average effects; returns ``(delta_sj, delta_bg)``.

    Each half-network is refitted by the moment estimator (started from the
    full-sample values) and its average effect recomputed.  The jackknife
    uses the split drawn from ``split_seed`` (default ``seed``) and fails if
    either half does; bagging averages the jackknife over ``T_prime`` splits
    drawn from ``seed``, replacing failed splits (at most ``3 * T_prime``
    attempts), or over ``partitions`` when given.
    """
    settings = settings or JmmSettings()
    if params is None:
        params = solve_beta_jmm(data, link, None, settings).params
    specs = default_specs(data.K) if specs is None else list(specs)
    full = ape_hat(data, params, link, specs)

    def sj(part):
        h1 = _half_ape(data, part[0], link, specs, params.beta, params.alpha, settings)
        h2 = _half_ape(data, part[1], link, specs, params.beta, params.alpha, settings)
        return 2.0 * full - 0.5 * (h1 + h2)

    part0 = random_partition(data.n, make_rng(seed if split_seed is None else split_seed))
    delta_sj = sj(part0)
    if partitions is not None:
        return delta_sj, np.mean([sj(p) for p in partitions], axis=0)
    if T_prime < 1:
        raise ValueError("T_prime must be at least 1")
    rng = make_rng(seed)
    draws, attempts = [], 0
    while len(draws) < T_prime:
        if attempts >= 3 * T_prime:
            raise RuntimeError(f"APE bagging: only {len(draws)} of {T_prime} splits succeeded "
                               f"after {attempts} attempts")
        attempts += 1
        try:
            draws.append(sj(random_partition(data.n, rng)))
        except _SPLIT_FAILURES:
            continue
    return delta_sj, np.mean(draws, axis=0)


@dataclass(eq=False)
class ApeResult:
    delta_hat: NDArray[np.float64]
    delta_sj: NDArray[np.float64] | None
    delta_bg: NDArray[np.float64] | None
    sigma_delta: NDArray[np.float64]
    sigma_Delta: NDArray[np.float64]
    se: NDArray[np.float64]
    bias_diagnostics: tuple
    degenerate: bool
    specs: list = field(default_factory=list)

    @property
    def se_sj(self) -> NDArray[np.float64]:
        return math.sqrt(2.0) * self.se


def estimate_ape(data: NetworkData, params: ParamState, link: LinkFunction, specs=None,
                 T_prime: int = 0, seed: int = 0, settings: JmmSettings | None = None,
                 with_bias: bool = True) -> ApeResult:
    """Plug-in average effects with standard errors ``sqrt(Sigma_D / N + 4 Sigma_d / n)``.

    ``params`` should be the moment estimates.  With ``T_prime > 0`` the
    jackknife and bagged versions are computed as well.
    """
    specs = default_specs(data.K) if specs is None else list(specs)
    _, eff = _effects(data, params, link, specs)
    delta = np.array([_upper(e.value).mean() for e in eff])
    sig_d = _sigma_delta([e.value for e in eff])
    c = build_cache(data, params, link)
    jac = jacobian_blocks(data, params, link, c)
    var = variance_blocks(data, params, link, c)
    sig_D, _ = _sigma_Delta(data, eff, jac, var)
    total = sig_D / data.N + 4.0 * sig_d / data.n
    se = np.sqrt(np.clip(np.diag(total), 0.0, None))
    scale = max(1.0, float(np.abs(delta).max()))
    degenerate = bool(np.all(np.abs(sig_d) <= 1e-13 * scale * scale))
    bias = ape_bias_diagnostics(data, params, link, specs) if with_bias else (None, None)
    d_sj = d_bg = None
    if T_prime > 0:
        d_sj, d_bg = ape_sj_bg(data, link, T_prime, seed, params, specs, settings)
    return ApeResult(delta, d_sj, d_bg, sig_d, sig_D, se, bias, degenerate, specs)
