"""Likelihood-based one-step refinement of a moment pilot.

Starting from the jackknifed moment estimate and the fixed effects solved at
it, a single Fisher-scoring step on the concentrated score gives an
efficient but biased estimator.  The bias is removed by the split-network
jackknife, and averaging the jackknife over many random splits (bagging)
restores the efficient variance.

A Hessian-based variant of the step, together with a sandwich covariance,
covers the case where the assumed link CDF is wrong.  ``pseudo_true_values``
computes what that variant targets when the truth is known.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from itertools import combinations
from typing import TYPE_CHECKING

import numpy as np

from .alpha import AlphaConvergenceError, solve_alpha
from .dgp import draw_links, make_rng
from .jmm import (
    JmmSettings,
    _concentrated_newton,
    estimate_jmm,
    jacobian_blocks,
    pair_outer,
    pair_rowsum,
    random_partition,
    sandwich_covariance,
)
from .linalg import LUFactor, SingularMatrixError, symmetrize
from .model import LinkFunction, ModelCache, NetworkData, ParamState, build_cache

if TYPE_CHECKING:
    from numpy.typing import NDArray

__all__ = [
    "ScoreValue",
    "InformationBlocks",
    "HessianBlocks",
    "OneStepFit",
    "PilotState",
    "BaggingResult",
    "OneStepResult",
    "PseudoTrue",
    "score",
    "information_blocks",
    "empirical_information_blocks",
    "hessian_blocks",
    "one_step",
    "one_step_misspec",
    "make_pilot",
    "half_one_step",
    "one_step_sj",
    "bagging",
    "all_partitions",
    "cov_m1_s1",
    "score_weights",
    "bias_b0_hat",
    "estimate_one_step",
    "pseudo_true_values",
]


def _cache(data, params, link, cache):
    return build_cache(data, params, link) if cache is None else cache


def score_weights(c: ModelCache) -> NDArray[np.float64]:
    """``g_ij = f_ij / (F_ij (1 - p_ij))`` with a zero diagonal."""
    g = c.f / (c.Fs * c.q)
    np.fill_diagonal(g, 0.0)
    return g


def _pair_direction(data: NetworkData, g: NDArray) -> NDArray:
    """Slope part of a dyad's score direction: ``g_ij x_ij + g_ji x_ji``."""
    return g[:, :, None] * data.x + (g.T)[:, :, None] * data.x.transpose(1, 0, 2)


@dataclass(frozen=True, eq=False)
class ScoreValue:
    s1: NDArray[np.float64]
    s2: NDArray[np.float64]
    sn: NDArray[np.float64] | None = None


def score(data: NetworkData, params: ParamState, link: LinkFunction,
          cache: ModelCache | None = None) -> ScoreValue:
    """Gradient of the log-likelihood in ``(alpha, beta)``.

    ``s1_i = sum_j (y_ij - p_ij) g_ij`` and ``s2 = sum_{i != j} (y_ij - p_ij) g_ij x_ij``
    over ordered pairs.
    """
    c = _cache(data, params, link, cache)
    r = (data.y - c.p) * score_weights(c)
    return ScoreValue(r.sum(axis=1), np.einsum("ij,ijk->k", r, data.x))


@dataclass(frozen=True, eq=False)
class InformationBlocks:
    """Fisher information blocks and the concentrated information.

    ``W`` is the K x n matrix ``I12' I11^{-1}``, so ``W[k, i]`` is the weight
    on node i's score in the concentrated score for slope k.
    """

    I11: NDArray[np.float64]
    I12: NDArray[np.float64]
    I22: NDArray[np.float64]
    In: NDArray[np.float64]
    W: NDArray[np.float64]

    def concentrated_score(self, s: ScoreValue) -> NDArray[np.float64]:
        return s.s2 - self.W @ s.s1


def _information_from_weights(data: NetworkData, g: NDArray, w: NDArray):
    """Blocks of ``sum_{i<j} w_ij v_ij v_ij'`` for the dyad score direction ``v_ij``."""
    G = _pair_direction(data, g)
    I11 = symmetrize(w * g * g.T)
    np.fill_diagonal(I11, (w * g * g).sum(axis=1))
    I12 = pair_rowsum(w * g, G)
    I22 = 0.5 * pair_outer(w, G, G)
    return I11, I12, I22


def _concentrate(B11, B12, B22, what: str, free=None):
    """Partial out the fixed effects listed in ``free`` (all by default).

    Fixed effects clamped at a bound carry no information, so their rows of
    ``B11`` vanish; they are left out and get zero weight in ``W``.
    """
    if free is None or np.all(free):
        lu = LUFactor(B11, what)
        W = lu.solve(B12).T  # B12' B11^{-1}, B11 symmetric
        return symmetrize(B22 - W @ B12), W
    free = np.flatnonzero(free)
    W = np.zeros((B12.shape[1], B11.shape[0]))
    W[:, free] = LUFactor(B11[np.ix_(free, free)], what).solve(B12[free]).T
    return symmetrize(B22 - W @ B12), W


def interior_nodes(params: ParamState) -> NDArray[np.bool_]:
    """Nodes whose fixed effect lies strictly inside the bounds box."""
    lo, hi = params.bounds
    return (params.alpha > lo) & (params.alpha < hi)


def information_blocks(data: NetworkData, params: ParamState, link: LinkFunction,
                       cache: ModelCache | None = None) -> InformationBlocks:
    """Expected information: every dyad contributes ``p(1-p) v v'``."""
    c = _cache(data, params, link, cache)
    g = score_weights(c)
    I11, I12, I22 = _information_from_weights(data, g, c.p * c.q)
    In, W = _concentrate(I11, I12, I22, "I11", interior_nodes(params))
    return InformationBlocks(I11, I12, I22, In, W)


def empirical_information_blocks(data: NetworkData, params: ParamState, link: LinkFunction,
                                 cache: ModelCache | None = None):
    """Outer-product estimate ``sum_{i<j} s_ij s_ij'`` split into blocks."""
    c = _cache(data, params, link, cache)
    g = score_weights(c)
    e = data.y - c.p
    np.fill_diagonal(e, 0.0)
    return _information_from_weights(data, g, e * e)


@dataclass(frozen=True, eq=False)
class HessianBlocks:
    H11: NDArray[np.float64]
    H12: NDArray[np.float64]
    H22: NDArray[np.float64]
    Hconc: NDArray[np.float64]
    W: NDArray[np.float64]

    def concentrated_score(self, s: ScoreValue) -> NDArray[np.float64]:
        return s.s2 - self.W @ s.s1


def _hessian_raw(data: NetworkData, c: ModelCache):
    F, f, f1 = c.Fs, c.f, c.f1
    q = c.q
    g = score_weights(c)
    resid = data.y - c.p
    # derivative of g_ij in its own index u_ij, holding F_ji fixed
    dg = (f1 * F * q - f * f * (1.0 - 2.0 * c.p)) / (F * F * q * q)
    A = -f * c.F.T * g + resid * dg
    B = -(1.0 - data.y) * f * f.T / (q * q)
    np.fill_diagonal(A, 0.0)
    np.fill_diagonal(B, 0.0)
    H11 = symmetrize(B)
    np.fill_diagonal(H11, A.sum(axis=1))
    xt = data.x.transpose(1, 0, 2)
    H12 = pair_rowsum(A, data.x) + pair_rowsum(B, xt)
    H22 = pair_outer(A, data.x, data.x) + pair_outer(B, data.x, xt)
    return H11, H12, symmetrize(H22)


def hessian_blocks(data: NetworkData, params: ParamState, link: LinkFunction,
                   cache: ModelCache | None = None) -> HessianBlocks:
    """Second derivatives of the log-likelihood; depends on the observed links."""
    c = _cache(data, params, link, cache)
    H11, H12, H22 = _hessian_raw(data, c)
    Hconc, W = _concentrate(H11, H12, H22, "H11", interior_nodes(params))
    return HessianBlocks(H11, H12, H22, Hconc, W)


@dataclass(eq=False)
class OneStepFit:
    beta: NDArray[np.float64]
    se: NDArray[np.float64]
    cov: NDArray[np.float64]
    step: NDArray[np.float64]
    sn: NDArray[np.float64]


def one_step(data: NetworkData, beta_tilde, alpha_tilde, link: LinkFunction) -> OneStepFit:
    """``beta_tilde + In^{-1} sn`` with the inverse information as covariance."""
    params = ParamState(alpha_tilde, beta_tilde)
    c = build_cache(data, params, link)
    info = information_blocks(data, params, link, c)
    sn = info.concentrated_score(score(data, params, link, c))
    lu = LUFactor(info.In, "concentrated information")
    step = lu.solve(sn)
    cov = symmetrize(lu.inverse())
    return OneStepFit(params.beta + step, np.sqrt(np.clip(np.diag(cov), 0.0, None)), cov, step, sn)


def one_step_misspec(data: NetworkData, beta_tilde, alpha_tilde, link_used: LinkFunction) -> OneStepFit:
    """Newton step on the concentrated Hessian, with the sandwich covariance.

    The step is ``beta_tilde - Hconc^{-1} sn`` where ``sn = s2 - H12' H11^{-1} s1``;
    the covariance is ``Hconc^{-1} M Hconc^{-T}`` with ``M`` the variance of
    ``sn`` estimated from per-dyad score outer products.
    """
    params = ParamState(alpha_tilde, beta_tilde)
    c = build_cache(data, params, link_used)
    hess = hessian_blocks(data, params, link_used, c)
    sn = hess.concentrated_score(score(data, params, link_used, c))
    step = -LUFactor(hess.Hconc, "concentrated Hessian").solve(sn)
    I11, I12, I22 = empirical_information_blocks(data, params, link_used, c)
    gamma = sandwich_covariance(hess.Hconc, hess.W, I11, I12, I22)
    return OneStepFit(params.beta + step, np.sqrt(np.clip(np.diag(gamma), 0.0, None)),
                      gamma, step, sn)


@dataclass(eq=False)
class PilotState:
    """Pilot ``(alpha_hat(beta_sj), beta_sj)`` and the full-sample one-step fit."""

    beta_tilde: NDArray[np.float64]
    alpha_tilde: NDArray[np.float64]
    full: OneStepFit
    misspec: bool = False


def _step_fn(misspec: bool):
    return one_step_misspec if misspec else one_step


def make_pilot(data: NetworkData, link: LinkFunction, beta_tilde, alpha_init=None,
               settings: JmmSettings | None = None, misspec: bool = False) -> PilotState:
    settings = settings or JmmSettings()
    rep = solve_alpha(data, beta_tilde, link, init=alpha_init, **settings.alpha_kwargs())
    full = _step_fn(misspec)(data, beta_tilde, rep.alpha_hat, link)
    return PilotState(np.asarray(beta_tilde, dtype=np.float64), rep.alpha_hat, full, misspec)


def half_one_step(data: NetworkData, nodes, pilot: PilotState, link: LinkFunction,
                  settings: JmmSettings | None = None) -> NDArray[np.float64]:
    """One-step estimate on the sub-network induced by ``nodes``.

    The slope pilot is the full-sample one; the fixed effects are re-solved
    on the sub-network, starting from the full-sample values.
    """
    settings = settings or JmmSettings()
    idx = np.asarray(nodes, dtype=np.intp)
    sub = data.subnetwork(idx)
    rep = solve_alpha(sub, pilot.beta_tilde, link, init=pilot.alpha_tilde[idx],
                      **settings.alpha_kwargs())
    return _step_fn(pilot.misspec)(sub, pilot.beta_tilde, rep.alpha_hat, link).beta


def _sj_combine(full, b1, b2):
    return 2.0 * full - 0.5 * (b1 + b2)


def one_step_sj(data: NetworkData, link: LinkFunction, split_seed: int | None = None,
                pilot: PilotState | None = None, partition=None,
                settings: JmmSettings | None = None):
    """``2 b_os - (b_os,1 + b_os,2) / 2``; returns ``(beta, partition)``."""
    settings = settings or JmmSettings()
    if pilot is None:
        mm = estimate_jmm(data, link, split_seed=0 if split_seed is None else split_seed,
                          settings=settings)
        pilot = make_pilot(data, link, mm.beta_sj, mm.alpha_hat, settings)
    if partition is None:
        partition = random_partition(data.n, make_rng(0 if split_seed is None else split_seed))
    b1 = half_one_step(data, partition[0], pilot, link, settings)
    b2 = half_one_step(data, partition[1], pilot, link, settings)
    return _sj_combine(pilot.full.beta, b1, b2), partition


@dataclass(eq=False)
class BaggingResult:
    beta: NDArray[np.float64]
    draws: NDArray[np.float64]
    n_used: int
    n_failed: int
    partitions: list = field(repr=False, default_factory=list)


_SPLIT_FAILURES = (SingularMatrixError, AlphaConvergenceError, FloatingPointError,
                   np.linalg.LinAlgError)


def bagging(data: NetworkData, link: LinkFunction, T_prime: int = 100, seed: int = 0,
            pilot: PilotState | None = None, partitions=None,
            settings: JmmSettings | None = None) -> BaggingResult:
    """Average of one-step jackknife estimates over ``T_prime`` random splits.

    The full-sample one-step estimate enters every draw unchanged.  A split
    whose half-network fit fails is replaced by a fresh split, with at most
    ``3 * T_prime`` attempts in total.  Passing ``partitions`` uses exactly
    those splits instead of random ones.
    """
    settings = settings or JmmSettings()
    if pilot is None:
        mm = estimate_jmm(data, link, split_seed=seed, settings=settings)
        pilot = make_pilot(data, link, mm.beta_sj, mm.alpha_hat, settings)
    draws, used = [], []
    failed = 0
    if partitions is not None:
        for part in partitions:
            b1 = half_one_step(data, part[0], pilot, link, settings)
            b2 = half_one_step(data, part[1], pilot, link, settings)
            draws.append(_sj_combine(pilot.full.beta, b1, b2))
            used.append(part)
    else:
        if T_prime < 1:
            raise ValueError("T_prime must be at least 1")
        rng = make_rng(seed)
        attempts = 0
        while len(draws) < T_prime:
            if attempts >= 3 * T_prime:
                raise RuntimeError(
                    f"bagging: only {len(draws)} of {T_prime} splits succeeded "
                    f"after {attempts} attempts")
            attempts += 1
            part = random_partition(data.n, rng)
            try:
                b1 = half_one_step(data, part[0], pilot, link, settings)
                b2 = half_one_step(data, part[1], pilot, link, settings)
            except _SPLIT_FAILURES:
                failed += 1
                continue
            draws.append(_sj_combine(pilot.full.beta, b1, b2))
            used.append(part)
    D = np.array(draws)
    return BaggingResult(D.mean(axis=0), D, len(draws), failed, used)


def all_partitions(n: int) -> list:
    """Every split of ``range(n)`` (n even) into two labelled halves."""
    if n % 2:
        raise ValueError("exhaustive splits need an even n")
    nodes = np.arange(n)
    out = []
    for S in combinations(range(n), n // 2):
        first = np.array(S)
        out.append((first, np.setdiff1d(nodes, first)))
    return out


def cov_m1_s1(c: ModelCache) -> NDArray[np.float64]:
    """Covariance between degree moments and fixed-effect scores.

    Entry (i, j) is ``F_ij f_ji`` and entry (i, i) is ``sum_k f_ik F_ki``.
    """
    C = c.F * c.f.T
    np.fill_diagonal(C, (c.f * c.F.T).sum(axis=1))
    return C


def _weights_W(data, alpha, beta, link):
    return information_blocks(data, ParamState(alpha, beta), link).W


def bias_b0_hat(data: NetworkData, params: ParamState, link: LinkFunction,
                fd_step: float = 1e-5) -> NDArray[np.float64]:
    """``b_k = Tr[J11^{-1} C W_k] / sqrt(N)`` at the supplied parameters.

    ``C`` is :func:`cov_m1_s1`; ``(W_k)_ij = d w_ki / d alpha_j`` is taken by
    central differences of the concentration weights.  Cost grows like n^4,
    so this is meant for diagnostics on networks of a few hundred nodes.
    """
    n, K = data.n, data.K
    alpha, beta = params.alpha, params.beta
    c = build_cache(data, params, link)
    jac = jacobian_blocks(data, params, link, c)
    C = cov_m1_s1(c)
    dW = np.empty((K, n, n))
    for j in range(n):
        ap = alpha.copy()
        am = alpha.copy()
        ap[j] += fd_step
        am[j] -= fd_step
        dW[:, :, j] = (_weights_W(data, ap, beta, link) - _weights_W(data, am, beta, link)) \
            / (2.0 * fd_step)
    M = jac.lu11.solve(C)
    return np.array([np.einsum("ij,ji->", M, dW[k]) for k in range(K)]) / math.sqrt(data.N)


@dataclass(eq=False)
class OneStepResult:
    beta_os: NDArray[np.float64]
    beta_os_sj: NDArray[np.float64]
    beta_bg: NDArray[np.float64]
    n_splits_used: int
    se_os: NDArray[np.float64]
    se_sj: NDArray[np.float64]
    se_bg: NDArray[np.float64]
    cov_os: NDArray[np.float64]
    bias_b0: NDArray[np.float64] | None
    gamma_star: NDArray[np.float64]
    n_split_failures: int
    pilot: PilotState = field(repr=False)


def estimate_one_step(data: NetworkData, link: LinkFunction, beta_tilde, alpha_init,
                      T_prime: int = 100, split_seed: int = 0, bag_seed: int = 1,
                      settings: JmmSettings | None = None, misspec: bool = False,
                      partition=None, compute_bias: bool = False) -> OneStepResult:
    """One-step, its jackknife and its bagged version from a given pilot slope."""
    settings = settings or JmmSettings()
    pilot = make_pilot(data, link, beta_tilde, alpha_init, settings, misspec)
    b_sj, _ = one_step_sj(data, link, split_seed=split_seed, pilot=pilot,
                          partition=partition, settings=settings)
    bag = bagging(data, link, T_prime, bag_seed, pilot=pilot, settings=settings)
    if misspec:
        gamma = pilot.full.cov
    else:
        gamma = one_step_misspec(data, pilot.beta_tilde, pilot.alpha_tilde, link).cov
    se = pilot.full.se
    b0 = None
    if compute_bias:
        b0 = bias_b0_hat(data, ParamState(pilot.alpha_tilde, pilot.beta_tilde), link)
    return OneStepResult(beta_os=pilot.full.beta, beta_os_sj=b_sj, beta_bg=bag.beta,
                         n_splits_used=bag.n_used, se_os=se, se_sj=math.sqrt(2.0) * se,
                         se_bg=se.copy(), cov_os=pilot.full.cov, bias_b0=b0,
                         gamma_star=gamma, n_split_failures=bag.n_failed, pilot=pilot)


@dataclass(eq=False)
class PseudoTrue:
    """Targets of the moment and one-step estimators under a fitted link.

    ``beta_moment`` solves the population moment equations under the fitted
    link; ``alpha_star`` are the matching fixed effects; ``beta_onestep`` is
    where the Hessian-based one-step estimator centres.
    """

    beta_moment: NDArray[np.float64]
    alpha_star: NDArray[np.float64]
    beta_onestep: NDArray[np.float64]
    expected_sn: NDArray[np.float64]


def pseudo_true_values(alpha0, beta0, true_link: LinkFunction, fitted_link: LinkFunction,
                       x: NDArray[np.float64], n_sims: int = 0, seed: int = 0,
                       settings: JmmSettings | None = None) -> PseudoTrue:
    """Pseudo-true parameters when ``fitted_link`` is used but ``true_link`` generated the data.

    The fixed effects solve ``sum_j p_ij = sum_j q_ij(alpha, beta)`` with ``p``
    the true and ``q`` the fitted probabilities; the slope then solves
    ``sum_{i<j} (p_ij - q_ij) x_ij = 0``.  The one-step target adds
    ``-Hconc^{-1} E[sn]`` evaluated there, with the Hessian blocks at their
    expectation under the truth.  With ``n_sims = 0`` the expectation of the
    concentrated score is exact (it is linear in the links once the Hessian
    is fixed); otherwise it is averaged over ``n_sims`` simulated networks.
    """
    settings = settings or JmmSettings()
    alpha0 = np.asarray(alpha0, dtype=np.float64)
    beta0 = np.asarray(beta0, dtype=np.float64)
    ptrue = build_cache(NetworkData(np.zeros((len(alpha0),) * 2), x), ParamState(alpha0, beta0),
                        true_link).p
    pop = NetworkData(ptrue, x, binary=False)
    beta_m, alpha_s, _, c, _, _ = _concentrated_newton(pop, fitted_link, beta0, alpha0, settings)
    params = ParamState(alpha_s, beta_m)
    hess = hessian_blocks(pop, params, fitted_link, c)
    if n_sims <= 0:
        esn = hess.concentrated_score(score(pop, params, fitted_link, c))
    else:
        rng = make_rng(seed)
        acc = np.zeros(pop.K)
        fam = true_link.family
        for _ in range(n_sims):
            y = draw_links(x, alpha0, beta0, fam, rng)
            acc += hess.concentrated_score(score(pop.with_y(y, binary=True), params, fitted_link, c))
        esn = acc / n_sims
    target = beta_m - LUFactor(hess.Hconc, "concentrated Hessian").solve(esn)
    return PseudoTrue(beta_m, alpha_s, target, esn)

