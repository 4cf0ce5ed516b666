"""Joint method-of-moments estimation of the slopes.

The fixed effects are profiled out through the degree equations, and the
slopes solve ``m2(alpha_hat(beta), beta) = 0`` by Newton steps on this
K-dimensional concentrated system.  The module also builds the Jacobian and
variance blocks of the stacked moments, the sandwich covariance, the
analytic incidental-parameter bias term and the split-network jackknife.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import TYPE_CHECKING, Callable

import numpy as np

from .alpha import AlphaConvergenceError, AlphaSolveReport, solve_alpha
from .linalg import LUFactor, inverse, symmetrize
from .model import LinkFunction, ModelCache, NetworkData, ParamState, build_cache

if TYPE_CHECKING:
    from numpy.typing import NDArray

__all__ = [
    "MomentValue",
    "JacobianBlocks",
    "VarianceBlocks",
    "JmmSettings",
    "JmmFit",
    "JmmResult",
    "NewtonDivergenceError",
    "moment_m1",
    "moment_m2",
    "moments",
    "jacobian_blocks",
    "variance_blocks",
    "sandwich_covariance",
    "omega_hat",
    "bias_B0_hat",
    "bias_R_matrices",
    "solve_beta_jmm",
    "random_partition",
    "split_jackknife",
    "estimate_jmm",
    "omega_star_hat",
]


def pair_outer(w: NDArray, A: NDArray, B: NDArray) -> NDArray:
    """``sum_{i != j} w_ij A_ij B_ij'`` for n x n x K arrays ``A`` and ``B``."""
    K1, K2 = A.shape[2], B.shape[2]
    return (A * w[:, :, None]).reshape(-1, K1).T @ B.reshape(-1, K2)


def pair_rowsum(w: NDArray, A: NDArray) -> NDArray:
    """Row ``i`` is ``sum_j w_ij A_ij'``; returns n x K."""
    return np.einsum("ij,ijk->ik", w, A)


@dataclass(frozen=True)
class MomentValue:
    m1: NDArray[np.float64]
    m2: NDArray[np.float64]


def _cache(data, params, link, cache):
    return build_cache(data, params, link) if cache is None else cache


def moment_m1(data: NetworkData, params: ParamState, link: LinkFunction,
              cache: ModelCache | None = None) -> NDArray[np.float64]:
    """``d_i - sum_{j != i} p_ij``."""
    c = _cache(data, params, link, cache)
    return data.degree - c.p.sum(axis=1)


def moment_m2(data: NetworkData, params: ParamState, link: LinkFunction,
              cache: ModelCache | None = None) -> NDArray[np.float64]:
    """``sum_{i<j} (y_ij - p_ij) x_ij``."""
    c = _cache(data, params, link, cache)
    return 0.5 * np.einsum("ij,ijk->k", data.y - c.p, data.xu)


def moments(data, params, link, cache=None) -> MomentValue:
    c = _cache(data, params, link, cache)
    return MomentValue(moment_m1(data, params, link, c), moment_m2(data, params, link, c))


@dataclass(frozen=True, eq=False)
class JacobianBlocks:
    """Derivatives of ``(m1, m2)`` with respect to ``(alpha, beta)``."""

    J11: NDArray[np.float64]
    J12: NDArray[np.float64]
    J21: NDArray[np.float64]
    J22: NDArray[np.float64]
    Jn: NDArray[np.float64]
    lu11: LUFactor = field(repr=False)

    @property
    def A(self) -> NDArray[np.float64]:
        """``J21 J11^{-1}`` (K x n)."""
        return self.lu11.solve(self.J21.T, trans=True).T


def _jacobian_raw(data: NetworkData, c: ModelCache):
    a = c.f * c.F.T  # d p_ij / d alpha_i
    J11 = -a.T.copy()
    np.fill_diagonal(J11, -a.sum(axis=1))
    J12 = -(pair_rowsum(a, data.x) + pair_rowsum(a.T, data.x.transpose(1, 0, 2)))
    J21 = -pair_rowsum(a, data.xu).T
    J22 = -pair_outer(a, data.xu, data.x)
    return J11, J12, J21, J22


def jacobian_blocks(data: NetworkData, params: ParamState, link: LinkFunction,
                    cache: ModelCache | None = None) -> JacobianBlocks:
    c = _cache(data, params, link, cache)
    J11, J12, J21, J22 = _jacobian_raw(data, c)
    lu = LUFactor(J11, "J11")
    Jn = J22 - J21 @ lu.solve(J12)
    return JacobianBlocks(J11, J12, J21, J22, Jn, lu)


@dataclass(frozen=True, eq=False)
class VarianceBlocks:
    V11: NDArray[np.float64]
    V12: NDArray[np.float64]
    V22: NDArray[np.float64]


def _variance_from_weights(w: NDArray, xu: NDArray) -> VarianceBlocks:
    V11 = w.copy()
    np.fill_diagonal(V11, w.sum(axis=1))
    return VarianceBlocks(V11, pair_rowsum(w, xu), 0.5 * pair_outer(w, xu, xu))


def variance_blocks(data: NetworkData, params: ParamState, link: LinkFunction,
                    cache: ModelCache | None = None) -> VarianceBlocks:
    """Model-based covariance of ``(m1, m2)``: each dyad contributes ``p(1-p)``."""
    c = _cache(data, params, link, cache)
    return _variance_from_weights(c.p * (1.0 - c.p), data.xu)


def sandwich_covariance(Jn, A, V11, V12, V22) -> NDArray[np.float64]:
    """``Jn^{-1} [V22 + A V11 A' - A V12 - (A V12)'] Jn^{-T}``."""
    AV12 = A @ V12
    middle = V22 + A @ V11 @ A.T - AV12 - AV12.T
    Jinv = inverse(Jn)
    return symmetrize(Jinv @ middle @ Jinv.T)


def omega_hat(jac: JacobianBlocks, var: VarianceBlocks) -> NDArray[np.float64]:
    """Plug-in covariance matrix of the slope estimator (sample scale)."""
    return sandwich_covariance(jac.Jn, jac.A, var.V11, var.V12, var.V22)


def bias_R_matrices(data: NetworkData, c: ModelCache) -> list[NDArray[np.float64]]:
    """Second-derivative weight matrices ``R_k`` of ``p_ij x_ij,k`` in alpha."""
    cross = c.f * c.f.T
    own = c.f1 * c.F.T
    out = []
    for k in range(data.K):
        xk = data.xu[:, :, k]
        R = cross * xk
        np.fill_diagonal(R, (own * xk).sum(axis=1))
        out.append(R)
    return out


def bias_B0_hat(data: NetworkData, params: ParamState, link: LinkFunction,
                cache: ModelCache | None = None) -> NDArray[np.float64]:
    """``B_k = Tr[J11^{-1} V11 J11^{-T} R_k] / (2 sqrt(N))`` at the supplied parameters.

    The implied first-order bias of the slope estimator is ``Jn^{-1} B sqrt(N)``.
    """
    c = _cache(data, params, link, cache)
    jac = jacobian_blocks(data, params, link, c)
    var = variance_blocks(data, params, link, c)
    J11inv = jac.lu11.inverse()
    S = J11inv @ var.V11 @ J11inv.T
    return np.array([np.einsum("ij,ji->", S, R) for R in bias_R_matrices(data, c)]) \
        / (2.0 * math.sqrt(data.N))


@dataclass(frozen=True)
class JmmSettings:
    tol_alpha: float = 1e-10
    max_iter_alpha: int = 10_000
    alpha_bounds: tuple[float, float] = (-25.0, 25.0)
    alpha_method: str = "contraction"
    tol_beta: float = 1e-9
    max_newton: int = 100
    max_halvings: int = 20
    beta_bound: float = 50.0

    def alpha_kwargs(self) -> dict:
        return dict(tol=self.tol_alpha, max_iter=self.max_iter_alpha,
                    bounds=self.alpha_bounds, method=self.alpha_method)


class NewtonDivergenceError(RuntimeError):
    def __init__(self, message: str, trace: list):
        super().__init__(message)
        self.trace = trace


@dataclass(eq=False)
class JmmFit:
    """Full-sample method-of-moments fit."""

    beta: NDArray[np.float64]
    alpha: NDArray[np.float64]
    omega: NDArray[np.float64]
    se: NDArray[np.float64]
    jacobian: JacobianBlocks
    variance: VarianceBlocks
    iterations: int
    alpha_report: AlphaSolveReport
    m2_scaled: float
    trace: list = field(default_factory=list)

    @property
    def params(self) -> ParamState:
        return ParamState(self.alpha, self.beta)


def _solve_alpha_at(data, beta, link, init, settings: JmmSettings, degree=None):
    return solve_alpha(data, beta, link, init=init, degree=degree, **settings.alpha_kwargs())


def _frozen_report(alpha) -> AlphaSolveReport:
    return AlphaSolveReport(alpha_hat=np.asarray(alpha, dtype=np.float64).copy(), iterations=0,
                            final_l1_step=0.0, contraction_ratios=[], converged=True,
                            clamped_nodes=[], method="fixed")


def _concentrated_newton(data: NetworkData, link: LinkFunction, beta_init, alpha_init,
                         settings: JmmSettings, degree=None, y=None, fixed_alpha=None):
    """Newton iteration on ``beta -> m2(alpha_hat(beta), beta)``.

    ``degree`` and ``y`` replace the observed degrees and links, which lets
    the same routine solve population versions of the moment equations.
    With ``fixed_alpha`` the fixed effects are held at that value and the
    iteration solves ``m2(fixed_alpha, beta) = 0`` alone.
    """
    K, N = data.K, data.N
    y = data.y if y is None else y
    d = data.degree if degree is None else degree
    beta = np.zeros(K) if beta_init is None else np.asarray(beta_init, dtype=np.float64).copy()
    if np.any(np.abs(beta) > settings.beta_bound):
        raise ValueError("beta_init lies outside the slope bounds")
    if fixed_alpha is not None:
        frozen = _frozen_report(fixed_alpha)
        if frozen.alpha_hat.shape != (data.n,):
            raise ValueError(f"fixed_alpha must have length {data.n}")

        def _alpha_at(data, beta, link, init, settings, degree):  # noqa: F811
            return frozen
    else:
        _alpha_at = _solve_alpha_at
    rep = _alpha_at(data, beta, link, alpha_init, settings, d)
    alpha = rep.alpha_hat

    def m2_at(alpha, beta):
        c = build_cache(data, ParamState(alpha, beta), link)
        return 0.5 * np.einsum("ij,ijk->k", y - c.p, data.xu), c

    m2, c = m2_at(alpha, beta)
    trace = [(0, beta.copy(), float(np.abs(m2).max() / N))]
    for it in range(settings.max_newton + 1):
        if np.abs(m2).max() / N <= settings.tol_beta:
            return beta, alpha, rep, c, it, trace
        if it == settings.max_newton:
            break
        J11, J12, J21, J22 = _jacobian_raw(data, c)
        # Fixed effects pinned at a bound do not respond to beta, so they are
        # left out of the implicit derivative of alpha_hat(beta).
        if fixed_alpha is not None:
            Jn = J22
        else:
            free = np.setdiff1d(np.arange(data.n), rep.pinned_nodes)
            lu = LUFactor(J11[np.ix_(free, free)], "J11")
            Jn = J22 - J21[:, free] @ lu.solve(J12[free])
        direction = -LUFactor(Jn, "concentrated Jacobian").solve(m2)
        t = 1.0
        norm0 = np.linalg.norm(m2)
        accepted = False
        for _ in range(settings.max_halvings + 1):
            trial = beta + t * direction
            if np.all(np.abs(trial) <= settings.beta_bound):
                try:
                    rep_t = _alpha_at(data, trial, link, alpha, settings, d)
                except AlphaConvergenceError:
                    rep_t = None
                if rep_t is not None:
                    m2_t, c_t = m2_at(rep_t.alpha_hat, trial)
                    if np.linalg.norm(m2_t) < norm0:
                        accepted = True
                        break
            t *= 0.5
        if not accepted:
            raise NewtonDivergenceError(
                f"line search failed at Newton iteration {it + 1}", trace)
        beta, alpha, rep, m2, c = trial, rep_t.alpha_hat, rep_t, m2_t, c_t
        trace.append((it + 1, beta.copy(), float(np.abs(m2).max() / N)))
    raise NewtonDivergenceError(
        f"no convergence in {settings.max_newton} Newton iterations", trace)


def solve_beta_jmm(data: NetworkData, link: LinkFunction, beta_init=None,
                   settings: JmmSettings | None = None, alpha_init=None,
                   fixed_alpha=None) -> JmmFit:
    """Method-of-moments slopes and fixed effects with the plug-in covariance.

    If the iteration fails from a supplied starting point it is restarted
    once from ``beta = 0`` with cold-started fixed effects.  Passing
    ``fixed_alpha`` treats the fixed effects as known: only the slope
    moments are solved and the covariance ignores fixed-effect estimation.
    """
    settings = settings or JmmSettings()
    try:
        beta, alpha, rep, c, its, trace = _concentrated_newton(
            data, link, beta_init, alpha_init, settings, fixed_alpha=fixed_alpha)
    except (AlphaConvergenceError, NewtonDivergenceError):
        warm = beta_init is not None and np.any(np.asarray(beta_init) != 0.0)
        if not warm and alpha_init is None:
            raise
        beta, alpha, rep, c, its, trace = _concentrated_newton(
            data, link, None, None, settings, fixed_alpha=fixed_alpha)
    params = ParamState(alpha, beta)
    jac = jacobian_blocks(data, params, link, c)
    var = variance_blocks(data, params, link, c)
    if fixed_alpha is None:
        om = omega_hat(jac, var)
    else:
        om = sandwich_covariance(jac.J22, np.zeros((data.K, data.n)), var.V11, var.V12, var.V22)
    se = np.sqrt(np.clip(np.diag(om), 0.0, None))
    m2 = moment_m2(data, params, link, c)
    return JmmFit(beta=beta, alpha=alpha, omega=om, se=se, jacobian=jac, variance=var,
                  iterations=its, alpha_report=rep,
                  m2_scaled=float(np.abs(m2).max() / data.N), trace=trace)


def random_partition(n: int, rng: np.random.Generator) -> tuple[NDArray[np.intp], NDArray[np.intp]]:
    """Two disjoint node sets of size ``n // 2``; one random node is left out when n is odd."""
    perm = rng.permutation(n)
    h = n // 2
    return np.sort(perm[:h]), np.sort(perm[h:2 * h])


class HalfNetworkError(RuntimeError):
    def __init__(self, half: int, cause: Exception):
        super().__init__(f"estimation failed on half-network {half}: {cause}")
        self.half = half
        self.cause = cause


def split_jackknife(estimate_fn: Callable[[NetworkData], NDArray[np.float64]], data: NetworkData,
                    split_seed: int | None = None, partition=None, full_estimate=None):
    """``2 b - (b_1 + b_2) / 2`` over a random split into two half-networks.

    Returns ``(beta_sj, partition)``.  Give either ``split_seed`` or an
    explicit ``partition``; ``full_estimate`` skips re-estimating on the
    whole network.
    """
    if partition is None:
        if data.n < 8:
            raise ValueError("split-network jackknife needs n >= 8")
        from .dgp import make_rng
        partition = random_partition(data.n, make_rng(0 if split_seed is None else split_seed))
    full = estimate_fn(data) if full_estimate is None else np.asarray(full_estimate)
    halves = []
    for h, idx in enumerate(partition, start=1):
        try:
            halves.append(np.asarray(estimate_fn(data.subnetwork(idx))))
        except Exception as exc:  # noqa: BLE001 - re-raised with the half index
            raise HalfNetworkError(h, exc) from exc
    return 2.0 * full - 0.5 * (halves[0] + halves[1]), partition


@dataclass(eq=False)
class JmmResult:
    beta_hat: NDArray[np.float64]
    beta_sj: NDArray[np.float64]
    alpha_hat: NDArray[np.float64]
    omega_hat: NDArray[np.float64]
    bias_B0: NDArray[np.float64] | None
    se: dict
    newton_iterations: int
    split_spec: tuple
    fit: JmmFit = field(repr=False)


def estimate_jmm(data: NetworkData, link: LinkFunction, split_seed: int = 0,
                 settings: JmmSettings | None = None, beta_init=None, partition=None,
                 compute_bias: bool = False) -> JmmResult:
    """Method-of-moments fit plus its split-network jackknife correction.

    Half-network fits start from the full-sample estimates.  The jackknife
    standard error is sqrt(2) times the full-sample plug-in standard error.
    """
    settings = settings or JmmSettings()
    fit = solve_beta_jmm(data, link, beta_init, settings)

    def on_half(sub: NetworkData, idx):
        return solve_beta_jmm(sub, link, fit.beta, settings, alpha_init=fit.alpha[idx]).beta

    if partition is None:
        from .dgp import make_rng
        partition = random_partition(data.n, make_rng(split_seed))
    halves = iter(partition)

    def est(sub):
        return on_half(sub, next(halves))

    beta_sj, part = split_jackknife(est, data, partition=partition, full_estimate=fit.beta)
    b0 = bias_B0_hat(data, fit.params, link) if compute_bias else None
    return JmmResult(beta_hat=fit.beta, beta_sj=beta_sj, alpha_hat=fit.alpha,
                     omega_hat=fit.omega, bias_B0=b0,
                     se={"mm": fit.se, "mm_sj": math.sqrt(2.0) * fit.se},
                     newton_iterations=fit.iterations, split_spec=part, fit=fit)


def omega_star_hat(data: NetworkData, params: ParamState, link_used: LinkFunction,
                   cache: ModelCache | None = None) -> NDArray[np.float64]:
    """Misspecification-robust covariance of the moment estimator.

    The variance of the stacked moments is estimated by the sum over dyads
    of ``m_ij m_ij'``, where ``m_ij`` has ``y_ij - q_ij`` in positions i and
    j and ``(y_ij - q_ij) x_ij`` in the slope block.
    """
    c = _cache(data, params, link_used, cache)
    jac = jacobian_blocks(data, params, link_used, c)
    e = data.y - c.p
    np.fill_diagonal(e, 0.0)
    var = _variance_from_weights(e * e, data.xu)
    return omega_hat(jac, var)
