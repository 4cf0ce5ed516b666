"""All five slope estimators from one call.

``estimate_all`` runs the moment estimator and its jackknife, then the
one-step estimator from the jackknifed pilot, its jackknife and the bagged
version.  The jackknife splits and the bagging splits come from independent
streams derived from a single seed.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import TYPE_CHECKING

import numpy as np

from .jmm import JmmResult, JmmSettings, estimate_jmm, omega_star_hat
from .model import LinkFunction, NetworkData
from .onestep import OneStepResult, estimate_one_step

if TYPE_CHECKING:
    from numpy.typing import NDArray

__all__ = ["METHODS", "MethodEstimate", "EstimationResult", "split_seeds", "estimate_all"]

METHODS = ("mm", "mm_sj", "os", "os_sj", "bg")


@dataclass(eq=False)
class MethodEstimate:
    beta: NDArray[np.float64]
    se: NDArray[np.float64]
    cov: NDArray[np.float64]

    def to_dict(self) -> dict:
        return {"beta": self.beta.tolist(), "se": self.se.tolist(), "cov": self.cov.tolist()}


@dataclass(eq=False)
class EstimationResult:
    methods: dict[str, MethodEstimate]
    alpha_hat: NDArray[np.float64]
    diagnostics: dict = field(default_factory=dict)
    jmm: JmmResult | None = field(default=None, repr=False)
    onestep: OneStepResult | None = field(default=None, repr=False)

    def beta(self, method: str) -> NDArray[np.float64]:
        return self.methods[method].beta

    def se(self, method: str) -> NDArray[np.float64]:
        return self.methods[method].se


def split_seeds(seed: int) -> tuple[int, int]:
    """Two independent 32-bit seeds (jackknife split, bagging) from one."""
    a, b = np.random.SeedSequence(int(seed)).generate_state(2)
    return int(a), int(b)


def _entry(beta, cov, scale=1.0):
    cov = np.asarray(cov) * scale
    return MethodEstimate(np.asarray(beta, dtype=np.float64).copy(),
                          np.sqrt(np.clip(np.diag(cov), 0.0, None)), cov)


def estimate_all(data: NetworkData, link: LinkFunction, T_prime: int = 100, seed: int = 0,
                 settings: JmmSettings | None = None, misspec: bool = False,
                 methods=METHODS, compute_bias: bool = False) -> EstimationResult:
    """Estimate with every method in ``methods`` (a subset of ``METHODS``).

    With ``misspec=True`` the moment covariance uses squared residuals and
    the one-step estimators switch to the Hessian step with the sandwich
    covariance.  Jackknifed covariances are twice the full-sample ones.
    """
    unknown = set(methods) - set(METHODS)
    if unknown:
        raise ValueError(f"unknown methods {sorted(unknown)}")
    settings = settings or JmmSettings()
    split_seed, bag_seed = split_seeds(seed)
    mm = estimate_jmm(data, link, split_seed=split_seed, settings=settings,
                      compute_bias=compute_bias)
    omega = omega_star_hat(data, mm.fit.params, link) if misspec else mm.omega_hat
    out = {"mm": _entry(mm.beta_hat, omega), "mm_sj": _entry(mm.beta_sj, omega, 2.0)}
    diag = {
        "newton_iterations": mm.newton_iterations,
        "alpha_iterations": mm.fit.alpha_report.iterations,
        "alpha_clamped_nodes": list(mm.fit.alpha_report.clamped_nodes),
        "m2_scaled": mm.fit.m2_scaled,
        "misspecified": bool(misspec),
    }
    if compute_bias:
        diag["bias_B0"] = mm.bias_B0.tolist()
    os_res = None
    if {"os", "os_sj", "bg"} & set(methods):
        os_res = estimate_one_step(data, link, mm.beta_sj, mm.alpha_hat, T_prime=T_prime,
                                   split_seed=split_seed, bag_seed=bag_seed, settings=settings,
                                   misspec=misspec, partition=mm.split_spec,
                                   compute_bias=compute_bias)
        cov = os_res.cov_os
        out["os"] = _entry(os_res.beta_os, cov)
        out["os_sj"] = _entry(os_res.beta_os_sj, cov, 2.0)
        out["bg"] = _entry(os_res.beta_bg, cov)
        diag["bagging_splits_used"] = os_res.n_splits_used
        diag["bagging_split_failures"] = os_res.n_split_failures
        if compute_bias:
            diag["bias_b0"] = os_res.bias_b0.tolist()
    out = {m: out[m] for m in METHODS if m in methods}
    bad = [m for m, e in out.items() if not all(math.isfinite(v) for v in e.beta)]
    if bad:
        raise FloatingPointError(f"non-finite slope estimate from {', '.join(bad)}")
    return EstimationResult(out, mm.alpha_hat.copy(), diag, mm, os_res)
