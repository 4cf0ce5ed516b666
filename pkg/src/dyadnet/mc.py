"""Monte Carlo replications of the estimators on simulated networks.

Each replication draws a network from the design, runs the requested
estimators and records estimates, standard errors and fixed-effect errors.
Replication ``r`` gets its seeds from ``SeedSequence([base_seed, r])``, so
results do not depend on how replications are spread over worker
processes.  Reports are assembled in replication order in one process.
"""

from __future__ import annotations

import json
import math
import os
import warnings
from concurrent.futures import ProcessPoolExecutor
from contextlib import contextmanager
from dataclasses import dataclass, field, replace
from multiprocessing import get_context
from statistics import NormalDist
from typing import TYPE_CHECKING, Iterable, Sequence

import numpy as np

from .alpha import BoundaryDegreeWarning
from .ape import EffectKind, PartialEffectSpec, default_specs, estimate_ape
from .dgp import DgpConfig, make_rng, network_density, simulate_network
from .jmm import JmmSettings
from .model import Family, get_link
from .onestep import pseudo_true_values
from .pipeline import METHODS, estimate_all

if TYPE_CHECKING:
    from numpy.typing import NDArray

__all__ = [
    "METRICS",
    "McConfig",
    "McReport",
    "McAbortError",
    "Histogram",
    "replication_seeds",
    "run_replication",
    "run_replications",
    "coverage",
    "summarize",
    "alpha_error_histogram",
    "population_ape",
    "sparse_design",
    "misspecified",
]

METRICS = ("mean_bias", "median_bias", "sd", "mean_se", "mean_abs_bias", "median_abs_bias",
           "rmse", "coverage_90", "coverage_95")

SE_MULTIPLIER = {"mm": 1.0, "mm_sj": math.sqrt(2.0), "os": 1.0, "os_sj": math.sqrt(2.0), "bg": 1.0,
                 "plugin": 1.0, "sj": math.sqrt(2.0)}

APE_VARIANTS = ("plugin", "sj", "bg")

_NUMERICAL_FAILURES = (np.linalg.LinAlgError, ArithmeticError, RuntimeError)


class McAbortError(RuntimeError):
    def __init__(self, message: str, failures: dict):
        super().__init__(message)
        self.failures = failures


@dataclass(frozen=True)
class McConfig:
    """One Monte Carlo experiment.

    ``fitted_link`` defaults to the noise family of the design; a different
    value gives a misspecified run, in which estimates are compared with the
    per-replication pseudo-true slope instead of ``beta0``.  ``ape_specs``
    switches on average partial effects (``"default"`` picks the standard
    specs for K).
    """

    dgp: DgpConfig = field(default_factory=DgpConfig)
    R: int = 200
    T_prime: int = 50
    methods: tuple[str, ...] = METHODS
    ape_specs: tuple[PartialEffectSpec, ...] | None = None
    ape_variants: tuple[str, ...] = ("plugin",)
    fitted_link: str | None = None
    base_seed: int = 0
    parallel_workers: int = 1
    alpha_method: str = "contraction"
    hist_bin_width: float = 0.05
    max_failure_rate: float = 0.10
    ape_truth_draws: int = 2_000_000

    def __post_init__(self):
        if int(self.R) < 1:
            raise ValueError("R must be at least 1")
        if int(self.T_prime) < 1:
            raise ValueError("T_prime must be at least 1")
        if int(self.parallel_workers) < 1:
            raise ValueError("parallel_workers must be at least 1")
        bad = set(self.methods) - set(METHODS)
        if bad or not self.methods:
            raise ValueError(f"methods must be a non-empty subset of {METHODS}")
        if set(self.ape_variants) - set(APE_VARIANTS):
            raise ValueError(f"ape_variants must be a subset of {APE_VARIANTS}")
        if self.alpha_method not in ("contraction", "newton"):
            raise ValueError("alpha_method must be 'contraction' or 'newton'")
        if self.hist_bin_width <= 0:
            raise ValueError("hist_bin_width must be positive")
        specs = self.ape_specs
        if specs == "default":
            specs = tuple(default_specs(self.dgp.K))
        elif specs is not None:
            specs = tuple(s if isinstance(s, PartialEffectSpec) else PartialEffectSpec(**s)
                          for s in specs)
            for s in specs:
                s.check(self.dgp.K)
        object.__setattr__(self, "ape_specs", specs)
        object.__setattr__(self, "methods", tuple(m for m in METHODS if m in self.methods))
        object.__setattr__(self, "ape_variants",
                           tuple(v for v in APE_VARIANTS if v in self.ape_variants))
        if self.fitted_link is not None:
            object.__setattr__(self, "fitted_link", get_link(self.fitted_link).name)

    @property
    def fitted(self) -> str:
        return self.fitted_link or self.dgp.noise.value

    @property
    def misspecified(self) -> bool:
        return self.fitted != self.dgp.noise.value

    def settings(self) -> JmmSettings:
        return JmmSettings(alpha_method=self.alpha_method)

    def to_dict(self) -> dict:
        return {
            "dgp": self.dgp.to_dict(),
            "R": self.R,
            "T_prime": self.T_prime,
            "methods": list(self.methods),
            "ape_specs": None if self.ape_specs is None else
            [{"k": s.k, "kind": s.kind.value} for s in self.ape_specs],
            "ape_variants": list(self.ape_variants),
            "fitted_link": self.fitted,
            "base_seed": self.base_seed,
            "parallel_workers": self.parallel_workers,
            "alpha_method": self.alpha_method,
            "hist_bin_width": self.hist_bin_width,
            "max_failure_rate": self.max_failure_rate,
            "ape_truth_draws": self.ape_truth_draws,
        }

    @classmethod
    def from_dict(cls, d: dict) -> McConfig:
        kw = dict(d)
        known = {f for f in cls.__dataclass_fields__}
        extra = set(kw) - known
        if extra:
            raise ValueError(f"unknown mc keys: {sorted(extra)}")
        if "dgp" in kw and not isinstance(kw["dgp"], DgpConfig):
            kw["dgp"] = DgpConfig.from_dict(kw["dgp"])
        for key in ("methods", "ape_variants"):
            if key in kw:
                kw[key] = tuple(kw[key])
        if isinstance(kw.get("ape_specs"), list):
            kw["ape_specs"] = tuple(PartialEffectSpec(**s) for s in kw["ape_specs"])
        return cls(**kw)


def replication_seeds(base_seed: int, rep: int) -> tuple[int, int]:
    """Seeds for the network draw and for the estimators' random splits."""
    a, b = np.random.SeedSequence([int(base_seed), int(rep)]).generate_state(2)
    return int(a), int(b)


def run_replication(cfg: McConfig, rep: int) -> dict:
    """Run one replication; failures are returned, not raised."""
    dgp_seed, est_seed = replication_seeds(cfg.base_seed, rep)
    out: dict = {"rep": rep, "ok": False}
    try:
        with warnings.catch_warnings(record=True) as caught:
            warnings.simplefilter("always", BoundaryDegreeWarning)
            data, truth = simulate_network(cfg.dgp.with_seed(dgp_seed))
            link = get_link(cfg.fitted)
            out["density"] = network_density(data)
            if cfg.misspecified:
                pt = pseudo_true_values(truth.alpha, truth.beta, get_link(cfg.dgp.noise.value),
                                        link, data.x, settings=cfg.settings())
                target = pt.beta_onestep
                out["beta_moment_target"] = pt.beta_moment
                alpha_target = pt.alpha_star
            else:
                target = truth.beta
                alpha_target = truth.alpha
            res = estimate_all(data, link, T_prime=cfg.T_prime, seed=est_seed,
                               settings=cfg.settings(), misspec=cfg.misspecified,
                               methods=cfg.methods)
            out["target"] = np.asarray(target, dtype=np.float64)
            out["beta"] = {m: e.beta for m, e in res.methods.items()}
            base = {"mm": "mm", "mm_sj": "mm", "os": "os", "os_sj": "os", "bg": "os"}
            out["base_se"] = {m: res.methods[base[m]].se if base[m] in res.methods
                              else e.se / SE_MULTIPLIER[m] for m, e in res.methods.items()}
            out["alpha_error"] = res.alpha_hat - alpha_target
            out["split_failures"] = res.diagnostics.get("bagging_split_failures", 0)
            if cfg.ape_specs is not None:
                fit = res.jmm.fit
                T = cfg.T_prime if {"sj", "bg"} & set(cfg.ape_variants) else 0
                ape = estimate_ape(data, fit.params, link, list(cfg.ape_specs), T_prime=T,
                                   seed=est_seed, settings=cfg.settings(), with_bias=False)
                est = {"plugin": ape.delta_hat, "sj": ape.delta_sj, "bg": ape.delta_bg}
                out["ape"] = {v: est[v] for v in cfg.ape_variants}
                out["ape_se"] = ape.se
        out["boundary"] = any(issubclass(w.category, BoundaryDegreeWarning) for w in caught)
        out["ok"] = True
    except _NUMERICAL_FAILURES as exc:
        out["error"] = type(exc).__name__
        out["message"] = str(exc)
    return out


def _run_chunk(args):
    cfg, reps = args
    return [run_replication(cfg, r) for r in reps]


_THREAD_VARS = ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS",
                "BLIS_NUM_THREADS", "VECLIB_MAXIMUM_THREADS", "NUMEXPR_NUM_THREADS")


@contextmanager
def _single_threaded_children():
    saved = {k: os.environ.get(k) for k in _THREAD_VARS}
    os.environ.update({k: "1" for k in _THREAD_VARS})
    try:
        yield
    finally:
        for k, v in saved.items():
            if v is None:
                os.environ.pop(k, None)
            else:
                os.environ[k] = v


def coverage(estimates, ses, truth, level: float = 95.0, variance_multiplier: float = 1.0) -> float:
    """Percentage of intervals ``est +/- z * variance_multiplier * se`` that contain ``truth``.

    ``level`` is a percentage.  ``variance_multiplier`` scales the standard
    error; sqrt(2) is the right value for jackknifed estimators paired with
    the full-sample standard error.
    """
    est = np.asarray(estimates, dtype=np.float64)
    se = np.asarray(ses, dtype=np.float64)
    truth = np.broadcast_to(np.asarray(truth, dtype=np.float64), est.shape)
    if est.shape != se.shape:
        raise ValueError("estimates and ses must have equal lengths")
    if not 0.0 < level < 100.0:
        raise ValueError("level must be a percentage in (0, 100)")
    if est.size == 0:
        return float("nan")
    z = NormalDist().inv_cdf(0.5 + level / 200.0)
    hit = np.abs(est - truth) <= z * variance_multiplier * se
    return float(100.0 * hit.mean())


def summarize(estimates, ses, truth, multiplier: float = 1.0) -> dict:
    """The nine table metrics for one coefficient.

    The standard deviation divides by R, so ``rmse**2 == mean_bias**2 + sd**2``
    up to rounding; with a single replication it is reported as ``None``.
    """
    est = np.asarray(estimates, dtype=np.float64)
    se = np.asarray(ses, dtype=np.float64) * multiplier
    truth = np.broadcast_to(np.asarray(truth, dtype=np.float64), est.shape)
    err = est - truth
    R = err.size
    mean_bias = float(err.mean())
    sd = float(np.sqrt(np.mean((err - mean_bias) ** 2))) if R >= 2 else None
    return {
        "mean_bias": mean_bias,
        "median_bias": float(np.median(err)),
        "sd": sd,
        "mean_se": float(se.mean()),
        "mean_abs_bias": float(np.abs(err).mean()),
        "median_abs_bias": float(np.median(np.abs(err))),
        "rmse": float(np.sqrt(np.mean(err ** 2))),
        "coverage_90": coverage(est, se, truth, 90.0),
        "coverage_95": coverage(est, se, truth, 95.0),
    }


@dataclass(frozen=True)
class Histogram:
    """Counts in bins ``[left, left + width)`` centred on multiples of ``width``."""

    left: NDArray[np.float64]
    width: float
    counts: NDArray[np.int64]

    def to_csv(self) -> str:
        lines = ["bin_left,bin_right,count"]
        for lo, c in zip(self.left, self.counts):
            lines.append(f"{float(lo)!r},{float(lo + self.width)!r},{int(c)}")
        return "\n".join(lines) + "\n"

    def to_dict(self) -> dict:
        return {"bin_left": [float(v) for v in self.left], "width": self.width,
                "counts": [int(c) for c in self.counts]}

    @property
    def centers(self) -> NDArray[np.float64]:
        return self.left + 0.5 * self.width


def alpha_error_histogram(replications: Iterable, bin_width: float = 0.05) -> Histogram:
    """Pool fixed-effect errors across nodes and replications into fixed-width bins.

    ``replications`` holds error arrays or replication records with an
    ``alpha_error`` entry.
    """
    if bin_width <= 0:
        raise ValueError("bin_width must be positive")
    arrays = []
    for r in replications:
        if isinstance(r, dict):
            if not r.get("ok", True):
                continue
            r = r["alpha_error"]
        arrays.append(np.asarray(r, dtype=np.float64).ravel())
    errs = np.concatenate(arrays) if arrays else np.zeros(0)
    errs = errs[np.isfinite(errs)]
    if errs.size == 0:
        return Histogram(np.zeros(0), bin_width, np.zeros(0, dtype=np.int64))
    idx = np.floor(errs / bin_width + 0.5).astype(np.int64)
    lo, hi = int(idx.min()), int(idx.max())
    counts = np.bincount(idx - lo, minlength=hi - lo + 1)
    left = (np.arange(lo, hi + 1) - 0.5) * bin_width
    return Histogram(left, bin_width, counts.astype(np.int64))


def population_ape(dgp: DgpConfig, specs: Sequence[PartialEffectSpec], draws: int = 2_000_000,
                   seed: int = 20240101, chunk: int = 500_000) -> NDArray[np.float64]:
    """Average partial effects over the design's distribution of node pairs.

    Draws independent pairs of node traits (and the Bernoulli covariate)
    and averages the dyad effect at the true parameters.
    """
    link = get_link(dgp.noise.value)
    beta = np.asarray(dgp.beta0)
    a_x, a_xi, shift = dgp.alpha_rule
    rng = make_rng(seed)
    total = np.zeros(len(specs))
    done = 0
    while done < draws:
        m = min(chunk, draws - done)
        X = rng.uniform(-0.5, 0.5, size=(m, 2))
        xi = rng.uniform(-0.5, 0.5, size=(m, 2))
        alpha = a_x * X + a_xi * xi + shift
        cont = np.abs(X[:, 0] - X[:, 1])
        if dgp.K == 2:
            b = (rng.random(m) < dgp.x1_bernoulli_p).astype(np.float64)
            x = np.stack([b, cont], axis=1)
        else:
            x = cont[:, None]
        for s_i, spec in enumerate(specs):
            if spec.kind is EffectKind.CONTINUOUS:
                xb = x @ beta
                u, v = alpha[:, 0] + xb, alpha[:, 1] + xb
                vals = beta[spec.k] * (link.pdf(u) * link.cdf(v) + link.cdf(u) * link.pdf(v))
            else:
                x1, x0 = x.copy(), x.copy()
                x1[:, spec.k], x0[:, spec.k] = 1.0, 0.0
                p1 = link.cdf(alpha[:, 0] + x1 @ beta) * link.cdf(alpha[:, 1] + x1 @ beta)
                p0 = link.cdf(alpha[:, 0] + x0 @ beta) * link.cdf(alpha[:, 1] + x0 @ beta)
                vals = p1 - p0
            total[s_i] += vals.sum()
        done += m
    return total / draws


def _json_safe(obj):
    if isinstance(obj, dict):
        return {str(k): _json_safe(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_json_safe(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return _json_safe(obj.tolist())
    if isinstance(obj, (np.floating, float)):
        v = float(obj)
        return v if math.isfinite(v) else None
    if isinstance(obj, np.integer):
        return int(obj)
    return obj


def _fmt(v) -> str:
    if v is None:
        return ""
    v = float(v)
    return repr(v) if math.isfinite(v) else ""


@dataclass(eq=False)
class McReport:
    """Metrics per method and coefficient, plus run diagnostics.

    ``metrics[method][k]`` maps metric names to values for coefficient k;
    ``ape_metrics[variant][s]`` does the same for APE spec s.  ``raw`` keeps
    the per-replication arrays for further analysis and is not serialised.
    """

    config: dict
    n_requested: int
    n_ok: int
    failures: dict[str, int]
    failure_messages: list[str]
    metrics: dict[str, list[dict]]
    mean_target: list[float]
    mean_density: float
    alpha_histogram: Histogram
    boundary_replications: int
    split_failures: int
    ape_metrics: dict[str, list[dict]] | None = None
    ape_truth: list[float] | None = None
    mean_moment_target: list[float] | None = None
    raw: dict = field(default_factory=dict, repr=False)

    @property
    def n_failed(self) -> int:
        return self.n_requested - self.n_ok

    @property
    def sd_defined(self) -> bool:
        return self.n_ok >= 2

    def to_dict(self) -> dict:
        return _json_safe({
            "schema": "dyadnet.mc_report/1",
            "config": self.config,
            "replications": {"requested": self.n_requested, "ok": self.n_ok,
                             "failed": self.n_failed, "failures": self.failures,
                             "failure_messages": self.failure_messages,
                             "boundary_degree": self.boundary_replications,
                             "bagging_split_failures": self.split_failures},
            "sd_defined": self.sd_defined,
            "metrics": self.metrics,
            "mean_target": self.mean_target,
            "mean_moment_target": self.mean_moment_target,
            "mean_density": self.mean_density,
            "ape_truth": self.ape_truth,
            "ape_metrics": self.ape_metrics,
            "alpha_histogram": self.alpha_histogram.to_dict(),
        })

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True, indent=2) + "\n"

    def metrics_csv(self) -> str:
        """Metric rows by method and coefficient columns."""
        cols, series = [], []
        for m, per_coef in self.metrics.items():
            for k, d in enumerate(per_coef):
                cols.append(f"{m}:beta{k + 1}")
                series.append(d)
        lines = ["metric," + ",".join(cols)]
        for name in METRICS:
            lines.append(name + "," + ",".join(_fmt(d[name]) for d in series))
        return "\n".join(lines) + "\n"

    def ape_csv(self) -> str:
        if not self.ape_metrics:
            return ""
        cols, series = [], []
        for v, per_spec in self.ape_metrics.items():
            for s, d in enumerate(per_spec):
                cols.append(f"{v}:delta{s + 1}")
                series.append(d)
        lines = ["metric," + ",".join(cols)]
        for name in METRICS:
            lines.append(name + "," + ",".join(_fmt(d[name]) for d in series))
        return "\n".join(lines) + "\n"


def _assemble(cfg: McConfig, outcomes: list[dict], ape_truth) -> McReport:
    ok = [o for o in outcomes if o["ok"]]
    failures: dict[str, int] = {}
    messages = []
    for o in outcomes:
        if not o["ok"]:
            failures[o["error"]] = failures.get(o["error"], 0) + 1
            messages.append(f"rep {o['rep']}: {o['error']}: {o['message']}")
    R = len(outcomes)
    if len(ok) == 0 or (R - len(ok)) > cfg.max_failure_rate * R:
        raise McAbortError(
            f"{R - len(ok)} of {R} replications failed "
            f"(limit {cfg.max_failure_rate:.0%}): {failures}; first: {messages[:3]}", failures)
    target = np.array([o["target"] for o in ok])
    metrics, raw = {}, {"target": target}
    for m in cfg.methods:
        est = np.array([o["beta"][m] for o in ok])
        se = np.array([o["base_se"][m] for o in ok])
        mult = SE_MULTIPLIER[m]
        metrics[m] = [summarize(est[:, k], se[:, k], target[:, k], mult) for k in range(est.shape[1])]
        raw[m] = {"beta": est, "se": se * mult}
    ape_metrics = None
    if cfg.ape_specs is not None:
        ape_metrics = {}
        truth = np.asarray(ape_truth)
        base_se = np.array([o["ape_se"] for o in ok])
        for v in cfg.ape_variants:
            est = np.array([o["ape"][v] for o in ok])
            ape_metrics[v] = [summarize(est[:, s], base_se[:, s], truth[s], SE_MULTIPLIER[v])
                              for s in range(est.shape[1])]
            raw["ape_" + v] = {"delta": est, "se": base_se * SE_MULTIPLIER[v]}
    moment = None
    if cfg.misspecified:
        moment = np.mean([o["beta_moment_target"] for o in ok], axis=0).tolist()
    return McReport(
        config=cfg.to_dict(),
        n_requested=R,
        n_ok=len(ok),
        failures=failures,
        failure_messages=messages,
        metrics=metrics,
        mean_target=target.mean(axis=0).tolist(),
        mean_density=float(np.mean([o["density"] for o in ok])),
        alpha_histogram=alpha_error_histogram(ok, cfg.hist_bin_width),
        boundary_replications=sum(bool(o["boundary"]) for o in ok),
        split_failures=int(sum(o["split_failures"] for o in ok)),
        ape_metrics=ape_metrics,
        ape_truth=None if ape_truth is None else [float(v) for v in ape_truth],
        mean_moment_target=moment,
        raw=raw,
    )


def run_replications(cfg: McConfig, workers: int | None = None) -> McReport:
    """Run ``cfg.R`` replications and summarise them.

    ``workers`` overrides ``cfg.parallel_workers``.  More than one worker
    uses a pool of spawned processes, each limited to one BLAS thread.
    Raises ``McAbortError`` when more than ``cfg.max_failure_rate`` of the
    replications fail.
    """
    workers = cfg.parallel_workers if workers is None else int(workers)
    if workers < 1:
        raise ValueError("workers must be at least 1")
    workers = min(workers, cfg.R)
    ape_truth = None
    if cfg.ape_specs is not None:
        ape_truth = population_ape(cfg.dgp, cfg.ape_specs, cfg.ape_truth_draws)
    reps = list(range(cfg.R))
    if workers == 1:
        outcomes = [run_replication(cfg, r) for r in reps]
    else:
        size = max(1, math.ceil(cfg.R / (4 * workers)))
        chunks = [(cfg, reps[i:i + size]) for i in range(0, cfg.R, size)]
        with _single_threaded_children(), ProcessPoolExecutor(
                max_workers=workers, mp_context=get_context("spawn")) as pool:
            outcomes = [o for chunk in pool.map(_run_chunk, chunks) for o in chunk]
    return _assemble(cfg, outcomes, ape_truth)


def sparse_design(dgp: DgpConfig | None = None) -> DgpConfig:
    """The baseline design with the fixed effects shifted down by one."""
    dgp = dgp or DgpConfig()
    a_x, a_xi, _ = dgp.alpha_rule
    return replace(dgp, alpha_rule=(a_x, a_xi, -1.0))


def misspecified(cfg: McConfig) -> McConfig:
    """Normal noise in the design, logistic link in estimation."""
    return replace(cfg, dgp=replace(cfg.dgp, noise=Family.NORMAL), fitted_link="logistic")
