"""Command-line front end: ``dyadnet {simulate,estimate,mc,ape,report}``.

Exit codes: 0 on success, 1 for usage and input errors, 2 when the
numerics fail (no convergence, singular matrices, too many failed
Monte Carlo replications).
"""

from __future__ import annotations

import argparse
import json
import os
import sys
import warnings
from dataclasses import replace
from pathlib import Path

import numpy as np

from .ape import EffectKind, PartialEffectSpec, default_specs, estimate_ape
from .dgp import DgpConfig, EmpiricalLikeConfig, network_density, simulate_empirical_like, simulate_network
from .io import (
    DyadFormatError,
    LoadOptions,
    load_config,
    read_dyads,
    save_dyad_csv,
    validate_estimates,
    write_json,
)
from .jmm import JmmSettings
from .mc import APE_VARIANTS, METRICS, Histogram, McConfig, alpha_error_histogram, run_replications
from .model import Family, get_link
from .pipeline import METHODS, estimate_all

__all__ = ["main", "build_parser", "resolve_workers"]

EXIT_OK, EXIT_USAGE, EXIT_NUMERIC = 0, 1, 2

_NUMERIC = (np.linalg.LinAlgError, ArithmeticError, RuntimeError)


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(f"{self.prog}: error: {message}")


def _floats(text: str) -> list[float]:
    try:
        return [float(t) for t in text.split(",") if t.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated numbers, got {text!r}") from None


def _specs(text: str) -> list[PartialEffectSpec]:
    """``"0:binary,1:continuous"``."""
    out = []
    for part in text.split(","):
        try:
            k, kind = part.split(":")
            out.append(PartialEffectSpec(int(k), EffectKind(kind.strip())))
        except ValueError:
            raise argparse.ArgumentTypeError(f"bad APE spec {part!r}; use k:binary or k:continuous") from None
    return out


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="dyadnet", description="Dyadic network formation with fixed effects.")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    s = sub.add_parser("simulate", help="draw a network and write a dyad CSV plus truth JSON")
    s.add_argument("--n", type=int, default=100)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--beta0", type=_floats, default=None, help="e.g. 1,-1")
    s.add_argument("--noise", choices=["logistic", "normal"], default="logistic")
    s.add_argument("--sparse", action="store_true", help="shift fixed effects down by one")
    s.add_argument("--empirical-like", action="store_true",
                   help="three-covariate village-shaped design (n defaults to 114)")
    s.add_argument("--out", required=True, help="dyad CSV path")
    s.add_argument("--truth", help="truth JSON path (default: <out>.truth.json)")

    def add_data_args(q):
        q.add_argument("--data", required=True, help="dyad CSV")
        q.add_argument("--config", help="versioned JSON config; flags override it")
        q.add_argument("--link", choices=["logistic", "normal"], default=None)
        q.add_argument("--T-prime", dest="T_prime", type=int, default=None)
        q.add_argument("--seed", type=int, default=None)
        q.add_argument("--alpha-method", choices=["contraction", "newton"], default=None)
        q.add_argument("--permissive", action="store_true", help="fill missing dyads with y=0")
        q.add_argument("--fold", choices=["any", "both"], default="any")
        q.add_argument("--out", help="output JSON (default: stdout)")

    e = sub.add_parser("estimate", help="estimate slopes and fixed effects with all five methods")
    add_data_args(e)
    e.add_argument("--misspec", action="store_true", default=None,
                   help="robust covariance and Hessian-based one-step")
    e.add_argument("--alpha-hist", help="write a fixed-effect histogram CSV here")
    e.add_argument("--bin-width", type=float, default=0.25)

    a = sub.add_parser("ape", help="average partial effects with standard errors")
    add_data_args(a)
    a.add_argument("--specs", type=_specs, default=None, help="e.g. 0:binary,1:continuous")

    m = sub.add_parser("mc", help="Monte Carlo replications")
    m.add_argument("--config", help="versioned JSON config holding an 'mc' object")
    m.add_argument("--R", type=int, default=None)
    m.add_argument("--n", type=int, default=None)
    m.add_argument("--T-prime", dest="T_prime", type=int, default=None)
    m.add_argument("--seed", dest="base_seed", type=int, default=None)
    m.add_argument("--alpha-method", choices=["contraction", "newton"], default=None)
    m.add_argument("--sparse", action="store_true")
    m.add_argument("--misspec", action="store_true", help="normal noise, logistic fit")
    m.add_argument("--ape", action="store_true", help="also estimate average partial effects")
    m.add_argument("--threads", type=int, default=None, help="worker processes")
    m.add_argument("--out-dir", required=True)

    r = sub.add_parser("report", help="render CSV tables from a saved report or estimates JSON")
    r.add_argument("--input", required=True)
    r.add_argument("--out-dir", required=True)
    return p


def resolve_workers(flag: int | None, configured: int) -> int:
    """``--threads`` wins; otherwise ``DYADNET_THREADS`` caps the configured count."""
    if flag is not None:
        if flag < 1:
            raise UsageError("--threads must be at least 1")
        return flag
    env = os.environ.get("DYADNET_THREADS")
    if env:
        try:
            cap = int(env)
        except ValueError:
            raise UsageError(f"DYADNET_THREADS must be an integer, got {env!r}") from None
        if cap < 1:
            raise UsageError("DYADNET_THREADS must be at least 1")
        return max(1, min(configured, cap))
    return configured


def _cmd_simulate(args) -> int:
    if args.empirical_like:
        kw = {"seed": args.seed, "noise": Family(args.noise)}
        if args.n != 100:
            kw["n"] = args.n
        if args.beta0:
            kw["beta0"] = tuple(args.beta0)
        data, truth = simulate_empirical_like(EmpiricalLikeConfig(**kw))
        names = ["wealth_diff", "log_distance", "tie"]
        design = {"design": "empirical_like", **{k: (v.value if isinstance(v, Family) else v)
                                                 for k, v in kw.items()}}
    else:
        cfg = DgpConfig(n=args.n, seed=args.seed, noise=Family(args.noise),
                        **({"beta0": tuple(args.beta0)} if args.beta0 else {}))
        if args.sparse:
            cfg = replace(cfg, alpha_rule=(cfg.alpha_rule[0], cfg.alpha_rule[1], -1.0))
        data, truth = simulate_network(cfg)
        names = None
        design = cfg.to_dict()
    save_dyad_csv(data, args.out, names)
    truth_path = args.truth or f"{args.out}.truth.json"
    write_json({"beta0": truth.beta, "alpha0": truth.alpha, "seed": args.seed,
                "density": network_density(data), "design": design}, truth_path)
    print(f"wrote {args.out} (n={data.n}, density={network_density(data):.4f}) and {truth_path}")
    return EXIT_OK


def _load(args):
    cfg = load_config(args.config, {"link": args.link, "T_prime": args.T_prime, "seed": args.seed,
                                    "alpha_method": args.alpha_method})
    known = {"link", "T_prime", "seed", "alpha_method", "misspec", "tol_alpha", "tol_beta",
             "specs"}
    extra = set(cfg) - known
    if extra:
        raise UsageError(f"unknown config keys: {sorted(extra)}")
    with warnings.catch_warnings(record=True) as caught:
        warnings.simplefilter("always")
        data, summary = read_dyads(args.data, LoadOptions(strict=not args.permissive, fold=args.fold))
    notes = [str(w.message) for w in caught]
    settings = JmmSettings(alpha_method=cfg.get("alpha_method", "contraction"),
                           tol_alpha=float(cfg.get("tol_alpha", 1e-10)),
                           tol_beta=float(cfg.get("tol_beta", 1e-9)))
    return data, summary, notes, cfg, settings


def _emit(text: str, out: str | None):
    if out:
        Path(out).write_text(text, encoding="utf-8")
    else:
        sys.stdout.write(text)


def _cmd_estimate(args) -> int:
    data, summary, notes, cfg, settings = _load(args)
    if args.misspec:
        cfg["misspec"] = True
    link = get_link(cfg.get("link", "logistic"))
    with warnings.catch_warnings(record=True) as caught:
        warnings.simplefilter("always")
        res = estimate_all(data, link, T_prime=int(cfg.get("T_prime", 100)),
                           seed=int(cfg.get("seed", 0)), settings=settings,
                           misspec=bool(cfg.get("misspec", False)))
    notes += sorted({str(w.message) for w in caught})
    doc = {
        "schema": "dyadnet.estimates/1",
        "link": link.name,
        "n": data.n,
        "K": data.K,
        "labels": list(data.labels) if data.labels else None,
        "covariates": summary.covariate_names,
        "alpha_hat": res.alpha_hat,
        "diagnostics": {**res.diagnostics, "density": network_density(data),
                        "dropped_nodes": summary.dropped_nodes,
                        "missing_dyads": summary.missing_dyads,
                        "duplicates_removed": summary.duplicates_removed},
        "failures": notes,
        **{m: e.to_dict() for m, e in res.methods.items()},
    }
    text = write_json(doc, None)
    validate_estimates(json.loads(text))
    _emit(text, args.out)
    if args.alpha_hist:
        Path(args.alpha_hist).write_text(
            alpha_error_histogram([res.alpha_hat], args.bin_width).to_csv(), encoding="utf-8")
    return EXIT_OK


def _cmd_ape(args) -> int:
    data, summary, notes, cfg, settings = _load(args)
    link = get_link(cfg.get("link", "logistic"))
    specs = args.specs
    if specs is None and "specs" in cfg:
        specs = [PartialEffectSpec(**s) for s in cfg["specs"]]
    specs = specs or default_specs(data.K)
    for s in specs:
        try:
            s.check(data.K)
        except ValueError as exc:
            raise UsageError(str(exc)) from None
    with warnings.catch_warnings(record=True) as caught:
        warnings.simplefilter("always")
        res = estimate_all(data, link, T_prime=1, seed=int(cfg.get("seed", 0)),
                           settings=settings, methods=("mm",))
        ape = estimate_ape(data, res.jmm.fit.params, link, specs,
                           T_prime=int(cfg.get("T_prime", 100)), seed=int(cfg.get("seed", 0)),
                           settings=settings)
    notes += sorted({str(w.message) for w in caught})
    doc = {
        "schema": "dyadnet.ape/1",
        "link": link.name,
        "specs": [{"k": s.k, "kind": s.kind.value} for s in specs],
        "delta_hat": ape.delta_hat,
        "delta_sj": ape.delta_sj,
        "delta_bg": ape.delta_bg,
        "se": ape.se,
        "se_sj": ape.se_sj,
        "sigma_delta": ape.sigma_delta,
        "sigma_Delta": ape.sigma_Delta,
        "B_alpha": ape.bias_diagnostics[0],
        "B_beta": ape.bias_diagnostics[1],
        "degenerate": ape.degenerate,
        "failures": notes,
    }
    _emit(write_json(doc, None), args.out)
    return EXIT_OK


def _cmd_mc(args) -> int:
    raw = load_config(args.config).get("mc", {}) if args.config else {}
    try:
        cfg = McConfig.from_dict(raw)
    except (TypeError, ValueError) as exc:
        raise UsageError(f"bad mc config: {exc}") from None
    dgp = cfg.dgp
    if args.n is not None:
        dgp = replace(dgp, n=args.n)
    if args.sparse:
        dgp = replace(dgp, alpha_rule=(dgp.alpha_rule[0], dgp.alpha_rule[1], -1.0))
    if args.misspec:
        dgp = replace(dgp, noise=Family.NORMAL)
    over = {k: getattr(args, k) for k in ("R", "T_prime", "base_seed", "alpha_method")
            if getattr(args, k) is not None}
    if args.misspec:
        over["fitted_link"] = "logistic"
    if args.ape:
        over["ape_specs"] = "default"
    try:
        cfg = replace(cfg, dgp=dgp, **over)
    except ValueError as exc:
        raise UsageError(str(exc)) from None
    workers = resolve_workers(args.threads, cfg.parallel_workers)
    report = run_replications(cfg, workers=workers)
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    _write_report_files(report.to_dict(), out)
    print(f"{report.n_ok}/{report.n_requested} replications ok; wrote {out}")
    return EXIT_OK


def _metric_table(metrics: dict, prefix: str) -> str:
    # JSON reports store methods with sorted keys; tables use the canonical order.
    order = {name: i for i, name in enumerate(METHODS + APE_VARIANTS)}
    cols, series = [], []
    for m, per in sorted(metrics.items(), key=lambda kv: order.get(kv[0], len(order))):
        for k, d in enumerate(per):
            cols.append(f"{m}:{prefix}{k + 1}")
            series.append(d)
    lines = ["metric," + ",".join(cols)]
    for name in METRICS:
        vals = ["" if d.get(name) is None else repr(float(d[name])) for d in series]
        lines.append(name + "," + ",".join(vals))
    return "\n".join(lines) + "\n"


def _write_report_files(doc: dict, out: Path) -> None:
    (out / "report.json").write_text(json.dumps(doc, sort_keys=True, indent=2) + "\n",
                                     encoding="utf-8")
    (out / "metrics.csv").write_text(_metric_table(doc["metrics"], "beta"), encoding="utf-8")
    if doc.get("ape_metrics"):
        (out / "ape.csv").write_text(_metric_table(doc["ape_metrics"], "delta"), encoding="utf-8")
    h = doc["alpha_histogram"]
    hist = Histogram(np.asarray(h["bin_left"], dtype=np.float64), h["width"],
                     np.asarray(h["counts"], dtype=np.int64))
    (out / "alpha_hist.csv").write_text(hist.to_csv(), encoding="utf-8")


def _cmd_report(args) -> int:
    try:
        doc = json.loads(Path(args.input).read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise UsageError(f"{args.input} is not JSON: {exc}") from None
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    schema = doc.get("schema", "")
    if schema.startswith("dyadnet.mc_report/"):
        _write_report_files(doc, out)
    elif schema.startswith("dyadnet.estimates/"):
        validate_estimates(doc)
        K = doc["K"]
        lines = ["method," + ",".join(f"beta{k + 1},se{k + 1}" for k in range(K))]
        for m in METHODS:
            e = doc[m]
            lines.append(m + "," + ",".join(f"{e['beta'][k]!r},{e['se'][k]!r}" for k in range(K)))
        (out / "estimates.csv").write_text("\n".join(lines) + "\n", encoding="utf-8")
        (out / "alpha_hist.csv").write_text(
            alpha_error_histogram([np.asarray(doc["alpha_hat"])], 0.25).to_csv(), encoding="utf-8")
    else:
        raise UsageError(f"{args.input}: unrecognised document (schema {schema!r})")
    print(f"wrote tables to {out}")
    return EXIT_OK


_COMMANDS = {"simulate": _cmd_simulate, "estimate": _cmd_estimate, "ape": _cmd_ape,
             "mc": _cmd_mc, "report": _cmd_report}


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        return _COMMANDS[args.command](args)
    except UsageError as exc:
        msg = str(exc)
        print(msg if ": error: " in msg else f"dyadnet: error: {msg}", file=sys.stderr)
        return EXIT_USAGE
    except SystemExit as exc:  # --help
        return EXIT_OK if exc.code in (0, None) else EXIT_USAGE
    except (DyadFormatError, FileNotFoundError, IsADirectoryError, PermissionError) as exc:
        print(f"dyadnet: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except _NUMERIC as exc:
        # LinAlgError subclasses ValueError, so this has to come first.
        print(f"dyadnet: numerical failure: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except ValueError as exc:
        print(f"dyadnet: invalid input: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
