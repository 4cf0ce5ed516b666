"""Dyad CSV files, run configs and JSON outputs.

A dyad file has a header ``i,j,y,<covariate columns...>`` with one row per
dyad.  Node ids are arbitrary strings, mapped to indices in order of first
appearance.  A file may list each unordered pair once (covariates are then
taken as symmetric) or both ordered pairs; in the latter case the two link
indicators are folded into one with the ``any`` or ``both`` rule.
"""

from __future__ import annotations

import csv
import json
import math
import warnings
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

import numpy as np

from .model import NetworkData

__all__ = [
    "DyadFormatError",
    "MissingDyadWarning",
    "LoadOptions",
    "LoadSummary",
    "read_dyads",
    "load_dyad_csv",
    "save_dyad_csv",
    "CONFIG_VERSION",
    "load_config",
    "ESTIMATES_SCHEMA",
    "validate_estimates",
    "write_json",
]

_MISSING = {"", "na", "nan", "null", "none", "."}


class DyadFormatError(ValueError):
    """The dyad file is malformed or inconsistent."""


class MissingDyadWarning(UserWarning):
    pass


@dataclass(frozen=True)
class LoadOptions:
    strict: bool = True
    fold: str = "any"

    def __post_init__(self):
        if self.fold not in ("any", "both"):
            raise ValueError("fold must be 'any' or 'both'")


@dataclass
class LoadSummary:
    rows: int = 0
    duplicates_removed: int = 0
    folded_pairs: int = 0
    missing_dyads: int = 0
    dropped_nodes: list[str] = field(default_factory=list)
    covariate_names: list[str] = field(default_factory=list)


def _parse_y(tok: str, line: int) -> float:
    t = tok.strip()
    if t in ("0", "1"):
        return float(t)
    try:
        v = float(t)
    except ValueError:
        raise DyadFormatError(f"line {line}: link value {tok!r} is not 0/1") from None
    if v not in (0.0, 1.0):
        raise DyadFormatError(f"line {line}: link value {tok!r} is not 0/1")
    return v


def _parse_x(tok: str, line: int) -> float:
    t = tok.strip()
    if t.lower() in _MISSING:
        return math.nan
    try:
        v = float(t)
    except ValueError:
        raise DyadFormatError(f"line {line}: covariate {tok!r} is not a number") from None
    if not math.isfinite(v):
        return math.nan
    return v


def read_dyads(path: str | Path, options: LoadOptions | None = None) -> tuple[NetworkData, LoadSummary]:
    """Parse a dyad file; returns the network and a summary of what was cleaned."""
    options = options or LoadOptions()
    summary = LoadSummary()
    with open(path, newline="", encoding="utf-8-sig") as fh:
        reader = csv.reader(fh)
        try:
            header = [h.strip() for h in next(reader)]
        except StopIteration:
            raise DyadFormatError("empty file") from None
        if len(header) < 3 or [h.lower() for h in header[:3]] != ["i", "j", "y"]:
            raise DyadFormatError("header must start with i,j,y")
        K = len(header) - 3
        summary.covariate_names = header[3:]
        index: dict[str, int] = {}
        entries: dict[tuple[int, int], tuple[float, tuple[float, ...]]] = {}
        for line, row in enumerate(reader, start=2):
            if not row or all(not c.strip() for c in row):
                continue
            if len(row) != K + 3:
                raise DyadFormatError(f"line {line}: expected {K + 3} fields, got {len(row)}")
            a, b = row[0].strip(), row[1].strip()
            if not a or not b:
                raise DyadFormatError(f"line {line}: empty node id")
            if a == b:
                raise DyadFormatError(f"line {line}: self-pair {a!r}")
            ia = index.setdefault(a, len(index))
            ib = index.setdefault(b, len(index))
            y = _parse_y(row[2], line)
            x = tuple(_parse_x(t, line) for t in row[3:])
            summary.rows += 1
            key = (ia, ib)
            if key in entries:
                old = entries[key]
                same = old[0] == y and all(
                    (u == v) or (math.isnan(u) and math.isnan(v)) for u, v in zip(old[1], x))
                if not same:
                    raise DyadFormatError(f"line {line}: conflicting duplicate of dyad ({a}, {b})")
                summary.duplicates_removed += 1
                continue
            entries[key] = (y, x)

    n = len(index)
    if n < 2:
        raise DyadFormatError("need at least two nodes")
    labels = [None] * n
    for name, k in index.items():
        labels[k] = name
    Y = np.zeros((n, n))
    X = np.full((n, n, K), np.nan)
    seen = np.zeros((n, n), dtype=bool)
    for (a, b), (y, x) in entries.items():
        X[a, b] = x
        seen[a, b] = True
    for (a, b), (y, x) in entries.items():
        if seen[b, a]:
            if a < b:
                y2 = entries[(b, a)][0]
                if y != y2:
                    summary.folded_pairs += 1
                v = max(y, y2) if options.fold == "any" else min(y, y2)
                Y[a, b] = Y[b, a] = v
        else:
            Y[a, b] = Y[b, a] = y
            X[b, a] = x
    iu = np.triu_indices(n, 1)
    missing = ~(seen | seen.T)[iu]
    summary.missing_dyads = int(missing.sum())
    if summary.missing_dyads:
        if options.strict:
            a, b = iu[0][missing][0], iu[1][missing][0]
            raise DyadFormatError(
                f"{summary.missing_dyads} dyad(s) missing, e.g. ({labels[a]}, {labels[b]})")
        warnings.warn(f"{summary.missing_dyads} missing dyad(s) set to y=0 with zero covariates",
                      MissingDyadWarning, stacklevel=2)
        for a, b in zip(iu[0][missing], iu[1][missing]):
            X[a, b] = X[b, a] = 0.0

    keep = _drop_missing_nodes(X)
    if keep.size < n:
        summary.dropped_nodes = [labels[k] for k in sorted(set(range(n)) - set(keep.tolist()))]
        warnings.warn(f"dropped {len(summary.dropped_nodes)} node(s) with missing covariates",
                      UserWarning, stacklevel=2)
        Y = Y[np.ix_(keep, keep)]
        X = X[np.ix_(keep, keep)]
        labels = [labels[k] for k in keep]
    if len(labels) < 2:
        raise DyadFormatError("fewer than two nodes left after dropping missing covariates")
    X[np.arange(len(labels)), np.arange(len(labels))] = 0.0
    return NetworkData(Y, X, labels=tuple(labels)), summary


def _drop_missing_nodes(X: np.ndarray) -> np.ndarray:
    """Remove nodes, most-affected first, until no dyad has a missing covariate."""
    n = X.shape[0]
    bad = np.isnan(X).any(axis=2)
    np.fill_diagonal(bad, False)
    bad = bad | bad.T
    alive = np.ones(n, dtype=bool)
    while True:
        sub = bad & alive[:, None] & alive[None, :]
        counts = sub.sum(axis=1)
        if counts.max(initial=0) == 0:
            break
        alive[int(np.argmax(counts))] = False
    return np.flatnonzero(alive)


def load_dyad_csv(path: str | Path, options: LoadOptions | None = None) -> NetworkData:
    return read_dyads(path, options)[0]


def save_dyad_csv(data: NetworkData, path: str | Path, covariate_names=None) -> None:
    """Write ``data`` so that ``load_dyad_csv`` gives it back exactly.

    Symmetric covariates are written once per unordered pair; otherwise both
    ordered rows are written with the same link value.
    """
    n, K = data.n, data.K
    names = list(covariate_names) if covariate_names else [f"x{k + 1}" for k in range(K)]
    if len(names) != K:
        raise ValueError("need one name per covariate")
    labels = list(data.labels) if data.labels is not None else [str(k) for k in range(n)]
    both = not data.x_is_symmetric
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["i", "j", "y", *names])
        for a in range(n):
            for b in range(a + 1, n):
                y = int(data.y[a, b])
                w.writerow([labels[a], labels[b], y, *(repr(float(v)) for v in data.x[a, b])])
                if both:
                    w.writerow([labels[b], labels[a], y, *(repr(float(v)) for v in data.x[b, a])])


CONFIG_VERSION = 1


def load_config(path: str | Path | None, overrides: dict[str, Any] | None = None) -> dict:
    """Read a versioned JSON config and apply non-``None`` overrides on top."""
    cfg: dict = {}
    if path is not None:
        with open(path, encoding="utf-8") as fh:
            cfg = json.load(fh)
        if not isinstance(cfg, dict):
            raise ValueError("config must be a JSON object")
        version = cfg.pop("version", None)
        if version != CONFIG_VERSION:
            raise ValueError(f"unsupported config version {version!r} (expected {CONFIG_VERSION})")
    for k, v in (overrides or {}).items():
        if v is not None:
            cfg[k] = v
    return cfg


_METHOD_ENTRY = {
    "type": "object",
    "required": ["beta", "se", "cov"],
    "properties": {
        "beta": {"type": "array", "items": {"type": "number"}},
        "se": {"type": "array", "items": {"type": "number", "exclusiveMinimum": 0}},
        "cov": {"type": "array", "items": {"type": "array", "items": {"type": "number"}}},
    },
}

ESTIMATES_SCHEMA = {
    "$schema": "https://json-schema.org/draft/2020-12/schema",
    "$id": "dyadnet.estimates/1",
    "type": "object",
    "required": ["schema", "link", "n", "K", "alpha_hat", "diagnostics", "failures",
                 "mm", "mm_sj", "os", "os_sj", "bg"],
    "properties": {
        "schema": {"const": "dyadnet.estimates/1"},
        "link": {"enum": ["logistic", "normal"]},
        "n": {"type": "integer", "minimum": 2},
        "K": {"type": "integer", "minimum": 1},
        "labels": {"type": "array", "items": {"type": "string"}},
        "alpha_hat": {"type": "array", "items": {"type": "number"}},
        "diagnostics": {"type": "object"},
        "failures": {"type": "array", "items": {"type": "string"}},
        **{m: _METHOD_ENTRY for m in ("mm", "mm_sj", "os", "os_sj", "bg")},
    },
}


def validate_estimates(obj: dict) -> None:
    """Check an estimates document against ``ESTIMATES_SCHEMA``; raises ``ValueError``."""
    if not isinstance(obj, dict):
        raise ValueError("estimates must be an object")
    for key in ESTIMATES_SCHEMA["required"]:
        if key not in obj:
            raise ValueError(f"missing key {key!r}")
    if obj["schema"] != "dyadnet.estimates/1":
        raise ValueError("wrong schema tag")
    if obj["link"] not in ("logistic", "normal"):
        raise ValueError("unknown link")
    n, K = obj["n"], obj["K"]
    if not (isinstance(n, int) and n >= 2 and isinstance(K, int) and K >= 1):
        raise ValueError("n and K must be positive integers")
    if len(obj["alpha_hat"]) != n:
        raise ValueError("alpha_hat must have n entries")
    for m in ("mm", "mm_sj", "os", "os_sj", "bg"):
        e = obj[m]
        for key in ("beta", "se", "cov"):
            if key not in e:
                raise ValueError(f"{m}: missing {key!r}")
        if len(e["beta"]) != K or len(e["se"]) != K:
            raise ValueError(f"{m}: beta and se must have K entries")
        if any(not isinstance(v, (int, float)) or not v > 0 for v in e["se"]):
            raise ValueError(f"{m}: standard errors must be positive")
        if len(e["cov"]) != K or any(len(r) != K for r in e["cov"]):
            raise ValueError(f"{m}: cov must be K x K")


def _plain(obj):
    if isinstance(obj, dict):
        return {str(k): _plain(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_plain(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return _plain(obj.tolist())
    if isinstance(obj, (float, np.floating)):
        v = float(obj)
        return v if math.isfinite(v) else None
    if isinstance(obj, np.integer):
        return int(obj)
    if isinstance(obj, np.bool_):
        return bool(obj)
    return obj


def write_json(obj, path: str | Path | None) -> str:
    """Serialise with sorted keys; non-finite floats become ``null``.  ``None`` path only returns the text."""
    text = json.dumps(_plain(obj), sort_keys=True, indent=2) + "\n"
    if path is not None:
        Path(path).write_text(text, encoding="utf-8")
    return text
