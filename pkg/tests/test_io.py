import json

import numpy as np
import pytest
from conftest import random_instance
from hypothesis import given, settings
from hypothesis import strategies as st

from dyadnet.dgp import EmpiricalLikeConfig, network_density, simulate_empirical_like
from dyadnet.io import (
    CONFIG_VERSION,
    DyadFormatError,
    LoadOptions,
    MissingDyadWarning,
    load_config,
    load_dyad_csv,
    read_dyads,
    save_dyad_csv,
    validate_estimates,
    write_json,
)
from dyadnet.model import NetworkData


def _write(tmp_path, text, name="d.csv"):
    p = tmp_path / name
    p.write_bytes(text.encode("utf-8"))
    return p


def test_three_node_file(tmp_path):
    p = _write(tmp_path, "i,j,y,x1\na,b,1,0.5\na,c,0,1.5\nb,c,1,-2\n")
    data = load_dyad_csv(p)
    assert data.n == 3 and data.K == 1
    assert network_density(data) == pytest.approx(2 / 3)
    assert data.labels == ("a", "b", "c")
    assert np.array_equal(data.y, data.y.T)
    assert data.x[2, 1, 0] == -2.0 and data.x[1, 2, 0] == -2.0


def test_crlf_and_bom_are_accepted(tmp_path):
    p = _write(tmp_path, "﻿i,j,y,x1\r\na,b,1,0.5\r\na,c,0,1.5\r\nb,c,1,-2\r\n")
    assert load_dyad_csv(p).n == 3


def test_reversed_duplicates_are_deduplicated(tmp_path):
    p = _write(tmp_path, "i,j,y,x1\na,b,1,0.5\nb,a,1,0.5\na,c,0,1\nb,c,0,2\n")
    data, summary = read_dyads(p)
    assert data.n == 3
    assert data.y[0, 1] == 1.0
    assert summary.rows == 4


def test_exact_repeats_are_removed(tmp_path):
    p = _write(tmp_path, "i,j,y,x1\na,b,1,0.5\na,b,1,0.5\na,c,0,1\nb,c,0,2\n")
    data, summary = read_dyads(p)
    assert summary.duplicates_removed == 1 and data.n == 3


def test_conflicting_duplicate_is_an_error(tmp_path):
    p = _write(tmp_path, "i,j,y,x1\na,b,1,0.5\na,b,0,0.5\na,c,0,1\nb,c,0,2\n")
    with pytest.raises(DyadFormatError, match="conflicting"):
        load_dyad_csv(p)


@pytest.mark.parametrize("fold,expected", [("any", 1.0), ("both", 0.0)])
def test_ordered_pairs_fold_rule(tmp_path, fold, expected):
    p = _write(tmp_path, "i,j,y,x1\na,b,1,0.5\nb,a,0,0.7\na,c,0,1\nb,c,0,2\n")
    data, summary = read_dyads(p, LoadOptions(fold=fold))
    assert data.y[0, 1] == expected == data.y[1, 0]
    assert summary.folded_pairs == 1
    assert data.x[0, 1, 0] == 0.5 and data.x[1, 0, 0] == 0.7


def test_missing_dyad_strict_and_permissive(tmp_path):
    p = _write(tmp_path, "i,j,y,x1\na,b,1,0.5\na,c,1,1\n")
    with pytest.raises(DyadFormatError, match="missing"):
        load_dyad_csv(p)
    with pytest.warns(MissingDyadWarning):
        data, summary = read_dyads(p, LoadOptions(strict=False))
    assert summary.missing_dyads == 1
    assert data.y[1, 2] == 0.0 and data.x[1, 2, 0] == 0.0


def test_nodes_with_missing_covariates_are_dropped(tmp_path):
    rows = ["i,j,y,x1", "a,b,1,1", "a,c,0,2", "a,d,1,NA", "b,c,1,3", "b,d,0,", "c,d,1,nan"]
    p = _write(tmp_path, "\n".join(rows) + "\n")
    with pytest.warns(UserWarning, match="dropped 1 node"):
        data, summary = read_dyads(p)
    assert summary.dropped_nodes == ["d"]
    assert data.n == 3 and data.labels == ("a", "b", "c")


@pytest.mark.parametrize("text,match", [
    ("", "empty"),
    ("a,b,c\n1,2,3\n", "header"),
    ("i,j,y,x1\na,b,2,0.5\n", "0/1"),
    ("i,j,y,x1\na,b,yes,0.5\n", "0/1"),
    ("i,j,y,x1\na,b,1\n", "expected 4 fields"),
    ("i,j,y,x1\na,a,1,0.5\n", "self-pair"),
    ("i,j,y,x1\na,b,1,abc\n", "not a number"),
    ("i,j,y,x1\n,b,1,0.5\n", "empty node"),
])
def test_malformed_files(tmp_path, text, match):
    with pytest.raises(DyadFormatError, match=match):
        load_dyad_csv(_write(tmp_path, text))


@pytest.mark.parametrize("asymmetric", [False, True])
def test_round_trip_is_exact(tmp_path, asymmetric):
    data, _ = random_instance(9, 4, K=2, asymmetric=asymmetric)
    p = tmp_path / "r.csv"
    save_dyad_csv(data, p)
    back = load_dyad_csv(p)
    assert np.array_equal(back.y, data.y)
    assert np.array_equal(back.x, data.x)
    save_dyad_csv(back, tmp_path / "r2.csv")
    assert (tmp_path / "r2.csv").read_bytes() == p.read_bytes()


@settings(max_examples=20, deadline=None)
@given(seed=st.integers(0, 10_000), n=st.integers(2, 8), K=st.integers(1, 3))
def test_round_trip_property(tmp_path_factory, seed, n, K):
    rng = np.random.default_rng(seed)
    y = np.triu((rng.random((n, n)) < 0.5).astype(float), 1)
    x = rng.normal(size=(n, n, K)) * 10.0 ** rng.integers(-8, 8)
    for k in range(K):
        np.fill_diagonal(x[:, :, k], 0.0)
    data = NetworkData(y + y.T, x)
    p = tmp_path_factory.mktemp("rt") / "d.csv"
    save_dyad_csv(data, p)
    back = load_dyad_csv(p)
    assert np.array_equal(back.y, data.y) and np.array_equal(back.x, data.x)


def test_village_shaped_file(tmp_path):
    data, _ = simulate_empirical_like(EmpiricalLikeConfig(seed=0))
    p = tmp_path / "village.csv"
    save_dyad_csv(data, p, ["wealth_diff", "log_distance", "tie"])
    back, summary = read_dyads(p)
    assert back.n == 114 and back.K == 3
    assert summary.rows == 6441 == 12882 // 2
    assert summary.covariate_names == ["wealth_diff", "log_distance", "tie"]


def test_config_versioning_and_overrides(tmp_path):
    p = tmp_path / "c.json"
    p.write_text(json.dumps({"version": CONFIG_VERSION, "link": "normal", "T_prime": 10}))
    cfg = load_config(p, {"T_prime": 20, "seed": None})
    assert cfg == {"link": "normal", "T_prime": 20}
    p.write_text(json.dumps({"link": "normal"}))
    with pytest.raises(ValueError, match="version"):
        load_config(p)
    p.write_text("[1, 2]")
    with pytest.raises(ValueError):
        load_config(p)
    assert load_config(None, {"a": 1}) == {"a": 1}


def test_write_json_is_sorted_and_nulls_non_finite(tmp_path):
    text = write_json({"b": np.array([1.0, np.nan]), "a": np.int64(3), "c": np.bool_(True)},
                      tmp_path / "o.json")
    assert json.loads(text) == {"a": 3, "b": [1.0, None], "c": True}
    assert text.index('"a"') < text.index('"b"')
    assert (tmp_path / "o.json").read_text() == text


def _estimates_doc():
    entry = {"beta": [1.0, -1.0], "se": [0.1, 0.2], "cov": [[0.01, 0.0], [0.0, 0.04]]}
    return {"schema": "dyadnet.estimates/1", "link": "logistic", "n": 3, "K": 2,
            "alpha_hat": [0.0, 0.1, 0.2], "diagnostics": {}, "failures": [],
            **{m: dict(entry) for m in ("mm", "mm_sj", "os", "os_sj", "bg")}}


def test_estimates_validation():
    validate_estimates(_estimates_doc())
    for mutate in (
        lambda d: d.pop("bg"),
        lambda d: d.update(link="probit"),
        lambda d: d.update(alpha_hat=[0.0]),
        lambda d: d["os"].update(se=[0.1, 0.0]),
        lambda d: d["mm"].update(cov=[[1.0]]),
    ):
        doc = json.loads(json.dumps(_estimates_doc()))
        mutate(doc)
        with pytest.raises(ValueError):
            validate_estimates(doc)
