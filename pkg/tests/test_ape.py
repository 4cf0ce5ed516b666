import math

import mpmath as mp
import numpy as np
import pytest
from conftest import interior_instance, random_instance
from hypothesis import given, settings
from hypothesis import strategies as st

import dyadnet.ape as ape
from dyadnet.ape import (
    EffectKind,
    PartialEffectSpec,
    ape_bias_diagnostics,
    ape_hat,
    ape_sj_bg,
    default_specs,
    dyad_effects,
    estimate_ape,
    partial_effect_dyad,
    sigma_Delta_hat,
    sigma_delta_hat,
)
from dyadnet.dgp import DgpConfig, simulate_network
from dyadnet.jmm import JmmSettings, solve_beta_jmm
from dyadnet.linalg import SingularMatrixError
from dyadnet.model import LOGISTIC, NetworkData, ParamState, build_cache

BINARY = PartialEffectSpec(0, EffectKind.BINARY)
CONT = PartialEffectSpec(1, EffectKind.CONTINUOUS)
TIGHT = JmmSettings(tol_alpha=1e-13, tol_beta=1e-13, alpha_method="newton")


def _binary_instance(n, seed):
    """Random network whose first covariate is 0/1."""
    data, params = random_instance(n, seed, K=2)
    x = data.x.copy()
    rng = np.random.default_rng(seed + 1000)
    b = (rng.random((n, n)) < 0.5).astype(float)
    b = np.triu(b, 1)
    x[:, :, 0] = b + b.T
    return NetworkData(data.y, x), params


def _mp_F(u):
    return 1 / (1 + mp.e ** (-u))


def _mp_delta(x, alpha, beta, spec):
    """Dyad effects as an mp matrix function of (alpha, beta)."""
    n, K = x.shape[0], x.shape[1] if x.ndim == 2 else x.shape[2]

    def xb(i, j, level=None):
        out = 0
        for k in range(len(beta)):
            v = mp.mpf(x[i, j, k]) if level is None or k != spec.k else mp.mpf(level)
            out += v * beta[k]
        return out

    vals = {}
    for i in range(n):
        for j in range(i + 1, n):
            if spec.kind is EffectKind.CONTINUOUS:
                u, v = alpha[i] + xb(i, j), alpha[j] + xb(j, i)
                fu, fv = _mp_F(u), _mp_F(v)
                vals[i, j] = beta[spec.k] * (fu * (1 - fu) * fv + fu * fv * (1 - fv))
            else:
                on = _mp_F(alpha[i] + xb(i, j, 1)) * _mp_F(alpha[j] + xb(j, i, 1))
                off = _mp_F(alpha[i] + xb(i, j, 0)) * _mp_F(alpha[j] + xb(j, i, 0))
                vals[i, j] = on - off
    return vals


# ---------------------------------------------------------------- dyad effects


def test_binary_effect_value():
    got = partial_effect_dyad(0, 1, ParamState(np.zeros(2), [1.0]), [1.0],
                              PartialEffectSpec(0, EffectKind.BINARY), LOGISTIC)
    assert got == pytest.approx(0.2844466, abs=1e-7)
    assert got == pytest.approx(LOGISTIC.cdf(1.0) ** 2 - 0.25, rel=1e-15)


def test_continuous_effect_symmetric_case():
    got = partial_effect_dyad(0, 1, ParamState(np.zeros(2), [1.0]), [0.0],
                              PartialEffectSpec(0), LOGISTIC)
    assert got == pytest.approx(0.25, rel=1e-15)


def test_zero_slope_continuous_effect_vanishes():
    params = ParamState(np.array([0.3, -0.2]), [0.0, 0.7])
    assert partial_effect_dyad(0, 1, params, [0.4, 1.0], PartialEffectSpec(0), LOGISTIC) == 0.0


def test_continuous_effect_is_derivative_of_link_probability():
    data, params = random_instance(9, 3, asymmetric=True)
    eff = dyad_effects(data, params, LOGISTIC, CONT)
    h = 1e-6
    p = []
    for s in (h, -h):
        x = data.x.copy()
        x[:, :, 1] += s
        np.fill_diagonal(x[:, :, 1], 0.0)
        p.append(build_cache(NetworkData(data.y, x), params, LOGISTIC).p)
    fd = (p[0] - p[1]) / (2 * h)
    assert np.abs(eff.value - fd).max() < 1e-9


def test_binary_effect_telescopes_to_cache_difference():
    data, params = _binary_instance(10, 4)
    eff = dyad_effects(data, params, LOGISTIC, BINARY)
    ps = []
    for level in (1.0, 0.0):
        x = data.x.copy()
        x[:, :, 0] = level
        np.fill_diagonal(x[:, :, 0], 0.0)
        ps.append(build_cache(NetworkData(data.y, x), params, LOGISTIC).p)
    diff = ps[0] - ps[1]
    np.fill_diagonal(diff, 0.0)
    assert np.array_equal(eff.value, diff)


def test_grid_matches_single_dyad_evaluation():
    data, params = _binary_instance(7, 2)
    for spec in (BINARY, CONT):
        eff = dyad_effects(data, params, LOGISTIC, spec)
        for i, j in [(0, 1), (2, 5), (6, 3)]:
            want = partial_effect_dyad(i, j, params, data.x[i, j], spec, LOGISTIC, data.x[j, i])
            assert eff.value[i, j] == pytest.approx(want, rel=1e-14, abs=1e-16)


@pytest.mark.parametrize("spec", [BINARY, CONT], ids=["binary", "continuous"])
def test_alpha_and_beta_derivatives_match_extended_precision(spec):
    data, params = _binary_instance(6, 7)
    eff = dyad_effects(data, params, LOGISTIC, spec)
    n = data.n
    with mp.workdps(40):
        a0 = [mp.mpf(v) for v in params.alpha]
        b0 = [mp.mpf(v) for v in params.beta]
        i, j = 1, 4

        def value(a, b):
            return _mp_delta(data.x, a, b, spec)[i, j]

        def shifted_alpha(ki, s):
            a = list(a0)
            a[ki] += s
            return a

        h = mp.mpf(10) ** -12
        d_i = (value(shifted_alpha(i, h), b0) - value(shifted_alpha(i, -h), b0)) / (2 * h)
        assert float(d_i) == pytest.approx(eff.d_own[i, j], rel=1e-10, abs=1e-14)
        d2 = (value(shifted_alpha(i, h), b0) - 2 * value(a0, b0)
              + value(shifted_alpha(i, -h), b0)) / h**2
        assert float(d2) == pytest.approx(eff.d2_own[i, j], rel=1e-8, abs=1e-12)

        def both(s, t):
            a = list(a0)
            a[i] += s
            a[j] += t
            return value(a, b0)

        dc = (both(h, h) - both(h, -h) - both(-h, h) + both(-h, -h)) / (4 * h * h)
        assert float(dc) == pytest.approx(eff.d2_cross[i, j], rel=1e-8, abs=1e-12)
        for k in range(data.K):
            bp, bm = list(b0), list(b0)
            bp[k] += h
            bm[k] -= h
            db = (value(a0, bp) - value(a0, bm)) / (2 * h)
            assert float(db) == pytest.approx(eff.d_beta[i, j, k], rel=1e-10, abs=1e-14)
    assert n == 6


def test_spec_validation():
    with pytest.raises(ValueError):
        PartialEffectSpec(-1)
    data, params = random_instance(5, 0, K=2)
    with pytest.raises(ValueError):
        ape_hat(data, params, LOGISTIC, [PartialEffectSpec(2)])
    assert default_specs(2) == [BINARY, CONT]
    assert all(s.kind is EffectKind.CONTINUOUS for s in default_specs(3))


# ---------------------------------------------------------------- average effect


def test_homogeneous_network_average_equals_single_dyad():
    n = 8
    x = np.full((n, n, 2), 1.0)
    x[:, :, 1] = 0.3
    for k in range(2):
        np.fill_diagonal(x[:, :, k], 0.0)
    data = NetworkData(np.zeros((n, n)), x)
    params = ParamState(np.full(n, 0.2), [0.5, -0.4])
    got = ape_hat(data, params, LOGISTIC, [BINARY, CONT])
    want = [partial_effect_dyad(0, 1, params, x[0, 1], s, LOGISTIC) for s in (BINARY, CONT)]
    assert got == pytest.approx(want, rel=1e-14)


@settings(max_examples=20, deadline=None)
@given(seed=st.integers(0, 10_000), n=st.integers(3, 12))
def test_average_effect_is_permutation_invariant(seed, n):
    data, params = _binary_instance(n, seed)
    perm = np.random.default_rng(seed).permutation(n)
    a = ape_hat(data, params, LOGISTIC)
    b = ape_hat(data.permuted(perm), ParamState(params.alpha[perm], params.beta), LOGISTIC)
    assert np.abs(a - b).max() < 1e-14


# ---------------------------------------------------------------- sampling variance


def _mp_sigma_delta(values):
    """Naive triple loop over i < j < k in extended precision."""
    n = values[0].shape[0]
    S = len(values)
    with mp.workdps(50):
        iu = np.triu_indices(n, 1)
        means = [mp.fsum(mp.mpf(v) for v in vals[iu]) / len(iu[0]) for vals in values]
        c = [[[mp.mpf(values[s][i, j]) - means[s] for j in range(n)] for i in range(n)]
             for s in range(S)]
        out = np.zeros((S, S))
        for s in range(S):
            for t in range(S):
                acc = mp.fsum(0.5 * (c[s][i][j] * c[t][i][k] + c[s][i][k] * c[t][i][j])
                              for i in range(n) for j in range(i + 1, n)
                              for k in range(j + 1, n))
                out[s, t] = float(acc / math.comb(n, 3))
    return out


def test_sigma_delta_matches_naive_triple_loop():
    data, params = _binary_instance(30, 12)
    got = sigma_delta_hat(data, params, LOGISTIC)
    values = [dyad_effects(data, params, LOGISTIC, s).value for s in default_specs(2)]
    want = _mp_sigma_delta(values)
    assert np.abs(got - want).max() <= 1e-12 * max(1.0, np.abs(want).max())


def test_constant_effects_give_zero_and_flag_degeneracy():
    # Equal fixed effects and a single binary covariate: every dyad has the
    # same switch-on effect, while the covariate still varies across dyads.
    n = 9
    rng = np.random.default_rng(0)
    b = np.triu((rng.random((n, n)) < 0.5).astype(float), 1)
    y = np.triu((rng.random((n, n)) < 0.5).astype(float), 1)
    data = NetworkData(y + y.T, (b + b.T)[:, :, None])
    params = ParamState(np.full(n, -0.3), [0.8])
    spec = [PartialEffectSpec(0, EffectKind.BINARY)]
    assert np.array_equal(sigma_delta_hat(data, params, LOGISTIC, spec), np.zeros((1, 1)))
    res = estimate_ape(data, params, LOGISTIC, spec, with_bias=False)
    assert res.degenerate and res.se[0] > 0


def test_non_constant_effects_are_not_degenerate(baseline_60):
    data, truth = baseline_60
    assert not estimate_ape(data, truth, LOGISTIC, with_bias=False).degenerate


@settings(max_examples=25, deadline=None)
@given(seed=st.integers(0, 10_000), n=st.integers(3, 15))
def test_sigma_delta_is_symmetric(seed, n):
    data, params = _binary_instance(n, seed)
    S = sigma_delta_hat(data, params, LOGISTIC)
    assert np.array_equal(S, S.T)


def test_sigma_delta_is_psd_at_100_nodes(baseline_100):
    data, _ = baseline_100
    params = solve_beta_jmm(data, LOGISTIC).params
    assert np.linalg.eigvalsh(sigma_delta_hat(data, params, LOGISTIC)).min() >= -1e-10


@pytest.mark.xfail(strict=True, reason="the triple sum pairs each dyad only with dyads sharing "
                   "its smaller index, so small networks can give a slightly indefinite matrix")
def test_sigma_delta_is_psd_at_30_nodes():
    data, _ = simulate_network(DgpConfig(n=30, seed=0))
    params = solve_beta_jmm(data, LOGISTIC, settings=JmmSettings(alpha_method="newton")).params
    assert np.linalg.eigvalsh(sigma_delta_hat(data, params, LOGISTIC)).min() >= -1e-10


def test_sigma_delta_needs_three_nodes():
    data, params = random_instance(2, 0)
    with pytest.raises(ValueError):
        sigma_delta_hat(data, params, LOGISTIC)


# ---------------------------------------------------------------- estimation variance


def _mp_sigma_Delta(data, params, specs):
    """Four-term sandwich assembled entry by entry in extended precision.

    Jacobian blocks come from central differences of the moment functions,
    the covariance of the moments from independent dyad contributions and
    the effect gradients from central differences of the average effect.
    """
    n, K, N = data.n, data.K, data.N
    x, y, xu = data.x, data.y, data.xu
    with mp.workdps(50):
        h = mp.mpf(10) ** -18
        theta0 = [mp.mpf(v) for v in params.alpha] + [mp.mpf(v) for v in params.beta]

        def split(th):
            return th[:n], th[n:]

        def probs(th):
            a, b = split(th)
            F = [[_mp_F(a[i] + mp.fsum(mp.mpf(x[i, j, k]) * b[k] for k in range(K)))
                  for j in range(n)] for i in range(n)]
            return [[F[i][j] * F[j][i] for j in range(n)] for i in range(n)]

        def moments(th):
            p = probs(th)
            m1 = [mp.fsum(y[i, j] - p[i][j] for j in range(n) if j != i) for i in range(n)]
            m2 = [mp.fsum((y[i, j] - p[i][j]) * xu[i, j, k] for i in range(n)
                          for j in range(i + 1, n)) for k in range(K)]
            return m1 + m2

        def delta(th, spec):
            a, b = split(th)
            vals = _mp_delta(x, a, b, spec)
            return mp.fsum(vals.values()) / N

        m = n + K
        J = mp.matrix(m, m)
        G = mp.matrix(len(specs), m)
        for c in range(m):
            tp, tm = list(theta0), list(theta0)
            tp[c] += h
            tm[c] -= h
            mp_, mm_ = moments(tp), moments(tm)
            for r in range(m):
                J[r, c] = (mp_[r] - mm_[r]) / (2 * h)
            for s, spec in enumerate(specs):
                G[s, c] = (delta(tp, spec) - delta(tm, spec)) / (2 * h)
        p = probs(theta0)
        V = mp.matrix(m, m)
        for i in range(n):
            for j in range(i + 1, n):
                w = p[i][j] * (1 - p[i][j])
                g = [0] * m
                g[i] = g[j] = 1
                for k in range(K):
                    g[n + k] = xu[i, j, k]
                for r in range(m):
                    if g[r]:
                        for c in range(m):
                            if g[c]:
                                V[r, c] += w * g[r] * g[c]

        def block(M, rows, cols):
            out = mp.matrix(len(rows), len(cols))
            for a_, r in enumerate(rows):
                for b_, c in enumerate(cols):
                    out[a_, b_] = M[r, c]
            return out

        A_, B_ = list(range(n)), list(range(n, m))
        J11, J12, J21, J22 = block(J, A_, A_), block(J, A_, B_), block(J, B_, A_), block(J, B_, B_)
        V11, V12, V22 = block(V, A_, A_), block(V, A_, B_), block(V, B_, B_)
        Da, Db = block(G, range(len(specs)), A_), block(G, range(len(specs)), B_)
        J11i = J11**-1
        J0i = (J22 - J21 * J11i * J12) ** -1 * N
        D = Db - Da * J11i * J12
        L = D * J0i
        Cm = (L * J21 - N * Da) * J11i
        cross = Cm * V12 * L.T
        total = (L * V22 * L.T + Cm * V11 * Cm.T - cross - cross.T) / N
        return np.array(total.tolist(), dtype=float), np.array(D.tolist(), dtype=float)


def test_sigma_Delta_matches_extended_precision_assembly():
    data, params = _binary_instance(12, 21)
    specs = default_specs(2)
    got = sigma_Delta_hat(data, params, LOGISTIC, specs)
    want, D_want = _mp_sigma_Delta(data, params, specs)
    assert np.abs(got - want).max() <= 1e-10 * np.abs(want).max()
    eff = [dyad_effects(data, params, LOGISTIC, s) for s in specs]
    c = build_cache(data, params, LOGISTIC)
    from dyadnet.jmm import jacobian_blocks, variance_blocks

    _, D = ape._sigma_Delta(data, eff, jacobian_blocks(data, params, LOGISTIC, c),
                            variance_blocks(data, params, LOGISTIC, c))
    assert np.abs(D - D_want).max() <= 1e-10 * np.abs(D_want).max()


def test_sigma_Delta_is_symmetric_psd():
    data, params = _binary_instance(15, 3)
    S = sigma_Delta_hat(data, params, LOGISTIC)
    assert np.array_equal(S, S.T)
    assert np.linalg.eigvalsh(S).min() >= -1e-12 * np.abs(S).max()


def test_zero_covariates_and_slope():
    # With x = 0 and beta_k = 0 the effect is flat in alpha, but it still moves
    # with beta_k and the slope Jacobian is singular.
    data, params = random_instance(8, 1, K=1)
    data = NetworkData(data.y, np.zeros_like(data.x))
    params = ParamState(params.alpha, [0.0])
    eff = dyad_effects(data, params, LOGISTIC, PartialEffectSpec(0))
    assert np.array_equal(eff.value, np.zeros((8, 8)))
    assert not np.any(eff.d_own) and not np.any(eff.d2_own) and not np.any(eff.d2_cross)
    with pytest.raises(SingularMatrixError):
        sigma_Delta_hat(data, params, LOGISTIC, [PartialEffectSpec(0)])


@pytest.mark.xfail(strict=True, reason="the estimation term is about ten times the sampling "
                   "term on this design; the standard errors still match the Monte Carlo spread")
def test_sampling_term_dominates_at_100_nodes(baseline_100):
    data, _ = baseline_100
    params = solve_beta_jmm(data, LOGISTIC).params
    res = estimate_ape(data, params, LOGISTIC, with_bias=False)
    est = np.diag(res.sigma_Delta) / data.N
    samp = 4.0 * np.diag(res.sigma_delta) / data.n
    assert np.all(est <= samp)


def test_standard_error_combines_both_terms(baseline_60):
    data, truth = baseline_60
    res = estimate_ape(data, truth, LOGISTIC, with_bias=False)
    want = np.sqrt(np.diag(res.sigma_Delta) / data.N + 4 * np.diag(res.sigma_delta) / data.n)
    assert np.array_equal(res.se, want)
    assert np.all(res.se > 0)
    assert np.array_equal(res.se_sj, math.sqrt(2) * res.se)


# ---------------------------------------------------------------- bias diagnostics


def _mp_B_alpha(data, params, spec):
    n, K, N = data.n, data.K, data.N
    with mp.workdps(50):
        a0 = [mp.mpf(v) for v in params.alpha]
        b0 = [mp.mpf(v) for v in params.beta]
        h = mp.mpf(10) ** -12

        def total(a):
            return mp.fsum(_mp_delta(data.x, a, b0, spec).values())

        def at(shifts):
            a = list(a0)
            for idx, s in shifts:
                a[idx] += s
            return total(a)

        R = mp.matrix(n, n)
        base = total(a0)
        for i in range(n):
            R[i, i] = (at([(i, h)]) - 2 * base + at([(i, -h)])) / h**2
            for j in range(i + 1, n):
                R[i, j] = R[j, i] = (at([(i, h), (j, h)]) - at([(i, h), (j, -h)])
                                     - at([(i, -h), (j, h)]) + at([(i, -h), (j, -h)])) / (4 * h * h)
        F = [[_mp_F(a0[i] + mp.fsum(mp.mpf(data.x[i, j, k]) * b0[k] for k in range(K)))
              for j in range(n)] for i in range(n)]
        f = [[F[i][j] * (1 - F[i][j]) for j in range(n)] for i in range(n)]
        J = mp.matrix(n, n)
        V = mp.matrix(n, n)
        for i in range(n):
            for j in range(n):
                if i != j:
                    J[i, j] = -F[i][j] * f[j][i]
                    p = F[i][j] * F[j][i]
                    V[i, j] = p * (1 - p)
            J[i, i] = -mp.fsum(f[i][j] * F[j][i] for j in range(n) if j != i)
            V[i, i] = mp.fsum(V[i, j] for j in range(n) if j != i)
        Ji = J**-1
        S = Ji * V * Ji.T * R
        return float(mp.fsum(S[i, i] for i in range(n)) / (2 * mp.sqrt(N)))


def test_alpha_bias_matches_extended_precision():
    data, params = _binary_instance(8, 5)
    B_alpha, _ = ape_bias_diagnostics(data, params, LOGISTIC, [BINARY, CONT])
    want = [_mp_B_alpha(data, params, s) for s in (BINARY, CONT)]
    assert np.abs(B_alpha - want).max() <= 1e-8 * max(1e-3, np.abs(want).max())


def test_flat_effect_has_no_alpha_bias():
    data, params = random_instance(10, 2, K=2)
    params = ParamState(params.alpha, [params.beta[0], 0.0])
    B_alpha, _ = ape_bias_diagnostics(data, params, LOGISTIC, [CONT])
    assert B_alpha[0] == 0.0


def test_scaled_bias_shrinks_relative_to_standard_error():
    ratios = {}
    for n in (100, 200):
        vals = []
        for seed in range(4):
            data, _ = simulate_network(DgpConfig(n=n, seed=seed))
            params = solve_beta_jmm(data, LOGISTIC).params
            res = estimate_ape(data, params, LOGISTIC)
            B_alpha, B_beta = res.bias_diagnostics
            vals.append(np.abs(B_alpha + B_beta) / math.sqrt(data.N) / res.se)
        ratios[n] = np.mean(vals, axis=0)
    assert np.all(ratios[200] < ratios[100])


# ---------------------------------------------------------------- jackknife and bagging


def test_equal_sub_estimates_reproduce_plug_in(monkeypatch):
    data, params = interior_instance(12, 0)
    full = ape_hat(data, params, LOGISTIC)
    monkeypatch.setattr(ape, "_half_ape", lambda *args, **kw: full)
    sj, bg = ape_sj_bg(data, LOGISTIC, T_prime=5, seed=1, params=params)
    assert np.array_equal(sj, full) and np.array_equal(bg, full)


def test_jackknife_combination():
    data, _ = simulate_network(DgpConfig(n=40, seed=3))
    params = solve_beta_jmm(data, LOGISTIC, settings=TIGHT).params
    from dyadnet.jmm import random_partition
    from dyadnet.dgp import make_rng

    part = random_partition(40, make_rng(9))
    sj, bg = ape_sj_bg(data, LOGISTIC, params=params, settings=TIGHT, split_seed=9,
                       partitions=[part])
    halves = []
    for idx in part:
        sub = data.subnetwork(idx)
        fit = solve_beta_jmm(sub, LOGISTIC, params.beta, TIGHT, alpha_init=params.alpha[idx])
        halves.append(ape_hat(sub, fit.params, LOGISTIC))
    want = 2 * ape_hat(data, params, LOGISTIC) - 0.5 * (halves[0] + halves[1])
    assert np.abs(sj - want).max() < 1e-12
    assert np.array_equal(sj, bg)


def test_bagging_is_deterministic_and_validates():
    data, _ = simulate_network(DgpConfig(n=30, seed=4))
    params = solve_beta_jmm(data, LOGISTIC).params
    a = ape_sj_bg(data, LOGISTIC, T_prime=3, seed=5, params=params)
    b = ape_sj_bg(data, LOGISTIC, T_prime=3, seed=5, params=params)
    assert np.array_equal(a[0], b[0]) and np.array_equal(a[1], b[1])
    with pytest.raises(ValueError):
        ape_sj_bg(data, LOGISTIC, T_prime=0, params=params)


def test_bagging_gives_up_when_every_split_fails(monkeypatch):
    data, params = interior_instance(12, 0)
    full = ape_hat(data, params, LOGISTIC)
    calls = []

    def flaky(*args, **kw):
        calls.append(1)
        if len(calls) > 2:  # the jackknife's own two halves succeed
            raise np.linalg.LinAlgError("singular")
        return full

    monkeypatch.setattr(ape, "_half_ape", flaky)
    with pytest.raises(RuntimeError, match="after 6 attempts"):
        ape_sj_bg(data, LOGISTIC, T_prime=2, params=params)
    assert len(calls) == 2 + 6
