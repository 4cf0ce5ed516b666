import numpy as np
import pytest

from dyadnet.dgp import DgpConfig, simulate_network
from dyadnet.model import LOGISTIC, NetworkData, ParamState


def random_instance(n, seed, K=2, density_shift=0.0, asymmetric=False):
    """Small network with continuous covariates and moderate link probabilities."""
    rng = np.random.default_rng(seed)
    x = rng.normal(0.0, 0.5, size=(n, n, K))
    if not asymmetric:
        x = 0.5 * (x + x.transpose(1, 0, 2))
    for k in range(K):
        np.fill_diagonal(x[:, :, k], 0.0)
    alpha = rng.normal(density_shift, 0.4, size=n)
    beta = rng.normal(0.0, 0.6, size=K)
    y = np.zeros((n, n))
    iu = np.triu_indices(n, 1)
    p = LOGISTIC.cdf(alpha[:, None] + x @ beta)
    p = p * p.T
    link = (rng.random(iu[0].size) < p[iu]).astype(float)
    y[iu] = link
    y[(iu[1], iu[0])] = link
    return NetworkData(y, x), ParamState(alpha, beta)


def interior_instance(n, seed, K=2):
    """Like ``random_instance`` but redrawn until the fixed effects at the true
    slopes have an interior solution."""
    import warnings

    from dyadnet.alpha import BoundaryDegreeWarning, solve_alpha

    for s in range(seed, seed + 1000):
        data, params = random_instance(n, s, K)
        with warnings.catch_warnings():
            warnings.simplefilter("ignore", BoundaryDegreeWarning)
            rep = solve_alpha(data, params.beta, LOGISTIC, method="newton")
        if not rep.clamped_nodes:
            return data, params
    raise RuntimeError("no interior instance found")


@pytest.fixture(scope="session")
def baseline_100():
    return simulate_network(DgpConfig(n=100, seed=11))


@pytest.fixture(scope="session")
def baseline_60():
    return simulate_network(DgpConfig(n=60, seed=5))


def mp_newton(fun, x0, dps=40, tol=None, max_iter=100):
    """Newton's method in extended precision with a central-difference Jacobian.

    ``fun`` maps a list of mpf values to a list of mpf residuals.
    """
    import mpmath as mp

    with mp.workdps(dps):
        x = [mp.mpf(v) for v in x0]
        m = len(x)
        h = mp.mpf(10) ** (-(dps // 3))
        tol = mp.mpf(10) ** (-(dps - 10)) if tol is None else mp.mpf(tol)
        for _ in range(max_iter):
            r = list(fun(x))
            if max(abs(v) for v in r) < tol:
                return [float(v) for v in x]
            J = mp.matrix(m, m)
            for k in range(m):
                xp, xm = list(x), list(x)
                xp[k] += h
                xm[k] -= h
                fp, fm = fun(xp), fun(xm)
                for i in range(m):
                    J[i, k] = (fp[i] - fm[i]) / (2 * h)
            step = mp.lu_solve(J, mp.matrix(r))
            x = [x[i] - step[i] for i in range(m)]
        raise RuntimeError("extended-precision Newton did not converge")
