import math

import numpy as np
import pytest
from scipy import optimize
from scipy.stats import multivariate_normal

from evagllvm.model import ModelSpec, VariationalParams
from evagllvm.simulation import simulate_dataset, synthetic_truth

ALL_FAMILIES = ("gaussian-identity", "poisson-log", "negbinomial-log", "bernoulli-logit",
                "bernoulli-probit", "tweedie-log", "beta-logit")


def fd_gradient(f, x, rel=1e-6):
    """Central-difference gradient with step ``rel * (1 + |x|)``."""
    x = np.asarray(x, float)
    g = np.empty_like(x)
    for k in range(x.size):
        h = rel * (1.0 + abs(x[k]))
        e = np.zeros_like(x)
        e[k] = h
        g[k] = (f(x + e) - f(x - e)) / (2.0 * h)
    return g


def random_varparams(n, p, rng, scale=0.4):
    a = rng.normal(0.0, 0.7, (n, p))
    L = np.tril(rng.normal(0.0, 0.2, (n, p, p)), -1)
    idx = np.arange(p)
    L[:, idx, idx] = np.exp(rng.normal(np.log(scale), 0.3, (n, p)))
    return VariationalParams(a, L)


def random_instance(family, n, m, p, q=1, seed=0):
    """Spec, simulated data, the generating parameters and random variational params."""
    rng = np.random.default_rng(seed)
    spec = ModelSpec(family, n, m, p, q)
    params = synthetic_truth(spec, rng)
    data = simulate_dataset(spec, params, seed=int(rng.integers(2**31)))
    return spec, data, params, random_varparams(n, p, rng)


def gaussian_factor_ml(Y, p, n_starts=5):
    """Maximum of the exact Gaussian factor-model likelihood by direct optimization.

    Rows are ``N(mu, W W^T + diag(s^2))``; ``mu`` is profiled out as the sample mean.
    """
    n, m = Y.shape
    mu = Y.mean(axis=0)
    S = (Y - mu).T @ (Y - mu) / n

    def negll(x):
        W = x[:m * p].reshape(m, p)
        C = W @ W.T + np.diag(np.exp(2 * x[m * p:]))
        sign, logdet = np.linalg.slogdet(C)
        return 0.5 * n * (m * math.log(2 * math.pi) + logdet + np.trace(np.linalg.solve(C, S)))

    rng = np.random.default_rng(0)
    best = math.inf
    for _ in range(n_starts):
        x0 = np.r_[rng.normal(0, 0.5, m * p), np.log(np.sqrt(np.diag(S)) / 2)]
        r = optimize.minimize(negll, x0, method="BFGS", options={"gtol": 1e-9})
        r = optimize.minimize(negll, r.x, method="Nelder-Mead",
                              options={"xatol": 1e-10, "fatol": 1e-12, "maxiter": 20000})
        best = min(best, r.fun)
    ref_check = -multivariate_normal.logpdf(Y, mu, np.cov(Y.T, bias=True)).sum()
    assert best >= ref_check - 1e-6          # cannot beat the saturated covariance
    return -best


# acceptance lines collected for the terminal summary
ACCEPTANCE_LINES = []


@pytest.fixture
def report_line():
    def add(line):
        ACCEPTANCE_LINES.append(line)
        print(line)
    return add


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split()[1].rstrip(":"))):
            terminalreporter.write_line(line)
