"""Approximate marginal log-likelihoods for GLLVMs.

* ``eva``: second-order expansion of ``log f(y | u)`` around the variational
  mean, giving a closed form for any family and link.
* ``va``: the exact variational bound, for the two families where it has a
  closed form (gaussian-identity, poisson-log).
* ``laplace``: per-unit Laplace approximation with an inner Newton solve.
* ``oracle_marginal``: adaptive Gauss-Hermite quadrature (p <= 2) or
  importance-sampled Monte Carlo, for validation.

All objectives keep their additive constants (including ``p/2`` from the
Gaussian entropy), so they are directly comparable with each other and with
the exact marginal log-likelihood.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from numpy.polynomial.hermite_e import hermegauss
from scipy import special

from .model import Layout, ModelSpec, Parameters, ResponseData, VariationalParams, pack
from .model import _unpack_model, _unpack_var

VA_FAMILIES = ("gaussian-identity", "poisson-log")
_LOG_2PI = math.log(2.0 * math.pi)


class NonFiniteError(FloatingPointError):
    """An objective term evaluated to a non-finite value."""

    def __init__(self, i, j, eta, what="log-density"):
        self.i, self.j, self.eta = int(i), int(j), float(eta)
        super().__init__(f"non-finite {what} at unit {self.i}, response {self.j} "
                         f"(eta={self.eta:.6g})")


class UnsupportedError(ValueError):
    """The requested method has no implementation for this family."""


class LaplaceConvergenceError(RuntimeError):
    """Inner Newton iterations for the Laplace mode did not converge."""

    def __init__(self, unit, grad_norm, iterations):
        self.unit, self.grad_norm, self.iterations = int(unit), float(grad_norm), iterations
        super().__init__(f"Laplace inner Newton failed for unit {self.unit}: gradient norm "
                         f"{self.grad_norm:.3g} after {iterations} iterations")


@dataclass(frozen=True)
class ObjectiveValue:
    value: float
    per_unit: np.ndarray
    se: float | None = None
    per_unit_se: np.ndarray | None = None


def _check_va(spec):
    if spec.family not in VA_FAMILIES:
        raise UnsupportedError(
            f"no closed-form VA for {spec.family}; supported: {', '.join(VA_FAMILIES)}")


def _raise_nonfinite(arr, eta, what="log-density"):
    bad = np.argwhere(~np.isfinite(arr))
    i, j = bad[0]
    raise NonFiniteError(i, j, eta[i, j], what)


def _fixed_eta(spec, params, X):
    eta = params.beta0[None, :] + X @ params.B.T
    if spec.row_effects:
        eta = eta + params.alpha[:, None]
    return eta


def _cells(kind, fam, Y, eta, s, phi):
    """Per-cell objective terms and their partials in (eta, s, phi)."""
    if kind == "eva":
        d = fam.derivs(Y, eta, phi)
        val = d.logf + 0.5 * d.d2 * s
        return val, d.d1 + 0.5 * d.d3 * s, 0.5 * d.d2, d.logf_phi + 0.5 * d.d2_phi * s
    if fam.name == "poisson-log":
        with np.errstate(over="ignore"):
            e = np.exp(eta + 0.5 * s)
        val = Y * eta - e - special.gammaln(Y + 1.0)
        return val, Y - e, -0.5 * e, None
    if fam.name == "gaussian-identity":
        r = Y - eta
        iv = 1.0 / phi**2
        sq = r * r + s
        val = -0.5 * _LOG_2PI - np.log(phi) - 0.5 * sq * iv
        return val, r * iv, -0.5 * iv + 0.0 * s, -1.0 / phi + sq * iv / phi
    raise UnsupportedError(f"no closed-form VA for {fam.name}")


def _variational(kind, layout: Layout, theta, data: ResponseData, grad=True):
    """Objective (and gradient on the packed vector) for EVA or VA."""
    spec = layout.spec
    fam = spec.fam
    params, gfree = _unpack_model(theta, layout)
    a, L = _unpack_var(theta, layout)
    G = params.Gamma
    X, Y = data.X, data.Y
    p = spec.p

    eta = _fixed_eta(spec, params, X) + a @ G.T
    A = L @ np.swapaxes(L, 1, 2)
    GG = (G[:, :, None] * G[:, None, :]).reshape(spec.m, p * p)   # lambda_j lambda_j^T
    s = A.reshape(spec.n, p * p) @ GG.T             # lambda_j^T A_i lambda_j
    phi = params.phi[None, :] if params.phi is not None else None
    with np.errstate(over="ignore", invalid="ignore", divide="ignore"):
        val, r, qs, gphi = _cells(kind, fam, Y, eta, s, phi)
    if not np.all(np.isfinite(val)):
        _raise_nonfinite(val, eta)
    Ldiag = np.diagonal(L, axis1=1, axis2=2)
    entropy = 0.5 * (2.0 * np.sum(np.log(Ldiag), axis=1) - np.sum(a * a, axis=1)
                     - np.sum(L * L, axis=(1, 2))) + 0.5 * p
    per_unit = np.sum(val, axis=1) + entropy
    value = float(np.sum(per_unit))
    if not grad:
        return value, per_unit, None

    if not (np.all(np.isfinite(r)) and np.all(np.isfinite(qs))):
        _raise_nonfinite(np.where(np.isfinite(r) & np.isfinite(qs), 0.0, np.nan), eta,
                         "derivative")
    sl = layout.slices
    g = np.empty(layout.size)
    g[sl["beta0"]] = r.sum(axis=0)
    g[sl["B"]] = (r.T @ X).ravel(order="F")
    QA = (qs.T @ A.reshape(spec.n, p * p)).reshape(spec.m, p, p)   # sum_i q_ij A_i
    gG = r.T @ a + 2.0 * np.einsum("jkl,jl->jk", QA, G)
    rows, cols, diag = layout.gamma_index
    gg = gG[rows, cols]
    gg[diag] *= gfree[diag]
    g[sl["Gamma"]] = gg
    if spec.has_dispersion:
        g[sl["phi"]] = gphi.sum(axis=0) * params.phi
    if spec.row_effects:
        g[sl["alpha"]] = r.sum(axis=1)[1:]
    g[sl["a"]] = (r @ G - a).ravel()
    W = (qs @ GG).reshape(spec.n, p, p)             # sum_j q_ij lambda_j lambda_j^T
    gL = 2.0 * (W @ L) - L
    idx = np.arange(p)
    gL[:, idx, idx] += 1.0 / Ldiag
    rr, cc, dd = layout.chol_index
    gl = gL[:, rr, cc]
    gl[:, dd] *= L[:, rr[dd], cc[dd]]
    g[sl["chol"]] = gl.ravel()
    return value, per_unit, g


def _layout_for(spec, varparams):
    return Layout(spec, variational=True, diagonal=bool(varparams.diagonal))


def eva_objective(spec: ModelSpec, data: ResponseData, params: Parameters,
                  varparams: VariationalParams) -> ObjectiveValue:
    """EVA log-likelihood at ``(params, varparams)``."""
    layout = _layout_for(spec, varparams)
    theta = pack(params, varparams, spec)
    value, per_unit, _ = _variational("eva", layout, theta, data, grad=False)
    return ObjectiveValue(value, per_unit)


def eva_gradient(spec, data, params, varparams) -> np.ndarray:
    """Gradient of the EVA objective, aligned with the packed vector."""
    layout = _layout_for(spec, varparams)
    theta = pack(params, varparams, spec)
    return _variational("eva", layout, theta, data)[2]


def va_objective(spec, data, params, varparams) -> ObjectiveValue:
    """Exact variational lower bound (gaussian-identity and poisson-log only)."""
    _check_va(spec)
    layout = _layout_for(spec, varparams)
    theta = pack(params, varparams, spec)
    value, per_unit, _ = _variational("va", layout, theta, data, grad=False)
    return ObjectiveValue(value, per_unit)


def va_gradient(spec, data, params, varparams) -> np.ndarray:
    _check_va(spec)
    layout = _layout_for(spec, varparams)
    theta = pack(params, varparams, spec)
    return _variational("va", layout, theta, data)[2]


def curvature_term(spec, data, params, varparams) -> np.ndarray:
    """Per-unit ``Tr(H_i A_i) = sum_j d2_ij lambda_j^T A_i lambda_j``."""
    eta = _fixed_eta(spec, params, data.X) + varparams.a @ params.Gamma.T
    d = spec.fam.derivs(data.Y, eta, None if params.phi is None else params.phi[None, :])
    GL = np.matmul(params.Gamma[None], varparams.L)
    return np.sum(d.d2 * np.sum(GL * GL, axis=-1), axis=1)


class VariationalProblem:
    """Packed-vector objective for EVA or VA, as used by the optimizer."""

    def __init__(self, spec: ModelSpec, data: ResponseData, kind="eva", diagonal=False):
        if kind == "va":
            _check_va(spec)
        elif kind != "eva":
            raise ValueError(f"unknown variational objective {kind!r}")
        self.spec, self.data, self.kind = spec, data, kind
        self.layout = Layout(spec, variational=True, diagonal=diagonal)

    def value(self, theta):
        return _variational(self.kind, self.layout, theta, self.data, grad=False)[0]

    def value_and_grad(self, theta):
        v, _, g = _variational(self.kind, self.layout, theta, self.data)
        return v, g

    def per_unit(self, theta):
        return _variational(self.kind, self.layout, theta, self.data, grad=False)[1]


# ---------------------------------------------------------------------------
# Laplace approximation


@dataclass
class LaplaceState:
    u: np.ndarray          # modes, n x p
    M: np.ndarray          # I - H_i at the mode (negative Hessian of the integrand)
    per_unit: np.ndarray
    derivs: object
    iterations: int


def _precision(G, d2):
    p = G.shape[1]
    # I - sum_j d2_ij lambda_j lambda_j^T
    return np.eye(p)[None] - np.matmul(np.swapaxes(d2[:, :, None] * G[None], 1, 2), G)


def _solve_spd_shift(M, g):
    """Solve ``M x = g`` unit-wise, shifting non-PD ``M`` towards the identity."""
    w = np.linalg.eigvalsh(M)
    bad = w[:, 0] <= 1e-8
    if np.any(bad):
        M = M.copy()
        shift = np.abs(w[bad, 0]) + 1.0
        M[bad] += shift[:, None, None] * np.eye(M.shape[1])[None]
    return np.linalg.solve(M, g[..., None])[..., 0]


def laplace_modes(spec, data, params, u0=None, tol=1e-8, max_iter=100, max_halvings=50):
    """Find ``argmax_u sum_j log f(y_ij | u) - u^T u / 2`` for every unit."""
    fam = spec.fam
    G = params.Gamma
    Y = data.Y
    phi = params.phi[None, :] if params.phi is not None else None
    eta0 = _fixed_eta(spec, params, data.X)
    u = np.zeros((spec.n, spec.p)) if u0 is None else np.array(u0, dtype=float)

    def h_of(uu, rows):
        with np.errstate(over="ignore", invalid="ignore"):
            lf = fam.logf(Y[rows], eta0[rows] + uu @ G.T, phi)
        return np.sum(lf, axis=1) - 0.5 * np.sum(uu * uu, axis=1)

    it = 0
    with np.errstate(over="ignore", invalid="ignore"):
        while True:
            eta = eta0 + u @ G.T
            d = fam.derivs(Y, eta, phi)
            h = np.sum(d.logf, axis=1) - 0.5 * np.sum(u * u, axis=1)
            g = d.d1 @ G - u
            gnorm = np.max(np.abs(g), axis=1)
            gnorm = np.where(np.isfinite(h), gnorm, np.inf)
            active = gnorm > tol
            if not np.any(active):
                break
            if it >= max_iter:
                i = int(np.argmax(gnorm))
                raise LaplaceConvergenceError(i, gnorm[i], it)
            rows = np.flatnonzero(active)
            M = _precision(G, d.d2[rows])
            step = _solve_spd_shift(M, g[rows])
            h0 = h[rows]
            t = np.ones(len(rows))
            todo = np.ones(len(rows), bool)
            unew = u[rows].copy()
            for _ in range(max_halvings + 1):
                cand = u[rows][todo] + t[todo, None] * step[todo]
                hc = h_of(cand, rows[todo])
                ok = np.isfinite(hc) & (hc >= h0[todo] - 1e-12 * (1.0 + np.abs(h0[todo])))
                idx = np.flatnonzero(todo)
                unew[idx[ok]] = cand[ok]
                todo[idx[ok]] = False
                if not np.any(todo):
                    break
                t[todo] *= 0.5
            if np.any(todo):
                i = int(rows[np.flatnonzero(todo)[0]])
                raise LaplaceConvergenceError(i, gnorm[i], it)
            u[rows] = unew
            it += 1
        M = _precision(G, d.d2)
    sign, logdet = np.linalg.slogdet(M)
    per_unit = h - 0.5 * logdet
    bad = (sign <= 0) | ~np.isfinite(per_unit)
    if np.any(bad):
        i = int(np.flatnonzero(bad)[0])
        raise NonFiniteError(i, 0, eta[i, 0], "Laplace determinant")
    return LaplaceState(u=u, M=M, per_unit=per_unit, derivs=d, iterations=it)


def _laplace_grad(layout, params, gfree, data, st: LaplaceState):
    spec = layout.spec
    G = params.Gamma
    d = st.derivs
    u = st.u
    Minv = np.linalg.inv(st.M)
    GM = np.matmul(G[None], Minv)                  # rows: (M_i^{-1} lambda_j)^T
    c = np.sum(GM * G[None], axis=-1)              # lambda_j^T M_i^{-1} lambda_j
    w = 0.5 * d.d3 * c
    z = np.einsum("ikl,il->ik", Minv, w @ G)
    zl = z @ G.T
    r = d.d1 + w + d.d2 * zl
    sl = layout.slices
    g = np.empty(layout.size)
    g[sl["beta0"]] = r.sum(axis=0)
    g[sl["B"]] = (r.T @ data.X).ravel(order="F")
    gG = r.T @ u + d.d1.T @ z + np.einsum("ij,ijk->jk", d.d2, GM)
    rows, cols, diag = layout.gamma_index
    gg = gG[rows, cols]
    gg[diag] *= gfree[diag]
    g[sl["Gamma"]] = gg
    if spec.has_dispersion:
        gphi = d.logf_phi + 0.5 * d.d2_phi * c + d.d1_phi * zl
        g[sl["phi"]] = gphi.sum(axis=0) * params.phi
    if spec.row_effects:
        g[sl["alpha"]] = r.sum(axis=1)[1:]
    return g


class LaplaceProblem:
    """Packed model-block objective for the Laplace approximation.

    Modes from the previous evaluation warm-start the next inner solve.
    """

    def __init__(self, spec: ModelSpec, data: ResponseData, inner_tol=1e-8):
        self.spec, self.data, self.inner_tol = spec, data, inner_tol
        self.layout = Layout(spec, variational=False)
        self._u = None
        self.state = None

    def _solve(self, theta):
        params, gfree = _unpack_model(theta, self.layout)
        try:
            st = laplace_modes(self.spec, self.data, params, u0=self._u, tol=self.inner_tol)
        except LaplaceConvergenceError:
            if self._u is None:
                raise
            st = laplace_modes(self.spec, self.data, params, u0=None, tol=self.inner_tol)
        self._u = st.u
        self.state = st
        return params, gfree, st

    def value(self, theta):
        return float(np.sum(self._solve(theta)[2].per_unit))

    def value_and_grad(self, theta):
        params, gfree, st = self._solve(theta)
        g = _laplace_grad(self.layout, params, gfree, self.data, st)
        return float(np.sum(st.per_unit)), g


def laplace_objective(spec, data, params, u0=None) -> ObjectiveValue:
    """Laplace-approximated marginal log-likelihood."""
    st = laplace_modes(spec, data, params, u0=u0)
    return ObjectiveValue(float(np.sum(st.per_unit)), st.per_unit)


def laplace_gradient(spec, data, params) -> np.ndarray:
    """Total derivative of the Laplace objective on the packed model block."""
    prob = LaplaceProblem(spec, data)
    return prob.value_and_grad(pack(params, None, spec))[1]


# ---------------------------------------------------------------------------
# Oracle


def _unit_logf(spec, params, y_i, eta0_i, U):
    """Sum over responses of log f for one unit at many latent points ``U``."""
    phi = params.phi[None, :] if params.phi is not None else None
    eta = eta0_i[None, :] + U @ params.Gamma.T
    with np.errstate(over="ignore", invalid="ignore"):
        lf = spec.fam.logf(np.broadcast_to(y_i, eta.shape), eta, phi)
    return np.sum(lf, axis=1)


def oracle_marginal(spec, data, params, method="aghq", n_nodes=21, n_draws=100_000,
                    seed=0, scale=1.25) -> ObjectiveValue:
    """Marginal log-likelihood by quadrature or Monte Carlo.

    ``aghq`` places a tensor grid of ``n_nodes`` Gauss-Hermite nodes per
    dimension at the Laplace mode, scaled by the Cholesky factor of the
    inverse curvature.  ``mc`` samples antithetic pairs from a Gaussian
    proposal with the same center and ``scale`` times the Laplace spread;
    unit ``i`` uses its own stream keyed by ``(seed, i)``.
    """
    if method not in ("aghq", "mc"):
        raise ValueError("method must be 'aghq' or 'mc'")
    if method == "aghq" and spec.p > 2:
        raise ValueError("aghq oracle supports p <= 2; use method='mc'")
    p = spec.p
    st = laplace_modes(spec, data, params)
    Lc = np.linalg.cholesky(np.linalg.inv(st.M))
    eta0 = _fixed_eta(spec, params, data.X)
    per_unit = np.empty(spec.n)
    per_se = np.zeros(spec.n)
    if method == "aghq":
        x, w = hermegauss(n_nodes)
        grids = np.meshgrid(*([x] * p), indexing="ij")
        Z = np.stack([g.ravel() for g in grids], axis=1)
        logw = np.sum(np.log(np.stack(np.meshgrid(*([w] * p), indexing="ij"), 0)
                             .reshape(p, -1)), axis=0)
        zz = 0.5 * np.sum(Z * Z, axis=1)
        for i in range(spec.n):
            U = st.u[i] + Z @ Lc[i].T
            h = _unit_logf(spec, params, data.Y[i], eta0[i], U) - 0.5 * np.sum(U * U, axis=1)
            logdet = np.sum(np.log(np.diag(Lc[i])))
            per_unit[i] = -0.5 * p * _LOG_2PI + logdet + special.logsumexp(logw + h + zz)
        return ObjectiveValue(float(np.sum(per_unit)), per_unit)

    half = max(1, n_draws // 2)
    for i in range(spec.n):
        rng = np.random.default_rng([seed, i])
        Z = rng.standard_normal((half, p))
        Z = np.concatenate([Z, -Z])
        U = st.u[i] + scale * Z @ Lc[i].T
        h = _unit_logf(spec, params, data.Y[i], eta0[i], U) - 0.5 * np.sum(U * U, axis=1)
        logdet = p * math.log(scale) + np.sum(np.log(np.diag(Lc[i])))
        lw = h + logdet + 0.5 * np.sum(Z * Z, axis=1)
        ref = np.max(lw)
        wts = np.exp(lw - ref)
        pair = 0.5 * (wts[:half] + wts[half:])
        mean = pair.mean()
        per_unit[i] = ref + math.log(mean)
        per_se[i] = pair.std(ddof=1) / math.sqrt(half) / mean
    return ObjectiveValue(float(np.sum(per_unit)), per_unit, se=float(np.sqrt(np.sum(per_se**2))),
                          per_unit_se=per_se)
