"""Post-fit inference: observed information, Wald intervals, prediction errors,
residuals and variance explained."""
from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field

import numpy as np
from scipy import special
from scipy.stats import chi2

from .model import Layout, _unpack_model, residual_covariance
from .objectives import _fixed_eta, laplace_modes

Z95 = 1.96


@dataclass
class ObservedInformation:
    """Negative Hessian of the fitted objective, stored blockwise.

    ``psi`` is the model block, ``cross[i]`` the model-by-unit-``i`` block
    (``n_model x n_unit``) and ``local[i]`` unit ``i``'s own block.  Units do
    not interact, so the unit-by-unit blocks off the diagonal are zero.
    ``cov_psi`` is the model block of the inverse.
    """

    psi: np.ndarray
    cross: np.ndarray | None
    local: np.ndarray | None
    cov_psi: np.ndarray
    condition: float
    names: list
    notes: list = field(default_factory=list)
    unit_index: np.ndarray | None = None

    def full(self):
        """Dense symmetric matrix in packed-vector order."""
        k = self.psi.shape[0]
        if self.local is None:
            return self.psi.copy()
        n, u = self.local.shape[:2]
        idx = self.unit_index
        if idx is None:
            idx = k + np.arange(n * u).reshape(n, u)
        out = np.zeros((k + n * u, k + n * u))
        out[:k, :k] = self.psi
        for i in range(n):
            s = idx[i]
            out[:k, s] = self.cross[i]
            out[s, :k] = self.cross[i].T
            out[np.ix_(s, s)] = self.local[i]
        return out


def _steps(theta, rel):
    return rel * (1.0 + np.abs(theta))


def hessian_from_gradient(grad, theta, rel_step=1e-5):
    """Symmetrized central-difference Hessian of a function given its gradient."""
    theta = np.asarray(theta, float)
    k = theta.size
    H = np.empty((k, k))
    h = _steps(theta, rel_step)
    for c in range(k):
        e = np.zeros(k)
        e[c] = h[c]
        H[:, c] = (grad(theta + e) - grad(theta - e)) / (2.0 * h[c])
    return 0.5 * (H + H.T)


def _safe_inverse(S, notes, label):
    w = np.linalg.eigvalsh(S)
    cond = float(w[-1] / w[0]) if w[0] > 0 else math.inf
    if w[0] <= 0 or not np.isfinite(cond) or cond > 1e14:
        notes.append(f"{label} is singular or indefinite (smallest eigenvalue {w[0]:.3g}); "
                     f"using the pseudo-inverse")
        return np.linalg.pinv(S, hermitian=True), cond
    return np.linalg.inv(S), cond


def observed_information(fit, rel_step=1e-5) -> ObservedInformation:
    """Observed information at the fitted optimum.

    Columns come from central differences of the analytic gradient with step
    ``rel_step * (1 + |theta|)``.  Model coordinates are perturbed one at a
    time; each local coordinate is perturbed in every unit at once, which is
    exact because units only interact through the model block.  The model
    block of the inverse is the inverse of the Schur complement.
    """
    problem = fit.problem()
    layout = problem.layout
    theta = np.asarray(fit.theta, float)
    notes = []

    def grad(t):
        return problem.value_and_grad(t)[1]

    k = layout.n_model
    h = _steps(theta, rel_step)
    H_cols = np.empty((layout.size, k))
    for c in range(k):
        e = np.zeros(layout.size)
        e[c] = h[c]
        H_cols[:, c] = (grad(theta + e) - grad(theta - e)) / (2.0 * h[c])
    P = -0.5 * (H_cols[:k] + H_cols[:k].T)
    names = layout.names()
    if not layout.variational:
        cov, cond = _safe_inverse(P, notes, "information matrix")
        return ObservedInformation(P, None, None, cov, cond, names, notes)

    blocks = layout.unit_blocks()                  # n x u
    n, u = blocks.shape
    cross = -np.transpose(H_cols[blocks], (0, 2, 1))   # n x k x u (rows model)
    local = np.empty((n, u, u))
    for c in range(u):
        idx = blocks[:, c]
        e = np.zeros(layout.size)
        e[idx] = h[idx]
        diff = grad(theta + e) - grad(theta - e)
        local[:, :, c] = -diff[blocks] / (2.0 * h[idx])[:, None]
    local = 0.5 * (local + np.swapaxes(local, 1, 2))

    wl = np.linalg.eigvalsh(local)
    bad = np.flatnonzero(wl[:, 0] <= 0)
    if bad.size:
        notes.append(f"local information not positive definite for {bad.size} unit(s), "
                     f"first unit {bad[0]}; using pseudo-inverses there")
        Dinv = np.linalg.pinv(local, hermitian=True)
    else:
        Dinv = np.linalg.inv(local)
    S = P - np.einsum("ika,iab,ilb->kl", cross, Dinv, cross)
    S = 0.5 * (S + S.T)
    cov, cond = _safe_inverse(S, notes, "model-block Schur complement")
    return ObservedInformation(P, cross, local, cov, cond, names, notes, blocks)


@dataclass
class InferenceReport:
    names: list
    estimate: np.ndarray
    se: np.ndarray
    ci_lower: np.ndarray
    ci_upper: np.ndarray
    info_condition: float
    notes: list = field(default_factory=list)
    z: float = Z95

    def to_dict(self):
        def clean(a):
            return [None if not np.isfinite(v) else float(v) for v in a]

        return {"names": list(self.names), "estimate": clean(self.estimate),
                "se": clean(self.se), "ci_lower": clean(self.ci_lower),
                "ci_upper": clean(self.ci_upper),
                "info_condition": (float(self.info_condition)
                                   if np.isfinite(self.info_condition) else None),
                "z": self.z, "notes": list(self.notes)}

    def get(self, name):
        i = self.names.index(name)
        return self.estimate[i], self.se[i], self.ci_lower[i], self.ci_upper[i]


def wald_interval(estimate, se, z=Z95):
    estimate = np.asarray(estimate, float)
    se = np.asarray(se, float)
    return estimate - z * se, estimate + z * se


def wald(fit, info: ObservedInformation, z=Z95) -> InferenceReport:
    """Wald intervals for the model parameters.

    Log-scale coordinates (``log_phi``, ``log_Gamma``) get intervals on the
    log scale that are then exponentiated; their reported estimate and
    standard error are on the natural scale (delta method).
    """
    layout = Layout(fit.spec, variational=False)
    theta = np.asarray(fit.theta[:layout.n_model], float)
    var = np.diag(info.cov_psi).copy()
    notes = list(info.notes)
    neg = var < 0
    if np.any(neg):
        notes.append(f"{int(neg.sum())} negative variance(s) reported as NaN")
    se_t = np.sqrt(np.where(neg, np.nan, var))
    lo_t, hi_t = wald_interval(theta, se_t, z)
    est = theta.copy()
    se = se_t.copy()
    lo, hi = lo_t.copy(), hi_t.copy()
    names = []
    for c, name in enumerate(info.names):
        if name.startswith("log_"):
            est[c] = math.exp(theta[c])
            se[c] = est[c] * se_t[c]
            with np.errstate(over="ignore"):
                lo[c], hi[c] = np.exp(lo_t[c]), np.exp(hi_t[c])
            name = name[4:]
        names.append(name)
    return InferenceReport(names, est, se, lo, hi, info.condition, notes, z)


def _nearest_psd(C):
    w, V = np.linalg.eigh(C)
    return (V * np.maximum(w, 0.0)) @ V.T, w[0]


def cmsep(fit, info: ObservedInformation, rel_step=1e-5):
    """Conditional mean squared errors of the predicted latent scores.

    ``CMSEP_i = A_i + Q_i V Q_i^T`` with ``V`` the model block of the inverse
    information and ``Q_i = H_{a_i a_i}^{-1} H_{a_i Psi}``; the other
    variational parameters of unit ``i`` are held at their fitted values.
    For Laplace fits ``A_i`` is the inverse curvature at the mode and ``Q_i``
    the derivative of the mode in the model parameters.  Results that are not
    PSD are projected to the nearest PSD matrix with a warning.
    """
    spec = fit.spec
    p = spec.p
    A = fit.varparams.A
    V = info.cov_psi
    if fit.method == "laplace":
        layout = Layout(spec, variational=False)
        theta = np.asarray(fit.theta, float)
        h = _steps(theta, rel_step)
        base = fit.varparams.a
        Q = np.empty((spec.n, p, layout.n_model))
        for c in range(layout.n_model):
            e = np.zeros(theta.size)
            e[c] = h[c]
            up = laplace_modes(spec, fit.data, _unpack_model(theta + e, layout)[0], u0=base,
                               tol=1e-12).u
            dn = laplace_modes(spec, fit.data, _unpack_model(theta - e, layout)[0], u0=base,
                               tol=1e-12).u
            Q[:, :, c] = (up - dn) / (2.0 * h[c])
    else:
        Haa = info.local[:, :p, :p]
        HaP = np.swapaxes(info.cross[:, :, :p], 1, 2)     # n x p x k
        Q = np.linalg.solve(Haa, HaP)
    out = A + Q @ V @ np.swapaxes(Q, 1, 2)
    out = 0.5 * (out + np.swapaxes(out, 1, 2))
    w = np.linalg.eigvalsh(out)
    bad = np.flatnonzero(w[:, 0] < 0)
    if bad.size:
        warnings.warn(f"CMSEP not PSD for {bad.size} unit(s); projected to nearest PSD",
                      RuntimeWarning, stacklevel=2)
        for i in bad:
            out[i] = _nearest_psd(out[i])[0]
    return out


def cmsep_dominance(fit, regions, tol=1e-10):
    """Boolean per unit: ``tr(CMSEP_i) >= tr(A_i)`` up to ``tol`` relative."""
    tA = np.trace(fit.varparams.A, axis1=1, axis2=2)
    tC = np.trace(regions, axis1=1, axis2=2)
    return tC >= tA * (1.0 - tol)


def fitted_linear_predictor(fit):
    params = fit.params
    return _fixed_eta(fit.spec, params, fit.data.X) + fit.varparams.a @ params.Gamma.T


def dunn_smyth_residuals(fit, seed=0):
    """Randomized quantile residuals ``Phi^{-1}(c)``, ``c ~ U(F(y-), F(y))``.

    Continuous families give ``Phi^{-1}(F(y))``.  Row ``i`` draws its uniforms
    from a stream keyed by ``(seed, i)``, so residuals do not depend on how
    rows are batched.  CDF values are clamped to ``[1e-12, 1 - 1e-12]``.
    """
    spec = fit.spec
    fam = spec.fam
    eta = fitted_linear_predictor(fit)
    phi = None if fit.params.phi is None else fit.params.phi[None, :]
    F, Fl = fam.cdf(fit.data.Y, eta, phi)
    F = np.asarray(F, float)
    Fl = np.asarray(Fl, float)
    jump = F - Fl
    if np.any(jump > 0):
        U = np.stack([np.random.default_rng([seed, i]).random(spec.m) for i in range(spec.n)])
        c = Fl + U * jump
    else:
        c = F
    c = np.clip(c, 1e-12, 1.0 - 1e-12)
    return special.ndtri(c)


def variance_explained(fit_null, fit_cov):
    """``1 - tr(Sigma_cov) / tr(Sigma_null)`` with ``Sigma = Gamma Gamma^T``."""
    t0 = float(np.trace(residual_covariance(fit_null.params)))
    t1 = float(np.trace(residual_covariance(fit_cov.params)))
    if t0 == 0.0:
        raise ValueError("null model has zero residual covariance trace")
    return 1.0 - t1 / t0


@dataclass
class OrdinationOutput:
    scores: np.ndarray
    loadings: np.ndarray
    region_cov: np.ndarray


def ordination(fit, regions=None) -> OrdinationOutput:
    """Predicted latent scores, loadings and prediction covariances."""
    if regions is None:
        regions = cmsep(fit, observed_information(fit))
    return OrdinationOutput(fit.varparams.a.copy(), fit.params.Gamma.copy(), regions)


def ellipse_radius(level=0.95, p=2):
    """Mahalanobis radius of the ``level`` prediction ellipse."""
    return math.sqrt(chi2.ppf(level, p))
