"""Initialization, L-BFGS ascent and multi-start fitting."""
from __future__ import annotations

import math
import time
from dataclasses import asdict, dataclass, field

import numpy as np
from scipy import special

from .model import (Layout, ModelSpec, Parameters, ResponseData, VariationalParams,
                    pack, unpack)
from .objectives import (LaplaceConvergenceError, LaplaceProblem, NonFiniteError,
                         VariationalProblem, _check_va, laplace_modes)
from .families import SeriesError

METHODS = ("eva", "va", "laplace")
_EVAL_ERRORS = (NonFiniteError, LaplaceConvergenceError, SeriesError, FloatingPointError,
                np.linalg.LinAlgError)


class FitError(RuntimeError):
    """No start produced a finite objective."""


@dataclass(frozen=True)
class FitConfig:
    """Optimizer settings.

    ``A_structure=None`` selects ``full`` for p <= 5 and ``diagonal`` otherwise.
    """

    method: str = "eva"
    max_iter: int = 2000
    grad_tol: float = 1e-6
    n_starts: int = 3
    seed: int = 0
    A_structure: str | None = None
    rel_tol: float = 1e-10
    stall_window: int = 5
    memory: int = 10
    precondition: bool | None = None

    def __post_init__(self):
        if self.method not in METHODS:
            raise ValueError(f"method must be one of {METHODS}, got {self.method!r}")
        if self.A_structure not in (None, "full", "diagonal"):
            raise ValueError("A_structure must be 'full' or 'diagonal'")
        if self.grad_tol <= 0 or self.rel_tol <= 0:
            raise ValueError("tolerances must be positive")
        if self.n_starts < 1 or self.max_iter < 1 or self.memory < 1 or self.stall_window < 1:
            raise ValueError("n_starts, max_iter, memory and stall_window must be >= 1")

    def precondition_for(self, method):
        if self.precondition is None:
            return method != "laplace"
        return bool(self.precondition)

    def diagonal_for(self, p):
        if self.A_structure is None:
            return p > 5
        return self.A_structure == "diagonal"

    def to_dict(self):
        return asdict(self)

    @classmethod
    def from_dict(cls, d):
        known = set(cls.__dataclass_fields__)
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown FitConfig keys: {sorted(unknown)}")
        return cls(**d)


@dataclass
class FitResult:
    spec: ModelSpec
    params: Parameters
    varparams: VariationalParams
    objective: float
    converged: bool
    iterations: int
    grad_norm: float
    wall_time_s: float
    method: str = "eva"
    stop_reason: str = ""
    theta: np.ndarray | None = None
    start_index: int = 0
    n_evals: int = 0
    warnings: list = field(default_factory=list)
    config: FitConfig | None = None
    data: ResponseData | None = field(default=None, repr=False)

    def problem(self):
        """The objective that was optimized, rebuilt on the fitted data."""
        if self.method == "laplace":
            return LaplaceProblem(self.spec, self.data)
        return VariationalProblem(self.spec, self.data, self.method,
                                  diagonal=self.varparams.diagonal)

    def to_dict(self, include_time=True):
        out = {
            "method": self.method,
            "spec": self.spec.to_dict(),
            "params": self.params.to_dict(),
            "varparams": self.varparams.to_dict(),
            "objective": self.objective,
            "converged": self.converged,
            "iterations": self.iterations,
            "grad_norm": self.grad_norm,
            "stop_reason": self.stop_reason,
            "start_index": self.start_index,
            "n_evals": self.n_evals,
            "warnings": list(self.warnings),
            "config": None if self.config is None else self.config.to_dict(),
        }
        if include_time:
            out["wall_time_s"] = self.wall_time_s
        return out


# ---------------------------------------------------------------------------
# L-BFGS


@dataclass
class OptResult:
    x: np.ndarray
    f: float
    g: np.ndarray
    iterations: int
    converged: bool
    stop_reason: str
    n_evals: int


class _Counter:
    """Minimization wrapper: negates, counts, and maps evaluation failures to +inf."""

    def __init__(self, fun):
        self.fun = fun
        self.n = 0

    def __call__(self, x):
        self.n += 1
        try:
            with np.errstate(all="ignore"):
                f, g = self.fun(x)
        except _EVAL_ERRORS:
            return math.inf, None
        if not (math.isfinite(f) and np.all(np.isfinite(g))):
            return math.inf, None
        return -f, -g


def _cubic_min(a, fa, da, b, fb, db):
    """Minimizer of the cubic interpolating two points with slopes, or None."""
    d1 = da + db - 3.0 * (fa - fb) / (a - b)
    rad = d1 * d1 - da * db
    if rad < 0:
        return None
    d2 = math.copysign(math.sqrt(rad), b - a)
    den = db - da + 2.0 * d2
    if den == 0:
        return None
    x = b - (b - a) * (db + d2 - d1) / den
    return x if math.isfinite(x) else None


def _line_search(fun, x, F0, G0, d, alpha, c1=1e-4, c2=0.9, max_evals=40):
    """Strong-Wolfe line search (bracketing then zoom).

    Returns ``(alpha, F, G)`` of an accepted point, or ``None``.  Non-finite
    trial values shrink the step towards the last finite point.
    """
    dF0 = float(G0 @ d)
    a_prev, F_prev, dF_prev = 0.0, F0, dF0
    best = None
    evals = 0

    def evaluate(a):
        F, G = fun(x + a * d)
        return F, G, (float(G @ d) if G is not None else math.nan)

    def zoom(lo, Flo, dlo, hi, Fhi, dhi):
        nonlocal evals, best
        while evals < max_evals:
            width = hi - lo
            a = None
            if math.isfinite(Fhi) and math.isfinite(dhi):
                a = _cubic_min(lo, Flo, dlo, hi, Fhi, dhi)
            lo_b, hi_b = sorted((lo + 0.1 * width, hi - 0.1 * width))
            if a is None or not lo_b <= a <= hi_b:
                a = lo + 0.5 * width
            F, G, dF = evaluate(a)
            evals += 1
            if not math.isfinite(F) or F > F0 + c1 * a * dF0 or F >= Flo:
                hi, Fhi, dhi = a, F, dF
            else:
                if best is None or F < best[1]:
                    best = (a, F, G)
                if abs(dF) <= -c2 * dF0:
                    return a, F, G
                if dF * (hi - lo) >= 0:
                    hi, Fhi, dhi = lo, Flo, dlo
                lo, Flo, dlo = a, F, dF
            if abs(hi - lo) <= 1e-16 * max(1.0, abs(lo)):
                break
        return best

    a = alpha
    a_max = 1e10
    first = True
    while evals < max_evals:
        F, G, dF = evaluate(a)
        evals += 1
        if not math.isfinite(F):
            a = a_prev + 0.25 * (a - a_prev)
            continue
        if F > F0 + c1 * a * dF0 or (not first and F >= F_prev):
            return zoom(a_prev, F_prev, dF_prev, a, F, dF)
        if best is None or F < best[1]:
            best = (a, F, G)
        if abs(dF) <= -c2 * dF0:
            return a, F, G
        if dF >= 0:
            return zoom(a, F, dF, a_prev, F_prev, dF_prev)
        a_prev, F_prev, dF_prev = a, F, dF
        a = min(2.0 * a, a_max)
        first = False
    return best


def lbfgs_maximize(fun, x0, max_iter=2000, grad_tol=1e-6, rel_tol=1e-10, stall_window=5,
                   memory=10, precond=None) -> OptResult:
    """Maximize ``fun`` (returning value and gradient) by L-BFGS.

    Stops when the gradient infinity-norm falls to ``grad_tol`` (``"gradient"``),
    when the objective changes by less than ``rel_tol`` relatively over
    ``stall_window`` iterations (``"relative_change"``), when no acceptable
    step exists (``"line_search"``) or at ``max_iter``.  Only the first two
    count as converged.  Every accepted step increases the objective.

    ``precond`` is an optional positive vector used as the diagonal of the
    initial inverse Hessian (rescaled each iteration by the usual
    ``s^T y / y^T D y`` factor).
    """
    fn = _Counter(fun)
    x = np.array(x0, dtype=float)
    F, G = fn(x)
    if not math.isfinite(F):
        raise FitError("objective is not finite at the starting point")
    S, Yv, rho = [], [], []
    hist = [F]
    reason, converged, it = "max_iter", False, 0
    for it in range(1, max_iter + 1):
        gn = float(np.max(np.abs(G))) if G.size else 0.0
        if gn <= grad_tol:
            reason, converged, it = "gradient", True, it - 1
            break
        # two-loop recursion
        q = G.copy()
        alphas = []
        for s, y, r in zip(reversed(S), reversed(Yv), reversed(rho)):
            al = r * (s @ q)
            alphas.append(al)
            q -= al * y
        if precond is not None:
            q *= precond
            if S:
                q *= (S[-1] @ Yv[-1]) / (Yv[-1] @ (precond * Yv[-1]))
        elif S:
            q *= (S[-1] @ Yv[-1]) / (Yv[-1] @ Yv[-1])
        for (s, y, r), al in zip(zip(S, Yv, rho), reversed(alphas)):
            b = r * (y @ q)
            q += (al - b) * s
        d = -q
        steep = -G if precond is None else -precond * G
        if not (d @ G < 0):
            d = steep
            S, Yv, rho = [], [], []
        step0 = 1.0 if (S or precond is not None) else min(1.0, 1.0 / max(gn, 1e-12))
        res = _line_search(fn, x, F, G, d, step0)
        if res is None and S:
            S, Yv, rho = [], [], []
            d = steep
            res = _line_search(fn, x, F, G, d, 1.0 if precond is not None
                               else min(1.0, 1.0 / max(gn, 1e-12)))
        if res is None or not res[1] <= F:
            reason, it = "line_search", it - 1
            break
        a, Fn, Gn = res
        s = a * d
        y = Gn - G
        sy = s @ y
        if sy > 1e-12 * math.sqrt((s @ s) * (y @ y)):
            S.append(s)
            Yv.append(y)
            rho.append(1.0 / sy)
            if len(S) > memory:
                S.pop(0), Yv.pop(0), rho.pop(0)
        x, F, G = x + s, Fn, Gn
        hist.append(F)
        if len(hist) > stall_window:
            old = hist[-1 - stall_window]
            if abs(old - F) <= rel_tol * max(1.0, abs(F)):
                reason, converged = "relative_change", True
                break
    else:
        it = max_iter
    gn = float(np.max(np.abs(G))) if G.size else 0.0
    if reason == "max_iter" and gn <= grad_tol:
        reason, converged = "gradient", True
    return OptResult(x=x, f=-F, g=-G, iterations=it, converged=converged, stop_reason=reason,
                     n_evals=fn.n)


def diagonal_curvature(problem, theta, rel_step=1e-4):
    """Diagonal of the Hessian by coloured central differences of the gradient."""
    theta = np.asarray(theta, float)
    h = rel_step * (1.0 + np.abs(theta))
    out = np.zeros_like(theta)
    for g in problem.layout.coordinate_groups():
        e = np.zeros_like(theta)
        e[g] = h[g]
        gp = problem.value_and_grad(theta + e)[1]
        gm = problem.value_and_grad(theta - e)[1]
        out[g] = (gp[g] - gm[g]) / (2.0 * h[g])
    return out


def _preconditioner(problem, theta):
    """Inverse absolute curvature, floored relative to its median; None on failure."""
    try:
        with np.errstate(all="ignore"):
            d = np.abs(diagonal_curvature(problem, theta))
    except _EVAL_ERRORS:
        return None
    if not np.all(np.isfinite(d)) or not np.any(d > 0):
        return None
    floor = 1e-3 * np.median(d[d > 0])
    return 1.0 / np.maximum(d, floor)


# ---------------------------------------------------------------------------
# Initialization


_DET_RESP_EPS = 1e-8


def _link(family, mu):
    """Link function g(mu) on clipped means."""
    if family in ("gaussian-identity",):
        return mu
    if family in ("poisson-log", "negbinomial-log", "tweedie-log"):
        return np.log(mu)
    if family == "bernoulli-probit":
        return special.ndtri(mu)
    return special.logit(mu)


def _mu_eta(family, eta, mu):
    """d mu / d eta."""
    if family == "gaussian-identity":
        return np.ones_like(eta)
    if family in ("poisson-log", "negbinomial-log", "tweedie-log"):
        return mu
    if family == "bernoulli-probit":
        return np.exp(-0.5 * eta * eta) / math.sqrt(2.0 * math.pi)
    return mu * (1.0 - mu)


def _glm_fits(spec, data, phi, max_iter=50):
    """Per-response GLM fits by damped Newton, batched over responses.

    Returns ``(beta0, B, failed)`` where ``failed`` flags responses whose fit
    diverged (those fall back to zero slopes).
    """
    fam = spec.fam
    Y, X = data.Y, data.X
    n, m, q = spec.n, spec.m, spec.q
    Z = np.hstack([np.ones((n, 1)), X])                    # n x (q+1)
    ybar = np.clip(Y.mean(axis=0), 1e-3, None)
    if fam.name in ("bernoulli-logit", "bernoulli-probit", "beta-logit"):
        ybar = np.clip(Y.mean(axis=0), 1e-3, 1 - 1e-3)
    if fam.name == "gaussian-identity":
        ybar = Y.mean(axis=0)
    coef = np.zeros((m, q + 1))
    coef[:, 0] = np.clip(_link(fam.name, ybar), -5.0, 5.0)
    phi_b = None if phi is None else phi[None, :]

    def objective(c):
        eta = Z @ c.T
        with np.errstate(all="ignore"):
            return np.sum(fam.logf(Y, eta, phi_b), axis=0)

    f = objective(coef)
    eye = np.eye(q + 1)
    for _ in range(max_iter):
        eta = Z @ coef.T
        with np.errstate(all="ignore"):
            d = fam.derivs(Y, eta, phi_b)
        grad = d.d1.T @ Z                                   # m x (q+1)
        w = np.maximum(-d.d2, 1e-10)
        H = np.einsum("ij,ik,il->jkl", w, Z, Z) + 1e-8 * eye
        step = np.linalg.solve(H, grad[..., None])[..., 0]
        if np.max(np.abs(grad)) < 1e-8 * n:
            break
        t = np.ones(m)
        todo = np.ones(m, bool)
        new = coef.copy()
        for _ in range(30):
            cand = coef + t[:, None] * step
            fc = objective(cand)
            ok = todo & np.isfinite(fc) & (fc >= f - 1e-12 * np.abs(f))
            new[ok] = cand[ok]
            f = np.where(ok, fc, f)
            todo &= ~ok
            if not todo.any():
                break
            t[todo] *= 0.5
        if np.max(np.abs(new - coef)) < 1e-10:
            coef = new
            break
        coef = new
    failed = ~np.all(np.isfinite(coef), axis=1) | (np.max(np.abs(coef), axis=1) > 15.0)
    return coef, failed


def _moment_phi(family, Y, mu, nu, eps=1e-2):
    with np.errstate(all="ignore"):
        if family == "gaussian-identity":
            phi = np.sqrt(np.mean((Y - mu) ** 2, axis=0))
            return np.maximum(phi, 1e-3)
        if family == "negbinomial-log":
            phi = np.mean(((Y - mu) ** 2 - mu) / mu**2, axis=0)
            return np.maximum(np.nan_to_num(phi, nan=eps), eps)
        if family == "tweedie-log":
            phi = np.mean((Y - mu) ** 2 / mu**nu, axis=0)
            return np.clip(np.nan_to_num(phi, nan=1.0), 0.05, 50.0)
        if family == "beta-logit":
            v = np.mean((Y - mu) ** 2 / (mu * (1.0 - mu)), axis=0)
            return np.maximum(np.nan_to_num(1.0 / v - 1.0, nan=1.0), 0.1)
    return None


def _initial_values(spec: ModelSpec, data: ResponseData, diagonal=False):
    """Deterministic starting point; returns ``(params, varparams, warnings)``."""
    fam = spec.fam
    Y = data.Y
    n, m, p = spec.n, spec.m, spec.p
    warnings = []
    phi0 = np.ones(m) if spec.has_dispersion else None
    if fam.name == "gaussian-identity":
        phi0 = np.maximum(Y.std(axis=0), 1e-3)
    coef, failed = _glm_fits(spec, data, phi0)

    degenerate = np.ptp(Y, axis=0) <= _DET_RESP_EPS
    for j in np.flatnonzero(degenerate | failed):
        yb = Y[:, j].mean()
        if fam.name in ("gaussian-identity",):
            b0 = yb
        elif fam.name in ("bernoulli-logit", "bernoulli-probit", "beta-logit"):
            with np.errstate(all="ignore"):
                b0 = _link(fam.name, np.clip(yb, 0.0, 1.0))
        else:
            with np.errstate(divide="ignore"):
                b0 = math.log(yb) if yb > 0 else -math.inf
        coef[j] = 0.0
        coef[j, 0] = float(np.clip(np.nan_to_num(b0, nan=0.0, posinf=5.0, neginf=-5.0),
                                   -5.0, 5.0))
        kind = "constant" if degenerate[j] else "divergent GLM fit"
        warnings.append(f"response {j}: {kind}; intercept capped at {coef[j, 0]:.3g}, "
                        f"slopes set to 0")
    beta0 = coef[:, 0].copy()
    B = coef[:, 1:].copy()
    eta = data.X @ B.T + beta0
    mu = fam.mean(eta)
    phi = None
    if spec.has_dispersion:
        phi = _moment_phi(fam.name, Y, mu, spec.tweedie_power)
        if fam.name == "negbinomial-log":
            # one refit with the moment dispersion
            coef2, failed2 = _glm_fits(spec, data, phi)
            good = ~(failed2 | degenerate | failed)
            beta0[good], B[good] = coef2[good, 0], coef2[good, 1:]
            eta = data.X @ B.T + beta0
            mu = fam.mean(eta)

    # working residuals -> correlation -> loadings
    with np.errstate(all="ignore"):
        R = (Y - mu) / _mu_eta(fam.name, eta, mu)
    R = np.clip(np.nan_to_num(R, nan=0.0, posinf=0.0, neginf=0.0), -10.0, 10.0)
    sd = R.std(axis=0)
    Rs = np.where(sd > 0, (R - R.mean(axis=0)) / np.where(sd > 0, sd, 1.0), 0.0)
    C = Rs.T @ Rs / n
    w, V = np.linalg.eigh(C)
    order = np.argsort(w)[::-1][:p]
    G = V[:, order] * np.sqrt(np.maximum(w[order], 1e-6))
    Q, Rq = np.linalg.qr(G[:p].T)
    G = G @ Q
    sign = np.sign(np.diag(G[:p]))
    sign[sign == 0] = 1.0
    G = G * sign
    G[:p] = np.tril(G[:p])
    idx = np.arange(p)
    G[idx, idx] = np.maximum(G[idx, idx], 0.1)
    G *= 0.5

    alpha = np.zeros(n) if spec.row_effects else None
    params = Parameters(beta0=beta0, B=B, Gamma=G, phi=phi, alpha=alpha,
                        nu=spec.tweedie_power)
    L = np.broadcast_to(math.sqrt(0.5) * np.eye(p), (n, p, p)).copy()
    var = VariationalParams(a=np.zeros((n, p)), L=L, diagonal=diagonal)
    return params, var, warnings


def initialize(spec: ModelSpec, data: ResponseData, seed: int = 0, start: int = 0,
               diagonal: bool = False):
    """Starting values ``(Parameters, VariationalParams)`` for a fit.

    Start 0 is the deterministic GLM-based point; later starts add
    ``N(0, 0.05^2)`` jitter to the packed vector from a stream keyed by
    ``(seed, start)``.
    """
    params, var, _ = _initial_values(spec, data, diagonal)
    if start == 0:
        return params, var
    return _jitter(spec, params, var, seed, start, diagonal)


def _jitter(spec, params, var, seed, start, diagonal):
    layout = Layout(spec, variational=True, diagonal=diagonal)
    theta = pack(params, var, spec)
    rng = np.random.default_rng([seed, start])
    theta = theta + rng.normal(0.0, 0.05, size=theta.size)
    return unpack(theta, spec, layout=layout)


# ---------------------------------------------------------------------------
# Fitting


def _vars_from_laplace(spec, data, params):
    st = laplace_modes(spec, data, params)
    L = np.linalg.cholesky(np.linalg.inv(st.M))
    return VariationalParams(a=st.u, L=L, diagonal=False)


# Loadings this large act on standard-normal scores and saturate any link.
LOADING_WARN = 100.0


def fit(spec: ModelSpec, data: ResponseData, config: FitConfig | None = None) -> FitResult:
    """Maximize the configured objective from ``config.n_starts`` starting points."""
    config = config or FitConfig()
    data.validate(spec)
    if config.method == "va":
        _check_va(spec)
    diagonal = config.diagonal_for(spec.p)
    t0 = time.perf_counter()
    base_params, base_var, warnings = _initial_values(spec, data, diagonal)
    if config.method == "laplace":
        problem = LaplaceProblem(spec, data)
    else:
        problem = VariationalProblem(spec, data, config.method, diagonal=diagonal)
    layout = problem.layout

    results = []
    n_evals = 0
    for start in range(config.n_starts):
        if start == 0:
            P, V = base_params, base_var
        else:
            P, V = _jitter(spec, base_params, base_var, config.seed, start, diagonal)
        theta0 = pack(P, V if layout.variational else None, spec)
        if config.method == "laplace":
            problem = LaplaceProblem(spec, data)     # fresh warm-start cache per start
        precond = (_preconditioner(problem, theta0)
                   if config.precondition_for(config.method) else None)
        try:
            res = lbfgs_maximize(problem.value_and_grad, theta0, max_iter=config.max_iter,
                                 grad_tol=config.grad_tol, rel_tol=config.rel_tol,
                                 stall_window=config.stall_window, memory=config.memory,
                                 precond=precond)
        except FitError:
            warnings.append(f"start {start}: objective not finite at initial values")
            continue
        n_evals += res.n_evals
        gn = float(np.max(np.abs(res.g))) if res.g.size else 0.0
        results.append((res, gn, start))
    if not results:
        raise FitError("objective is not finite at any starting point")
    res, gn, start = min(results, key=lambda r: (-r[0].f, r[1], r[2]))
    params, var = unpack(res.x, spec, layout=layout)
    if var is None:
        var = _vars_from_laplace(spec, data, params)
    big = float(np.max(np.abs(params.Gamma))) if params.Gamma.size else 0.0
    if big > LOADING_WARN:
        warnings.append(f"largest |loading| is {big:.3g}; the objective may be unbounded "
                        f"along a loading ray for this family")
    wall = time.perf_counter() - t0
    return FitResult(spec=spec, params=params, varparams=var, objective=float(res.f),
                     converged=res.converged, iterations=res.iterations, grad_norm=gn,
                     wall_time_s=wall, method=config.method, stop_reason=res.stop_reason,
                     theta=res.x, start_index=start, n_evals=n_evals, warnings=warnings,
                     config=config, data=data)
