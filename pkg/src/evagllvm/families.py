"""Response families on the linear-predictor scale.

Every family exposes the conditional log-density ``log f(y | eta, phi)`` and
its first three derivatives in ``eta``, together with the derivatives of
``log f``, ``d1`` and ``d2`` in the dispersion ``phi``.  These are the only
pieces the objectives need: the curvature of ``log f`` in the latent scores
``u_i`` is ``d2 * lambda_j lambda_j^T`` for any family and link.

All functions are vectorised over numpy arrays and broadcast ``y``, ``eta``
and ``phi`` against each other.
"""
from __future__ import annotations

import math
from typing import NamedTuple

import numpy as np
from scipy import special

FAMILY_NAMES = (
    "gaussian-identity",
    "poisson-log",
    "negbinomial-log",
    "bernoulli-logit",
    "bernoulli-probit",
    "tweedie-log",
    "beta-logit",
)

_LOG_2PI = math.log(2.0 * math.pi)
_SQRT_2_OVER_PI = math.sqrt(2.0 / math.pi)
# below this the probit Mills-ratio quantities switch to a continued fraction
_PROBIT_CF_SWITCH = -8.0
_PROBIT_CF_DEPTH = 80


class DomainError(ValueError):
    """Raised when a response or parameter lies outside a family's support."""


class SeriesError(RuntimeError):
    """Raised when the Tweedie series fails to converge within its term cap."""


class FamilyEval(NamedTuple):
    logf: np.ndarray
    d1: np.ndarray
    d2: np.ndarray


class Derivs(NamedTuple):
    """Log-density with derivatives in ``eta`` (d1..d3) and in ``phi``."""

    logf: np.ndarray
    d1: np.ndarray
    d2: np.ndarray
    d3: np.ndarray
    logf_phi: np.ndarray
    d1_phi: np.ndarray
    d2_phi: np.ndarray


def _expit_pair(eta):
    # mu and 1 - mu, both without cancellation
    return special.expit(eta), special.expit(-eta)


class Family:
    """Base class; subclasses implement the closed forms."""

    name: str = ""
    has_dispersion: bool = False
    discrete: bool = False

    def check_support(self, y):
        y = np.asarray(y, dtype=float)
        if not np.all(np.isfinite(y)):
            raise DomainError(f"{self.name}: responses must be finite")
        return y

    def check_phi(self, phi):
        if not self.has_dispersion:
            return None
        phi = np.asarray(phi, dtype=float)
        if not np.all(np.isfinite(phi)) or np.any(phi <= 0):
            raise DomainError(f"{self.name}: dispersion must be positive and finite")
        return phi

    def mean(self, eta):
        raise NotImplementedError

    def variance(self, mu, phi=None):
        raise NotImplementedError

    def logf(self, y, eta, phi=None):
        return self.derivs(y, eta, phi).logf

    def derivs(self, y, eta, phi=None) -> Derivs:
        raise NotImplementedError

    def cdf(self, y, eta, phi=None):
        """Return ``(F(y), F(y-))``."""
        raise NotImplementedError

    def sample(self, rng, eta, phi=None):
        raise NotImplementedError

    def __repr__(self):
        return f"{type(self).__name__}()"


class Gaussian(Family):
    """Normal responses, identity link; ``phi`` is the standard deviation."""

    name = "gaussian-identity"
    has_dispersion = True

    def mean(self, eta):
        return np.asarray(eta, dtype=float)

    def variance(self, mu, phi=None):
        return np.broadcast_to(np.asarray(phi, dtype=float) ** 2, np.shape(mu))

    def derivs(self, y, eta, phi=None):
        y, eta, phi = np.broadcast_arrays(np.asarray(y, float), np.asarray(eta, float),
                                          np.asarray(phi, float))
        r = y - eta
        iv = 1.0 / phi**2
        logf = -0.5 * _LOG_2PI - np.log(phi) - 0.5 * r * r * iv
        d1 = r * iv
        d2 = -iv
        zero = np.zeros_like(r)
        return Derivs(logf, d1, d2, zero,
                      -1.0 / phi + r * r * iv / phi,
                      -2.0 * r * iv / phi,
                      2.0 * iv / phi)

    def cdf(self, y, eta, phi=None):
        F = special.ndtr((np.asarray(y, float) - eta) / phi)
        return F, F

    def sample(self, rng, eta, phi=None):
        eta = np.asarray(eta, float)
        return rng.normal(eta, np.broadcast_to(phi, eta.shape))


def _check_counts(fam, y):
    y = Family.check_support(fam, y)
    if np.any(y < 0) or np.any(y != np.floor(y)):
        raise DomainError(f"{fam.name}: responses must be non-negative integers")
    return y


class Poisson(Family):
    name = "poisson-log"
    discrete = True

    def check_support(self, y):
        return _check_counts(self, y)

    def mean(self, eta):
        with np.errstate(over="ignore"):
            return np.exp(eta)

    def variance(self, mu, phi=None):
        return np.asarray(mu, float)

    def derivs(self, y, eta, phi=None):
        y, eta = np.broadcast_arrays(np.asarray(y, float), np.asarray(eta, float))
        with np.errstate(over="ignore"):
            mu = np.exp(eta)
        zero = np.zeros_like(mu)
        return Derivs(y * eta - mu - special.gammaln(y + 1.0), y - mu, -mu, -mu,
                      zero, zero, zero)

    def cdf(self, y, eta, phi=None):
        mu = self.mean(eta)
        y = np.asarray(y, float)
        return special.pdtr(y, mu), np.where(y > 0, special.pdtr(y - 1.0, mu), 0.0)

    def sample(self, rng, eta, phi=None):
        return rng.poisson(self.mean(eta)).astype(float)


class NegativeBinomial(Family):
    """NB2 counts with log link; ``Var(y) = mu + phi mu^2``."""

    name = "negbinomial-log"
    has_dispersion = True
    discrete = True

    def check_support(self, y):
        return _check_counts(self, y)

    def mean(self, eta):
        with np.errstate(over="ignore"):
            return np.exp(eta)

    def variance(self, mu, phi=None):
        return mu + phi * mu**2

    def derivs(self, y, eta, phi=None):
        y, eta, phi = np.broadcast_arrays(np.asarray(y, float), np.asarray(eta, float),
                                          np.asarray(phi, float))
        # below 1e-300 the density is Poisson to double precision; the floor
        # keeps r finite when phi is subnormal or zero
        phi = np.maximum(phi, 1e-300)
        r = 1.0 / phi
        t = eta + np.log(phi)
        sig, sigc = _expit_pair(t)          # phi mu / (1 + phi mu) and its complement
        sp = np.logaddexp(0.0, t)           # log(1 + phi mu)
        with np.errstate(over="ignore"):
            mu = np.exp(eta)
            x = np.exp(np.minimum(t, 700.0))
        sr = mu * sigc                      # sig / phi = mu / (1 + phi mu)
        # r * log(1 + phi mu) without 0/0 as phi mu -> 0
        small = x < 1.0
        rsp = _split(small, lambda m, v, s_, r_: m * _log1p_over(v),
                     lambda m, v, s_, r_: s_ * r_, mu, x, sp, r)
        big = r >= _NB_ASYMP
        D, E2 = _nb_pochhammer(y, r, big)
        logf = D - special.gammaln(y + 1.0) + y * eta - y * sp - rsp
        d1 = y * sigc - sr
        d2 = -(y * sig + sr) * sigc
        d3 = d2 * (sigc - sig)
        # d log f / d phi = -r^2 E + r^2 (log(1+x) - x/(1+x)) - y sig r
        with np.errstate(invalid="ignore", over="ignore"):
            r2h = _split(small, lambda m, v, s_, g, r_: m * m * _h_over_x2(v),
                         lambda m, v, s_, g, r_: r_ * r_ * (s_ - g), mu, x, sp, sig, r)
        logf_phi = -E2 + r2h - y * sr
        d1_phi = sr * (sr - y * sigc)
        d2_phi = 2.0 * sr * sr * sigc - y * sr * sigc * (sigc - sig)
        return Derivs(logf, d1, d2, d3, logf_phi, d1_phi, d2_phi)

    def cdf(self, y, eta, phi=None):
        mu = self.mean(eta)
        y = np.asarray(y, float)
        n = 1.0 / np.asarray(phi, float)
        p = 1.0 / (1.0 + phi * mu)
        F = _nb_cdf(y, n, p)
        Fl = np.where(y > 0, _nb_cdf(y - 1.0, n, p), 0.0)
        return F, Fl

    def sample(self, rng, eta, phi=None):
        mu = self.mean(eta)
        phi = np.broadcast_to(phi, mu.shape)
        return rng.negative_binomial(1.0 / phi, 1.0 / (1.0 + phi * mu)).astype(float)


# Beyond this size r = 1/phi the NB gamma-function differences switch to
# Stirling-series forms that stay accurate as phi -> 0.
_NB_ASYMP = 10.0
# Bernoulli-number coefficients of the Stirling corrections
_S_COEF = (1 / 12, -1 / 360, 1 / 1260, -1 / 1680, 1 / 1188, -691 / 360360, 1 / 156)
_R_COEF = (1 / 12, -1 / 120, 1 / 252, -1 / 240, 1 / 132, -691 / 32760, 1 / 12)


def _series_small(x, coefs):
    out = np.zeros_like(x)
    for c in coefs[::-1]:
        out = out * x + c
    return out


# (log1p(x) - x) / x^2 = sum_{k>=0} (-1)^(k+1) x^k / (k+2)
_K2 = tuple((-1.0) ** (k + 1) / (k + 2) for k in range(18))
# (log1p(x) - x/(1+x)) / x^2 = sum_{k>=0} (-1)^k (k+1) x^k / (k+2)
_HX2 = tuple((-1.0) ** k * (k + 1) / (k + 2) for k in range(18))


def _split(mask, f_true, f_false, *arrays):
    """Evaluate ``f_true`` where ``mask`` holds and ``f_false`` elsewhere, on subsets only."""
    out = np.empty(mask.shape)
    if mask.all():
        out[...] = f_true(*arrays)
    elif not mask.any():
        out[...] = f_false(*arrays)
    else:
        out[mask] = f_true(*(x[mask] for x in arrays))
        nm = ~mask
        out[nm] = f_false(*(x[nm] for x in arrays))
    return out


def _log1p_minus_x_over_x2(w):
    w = np.asarray(w, float)
    return _split(w < 0.1, lambda v: _series_small(v, _K2),
                  lambda v: (np.log1p(v) - v) / (v * v), w)


def _h_over_x2(x):
    x = np.asarray(x, float)
    return _split(x < 0.1, lambda v: _series_small(v, _HX2),
                  lambda v: (np.log1p(v) - v / (1.0 + v)) / (v * v), x)


def _log1p_over(x):
    x = np.asarray(x, float)
    return _split(x < 1e-8, lambda v: 1.0 - 0.5 * v, lambda v: np.log1p(v) / v, x)


def _stirling_S(z):
    iz = 1.0 / z
    iz2 = iz * iz
    return iz * _series_small(iz2, _S_COEF)


def _stirling_R_scaled(z):
    """``z^2 R(z)``; finite for any ``z``, unlike ``R`` times ``z^2``."""
    iz = 1.0 / z
    return _series_small(iz * iz, _R_COEF)


def _nb_pochhammer(y, r, big):
    """``D = lgamma(y+r) - lgamma(r) - y log r`` and ``r^2 (psi(y+r) - psi(r) - y/r)``."""

    def asymptotic(y, r):
        w = y / r
        L = np.log1p(w)
        k2 = _log1p_minus_x_over_x2(w)
        z = y + r
        D = y * w * k2 + (y - 0.5) * L + _stirling_S(z) - _stirling_S(r)
        # r^2 (R(r) - R(z)) with r^2 R(z) = (r/z)^2 z^2 R(z), so r^2 never overflows
        E = y * y * k2 + r * y / (2.0 * z) + _stirling_R_scaled(r) \
            - (r / z) ** 2 * _stirling_R_scaled(z)
        return D, E

    def direct(y, r):
        D = special.gammaln(y + r) - special.gammaln(r) - y * np.log(r)
        E = r * r * (special.digamma(y + r) - special.digamma(r)) - y * r
        return D, E

    D = np.empty(big.shape)
    E = np.empty(big.shape)
    for mask, f in ((big, asymptotic), (~big, direct)):
        if mask.all():
            D[...], E[...] = f(y, r)
        elif mask.any():
            D[mask], E[mask] = f(y[mask], r[mask])
    return D, E

def _nb_cdf(y, n, p):
    # P(Y <= y) = I_p(n, y + 1) for real-valued size n
    y = np.asarray(y, float)
    out = special.betainc(n, np.maximum(y, 0.0) + 1.0, p)
    return np.where(y < 0, 0.0, out)


class _Bernoulli(Family):
    discrete = True

    def check_support(self, y):
        y = super().check_support(y)
        if np.any((y != 0) & (y != 1)):
            raise DomainError(f"{self.name}: responses must be 0 or 1")
        return y

    def variance(self, mu, phi=None):
        return mu * (1.0 - mu)

    def _mu_pair(self, eta):
        raise NotImplementedError

    def cdf(self, y, eta, phi=None):
        y = np.asarray(y, float)
        _, one_minus = self._mu_pair(eta)
        F = np.where(y >= 1, 1.0, one_minus)
        Fl = np.where(y >= 1, one_minus, 0.0)
        return F, Fl

    def sample(self, rng, eta, phi=None):
        mu, _ = self._mu_pair(eta)
        return (rng.random(np.shape(mu)) < mu).astype(float)


class BernoulliLogit(_Bernoulli):
    name = "bernoulli-logit"

    def mean(self, eta):
        return special.expit(eta)

    def _mu_pair(self, eta):
        return _expit_pair(np.asarray(eta, float))

    def derivs(self, y, eta, phi=None):
        y, eta = np.broadcast_arrays(np.asarray(y, float), np.asarray(eta, float))
        mu, muc = _expit_pair(eta)
        v = mu * muc
        zero = np.zeros_like(mu)
        return Derivs(y * eta - np.logaddexp(0.0, eta), y - mu, -v, -v * (muc - mu),
                      zero, zero, zero)


def _probit_pieces(x):
    """Mills ratio ``m = phi(x)/Phi(x)``, ``c = x + m`` and ``m''(x)``.

    For ``x`` below the switch point the differences ``x + m`` and the
    bracket in ``m''`` cancel catastrophically, so they are taken from the
    continued fraction ``T_k = k / (t + T_{k+1})`` with ``t = -x``, where
    ``c = T_1`` and ``m'' = m c^2 T_2 (T_3 - T_2)``.
    """
    x = np.asarray(x, float)
    m = np.empty_like(x)
    c = np.empty_like(x)
    m2 = np.empty_like(x)
    lo = x < _PROBIT_CF_SWITCH
    hi = ~lo
    if np.any(hi):
        xh = x[hi]
        with np.errstate(over="ignore"):
            mh = _SQRT_2_OVER_PI / special.erfcx(-xh / math.sqrt(2.0))
        ch = xh + mh
        m[hi] = mh
        c[hi] = ch
        m2[hi] = mh * (ch * (xh + 2.0 * mh) - 1.0)
    if np.any(lo):
        t = -x[lo]
        T = np.zeros_like(t)
        T2 = T3 = T
        for k in range(_PROBIT_CF_DEPTH, 0, -1):
            T = k / (t + T)
            if k == 3:
                T3 = T
            elif k == 2:
                T2 = T
        cl = T
        ml = t + cl
        m[lo] = ml
        c[lo] = cl
        m2[lo] = ml * cl * cl * T2 * (T3 - T2)
    return m, c, m2


class BernoulliProbit(_Bernoulli):
    name = "bernoulli-probit"

    def mean(self, eta):
        return special.ndtr(eta)

    def _mu_pair(self, eta):
        eta = np.asarray(eta, float)
        return special.ndtr(eta), special.ndtr(-eta)

    def derivs(self, y, eta, phi=None):
        y, eta = np.broadcast_arrays(np.asarray(y, float), np.asarray(eta, float))
        s = 2.0 * y - 1.0
        x = s * eta
        m, c, m2 = _probit_pieces(x)
        zero = np.zeros_like(m)
        return Derivs(special.log_ndtr(x), s * m, -m * c, s * m2, zero, zero, zero)


def _tweedie_alpha(nu):
    return (2.0 - nu) / (nu - 1.0)


def _tweedie_log_base(y, phi, nu):
    """Per-term log multiplier: log w_k = k * base - lgamma(k+1) - lgamma(k alpha)."""
    a = _tweedie_alpha(nu)
    return (a * np.log(y) - a * math.log(nu - 1.0) - (1.0 + a) * np.log(phi)
            - math.log(2.0 - nu))


def _tweedie_series(y, phi, nu, rtol=1e-12, max_terms=10**6):
    """Return ``(log W, E[k])`` for the Bessel-type series, ``y > 0``.

    The summand is log-concave in ``k``, so the sum is taken over a window
    around the dominant index that is widened until the geometric bound on
    each discarded tail falls below ``rtol`` relative to the partial sum.
    """
    y, phi = np.broadcast_arrays(np.asarray(y, float), np.asarray(phi, float))
    shape = y.shape
    y = y.ravel()
    phi = phi.ravel()
    if np.any(y <= 0):
        raise DomainError("tweedie series requires y > 0")
    a = _tweedie_alpha(nu)
    base = _tweedie_log_base(y, phi, nu)
    kstar = np.maximum(1.0, np.round(y ** (2.0 - nu) / (phi * (2.0 - nu))))
    log_rtol = math.log(rtol)
    half = 8
    while True:
        lo = np.maximum(1.0, kstar - half)
        width = int(np.max(kstar + half - lo)) + 1
        if width > max_terms:
            raise SeriesError(
                f"tweedie series did not converge within {max_terms} terms "
                f"(max dominant index {kstar.max():.3g}, nu={nu})")
        k = lo[:, None] + np.arange(width)[None, :]
        hi_k = (kstar + half)[:, None]
        valid = k <= hi_k
        logt = k * base[:, None] - special.gammaln(k + 1.0) - special.gammaln(k * a)
        logt = np.where(valid, logt, -np.inf)
        lse = special.logsumexp(logt, axis=1)
        # tail bounds from the edge term and the ratio just inside the edge
        first = logt[:, 0]
        ratio_lo = np.where(lo > 1, logt[:, 0] - logt[:, 1], -np.inf)
        last_idx = (hi_k[:, 0] - lo).astype(int)
        rows = np.arange(len(y))
        last = logt[rows, last_idx]
        ratio_hi = last - logt[rows, last_idx - 1]
        with np.errstate(divide="ignore", invalid="ignore"):
            tail_lo = np.where(lo > 1, first + ratio_lo - _log1mexp(ratio_lo), -np.inf)
            tail_hi = last + ratio_hi - _log1mexp(ratio_hi)
        ok_lo = (lo <= 1) | ((ratio_lo < 0) & (tail_lo - lse < log_rtol))
        ok_hi = (ratio_hi < 0) & (tail_hi - lse < log_rtol)
        if np.all(ok_lo & ok_hi):
            break
        half *= 2
    w = np.exp(logt - lse[:, None])
    mean_k = np.sum(w * np.where(valid, k, 0.0), axis=1)
    return lse.reshape(shape), mean_k.reshape(shape)


def _log1mexp(x):
    # log(1 - e^x) for x < 0; +inf-safe sentinel (nan) otherwise
    x = np.where(x < 0, x, np.nan)
    return np.where(x > -0.693, np.log(-np.expm1(x)), np.log1p(-np.exp(x)))


def tweedie_logW(y, phi, nu, rtol=1e-12, max_terms=10**6):
    """Logarithm of the generalized Bessel series ``W(y, phi, nu)``."""
    return _tweedie_series(y, phi, nu, rtol=rtol, max_terms=max_terms)[0]


def tweedie_logW_fixed(y, phi, nu, n_terms):
    """Plain sum of the first ``n_terms`` series terms (reference use)."""
    y = np.asarray(y, float)
    a = _tweedie_alpha(nu)
    k = np.arange(1, n_terms + 1, dtype=float)
    base = _tweedie_log_base(y, phi, nu)
    logt = (np.multiply.outer(base, k) - special.gammaln(k + 1.0) - special.gammaln(k * a))
    return special.logsumexp(logt, axis=-1)


class Tweedie(Family):
    """Compound Poisson-Gamma responses with log link and power ``1 < nu < 2``."""

    name = "tweedie-log"
    has_dispersion = True

    def __init__(self, power=1.5):
        power = float(power)
        if not 1.0 < power < 2.0:
            raise DomainError(f"tweedie power must lie in (1, 2), got {power}")
        self.power = power

    def __repr__(self):
        return f"Tweedie(power={self.power})"

    def check_support(self, y):
        y = super().check_support(y)
        if np.any(y < 0):
            raise DomainError(f"{self.name}: responses must be non-negative")
        return y

    def mean(self, eta):
        with np.errstate(over="ignore"):
            return np.exp(eta)

    def variance(self, mu, phi=None):
        return phi * mu**self.power

    def zero_mass(self, eta, phi):
        nu = self.power
        with np.errstate(over="ignore"):
            return np.exp(-np.exp((2.0 - nu) * np.asarray(eta, float)) / (phi * (2.0 - nu)))

    def derivs(self, y, eta, phi=None):
        nu = self.power
        y, eta, phi = np.broadcast_arrays(np.asarray(y, float), np.asarray(eta, float),
                                          np.asarray(phi, float))
        with np.errstate(over="ignore"):
            e1 = np.exp((1.0 - nu) * eta)
            e2 = np.exp((2.0 - nu) * eta)
        kern = y * e1 / (1.0 - nu) - e2 / (2.0 - nu)
        logf = kern / phi
        logf_phi = -kern / phi**2
        pos = y > 0
        if np.any(pos):
            lw, ek = _tweedie_series(y[pos], phi[pos], nu)
            logf = np.array(logf, copy=True)
            logf[pos] += lw - np.log(y[pos])
            logf_phi = np.array(logf_phi, copy=True)
            logf_phi[pos] -= (1.0 + _tweedie_alpha(nu)) * ek / phi[pos]
        d1 = (y * e1 - e2) / phi
        d2 = (y * (1.0 - nu) * e1 - (2.0 - nu) * e2) / phi
        d3 = (y * (1.0 - nu) ** 2 * e1 - (2.0 - nu) ** 2 * e2) / phi
        return Derivs(logf, d1, d2, d3, logf_phi, -d1 / phi, -d2 / phi)

    def cdf(self, y, eta, phi=None):
        """CDF through the compound Poisson-Gamma representation."""
        nu = self.power
        y, eta, phi = np.broadcast_arrays(np.asarray(y, float), np.asarray(eta, float),
                                          np.asarray(phi, float))
        mu = np.exp(eta)
        lam = mu ** (2.0 - nu) / (phi * (2.0 - nu))
        shape = _tweedie_alpha(nu)
        scale = phi * (nu - 1.0) * mu ** (nu - 1.0)
        p0 = np.exp(-lam)
        nmax = int(np.max(lam + 12.0 * np.sqrt(lam) + 30.0))
        N = np.arange(1, nmax + 1, dtype=float)
        logpois = (np.multiply.outer(np.log(lam), N) - lam[..., None]
                   - special.gammaln(N + 1.0))
        gcdf = special.gammainc(shape * N, (y / scale)[..., None])
        F = p0 + np.sum(np.exp(logpois) * gcdf, axis=-1)
        F = np.minimum(F, 1.0)
        Fl = np.where(y > 0, F, 0.0)
        return F, Fl

    def sample(self, rng, eta, phi=None):
        nu = self.power
        mu = self.mean(eta)
        phi = np.broadcast_to(phi, mu.shape)
        lam = mu ** (2.0 - nu) / (phi * (2.0 - nu))
        N = rng.poisson(lam)
        scale = phi * (nu - 1.0) * mu ** (nu - 1.0)
        out = np.zeros(mu.shape)
        pos = N > 0
        out[pos] = rng.gamma(_tweedie_alpha(nu) * N[pos], scale[pos])
        return out


class BetaLogit(Family):
    """Beta proportions, logit link; ``Var(y) = mu (1 - mu) / (1 + phi)``."""

    name = "beta-logit"
    has_dispersion = True

    def check_support(self, y):
        y = super().check_support(y)
        if np.any(y <= 0) or np.any(y >= 1):
            raise DomainError(f"{self.name}: responses must lie in the open interval (0, 1)")
        return y

    def mean(self, eta):
        return special.expit(eta)

    def variance(self, mu, phi=None):
        return mu * (1.0 - mu) / (1.0 + phi)

    def derivs(self, y, eta, phi=None):
        y, eta, phi = np.broadcast_arrays(np.asarray(y, float), np.asarray(eta, float),
                                          np.asarray(phi, float))
        mu, muc = _expit_pair(eta)
        a = mu * phi
        b = muc * phi
        ly = np.log(y)
        l1y = np.log1p(-y)
        logf = (special.gammaln(phi) - special.gammaln(a) - special.gammaln(b)
                + (a - 1.0) * ly + (b - 1.0) * l1y)
        dga, dgb = special.digamma(a), special.digamma(b)
        tga, tgb = special.polygamma(1, a), special.polygamma(1, b)
        qga, qgb = special.polygamma(2, a), special.polygamma(2, b)
        resid = (ly - l1y) - (dga - dgb)
        L1 = phi * resid
        L2 = -phi**2 * (tga + tgb)
        L3 = -phi**3 * (qga - qgb)
        mp1 = mu * muc
        mp2 = mp1 * (muc - mu)
        mp3 = mp1 * (1.0 - 6.0 * mp1)
        d1 = L1 * mp1
        d2 = L2 * mp1**2 + L1 * mp2
        d3 = L3 * mp1**3 + 3.0 * L2 * mp1 * mp2 + L1 * mp3
        logf_phi = (special.digamma(phi) - mu * dga - muc * dgb + mu * ly + muc * l1y)
        L1_phi = resid - phi * (mu * tga - muc * tgb)
        L2_phi = -2.0 * phi * (tga + tgb) - phi**2 * (mu * qga + muc * qgb)
        return Derivs(logf, d1, d2, d3, logf_phi, L1_phi * mp1,
                      L2_phi * mp1**2 + L1_phi * mp2)

    def cdf(self, y, eta, phi=None):
        mu, muc = _expit_pair(np.asarray(eta, float))
        F = special.betainc(mu * phi, muc * phi, np.asarray(y, float))
        return F, F

    def sample(self, rng, eta, phi=None):
        mu, muc = _expit_pair(np.asarray(eta, float))
        y = rng.beta(mu * phi, muc * phi)
        # keep draws strictly inside the open interval
        return np.clip(y, 1e-10, 1.0 - 1e-10)


def get_family(name, tweedie_power=None) -> Family:
    """Instantiate the family registered under ``name``."""
    if name == "tweedie-log":
        return Tweedie(1.5 if tweedie_power is None else tweedie_power)
    try:
        return _REGISTRY[name]()
    except KeyError:
        raise ValueError(f"unknown family {name!r}; expected one of {', '.join(FAMILY_NAMES)}")


_REGISTRY = {
    "gaussian-identity": Gaussian,
    "poisson-log": Poisson,
    "negbinomial-log": NegativeBinomial,
    "bernoulli-logit": BernoulliLogit,
    "bernoulli-probit": BernoulliProbit,
    "beta-logit": BetaLogit,
}


def _resolve(family, nu):
    if isinstance(family, Family):
        return family
    return get_family(family, nu)


def evaluate(family, y, eta, phi=None, nu=None) -> FamilyEval:
    """Log-density and its first two ``eta``-derivatives, with support checks."""
    fam = _resolve(family, nu)
    y = fam.check_support(y)
    phi = fam.check_phi(phi)
    d = fam.derivs(y, eta, phi)
    return FamilyEval(d.logf, d.d1, d.d2)


def cdf(family, y, eta, phi=None, nu=None):
    """Return ``(F(y), F(y-))`` for the given family."""
    fam = _resolve(family, nu)
    y = fam.check_support(y)
    phi = fam.check_phi(phi)
    return fam.cdf(y, eta, phi)
