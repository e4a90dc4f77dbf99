"""GLLVM data model: specification, parameters, packing and the linear predictor.

Free-parameter layout of the packed vector (in this order)::

    beta0          m
    vec(B)         m*q      column-major (all responses for covariate 1, then 2, ...)
    Gamma          m*p - p(p-1)/2 free entries, column-major, diagonal on log scale
    log phi        m        only for families with a dispersion
    alpha[1:]      n-1      only with row effects; alpha[0] is the reference cell (= 0)
    a              n*p      row-major
    chol(A_i)      n*p(p+1)/2 (full) or n*p (diagonal); per unit, row-major lower
                            triangle, diagonal on log scale

The model block (everything before ``a``) is what the Laplace objective
optimizes; the variational block is appended for EVA and VA.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from functools import cached_property

import numpy as np

from .families import FAMILY_NAMES, DomainError, get_family


class DimensionError(ValueError):
    """An array does not have the shape implied by the model specification."""


class DataError(ValueError):
    """Response or covariate data are unusable (missing values, bad support)."""


@dataclass(frozen=True)
class ModelSpec:
    family: str
    n: int
    m: int
    p: int
    q: int = 0
    row_effects: bool = False
    tweedie_power: float | None = None

    def __post_init__(self):
        if self.family not in FAMILY_NAMES:
            raise ValueError(f"unknown family {self.family!r}")
        if self.family == "tweedie-log":
            if self.tweedie_power is None:
                object.__setattr__(self, "tweedie_power", 1.5)
            if not 1.0 < self.tweedie_power < 2.0:
                raise ValueError("tweedie_power must lie in (1, 2)")
        elif self.tweedie_power is not None:
            raise ValueError("tweedie_power is only meaningful for tweedie-log")
        for name in ("n", "m", "p"):
            if int(getattr(self, name)) < 1:
                raise ValueError(f"{name} must be positive")
        if self.q < 0:
            raise ValueError("q must be non-negative")
        if self.p > self.m:
            raise ValueError(f"p={self.p} latent variables exceed m={self.m} responses")

    @cached_property
    def fam(self):
        return get_family(self.family, self.tweedie_power)

    @property
    def has_dispersion(self):
        return self.fam.has_dispersion

    def to_dict(self):
        return {"family": self.family, "n": self.n, "m": self.m, "p": self.p, "q": self.q,
                "row_effects": self.row_effects, "tweedie_power": self.tweedie_power}

    @classmethod
    def from_dict(cls, d):
        return cls(**{k: d[k] for k in ("family", "n", "m", "p", "q", "row_effects",
                                        "tweedie_power") if k in d})


@dataclass(frozen=True)
class ResponseData:
    Y: np.ndarray
    X: np.ndarray

    def __post_init__(self):
        Y = np.asarray(self.Y, dtype=float)
        if Y.ndim != 2:
            raise DimensionError("Y must be a 2-d matrix")
        X = self.X
        X = np.zeros((Y.shape[0], 0)) if X is None else np.asarray(X, dtype=float)
        if X.ndim == 1:
            X = X[:, None]
        if X.shape[0] != Y.shape[0]:
            raise DimensionError(f"X has {X.shape[0]} rows but Y has {Y.shape[0]}")
        object.__setattr__(self, "Y", Y)
        object.__setattr__(self, "X", X)

    @property
    def n(self):
        return self.Y.shape[0]

    @property
    def m(self):
        return self.Y.shape[1]

    @property
    def q(self):
        return self.X.shape[1]

    def validate(self, spec: ModelSpec):
        if self.Y.shape != (spec.n, spec.m):
            raise DimensionError(f"Y has shape {self.Y.shape}, expected {(spec.n, spec.m)}")
        if self.X.shape != (spec.n, spec.q):
            raise DimensionError(f"X has shape {self.X.shape}, expected {(spec.n, spec.q)}")
        if np.isnan(self.Y).any() or np.isnan(self.X).any():
            raise DataError("missing values are not supported")
        if not np.all(np.isfinite(self.X)):
            raise DataError("X contains non-finite entries")
        try:
            spec.fam.check_support(self.Y)
        except DomainError as exc:
            raise DataError(str(exc)) from exc
        return self


@dataclass(frozen=True)
class Parameters:
    beta0: np.ndarray
    B: np.ndarray
    Gamma: np.ndarray
    phi: np.ndarray | None = None
    alpha: np.ndarray | None = None
    nu: float | None = None

    def validate(self, spec: ModelSpec):
        m, p, q = spec.m, spec.p, spec.q
        _shape("beta0", self.beta0, (m,))
        _shape("B", self.B, (m, q))
        _shape("Gamma", self.Gamma, (m, p))
        if np.any(np.triu(self.Gamma[:p], 1) != 0):
            raise ValueError("Gamma must be zero above the diagonal")
        if np.any(np.diag(self.Gamma[:p]) <= 0):
            raise ValueError("Gamma must have a positive diagonal")
        if spec.has_dispersion:
            if self.phi is None:
                raise ValueError(f"{spec.family} requires dispersions phi")
            _shape("phi", self.phi, (m,))
            if np.any(self.phi <= 0):
                raise ValueError("dispersions must be positive")
        if spec.row_effects:
            if self.alpha is None:
                raise ValueError("row effects requested but alpha is missing")
            _shape("alpha", self.alpha, (spec.n,))
            if self.alpha[0] != 0:
                raise ValueError("alpha[0] is the reference cell and must be 0")
        return self

    def to_dict(self):
        return {
            "beta0": self.beta0.tolist(),
            "B": self.B.tolist(),
            "Gamma": self.Gamma.tolist(),
            "phi": None if self.phi is None else self.phi.tolist(),
            "alpha": None if self.alpha is None else self.alpha.tolist(),
            "nu": self.nu,
        }

    @classmethod
    def from_dict(cls, d, spec: ModelSpec | None = None):
        def arr(key, shape=None):
            v = d.get(key)
            if v is None:
                return None
            a = np.asarray(v, dtype=float)
            return a.reshape(shape) if shape is not None else a

        q = spec.q if spec is not None else None
        m = len(d["beta0"])
        B = arr("B", (m, q) if q is not None else None)
        if B is not None and B.ndim == 1:
            B = B.reshape(m, -1)
        return cls(beta0=arr("beta0"), B=B, Gamma=arr("Gamma"), phi=arr("phi"),
                   alpha=arr("alpha"), nu=d.get("nu"))


@dataclass(frozen=True)
class VariationalParams:
    """Per-unit Gaussian ``N(a_i, L_i L_i^T)``."""

    a: np.ndarray
    L: np.ndarray
    diagonal: bool = False

    @property
    def A(self):
        return self.L @ np.swapaxes(self.L, -1, -2)

    def validate(self, spec: ModelSpec):
        _shape("a", self.a, (spec.n, spec.p))
        _shape("L", self.L, (spec.n, spec.p, spec.p))
        if np.any(np.triu(self.L, 1) != 0):
            raise ValueError("L must be lower triangular")
        if np.any(np.diagonal(self.L, axis1=1, axis2=2) <= 0):
            raise ValueError("Cholesky factors need a positive diagonal")
        return self

    def to_dict(self):
        return {"a": self.a.tolist(), "L": self.L.tolist(), "diagonal": self.diagonal}

    @classmethod
    def from_dict(cls, d):
        return cls(a=np.asarray(d["a"], float), L=np.asarray(d["L"], float),
                   diagonal=bool(d.get("diagonal", False)))


def _shape(name, arr, shape):
    if arr is None or np.shape(arr) != shape:
        raise DimensionError(f"{name} has shape {np.shape(arr)}, expected {shape}")


@dataclass(frozen=True)
class Layout:
    """Index bookkeeping for the packed vector of a given specification."""

    spec: ModelSpec
    variational: bool = True
    diagonal: bool = False
    sizes: dict = field(init=False, repr=False)

    def __post_init__(self):
        s = self.spec
        n, m, p, q = s.n, s.m, s.p, s.q
        nchol = p if self.diagonal else p * (p + 1) // 2
        sizes = {
            "beta0": m,
            "B": m * q,
            "Gamma": m * p - p * (p - 1) // 2,
            "phi": m if s.has_dispersion else 0,
            "alpha": n - 1 if s.row_effects else 0,
            "a": n * p if self.variational else 0,
            "chol": n * nchol if self.variational else 0,
        }
        object.__setattr__(self, "sizes", sizes)

    @cached_property
    def slices(self):
        out, start = {}, 0
        for k, v in self.sizes.items():
            out[k] = slice(start, start + v)
            start += v
        return out

    @property
    def size(self):
        return sum(self.sizes.values())

    @property
    def n_model(self):
        """Length of the model-parameter block (Psi)."""
        return self.slices["alpha"].stop

    @property
    def n_unit(self):
        """Variational coordinates per unit."""
        p = self.spec.p
        return p + (p if self.diagonal else p * (p + 1) // 2)

    @cached_property
    def gamma_index(self):
        m, p = self.spec.m, self.spec.p
        rows = np.concatenate([np.arange(k, m) for k in range(p)])
        cols = np.concatenate([np.full(m - k, k) for k in range(p)])
        return rows, cols, rows == cols

    @cached_property
    def chol_index(self):
        p = self.spec.p
        if self.diagonal:
            r = np.arange(p)
            return r, r, np.ones(p, bool)
        r, c = np.tril_indices(p)
        return r, c, r == c

    def unit_block(self, i):
        """Indices of unit ``i``'s variational coordinates (``a_i`` then ``chol``)."""
        p = self.spec.p
        nch = self.n_unit - p
        a0 = self.slices["a"].start + i * p
        c0 = self.slices["chol"].start + i * nch
        return np.r_[a0:a0 + p, c0:c0 + nch]

    def unit_blocks(self):
        """``(n, n_unit)`` index array of every unit's variational coordinates."""
        s = self.spec
        p = s.p
        nch = self.n_unit - p
        a = self.slices["a"].start + np.arange(s.n)[:, None] * p + np.arange(p)
        c = self.slices["chol"].start + np.arange(s.n)[:, None] * nch + np.arange(nch)
        return np.hstack([a, c])

    def coordinate_groups(self):
        """Partition of the coordinates into groups with no cross-curvature inside.

        Response-specific parameters of different responses never share a
        cell, and neither do the variational parameters of different units, so
        perturbing a whole group at once yields every diagonal Hessian entry
        of the group from one gradient difference (exact for the variational
        objectives; for Laplace the modes couple responses).
        """
        s = self.spec
        sl = self.slices
        groups = [np.arange(sl["beta0"].start, sl["beta0"].stop)]
        groups += [sl["B"].start + k * s.m + np.arange(s.m) for k in range(s.q)]
        _, cols, _ = self.gamma_index
        groups += [sl["Gamma"].start + np.flatnonzero(cols == k) for k in range(s.p)]
        if s.has_dispersion:
            groups.append(np.arange(sl["phi"].start, sl["phi"].stop))
        if s.row_effects:
            groups.append(np.arange(sl["alpha"].start, sl["alpha"].stop))
        if self.variational:
            blocks = self.unit_blocks()
            groups += [blocks[:, c] for c in range(blocks.shape[1])]
        return groups

    def names(self):
        """Human-readable name for each coordinate of the model block."""
        s = self.spec
        out = [f"beta0[{j}]" for j in range(s.m)]
        out += [f"B[{j},{k}]" for k in range(s.q) for j in range(s.m)]
        rows, cols, diag = self.gamma_index
        out += [f"log_Gamma[{r},{c}]" if d else f"Gamma[{r},{c}]"
                for r, c, d in zip(rows, cols, diag)]
        if s.has_dispersion:
            out += [f"log_phi[{j}]" for j in range(s.m)]
        if s.row_effects:
            out += [f"alpha[{i}]" for i in range(1, s.n)]
        return out


def pack(params: Parameters, varparams: VariationalParams | None, spec: ModelSpec) -> np.ndarray:
    """Flatten parameters into the free (unconstrained) vector.

    Pass ``varparams=None`` to pack only the model block.
    """
    params.validate(spec)
    parts = [params.beta0, params.B.ravel(order="F")]
    layout = Layout(spec, variational=varparams is not None,
                    diagonal=bool(varparams is not None and varparams.diagonal))
    rows, cols, diag = layout.gamma_index
    g = params.Gamma[rows, cols].copy()
    g[diag] = np.log(g[diag])
    parts.append(g)
    if spec.has_dispersion:
        parts.append(np.log(params.phi))
    if spec.row_effects:
        parts.append(params.alpha[1:])
    if varparams is not None:
        varparams.validate(spec)
        parts.append(varparams.a.ravel())
        r, c, d = layout.chol_index
        ch = varparams.L[:, r, c].copy()
        ch[:, d] = np.log(ch[:, d])
        parts.append(ch.ravel())
    theta = np.concatenate(parts).astype(float)
    if not np.all(np.isfinite(theta)):
        raise ValueError("packed vector has non-finite entries")
    return theta


def unpack(theta, spec: ModelSpec, variational: bool = True, diagonal: bool = False,
           layout: Layout | None = None):
    """Inverse of :func:`pack`; returns ``(Parameters, VariationalParams | None)``."""
    if layout is None:
        layout = Layout(spec, variational=variational, diagonal=diagonal)
    theta = np.asarray(theta, dtype=float)
    if theta.shape != (layout.size,):
        raise DimensionError(f"packed vector has length {theta.size}, expected {layout.size}")
    if not np.all(np.isfinite(theta)):
        raise ValueError("packed vector has non-finite entries")
    params, Gamma_free = _unpack_model(theta, layout)
    if not layout.variational:
        return params, None
    a, L = _unpack_var(theta, layout)
    return params, VariationalParams(a=a, L=L, diagonal=layout.diagonal)


def _unpack_model(theta, layout):
    s = layout.spec
    sl = layout.slices
    beta0 = theta[sl["beta0"]].copy()
    B = theta[sl["B"]].reshape((s.m, s.q), order="F").copy()
    rows, cols, diag = layout.gamma_index
    g = theta[sl["Gamma"]].copy()
    g[diag] = np.exp(g[diag])
    Gamma = np.zeros((s.m, s.p))
    Gamma[rows, cols] = g
    phi = np.exp(theta[sl["phi"]]) if s.has_dispersion else None
    alpha = np.concatenate([[0.0], theta[sl["alpha"]]]) if s.row_effects else None
    return Parameters(beta0=beta0, B=B, Gamma=Gamma, phi=phi, alpha=alpha,
                      nu=s.tweedie_power), g


def _unpack_var(theta, layout):
    s = layout.spec
    sl = layout.slices
    a = theta[sl["a"]].reshape(s.n, s.p).copy()
    r, c, d = layout.chol_index
    ch = theta[sl["chol"]].reshape(s.n, -1).copy()
    ch[:, d] = np.exp(ch[:, d])
    L = np.zeros((s.n, s.p, s.p))
    L[:, r, c] = ch
    return a, L


def linear_predictor(spec: ModelSpec, params: Parameters, X, a):
    """``eta_ij = alpha_i + beta0_j + x_i^T beta_j + a_i^T lambda_j`` as an n x m matrix."""
    X = np.zeros((spec.n, 0)) if X is None else np.asarray(X, float)
    a = np.asarray(a, float)
    _shape("X", X, (spec.n, spec.q))
    _shape("a", a, (spec.n, spec.p))
    _shape("beta0", params.beta0, (spec.m,))
    _shape("B", params.B, (spec.m, spec.q))
    _shape("Gamma", params.Gamma, (spec.m, spec.p))
    eta = params.beta0[None, :] + X @ params.B.T + a @ params.Gamma.T
    if spec.row_effects:
        _shape("alpha", params.alpha, (spec.n,))
        eta = eta + params.alpha[:, None]
    return eta


def residual_covariance(params: Parameters):
    """``Sigma = Gamma Gamma^T`` on the linear-predictor scale."""
    G = np.asarray(params.Gamma, float)
    return G @ G.T


def dumps_json(obj) -> str:
    """Deterministic JSON (sorted keys, shortest round-trip float repr)."""
    return json.dumps(obj, sort_keys=True, indent=1, allow_nan=True) + "\n"
