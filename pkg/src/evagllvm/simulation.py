"""Data generation, Procrustes error and the replicate study runner."""
from __future__ import annotations

import csv
import io
import json
import math
import os
import time
import warnings
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field

import numpy as np

from .model import ModelSpec, Parameters, ResponseData, dumps_json, linear_predictor
from .optimizer import FitConfig, FitError, fit
from .objectives import UnsupportedError, VA_FAMILIES

# dispersion ranges for synthetic truths
_PHI_RANGE = {
    "gaussian-identity": (0.5, 1.5),
    "negbinomial-log": (0.25, 1.0),
    "tweedie-log": (0.5, 1.5),
    "beta-logit": (1.0, 3.0),
}


def synthetic_truth(spec: ModelSpec, rng) -> Parameters:
    """Random parameters satisfying all constraints.

    ``beta0`` and ``B`` are ``Unif(-1, 1)``; ``Gamma`` is ``Unif(-1, 1)`` with a
    zero upper triangle and diagonal drawn from ``Unif(0.5, 1)``.
    """
    m, p, q = spec.m, spec.p, spec.q
    beta0 = rng.uniform(-1.0, 1.0, m)
    B = rng.uniform(-1.0, 1.0, (m, q))
    G = rng.uniform(-1.0, 1.0, (m, p))
    G[:p] = np.tril(G[:p])
    idx = np.arange(p)
    G[idx, idx] = rng.uniform(0.5, 1.0, p)
    phi = None
    if spec.has_dispersion:
        lo, hi = _PHI_RANGE[spec.family]
        phi = rng.uniform(lo, hi, m)
    alpha = None
    if spec.row_effects:
        alpha = np.concatenate([[0.0], rng.uniform(-0.5, 0.5, spec.n - 1)])
    return Parameters(beta0, B, G, phi, alpha, spec.tweedie_power)


def simulate_dataset(spec: ModelSpec, params: Parameters, scores=None, X=None, seed=0,
                     return_scores=False):
    """Draw ``Y`` from the GLLVM at ``params``.

    ``scores`` are the latent ``u_i`` (drawn ``N(0, I)`` when omitted) and ``X``
    the covariates (drawn ``N(0, 1)`` when omitted and ``q > 0``).
    """
    rng = np.random.default_rng(seed)
    if X is None:
        X = rng.standard_normal((spec.n, spec.q))
    if scores is None:
        scores = rng.standard_normal((spec.n, spec.p))
    eta = linear_predictor(spec, params, X, scores)
    phi = None if params.phi is None else params.phi[None, :]
    Y = spec.fam.sample(rng, eta, phi)
    data = ResponseData(Y, X)
    return (data, scores) if return_scores else data


def procrustes_error(M_true, M_est):
    """Procrustes error of ``M_est`` against ``M_true``.

    Both are column-centred; ``M_est`` is rotated (orthogonal, reflections
    allowed) and scaled to best match ``M_true``.  The residual sum of squares
    is divided by the squared norm of the centred ``M_true``, so the measure
    is not symmetric in its arguments.
    """
    A = np.asarray(M_true, float)
    B = np.asarray(M_est, float)
    if A.shape != B.shape or A.ndim != 2:
        raise ValueError(f"shapes differ: {A.shape} vs {B.shape}")
    A = A - A.mean(axis=0)
    B = B - B.mean(axis=0)
    na = float(np.sum(A * A))
    nb = float(np.sum(B * B))
    if na == 0.0 or nb == 0.0:
        raise ValueError("Procrustes error undefined for a zero-norm (centred) matrix")
    U, s, Vt = np.linalg.svd(B.T @ A)
    R = U @ Vt
    c = s.sum() / nb
    resid = A - c * (B @ R)
    return float(np.sum(resid * resid) / na)


# ---------------------------------------------------------------------------
# Studies


@dataclass(frozen=True)
class StudyConfig:
    family: str
    n_grid: tuple = (50, 120, 190, 260)
    m_grid: tuple = (10,)
    p: int = 2
    q: int = 1
    n_replicates: int = 200
    truth: str = "synthetic"
    methods: tuple = ("eva", "laplace")
    seed: int = 0
    tweedie_power: float | None = None
    n_starts: int = 1
    max_iter: int = 2000
    inference: bool = True
    n_jobs: int = 1

    def __post_init__(self):
        object.__setattr__(self, "n_grid", tuple(int(v) for v in self.n_grid))
        object.__setattr__(self, "m_grid", tuple(int(v) for v in self.m_grid))
        object.__setattr__(self, "methods", tuple(self.methods))
        if not self.n_grid or not self.m_grid:
            raise ValueError("n_grid and m_grid must be non-empty")
        if len(self.n_grid) > 1 and len(self.m_grid) > 1:
            raise ValueError("only one of n_grid and m_grid may vary")
        if self.n_replicates < 1:
            raise ValueError("n_replicates must be positive")
        bad = set(self.methods) - {"eva", "va", "laplace"}
        if bad or not self.methods:
            raise ValueError(f"methods must be a non-empty subset of eva, va, laplace; got "
                             f"{list(self.methods)}")
        if "va" in self.methods and self.family not in VA_FAMILIES:
            raise UnsupportedError(f"no closed-form VA for {self.family}; supported: "
                                   f"{', '.join(VA_FAMILIES)}")
        if self.p > min(self.m_grid):
            raise ValueError("p exceeds the smallest number of responses")
        self.spec(self.n_grid[0], self.m_grid[0])  # validates family / power

    def spec(self, n, m):
        return ModelSpec(self.family, n, m, self.p, self.q,
                         tweedie_power=self.tweedie_power
                         if self.family == "tweedie-log" else None)

    @property
    def grid(self):
        return [(n, m) for n in self.n_grid for m in self.m_grid]

    def to_dict(self):
        d = asdict(self)
        for k in ("n_grid", "m_grid", "methods"):
            d[k] = list(d[k])
        return d

    @classmethod
    def from_dict(cls, d):
        known = set(cls.__dataclass_fields__)
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown StudyConfig keys: {sorted(unknown)}")
        if "family" not in d:
            raise ValueError("StudyConfig needs a family")
        return cls(**d)


@dataclass
class StudyReport:
    config: StudyConfig
    rows: list
    replicates: list
    timing: list = field(default_factory=list)

    ROW_FIELDS = ("method", "n", "m", "n_fits", "n_failed", "n_nonconverged",
                  "bias_slope", "abs_bias_slope", "rmse_slope", "bias_intercept",
                  "rmse_intercept", "coverage_slope", "procrustes_scores",
                  "procrustes_loadings", "cmsep_violations", "cmsep_units",
                  "cmsep_indefinite_units", "mean_time_s")

    def row(self, method, n=None, m=None):
        for r in self.rows:
            if r["method"] == method and (n is None or r["n"] == n) and \
                    (m is None or r["m"] == m):
                return r
        raise KeyError((method, n, m))

    def to_csv(self, timing=True):
        """One row per method and grid point.

        ``mean_time_s`` is left empty with ``timing=False`` so that the table
        is byte-reproducible.
        """
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        fields = self.ROW_FIELDS if timing else self.ROW_FIELDS[:-1]
        w.writerow(fields)
        for r in self.rows:
            w.writerow([_fmt(r[k]) for k in fields])
        return buf.getvalue()

    def timing_csv(self):
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(("method", "n", "m", "replicate", "time_s"))
        for t in self.timing:
            w.writerow((t["method"], t["n"], t["m"], t["replicate"], repr(t["time_s"])))
        return buf.getvalue()

    def to_dict(self, timing=False):
        rows = self.rows if timing else [
            {k: v for k, v in r.items() if k != "mean_time_s"} for r in self.rows]
        return {"config": self.config.to_dict(), "rows": rows,
                "replicates": self.replicates}


def _fmt(v):
    if isinstance(v, float):
        return "" if not math.isfinite(v) else repr(v)
    return str(v)


def _truth_pool(config: StudyConfig):
    """Truth parameters, covariates and latent scores for the largest grid point."""
    N, M = max(config.n_grid), max(config.m_grid)
    spec = config.spec(N, M)
    rng = np.random.default_rng([config.seed, 2**31 - 1])
    if config.truth == "synthetic":
        params = synthetic_truth(spec, rng)
        X = rng.standard_normal((N, config.q))
        U = rng.standard_normal((N, config.p))
        return params, X, U
    with open(config.truth, encoding="utf-8") as fh:
        d = json.load(fh)
    params = Parameters.from_dict(d["params"], spec)
    params.validate(spec)
    X = np.asarray(d["X"], float).reshape(N, config.q) if "X" in d else \
        rng.standard_normal((N, config.q))
    U = np.asarray(d["U"], float).reshape(N, config.p) if "U" in d else \
        rng.standard_normal((N, config.p))
    return params, X, U


def _sub_params(params, cols, spec):
    return Parameters(params.beta0[cols], params.B[cols], params.Gamma[cols],
                      None if params.phi is None else params.phi[cols], None,
                      spec.tweedie_power)


def _replicate(args):
    """Simulate one dataset and fit every method; returns records (no shared state)."""
    from .inference import cmsep, cmsep_dominance, observed_information, wald

    config, g, r, pool = args
    params_pool, X_pool, U_pool = pool
    n, m = config.grid[g]
    N, M = X_pool.shape[0], params_pool.beta0.size
    rng = np.random.default_rng([config.seed, g, r])
    rows = np.sort(rng.choice(N, n, replace=False)) if n < N else np.arange(N)
    cols = np.sort(rng.choice(M, m, replace=False)) if m < M else np.arange(M)
    spec = config.spec(n, m)
    truth = _sub_params(params_pool, cols, spec)
    X, U = X_pool[rows], U_pool[rows]
    data = simulate_dataset(spec, truth, scores=U, X=X, seed=rng.integers(2**63))
    out = []
    for method in config.methods:
        rec = {"method": method, "n": n, "m": m, "replicate": r, "cols": cols.tolist(),
               "failed": False,
               "converged": False, "objective": None, "B": None, "beta0": None,
               "covered": None, "procrustes_scores": None, "procrustes_loadings": None,
               "cmsep_violations": None, "cmsep_units": 0, "cmsep_indefinite": None,
               "error": None}
        cfg = FitConfig(method=method, n_starts=config.n_starts, max_iter=config.max_iter,
                        seed=config.seed)
        t0 = time.perf_counter()
        try:
            res = fit(spec, data, cfg)
        except (FitError, ArithmeticError, RuntimeError, np.linalg.LinAlgError) as exc:
            rec["failed"], rec["error"] = True, f"{type(exc).__name__}: {exc}"
            out.append((rec, time.perf_counter() - t0))
            continue
        elapsed = time.perf_counter() - t0
        if not math.isfinite(res.objective):
            rec["failed"], rec["error"] = True, "non-finite objective"
            out.append((rec, elapsed))
            continue
        rec.update(converged=bool(res.converged), objective=res.objective,
                   B=res.params.B.tolist(), beta0=res.params.beta0.tolist())
        rec["procrustes_scores"] = procrustes_error(U, res.varparams.a)
        rec["procrustes_loadings"] = procrustes_error(truth.Gamma, res.params.Gamma)
        if config.inference and config.q > 0:
            try:
                info = observed_information(res)
                rep = wald(res, info)
                lo = np.array([rep.get(f"B[{j},{k}]")[2] for k in range(spec.q)
                               for j in range(m)])
                hi = np.array([rep.get(f"B[{j},{k}]")[3] for k in range(spec.q)
                               for j in range(m)])
                tb = truth.B.ravel(order="F")
                rec["covered"] = [bool(v) for v in (lo <= tb) & (tb <= hi)]
                # boundary fits (phi_j or Gamma_kk near 0) can leave cov_psi
                # indefinite; regions are still computed and flagged
                V = info.cov_psi
                rec["cmsep_indefinite"] = bool(
                    np.linalg.eigvalsh(0.5 * (V + V.T))[0] < -1e-12 * abs(V).max())
                with warnings.catch_warnings():
                    warnings.simplefilter("ignore", RuntimeWarning)
                    regions = cmsep(res, info)
                ok = cmsep_dominance(res, regions)
                rec["cmsep_violations"] = int(np.sum(~ok))
                rec["cmsep_units"] = int(ok.size)
            except (ArithmeticError, RuntimeError, np.linalg.LinAlgError) as exc:
                rec["error"] = f"inference: {type(exc).__name__}: {exc}"
        out.append((rec, elapsed))
    return out


def _summarize(config, pool, records):
    params_pool = pool[0]
    rows = []
    for g, (n, m) in enumerate(config.grid):
        for method in config.methods:
            recs = [r for r in records if r["method"] == method and r["n"] == n
                    and r["m"] == m]
            ok = [r for r in recs if not r["failed"]]
            row = {"method": method, "n": n, "m": m, "n_fits": len(recs),
                   "n_failed": len(recs) - len(ok),
                   "n_nonconverged": sum(1 for r in ok if not r["converged"])}
            slope_err, int_err = [], []
            for r in ok:
                cols = r["cols"]
                tB = params_pool.B[cols]
                tb0 = params_pool.beta0[cols]
                slope_err.append(np.asarray(r["B"]) - tB)
                int_err.append(np.asarray(r["beta0"]) - tb0)
            nan = math.nan
            if slope_err and config.q > 0:
                E = np.stack(slope_err)                     # R x m x q
                row["bias_slope"] = float(E.mean())
                row["abs_bias_slope"] = float(np.abs(E.mean(axis=0)).mean())
                row["rmse_slope"] = float(np.sqrt(np.mean(E * E)))
            else:
                row["bias_slope"] = row["abs_bias_slope"] = row["rmse_slope"] = nan
            if int_err:
                E0 = np.stack(int_err)
                row["bias_intercept"] = float(E0.mean())
                row["rmse_intercept"] = float(np.sqrt(np.mean(E0 * E0)))
            else:
                row["bias_intercept"] = row["rmse_intercept"] = nan
            cov = [c for r in ok if r["covered"] is not None for c in r["covered"]]
            row["coverage_slope"] = float(np.mean(cov)) if cov else nan
            ps = [r["procrustes_scores"] for r in ok]
            pl = [r["procrustes_loadings"] for r in ok]
            row["procrustes_scores"] = float(np.mean(ps)) if ps else nan
            row["procrustes_loadings"] = float(np.mean(pl)) if pl else nan
            row["cmsep_violations"] = int(sum(r["cmsep_violations"] or 0 for r in ok))
            row["cmsep_units"] = int(sum(r["cmsep_units"] for r in ok))
            row["cmsep_indefinite_units"] = int(
                sum(r["cmsep_units"] for r in ok if r["cmsep_indefinite"]))
            times = [r["_time"] for r in recs if not r["failed"]]
            row["mean_time_s"] = float(np.mean(times)) if times else nan
            rows.append(row)
    return rows


def run_study(config: StudyConfig, progress=None) -> StudyReport:
    """Run every replicate at every grid point and summarize per method.

    Replicate ``r`` at grid point ``g`` draws from a stream keyed by
    ``(seed, g, r)``; with ``n_jobs > 1`` replicates run in worker processes
    and are merged in index order, so results do not depend on scheduling.
    Failed fits (exceptions or a non-finite objective) are excluded from the
    accuracy summaries and counted separately.  Times cover fitting only.
    """
    pool = _truth_pool(config)
    tasks = [(config, g, r, pool) for g in range(len(config.grid))
             for r in range(config.n_replicates)]
    if config.n_jobs > 1:
        with ProcessPoolExecutor(max_workers=config.n_jobs) as ex:
            results = list(ex.map(_replicate, tasks, chunksize=1))
    else:
        results = []
        for k, t in enumerate(tasks):
            results.append(_replicate(t))
            if progress is not None:
                progress(k + 1, len(tasks))
    records, timing = [], []
    for (cfg, g, r, _), res in zip(tasks, results):
        n, m = config.grid[g]
        for rec, elapsed in res:
            rec = dict(rec)
            rec["_time"] = elapsed
            records.append(rec)
            timing.append({"method": rec["method"], "n": n, "m": m, "replicate": r,
                           "time_s": elapsed})
    rows = _summarize(config, pool, records)
    public = []
    for rec in records:
        rec = {k: v for k, v in rec.items() if not k.startswith("_")}
        public.append(rec)
    return StudyReport(config, rows, public, timing)


def write_report(report: StudyReport, out_dir):
    """Write ``study.csv``, ``study.json`` (time-free, reproducible) and ``timing.csv``."""
    os.makedirs(out_dir, exist_ok=True)
    files = {
        "study.csv": report.to_csv(timing=False),
        "study.json": dumps_json(report.to_dict(timing=False)),
        "timing.csv": report.timing_csv(),
    }
    for name, text in files.items():
        _atomic_write(os.path.join(out_dir, name), text)
    return sorted(files)


def _atomic_write(path, text):
    tmp = path + ".tmp"
    with open(tmp, "w", encoding="utf-8", newline="") as fh:
        fh.write(text)
    os.replace(tmp, path)
