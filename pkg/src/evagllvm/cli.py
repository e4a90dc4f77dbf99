"""Command-line front end.

Subcommands ``fit``, ``compare``, ``simulate`` and ``replay``.  Exit codes:
0 success, 2 usage or data error, 3 non-convergence (outputs still written).
"""
from __future__ import annotations

import argparse
import csv
import hashlib
import io
import json
import math
import os
import sys
import time
import warnings

import numpy as np

from . import __version__
from .families import FAMILY_NAMES
from .inference import (cmsep, dunn_smyth_residuals, ellipse_radius, observed_information,
                        variance_explained, wald)
from .model import DataError, DimensionError, ModelSpec, ResponseData, dumps_json
from .objectives import VA_FAMILIES, UnsupportedError
from .optimizer import FitConfig, FitError, fit
from .simulation import StudyConfig, run_study, write_report

EXIT_OK, EXIT_USAGE, EXIT_NONCONVERGED = 0, 2, 3
THREADS_ENV = "EVA_GLLVM_THREADS"
MODEL_KEYS = ("q", "row_effects", "tweedie_power", "min_presence", "level")
ELLIPSE_LEVEL = 0.95


class UsageError(Exception):
    """Bad arguments, configuration or input data (exit code 2)."""


# ---------------------------------------------------------------------------
# Input


def read_matrix(path, label):
    """Read a numeric CSV into ``(array, column_names, row_names)``.

    A first row containing any non-numeric field is a header.  If the header's
    first field is empty, the first column holds row labels.  Errors name the
    file and the 1-based line number.
    """
    try:
        with open(path, encoding="utf-8", newline="") as fh:
            rows = list(csv.reader(fh))
    except OSError as exc:
        raise UsageError(f"{label}: cannot read {path}: {exc.strerror}") from exc
    except (UnicodeDecodeError, csv.Error) as exc:
        raise UsageError(f"{label}: {path} is not a UTF-8 CSV file: {exc}") from exc
    numbered = [(k + 1, r) for k, r in enumerate(rows) if any(f.strip() for f in r)]
    if not numbered:
        raise UsageError(f"{label}: {path} is empty")

    def numeric(field):
        try:
            float(field)
            return True
        except ValueError:
            return False

    header = None
    first_line, first = numbered[0]
    if not all(numeric(f) for f in first):
        header = [f.strip() for f in first]
        numbered = numbered[1:]
        if not numbered:
            raise UsageError(f"{label}: {path} has a header (line {first_line}) but no data")
    has_rownames = header is not None and header[0] == ""
    width = len(header) if header is not None else len(numbered[0][1])
    values, row_names = [], []
    for line, row in numbered:
        if len(row) != width:
            raise UsageError(f"{label}: {path} line {line}: expected {width} fields, "
                             f"found {len(row)}")
        if has_rownames:
            row_names.append(row[0].strip())
            row = row[1:]
        out = []
        for col, field in enumerate(row, start=2 if has_rownames else 1):
            text = field.strip()
            if text == "" or text.upper() in ("NA", "NAN"):
                raise UsageError(f"{label}: {path} line {line}, column {col}: missing value")
            try:
                v = float(text)
            except ValueError:
                raise UsageError(f"{label}: {path} line {line}, column {col}: cannot parse "
                                 f"{field!r} as a number") from None
            if not math.isfinite(v):
                raise UsageError(f"{label}: {path} line {line}, column {col}: non-finite "
                                 f"value {field!r}")
            out.append(v)
        values.append(out)
    arr = np.array(values, dtype=float)
    if arr.shape[1] == 0:
        raise UsageError(f"{label}: {path} has no data columns")
    if header is not None:
        names = header[1:] if has_rownames else header
    else:
        names = [f"{label}{k + 1}" for k in range(arr.shape[1])]
    if not row_names:
        row_names = [str(k + 1) for k in range(arr.shape[0])]
    return arr, names, row_names


def read_config(path):
    """Load a TOML (``.toml``) or JSON configuration file into a dict."""
    if path is None:
        return {}
    try:
        with open(path, "rb") as fh:
            raw = fh.read()
    except OSError as exc:
        raise UsageError(f"config: cannot read {path}: {exc.strerror}") from exc
    try:
        if path.endswith(".toml"):
            import tomli
            cfg = tomli.loads(raw.decode("utf-8"))
        else:
            cfg = json.loads(raw.decode("utf-8"))
    except Exception as exc:  # parse errors from either format
        raise UsageError(f"config: cannot parse {path}: {exc}") from exc
    if not isinstance(cfg, dict):
        raise UsageError(f"config: {path} must contain a table/object at the top level")
    return cfg


def sha256_file(path):
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 16), b""):
            h.update(chunk)
    return h.hexdigest()


# ---------------------------------------------------------------------------
# Output


def _fmt(v):
    if isinstance(v, (float, np.floating)):
        return repr(float(v)) if math.isfinite(v) else ("NA" if math.isnan(v) else str(v))
    return str(v)


def csv_text(header, rows):
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    for r in rows:
        w.writerow([_fmt(v) for v in r])
    return buf.getvalue()


def write_atomic(path, text):
    tmp = path + ".tmp"
    with open(tmp, "w", encoding="utf-8", newline="") as fh:
        fh.write(text)
    os.replace(tmp, path)


def write_outputs(out_dir, files):
    """Write ``{name: text}`` atomically; returns ``{name: sha256}``."""
    os.makedirs(out_dir, exist_ok=True)
    digests = {}
    for name in sorted(files):
        write_atomic(os.path.join(out_dir, name), files[name])
        digests[name] = hashlib.sha256(files[name].encode("utf-8")).hexdigest()
    return digests


def write_manifest(out_dir, command, argv, config, inputs, seed, outputs, wall):
    manifest = {
        "command": command,
        "argv": list(argv),
        "config": config,
        "inputs": {k: {"path": os.path.abspath(p), "sha256": sha256_file(p)}
                   for k, p in sorted(inputs.items()) if p is not None},
        "seed": seed,
        "version": __version__,
        "outputs": outputs,
        "wall_time_s": wall,
    }
    write_atomic(os.path.join(out_dir, "manifest.json"), dumps_json(manifest))


def ellipse_rows(labels, scores, regions, level):
    """Prediction ellipse of each unit in the first two latent dimensions."""
    p = scores.shape[1]
    radius = ellipse_radius(level, min(p, 2))
    rows = []
    for i, lab in enumerate(labels):
        if p == 1:
            half = radius * math.sqrt(max(regions[i, 0, 0], 0.0))
            rows.append([lab, scores[i, 0], 0.0, half, 0.0, 0.0, level])
            continue
        w, V = np.linalg.eigh(regions[i, :2, :2])
        w = np.maximum(w, 0.0)
        angle = math.atan2(V[1, 1], V[0, 1])
        rows.append([lab, scores[i, 0], scores[i, 1], radius * math.sqrt(w[1]),
                     radius * math.sqrt(w[0]), angle, level])
    return rows


ELLIPSE_HEADER = ["unit", "center_lv1", "center_lv2", "semi_major", "semi_minor",
                  "angle_rad", "level"]


# ---------------------------------------------------------------------------
# Shared fitting logic


def _threads(value):
    if value is None:
        env = os.environ.get(THREADS_ENV)
        if env is None or env.strip() == "":
            return None
        value = env
    try:
        k = int(value)
    except ValueError:
        raise UsageError(f"thread count must be an integer, got {value!r}") from None
    if k < 1:
        raise UsageError("thread count must be at least 1")
    return k


def _resolve(args, cfg):
    """Split a config dict into model options and a FitConfig, CLI flags winning."""
    model = {k: cfg[k] for k in MODEL_KEYS if k in cfg}
    fit_keys = {k: v for k, v in cfg.items() if k not in MODEL_KEYS}
    for flag, key in (("seed", "seed"), ("n_starts", "n_starts"), ("max_iter", "max_iter")):
        v = getattr(args, flag, None)
        if v is not None:
            fit_keys[key] = v
    if getattr(args, "q", None) is not None:
        model["q"] = args.q
    if getattr(args, "tweedie_power", None) is not None:
        model["tweedie_power"] = args.tweedie_power
    if getattr(args, "row_effects", False):
        model["row_effects"] = True
    if getattr(args, "min_presence", None) is not None:
        model["min_presence"] = args.min_presence
    fit_keys.pop("method", None)
    try:
        fc = FitConfig.from_dict(fit_keys)
    except (TypeError, ValueError) as exc:
        raise UsageError(f"config: {exc}") from exc
    return model, fc


def _load(args, model):
    Y, y_names, units = read_matrix(args.y, "y")
    X, x_names = None, []
    if args.x is not None:
        X, x_names, x_units = read_matrix(args.x, "x")
        if X.shape[0] != Y.shape[0]:
            raise UsageError(f"x has {X.shape[0]} data rows but y has {Y.shape[0]}")
    q = model.get("q")
    if q is not None and int(q) > 0 and X is None:
        raise UsageError(f"configuration expects q={q} covariates but no --x file was given")
    if q is not None and X is not None and int(q) != X.shape[1]:
        raise UsageError(f"configuration expects q={q} covariates; --x has {X.shape[1]}")
    dropped = []
    k = int(model.get("min_presence", 0) or 0)
    if k > 0:
        keep = np.count_nonzero(Y, axis=0) >= k
        dropped = [nm for nm, kp in zip(y_names, keep) if not kp]
        Y = Y[:, keep]
        y_names = [nm for nm, kp in zip(y_names, keep) if kp]
        if Y.shape[1] == 0:
            raise UsageError(f"no response is present in at least {k} units")
    return Y, X, y_names, x_names, units, dropped


def _spec(args, model, Y, X):
    try:
        spec = ModelSpec(args.family, Y.shape[0], Y.shape[1], args.p,
                         0 if X is None else X.shape[1],
                         row_effects=bool(model.get("row_effects", False)),
                         tweedie_power=model.get("tweedie_power"))
        data = ResponseData(Y, X).validate(spec)
    except (ValueError, DimensionError, DataError) as exc:
        raise UsageError(str(exc)) from exc
    return spec, data


def _check_method(method, family):
    if method == "va" and family not in VA_FAMILIES:
        raise UsageError(f"no closed-form VA for {family}; supported: {', '.join(VA_FAMILIES)}")


def _inference(result, seed):
    """Observed information, Wald report, CMSEP and residuals; tolerant of failure."""
    notes = []
    report = regions = None
    try:
        with warnings.catch_warnings(record=True) as caught:
            warnings.simplefilter("always")
            info = observed_information(result)
            report = wald(result, info)
            regions = cmsep(result, info)
        notes.extend(str(w.message) for w in caught)
    except (np.linalg.LinAlgError, ValueError, FloatingPointError) as exc:
        notes.append(f"inference failed: {exc}")
    if regions is None:
        regions = result.varparams.A.copy()
        notes.append("ellipses use the variational covariance only")
    resid = dunn_smyth_residuals(result, seed=seed)
    return report, regions, resid, notes


def _fit_files(result, report, regions, resid, notes, y_names, x_names, units, dropped,
               level):
    p = result.spec.p
    fitd = result.to_dict(include_time=False)
    fitd["responses"] = list(y_names)
    fitd["covariates"] = list(x_names)
    fitd["dropped_responses"] = list(dropped)
    inf = report.to_dict() if report is not None else {"names": [], "notes": []}
    inf["notes"] = list(inf.get("notes", [])) + notes
    lv = [f"lv{k + 1}" for k in range(p)]
    ord_rows = [["site", u, *result.varparams.a[i]] for i, u in enumerate(units)]
    ord_rows += [["response", nm, *result.params.Gamma[j]] for j, nm in enumerate(y_names)]
    return {
        "fit.json": dumps_json(fitd),
        "inference.json": dumps_json(inf),
        "ordination.csv": csv_text(["kind", "label", *lv], ord_rows),
        "ellipses.csv": csv_text(ELLIPSE_HEADER,
                                 ellipse_rows(units, result.varparams.a, regions, level)),
        "residuals.csv": csv_text(["unit", *y_names],
                                  [[u, *resid[i]] for i, u in enumerate(units)]),
    }


# ---------------------------------------------------------------------------
# Commands


def cmd_fit(args, argv):
    t0 = time.perf_counter()
    cfg = read_config(args.config)
    model, fc = _resolve(args, cfg)
    method = args.method or cfg.get("method", "eva")
    fc = FitConfig.from_dict({**fc.to_dict(), "method": method})
    _check_method(method, args.family)
    Y, X, y_names, x_names, units, dropped = _load(args, model)
    spec, data = _spec(args, model, Y, X)
    try:
        result = fit(spec, data, fc)
    except FitError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_NONCONVERGED
    level = float(model.get("level", ELLIPSE_LEVEL))
    report, regions, resid, notes = _inference(result, fc.seed)
    files = _fit_files(result, report, regions, resid, notes, y_names, x_names, units,
                       dropped, level)
    digests = write_outputs(args.out, files)
    resolved = {"family": args.family, "p": args.p, "model": model, "fit": fc.to_dict()}
    write_manifest(args.out, "fit", argv, resolved, {"y": args.y, "x": args.x,
                                                     "config": args.config},
                   fc.seed, digests, time.perf_counter() - t0)
    for w in result.warnings:
        print(f"warning: {w}", file=sys.stderr)
    if not result.converged:
        print(f"fit did not converge ({result.stop_reason}); outputs written to {args.out}",
              file=sys.stderr)
        return EXIT_NONCONVERGED
    return EXIT_OK


def cmd_compare(args, argv):
    t0 = time.perf_counter()
    cfg = read_config(args.config)
    model, fc = _resolve(args, cfg)
    Y, X, y_names, x_names, units, dropped = _load(args, model)
    spec, data = _spec(args, model, Y, X)
    methods = ["eva", "laplace"] + (["va"] if args.family in VA_FAMILIES else [])
    summary, fits = {}, {}
    for method in methods:
        mc = FitConfig.from_dict({**fc.to_dict(), "method": method})
        try:
            res = fit(spec, data, mc)
        except (FitError, ValueError, np.linalg.LinAlgError) as exc:
            summary[method] = {"ok": False, "error": str(exc)}
            continue
        entry = {"ok": bool(res.converged), "objective": res.objective,
                 "converged": res.converged, "stop_reason": res.stop_reason,
                 "iterations": res.iterations, "warnings": list(res.warnings)}
        if spec.q > 0:
            null_spec = ModelSpec(spec.family, spec.n, spec.m, spec.p, 0,
                                  spec.row_effects, spec.tweedie_power)
            try:
                null = fit(null_spec, ResponseData(Y, None), mc)
                entry["variance_explained"] = variance_explained(null, res)
            except (FitError, ValueError) as exc:
                entry["variance_explained"] = None
                entry["variance_explained_error"] = str(exc)
        summary[method] = entry
        fits[method] = res
    names = None
    rows = {}
    for method, res in fits.items():
        names = _param_names(res.spec, y_names, x_names)
        rows[method] = _param_values(res)
    est_rows = []
    if names is not None:
        for k, nm in enumerate(names):
            est_rows.append([nm, *[rows[mt][k] if mt in rows else float("nan")
                                   for mt in methods]])
    timing_rows = [[mt, fits[mt].wall_time_s if mt in fits else float("nan")]
                   for mt in methods]
    files = {
        "compare.json": dumps_json({"methods": methods, "results": summary,
                                    "responses": y_names, "covariates": x_names,
                                    "dropped_responses": dropped}),
        "estimates.csv": csv_text(["parameter", *methods], est_rows),
        "timing.csv": csv_text(["method", "wall_time_s"], timing_rows),
    }
    digests = write_outputs(args.out, files)
    resolved = {"family": args.family, "p": args.p, "model": model, "fit": fc.to_dict(),
                "methods": methods}
    write_manifest(args.out, "compare", argv, resolved, {"y": args.y, "x": args.x,
                                                         "config": args.config},
                   fc.seed, digests, time.perf_counter() - t0)
    for mt in methods:
        s = summary[mt]
        if "error" in s:
            print(f"{mt}: failed: {s['error']}", file=sys.stderr)
        else:
            print(f"{mt}: objective {s['objective']:.10g} converged={s['converged']} "
                  f"time {fits[mt].wall_time_s:.3f}s")
    return EXIT_OK if any(summary[mt].get("ok") for mt in methods) else EXIT_NONCONVERGED


def _param_names(spec, y_names, x_names):
    out = [f"beta0[{y}]" for y in y_names]
    out += [f"B[{y},{x}]" for x in x_names for y in y_names]
    out += [f"Gamma[{y},lv{k + 1}]" for k in range(spec.p) for y in y_names]
    if spec.has_dispersion:
        out += [f"phi[{y}]" for y in y_names]
    return out


def _param_values(res):
    P = res.params
    vals = list(P.beta0) + list(P.B.T.ravel()) + list(P.Gamma.T.ravel())
    if res.spec.has_dispersion:
        vals += list(P.phi)
    return vals


def cmd_simulate(args, argv):
    t0 = time.perf_counter()
    cfg = read_config(args.config)
    if args.seed is not None:
        cfg = {**cfg, "seed": args.seed}
    try:
        sc = StudyConfig.from_dict(cfg)
    except UnsupportedError as exc:
        raise UsageError(str(exc)) from exc
    except (TypeError, ValueError) as exc:
        raise UsageError(f"config: {exc}") from exc
    report = run_study(sc)
    write_report(report, args.out)
    names = ("study.csv", "study.json", "timing.csv")
    digests = {nm: sha256_file(os.path.join(args.out, nm)) for nm in names}
    write_manifest(args.out, "simulate", argv, sc.to_dict(), {"config": args.config},
                   sc.seed, digests, time.perf_counter() - t0)
    return EXIT_OK


def cmd_replay(args, argv):
    try:
        with open(args.manifest, encoding="utf-8") as fh:
            man = json.load(fh)
    except (OSError, json.JSONDecodeError) as exc:
        raise UsageError(f"cannot read manifest {args.manifest}: {exc}") from exc
    for key, ent in man.get("inputs", {}).items():
        if not os.path.exists(ent["path"]) or sha256_file(ent["path"]) != ent["sha256"]:
            raise UsageError(f"input {key!r} at {ent['path']} is missing or has changed")
    paths = {f"--{k}": ent["path"] for k, ent in man.get("inputs", {}).items()}
    old = list(man["argv"])
    new = []
    k = 0
    while k < len(old):
        tok = old[k]
        flag, eq, val = tok.partition("=")
        if flag == "--out":
            k += 1 if eq else 2
            continue
        if flag in paths:
            new += [flag, paths[flag]]
            k += 1 if eq else 2
            continue
        new.append(tok)
        k += 1
    return main(new + ["--out", args.out])


# ---------------------------------------------------------------------------
# Parser


def _positive_int(text):
    try:
        v = int(text)
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected an integer, got {text!r}") from None
    if v < 1:
        raise argparse.ArgumentTypeError("must be at least 1")
    return v


def build_parser():
    ap = argparse.ArgumentParser(prog="evagllvm", description="Fit GLLVMs by extended "
                                 "variational approximation, Laplace or standard VA.")
    ap.add_argument("--version", action="version", version=__version__)
    sub = ap.add_subparsers(dest="command", required=True)

    def common(sp):
        sp.add_argument("--threads", default=None,
                        help=f"BLAS threads (default: all cores, or ${THREADS_ENV})")

    def data_args(sp):
        sp.add_argument("--y", required=True, help="response CSV (units x responses)")
        sp.add_argument("--x", default=None, help="covariate CSV (units x covariates)")
        sp.add_argument("--family", required=True, choices=FAMILY_NAMES)
        sp.add_argument("--p", required=True, type=_positive_int, help="latent dimension")
        sp.add_argument("--config", default=None, help="TOML or JSON options file")
        sp.add_argument("--out", required=True, help="output directory")
        sp.add_argument("--seed", type=int, default=None)
        sp.add_argument("--n-starts", dest="n_starts", type=_positive_int, default=None)
        sp.add_argument("--max-iter", dest="max_iter", type=_positive_int, default=None)
        sp.add_argument("--q", type=int, default=None,
                        help="expected number of covariates (checked against --x)")
        sp.add_argument("--tweedie-power", dest="tweedie_power", type=float, default=None)
        sp.add_argument("--row-effects", dest="row_effects", action="store_true")
        sp.add_argument("--min-presence", dest="min_presence", type=int, default=None,
                        help="drop responses nonzero in fewer than this many units")
        common(sp)

    sp = sub.add_parser("fit", help="fit one model and export estimates and diagnostics")
    data_args(sp)
    sp.add_argument("--method", choices=("eva", "va", "laplace"), default=None)
    sp.set_defaults(func=cmd_fit)

    sp = sub.add_parser("compare", help="fit every applicable method on the same data")
    data_args(sp)
    sp.set_defaults(func=cmd_compare)

    sp = sub.add_parser("simulate", help="run a simulation study from a configuration")
    sp.add_argument("--config", required=True)
    sp.add_argument("--out", required=True)
    sp.add_argument("--seed", type=int, default=None)
    common(sp)
    sp.set_defaults(func=cmd_simulate)

    sp = sub.add_parser("replay", help="rerun the command recorded in a manifest")
    sp.add_argument("manifest")
    sp.add_argument("--out", required=True)
    sp.set_defaults(func=cmd_replay, threads=None)
    return ap


def main(argv=None):
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code) if exc.code is not None else EXIT_OK
    try:
        threads = _threads(args.threads)
        if threads is None:
            return args.func(args, argv)
        from threadpoolctl import threadpool_limits
        with threadpool_limits(limits=threads):
            return args.func(args, argv)
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
