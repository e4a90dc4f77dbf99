"""Profile the Tweedie power over a grid by refitting at each value.

Usage::

    python scripts/profile_tweedie_power.py --y Y.csv [--x X.csv] --p 2 \
        [--grid 1.1,1.2,...,1.9] [--method eva|laplace]

Prints one ``power,objective,converged`` line per grid value and the maximizer.
The power is not a free parameter of the fit; this is the supported way to pick it.
"""
from __future__ import annotations

import argparse
import sys

import numpy as np

from evagllvm.cli import UsageError, read_matrix
from evagllvm.model import ModelSpec, ResponseData
from evagllvm.optimizer import FitConfig, fit


def profile(Y, X, p, grid, method="eva", seed=0):
    """Return ``[(power, objective, converged)]`` for each power in ``grid``."""
    out = []
    q = 0 if X is None else X.shape[1]
    for nu in grid:
        spec = ModelSpec("tweedie-log", Y.shape[0], Y.shape[1], p, q, tweedie_power=nu)
        res = fit(spec, ResponseData(Y, X), FitConfig(method=method, seed=seed))
        out.append((float(nu), res.objective, res.converged))
    return out


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--y", required=True)
    ap.add_argument("--x", default=None)
    ap.add_argument("--p", type=int, required=True)
    ap.add_argument("--grid", default=",".join(f"{v:.1f}" for v in np.arange(1.1, 1.95, 0.1)))
    ap.add_argument("--method", choices=("eva", "laplace"), default="eva")
    ap.add_argument("--seed", type=int, default=0)
    args = ap.parse_args(argv)
    try:
        Y = read_matrix(args.y, "y")[0]
        X = None if args.x is None else read_matrix(args.x, "x")[0]
        grid = [float(v) for v in args.grid.split(",")]
    except (UsageError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    rows = profile(Y, X, args.p, grid, args.method, args.seed)
    print("power,objective,converged")
    for nu, obj, conv in rows:
        print(f"{nu!r},{obj!r},{conv}")
    best = max(rows, key=lambda r: r[1])
    print(f"# best power {best[0]!r}", file=sys.stderr)
    return 0


if __name__ == "__main__":
    sys.exit(main())
