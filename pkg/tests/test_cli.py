import csv
import json
import os
import subprocess
import sys
import time

import numpy as np
import pytest

from evagllvm.cli import (EXIT_NONCONVERGED, EXIT_OK, EXIT_USAGE, THREADS_ENV, UsageError,
                          _threads, csv_text, main, read_matrix)
from evagllvm.model import ModelSpec
from evagllvm.simulation import simulate_dataset, synthetic_truth


def _write_csv(path, header, rows, row_names=None):
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        if header is not None:
            w.writerow(([""] if row_names else []) + list(header))
        for k, r in enumerate(rows):
            w.writerow(([row_names[k]] if row_names else []) + [repr(float(v)) for v in r])
    return str(path)


@pytest.fixture(scope="module")
def poisson_files(tmp_path_factory):
    d = tmp_path_factory.mktemp("data")
    spec = ModelSpec("poisson-log", 40, 5, 2, 1)
    P = synthetic_truth(spec, np.random.default_rng(0))
    data = simulate_dataset(spec, P, seed=1)
    y = _write_csv(d / "y.csv", [f"sp{j}" for j in range(5)], data.Y,
                   [f"site{i}" for i in range(40)])
    x = _write_csv(d / "x.csv", ["temp"], data.X)
    return y, x


def _fit(tmp_path, y, x, *extra, family="poisson-log", sub="fit"):
    out = tmp_path / "out"
    argv = [sub, "--y", y, "--family", family, "--p", "2", "--out", str(out), "--seed", "1",
            "--n-starts", "1", *extra]
    if x is not None:
        argv += ["--x", x]
    return main(argv), out


def test_fit_writes_all_outputs(tmp_path, poisson_files):
    code, out = _fit(tmp_path, *poisson_files)
    assert code == EXIT_OK
    for name in ("fit.json", "inference.json", "ordination.csv", "ellipses.csv",
                 "residuals.csv", "manifest.json"):
        assert (out / name).exists(), name
    fitted = json.loads((out / "fit.json").read_text())
    assert fitted["responses"] == [f"sp{j}" for j in range(5)]
    assert fitted["covariates"] == ["temp"]
    man = json.loads((out / "manifest.json").read_text())
    assert man["command"] == "fit" and man["seed"] == 1
    assert set(man["outputs"]) >= {"fit.json", "ellipses.csv"}
    ell = _read_ellipses(out / "ellipses.csv")
    assert ell.shape == (40, 6)
    assert np.all(ell[:, 2] >= ell[:, 3]) and np.all(ell[:, 3] > 0)


def _read_ellipses(path):
    with open(path, encoding="utf-8") as fh:
        rows = list(csv.reader(fh))
    return np.array([[float(v) for v in r[1:]] for r in rows[1:]])


def test_fit_is_byte_reproducible(tmp_path, poisson_files):
    code1, out1 = _fit(tmp_path / "a", *poisson_files)
    code2, out2 = _fit(tmp_path / "b", *poisson_files)
    assert code1 == code2 == EXIT_OK
    for name in ("fit.json", "inference.json", "ordination.csv", "residuals.csv"):
        assert (out1 / name).read_bytes() == (out2 / name).read_bytes(), name


def test_va_for_unsupported_family_is_usage_error(tmp_path, poisson_files, capsys):
    code, _ = _fit(tmp_path, poisson_files[0], None, "--method", "va", family="tweedie-log")
    assert code == EXIT_USAGE
    assert "no closed-form VA" in capsys.readouterr().err


def test_covariates_expected_but_missing(tmp_path, poisson_files, capsys):
    code, _ = _fit(tmp_path, poisson_files[0], None, "--q", "1")
    assert code == EXIT_USAGE
    assert "no --x file" in capsys.readouterr().err


def test_bad_csv_reports_line_number(tmp_path, capsys):
    bad = tmp_path / "y.csv"
    bad.write_text("a,b\n1,2\n3\n4,5\n")
    code, _ = _fit(tmp_path, str(bad), None)
    assert code == EXIT_USAGE
    assert "line 3" in capsys.readouterr().err
    bad.write_text("a,b\n1,2\n3,NA\n")
    with pytest.raises(UsageError, match="line 3, column 2: missing"):
        read_matrix(str(bad), "y")
    bad.write_text("1,2\n3,x4\n")
    with pytest.raises(UsageError, match="line 2"):
        read_matrix(str(bad), "y")


def test_invalid_responses_are_usage_errors(tmp_path, capsys):
    y = _write_csv(tmp_path / "y.csv", ["a", "b"], [[0, 1], [2, -1], [1, 1]])
    code, _ = _fit(tmp_path, y, None, family="poisson-log")
    assert code == EXIT_USAGE
    code = main(["fit", "--y", y, "--family", "poisson-log", "--p", "0", "--out",
                 str(tmp_path / "o")])
    assert code == EXIT_USAGE


def test_nonconverged_fit_exits_3_and_still_writes(tmp_path, poisson_files):
    code, out = _fit(tmp_path, *poisson_files, "--max-iter", "2")
    assert code == EXIT_NONCONVERGED
    assert (out / "fit.json").exists()


def test_csv_output_round_trips(tmp_path):
    text = csv_text(["a", "b"], [[0.1, float("nan")], [1e-300, -2.5]])
    p = tmp_path / "t.csv"
    p.write_text(text)
    with open(p, encoding="utf-8") as fh:
        rows = list(csv.reader(fh))
    assert rows[1] == ["0.1", "NA"]
    assert float(rows[2][0]) == 1e-300
    q = tmp_path / "u.csv"
    q.write_text(csv_text(["a", "b"], [[0.1, 0.2], [1e-300, -2.5]]))
    arr, names, _ = read_matrix(str(q), "u")
    assert names == ["a", "b"]
    np.testing.assert_array_equal(arr, [[0.1, 0.2], [1e-300, -2.5]])


def test_gaussian_compare_agrees_across_methods(tmp_path):
    spec = ModelSpec("gaussian-identity", 50, 5, 1)
    P = synthetic_truth(spec, np.random.default_rng(2))
    data = simulate_dataset(spec, P, seed=3)
    y = _write_csv(tmp_path / "y.csv", [f"r{j}" for j in range(5)], data.Y)
    out = tmp_path / "cmp"
    code = main(["compare", "--y", y, "--family", "gaussian-identity", "--p", "1",
                 "--out", str(out)])
    assert code == EXIT_OK
    res = json.loads((out / "compare.json").read_text())["results"]
    assert res["eva"]["objective"] == pytest.approx(res["laplace"]["objective"], abs=1e-6)
    assert res["eva"]["objective"] == pytest.approx(res["va"]["objective"], abs=1e-6)
    with open(out / "estimates.csv", encoding="utf-8") as fh:
        rows = list(csv.reader(fh))
    assert rows[0] == ["parameter", "eva", "laplace", "va"]
    assert (out / "timing.csv").exists()


def test_compare_reports_variance_explained(tmp_path, poisson_files):
    code, out = _fit(tmp_path, *poisson_files, sub="compare")
    assert code == EXIT_OK
    res = json.loads((out / "compare.json").read_text())["results"]
    assert set(res) == {"eva", "laplace", "va"}
    assert all(isinstance(res[m]["variance_explained"], float) for m in res)


def test_simulate_small_study_is_reproducible(tmp_path):
    cfg = {"family": "gaussian-identity", "n_grid": [30, 60], "m_grid": [5],
           "n_replicates": 5, "methods": ["eva", "laplace"], "seed": 4}
    cpath = tmp_path / "study.json"
    cpath.write_text(json.dumps(cfg))
    t0 = time.perf_counter()
    assert main(["simulate", "--config", str(cpath), "--out", str(tmp_path / "s1")]) == EXIT_OK
    assert time.perf_counter() - t0 < 60
    assert main(["simulate", "--config", str(cpath), "--out", str(tmp_path / "s2")]) == EXIT_OK
    a = (tmp_path / "s1" / "study.csv").read_bytes()
    assert a == (tmp_path / "s2" / "study.csv").read_bytes()
    assert (tmp_path / "s1" / "study.json").read_bytes() == \
        (tmp_path / "s2" / "study.json").read_bytes()
    assert len(a.decode().strip().splitlines()) == 1 + 2 * 2


def test_simulate_rejects_bad_config(tmp_path, capsys):
    cpath = tmp_path / "bad.toml"
    cpath.write_text('family = "tweedie-log"\nmethods = ["va"]\n')
    assert main(["simulate", "--config", str(cpath), "--out", str(tmp_path / "o")]) == \
        EXIT_USAGE
    assert "no closed-form VA" in capsys.readouterr().err


def test_thread_settings(monkeypatch, tmp_path, poisson_files):
    monkeypatch.delenv(THREADS_ENV, raising=False)
    assert _threads(None) is None
    assert _threads("2") == 2
    monkeypatch.setenv(THREADS_ENV, "3")
    assert _threads(None) == 3
    assert _threads("1") == 1
    with pytest.raises(UsageError):
        _threads("0")
    monkeypatch.setenv(THREADS_ENV, "many")
    code, _ = _fit(tmp_path, *poisson_files)
    assert code == EXIT_USAGE
    monkeypatch.setenv(THREADS_ENV, "1")
    code, _ = _fit(tmp_path, *poisson_files, "--threads", "1")
    assert code == EXIT_OK


def test_replay_reproduces_outputs(tmp_path, poisson_files, monkeypatch):
    code, out = _fit(tmp_path, *poisson_files)
    assert code == EXIT_OK
    monkeypatch.chdir(tmp_path)
    assert main(["replay", str(out / "manifest.json"), "--out", str(tmp_path / "re")]) == 0
    assert (out / "fit.json").read_bytes() == (tmp_path / "re" / "fit.json").read_bytes()


def test_console_script_runs(tmp_path, poisson_files):
    out = tmp_path / "o"
    env = {**os.environ, THREADS_ENV: "1"}
    r = subprocess.run([sys.executable, "-m", "evagllvm.cli", "fit", "--y", poisson_files[0],
                        "--family", "poisson-log", "--p", "1", "--out", str(out)],
                       capture_output=True, text=True, env=env)
    assert r.returncode == 0, r.stderr
    r = subprocess.run([sys.executable, "-m", "evagllvm.cli", "fit"], capture_output=True,
                       text=True)
    assert r.returncode == 2
