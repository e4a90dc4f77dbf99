import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from evagllvm.model import (DataError, DimensionError, Layout, ModelSpec, Parameters,
                            ResponseData, VariationalParams, dumps_json, linear_predictor,
                            pack, residual_covariance, unpack)
from conftest import random_instance


def _params(m, p, q, **kw):
    return Parameters(beta0=np.zeros(m), B=np.zeros((m, q)),
                      Gamma=np.zeros((m, p)) if "Gamma" not in kw else kw.pop("Gamma"), **kw)


def test_linear_predictor_hand_examples():
    spec = ModelSpec("poisson-log", 1, 1, 1, 2)
    P = Parameters(np.array([1.0]), np.array([[0.5, -0.25]]), np.array([[0.7]]))
    eta = linear_predictor(spec, P, np.array([[1.0, 2.0]]), np.zeros((1, 1)))
    np.testing.assert_allclose(eta, [[1.0]], atol=1e-15)

    spec = ModelSpec("poisson-log", 3, 4, 2)
    P = _params(4, 2, 0, Gamma=np.zeros((4, 2)))
    np.testing.assert_array_equal(linear_predictor(spec, P, None, np.ones((3, 2))), 0.0)

    spec = ModelSpec("poisson-log", 1, 2, 2)
    G = np.array([[0.3, 0.0], [0.3, 0.7]])
    P = _params(2, 2, 0, Gamma=G)
    eta = linear_predictor(spec, P, None, np.array([[1.0, -1.0]]))
    np.testing.assert_allclose(eta[0, 1], -0.4, atol=1e-15)


def test_linear_predictor_row_effects_and_dimension_errors():
    spec = ModelSpec("poisson-log", 3, 2, 1, row_effects=True)
    P = _params(2, 1, 0, Gamma=np.array([[1.0], [0.5]]), alpha=np.array([0.0, 1.0, -1.0]))
    eta = linear_predictor(spec, P, None, np.zeros((3, 1)))
    np.testing.assert_allclose(eta, [[0, 0], [1, 1], [-1, -1]])
    with pytest.raises(DimensionError, match="a"):
        linear_predictor(spec, P, None, np.zeros((2, 1)))


def test_linear_predictor_affine_in_scores():
    spec, data, P, V = random_instance("poisson-log", 6, 5, 2, seed=3)
    d = np.random.default_rng(0).normal(size=(6, 2))
    e0 = linear_predictor(spec, P, data.X, V.a)
    e1 = linear_predictor(spec, P, data.X, V.a + d)
    np.testing.assert_allclose(e1 - e0, d @ P.Gamma.T, atol=1e-13)


def test_zero_vector_unpacks_to_unit_transforms():
    spec = ModelSpec("negbinomial-log", 4, 3, 2, 1)
    theta = np.zeros(Layout(spec).size)
    P, V = unpack(theta, spec)
    np.testing.assert_array_equal(np.diag(P.Gamma[:2]), 1.0)
    np.testing.assert_array_equal(P.phi, 1.0)
    np.testing.assert_array_equal(V.A, np.broadcast_to(np.eye(2), (4, 2, 2)))


@pytest.mark.parametrize("family,diag,row", [("negbinomial-log", False, False),
                                             ("poisson-log", True, True),
                                             ("tweedie-log", False, True)])
def test_pack_unpack_round_trip(family, diag, row):
    spec = ModelSpec(family, 7, 5, 3, 2, row_effects=row)
    layout = Layout(spec, diagonal=diag)
    rng = np.random.default_rng(1)
    for _ in range(100):
        t = rng.normal(size=layout.size)
        P, V = unpack(t, spec, diagonal=diag)
        np.testing.assert_allclose(pack(P, V, spec), t, rtol=0, atol=1e-14)
    # the other direction on generated valid parameters
    spec2, _, P, V = random_instance(family, 7, 5, 3, q=2, seed=2)
    if row:
        P = Parameters(P.beta0, P.B, P.Gamma, P.phi,
                       np.concatenate([[0.0], rng.normal(size=6)]), P.nu)
        spec2 = ModelSpec(family, 7, 5, 3, 2, row_effects=True)
    P2, V2 = unpack(pack(P, V, spec2), spec2)
    for a, b in [(P.beta0, P2.beta0), (P.B, P2.B), (P.Gamma, P2.Gamma), (V.a, V2.a),
                 (V.L, V2.L)]:
        np.testing.assert_allclose(b, a, rtol=1e-14, atol=1e-15)


@settings(max_examples=50, deadline=None)
@given(arrays(np.float64, Layout(ModelSpec("beta-logit", 3, 4, 2, 1)).size,
              elements=st.floats(-20, 20)))
def test_unpack_preserves_constraints(theta):
    spec = ModelSpec("beta-logit", 3, 4, 2, 1)
    P, V = unpack(theta, spec)
    P.validate(spec)
    V.validate(spec)
    assert np.all(np.triu(P.Gamma[:2], 1) == 0)
    assert np.all(P.phi > 0)


def test_pack_errors():
    spec = ModelSpec("poisson-log", 2, 2, 1)
    with pytest.raises(DimensionError):
        unpack(np.zeros(3), spec)
    t = np.zeros(Layout(spec).size)
    t[0] = np.nan
    with pytest.raises(ValueError):
        unpack(t, spec)


def test_residual_covariance_examples():
    P = _params(2, 1, 0, Gamma=np.array([[1.0], [0.0]]))
    np.testing.assert_array_equal(residual_covariance(P), [[1, 0], [0, 0]])
    G = np.vstack([np.eye(3), np.zeros((2, 3))])
    assert np.trace(residual_covariance(_params(5, 3, 0, Gamma=G))) == 3.0
    rng = np.random.default_rng(0)
    for _ in range(20):
        S = residual_covariance(_params(8, 3, 0, Gamma=rng.normal(size=(8, 3))))
        np.testing.assert_array_equal(S, S.T)
        assert np.linalg.eigvalsh(S).min() >= -1e-12


def test_spec_invariants():
    with pytest.raises(ValueError):
        ModelSpec("poisson-log", 5, 2, 3)
    with pytest.raises(ValueError):
        ModelSpec("tweedie-log", 5, 2, 1, tweedie_power=2.0)
    with pytest.raises(ValueError):
        ModelSpec("poisson-log", 5, 2, 1, tweedie_power=1.5)
    assert ModelSpec("tweedie-log", 5, 2, 1).tweedie_power == 1.5
    with pytest.raises(ValueError):
        ModelSpec("poisson-log", 0, 2, 1)


def test_response_validation():
    spec = ModelSpec("bernoulli-logit", 2, 2, 1)
    with pytest.raises(DataError):
        ResponseData(np.array([[0, 1], [2, 0]]), None).validate(spec)
    with pytest.raises(DataError, match="missing"):
        ResponseData(np.array([[0, 1], [np.nan, 0]]), None).validate(spec)
    with pytest.raises(DimensionError):
        ResponseData(np.zeros((3, 2)), None).validate(spec)
    spec = ModelSpec("beta-logit", 1, 2, 1)
    with pytest.raises(DataError):
        ResponseData(np.array([[0.0, 0.5]]), None).validate(spec)


def test_json_round_trip():
    spec, _, P, V = random_instance("negbinomial-log", 4, 3, 2, seed=5)
    d = json.loads(dumps_json({"params": P.to_dict(), "var": V.to_dict(),
                               "spec": spec.to_dict()}))
    spec2 = ModelSpec.from_dict(d["spec"])
    assert spec2 == spec
    P2 = Parameters.from_dict(d["params"], spec2)
    V2 = VariationalParams.from_dict(d["var"])
    np.testing.assert_array_equal(P2.Gamma, P.Gamma)
    np.testing.assert_array_equal(P2.phi, P.phi)
    np.testing.assert_array_equal(V2.L, V.L)
