import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy.optimize import minimize

from ramen.nuisance import CLIP, PositivityError, fit_logistic, fit_ridge, pooled_nuisances
from ramen.scm import EnvData, KnownDagScenario, MultiEnvDataset, sample_known_dag


def test_ridge_exact_line():
    x = np.linspace(-3, 3, 50)
    model = fit_ridge(x[:, None], 2.0 * x, lam=1e-8)
    assert model.coefficients[0] == pytest.approx(2.0, abs=1e-6)
    assert model.intercept == pytest.approx(0.0, abs=1e-6)


def test_ridge_infinite_shrinkage():
    rng = np.random.default_rng(0)
    X, y = rng.normal(size=(40, 3)), rng.normal(size=40) + 4.0
    model = fit_ridge(X, y, lam=1e9)
    assert np.all(np.abs(model.coefficients) < 1e-6)
    assert model.intercept == pytest.approx(y.mean(), abs=1e-5)


def test_ridge_empty_subset_is_mean():
    y = np.array([1.0, 2.0, 6.0])
    model = fit_ridge(np.zeros((3, 0)), y)
    assert model.intercept == pytest.approx(3.0)
    assert model.predict(np.zeros((2, 0))).tolist() == [3.0, 3.0]


def test_ridge_matches_augmented_lstsq():
    # independent route: ridge as least squares on an augmented system
    rng = np.random.default_rng(5)
    X, y, lam = rng.normal(size=(30, 4)), rng.normal(size=30), 0.7
    A = np.vstack([np.column_stack([X, np.ones(30)]),
                   np.column_stack([np.sqrt(lam) * np.eye(4), np.zeros(4)])])
    b = np.concatenate([y, np.zeros(4)])
    sol, *_ = np.linalg.lstsq(A, b, rcond=None)
    model = fit_ridge(X, y, lam)
    assert np.allclose(model.coefficients, sol[:4], atol=1e-10)
    assert model.intercept == pytest.approx(sol[4], abs=1e-10)


def test_logistic_intercept_only_thirty_percent():
    t = np.array([1.0] * 3 + [0.0] * 7)
    model = fit_logistic(np.zeros((10, 0)), t)
    assert np.allclose(model.predict_raw(np.zeros((10, 0))), 0.3, atol=1e-10)


def test_logistic_separable_stays_finite():
    x = np.linspace(-2, 2, 20)
    t = (x > 0).astype(float)
    model = fit_logistic(x[:, None], t, lam=1.0)
    assert np.all(np.isfinite(model.coefficients)) and np.isfinite(model.intercept)


@settings(max_examples=30, deadline=None)
@given(seed=st.integers(0, 10_000), scale=st.floats(0.1, 20))
def test_logistic_predictions_clipped(seed, scale):
    rng = np.random.default_rng(seed)
    X = scale * rng.normal(size=(60, 2))
    t = (rng.random(60) < 0.5).astype(float)
    p = fit_logistic(X, t, lam=1e-3).predict(100 * X)
    assert np.all(p >= CLIP[0]) and np.all(p <= CLIP[1])


def test_logistic_matches_generic_optimizer():
    rng = np.random.default_rng(2)
    X = rng.normal(size=(200, 3))
    t = (rng.random(200) < 1 / (1 + np.exp(-(X @ [1.0, -0.5, 0.2] + 0.3)))).astype(float)
    lam = 0.5

    def nll(th):
        z = X @ th[:3] + th[3]
        return np.sum(np.logaddexp(0, z) - t * z) + 0.5 * lam * th[:3] @ th[:3]

    ref = minimize(nll, np.zeros(4), method="BFGS", options={"gtol": 1e-10}).x
    model = fit_logistic(X, t, lam)
    assert np.allclose(model.coefficients, ref[:3], atol=1e-5)
    assert model.intercept == pytest.approx(ref[3], abs=1e-5)
    assert model.grad_norm <= 1e-6


def test_logistic_single_class_and_non_binary():
    model = fit_logistic(np.ones((5, 1)), np.ones(5))
    assert np.allclose(model.predict(np.ones((5, 1))), CLIP[1])
    with pytest.raises(ValueError):
        fit_logistic(np.ones((3, 1)), np.array([0.0, 0.5, 1.0]))


def test_pooled_nuisances_empty_subset():
    data, _ = sample_known_dag(KnownDagScenario(), 200, 3, seed=0)
    nu = pooled_nuisances(data, ())
    pooled = data.pooled()
    assert nu.mu1.intercept == pytest.approx(pooled.Y[pooled.T == 1].mean())
    assert nu.mu0.intercept == pytest.approx(pooled.Y[pooled.T == 0].mean())
    assert nu.pi.predict_raw(np.zeros((1, 0)))[0] == pytest.approx(pooled.T.mean(), abs=1e-8)


def test_pooled_nuisances_recover_unit_effect():
    rng = np.random.default_rng(0)
    envs = []
    for _ in range(2):
        X = rng.normal(size=(5000, 1))
        T = (rng.random(5000) < 0.5).astype(float)
        envs.append(EnvData(X, T, T + X[:, 0]))
    nu = pooled_nuisances(MultiEnvDataset(envs), (0,))
    grid = np.linspace(-2, 2, 9)[:, None]
    assert np.allclose(nu.mu1.predict(grid) - nu.mu0.predict(grid), 1.0, atol=1e-6)


def test_pooling_ignores_environment_order():
    data, _ = sample_known_dag(KnownDagScenario("Y_only", "collider", 5), 300, 4, seed=9)
    flipped = MultiEnvDataset(list(reversed(data.envs)), data.covariate_names)
    a, b = pooled_nuisances(data, (0, 2, 4)), pooled_nuisances(flipped, (0, 2, 4))
    for m1, m2 in zip(a, b):
        assert np.allclose(m1.coefficients, m2.coefficients, atol=1e-10)
        assert m1.intercept == pytest.approx(m2.intercept, abs=1e-10)


def test_single_class_pool_is_positivity_error():
    X = np.zeros((4, 1))
    env = EnvData(X, np.ones(4), np.zeros(4))
    with pytest.raises(PositivityError):
        pooled_nuisances(MultiEnvDataset([env, env]), (0,))
