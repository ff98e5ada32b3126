import json
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from hidim._exceptions import IllConditionedCovarianceError, InvalidArgumentError
from hidim.gpcore import (
    GaussianProcessModel,
    KernelConfig,
    build_model,
    correlation_matrix,
    covariance_matrix,
    fit_gp,
    gp_predict,
    load_model,
    loo_predictions,
    matern32,
    matern52,
    negative_log_likelihood,
    save_model,
)


def scalar_matern52(h):
    return (1 + math.sqrt(5) * h + 5 * h * h / 3) * math.exp(-math.sqrt(5) * h)


def toy_model(n=20, d=2, nugget=0.0, seed=0):
    rng = np.random.default_rng(seed)
    X = rng.random((n, d))
    y = np.sin(3 * X[:, 0]) + X[:, -1] ** 2
    kernel = KernelConfig(np.full(d, 0.4), 1.3, nugget)
    return build_model(X, y, kernel), X, y


class TestMatern:
    def test_zero_lag(self):
        assert matern52(0.0) == 1.0

    def test_decay(self):
        assert matern52(50.0) < 1e-20

    def test_unit_lag(self):
        assert matern52(1.0) == pytest.approx((1 + math.sqrt(5) + 5 / 3) * math.exp(-math.sqrt(5)), abs=1e-15)
        assert matern52(1.0) == pytest.approx(0.52399, abs=1e-5)

    def test_negative_distance(self):
        with pytest.raises(InvalidArgumentError):
            matern52(-0.1)

    def test_three_halves_switch(self):
        assert matern32(1.0) == pytest.approx((1 + math.sqrt(3)) * math.exp(-math.sqrt(3)))

    @settings(max_examples=40, deadline=None)
    @given(h=st.floats(0, 30), g=st.floats(0, 30))
    def test_monotone_in_lag(self, h, g):
        lo, hi = sorted((h, g))
        assert matern52(hi) <= matern52(lo) + 1e-15


class TestCovariance:
    def test_diagonal(self):
        X = np.random.default_rng(1).random((6, 3))
        nug = np.linspace(0, 0.5, 6)
        C = covariance_matrix(X, KernelConfig([0.3, 0.5, 2.0], 1.7, nug))
        np.testing.assert_array_equal(np.diag(C), 1.7 + nug)

    def test_identical_points_without_nugget(self):
        X = np.array([[0.2, 0.4], [0.2, 0.4], [0.9, 0.1]])
        with pytest.raises(IllConditionedCovarianceError):
            covariance_matrix(X, KernelConfig([0.5, 0.5], 1.0, 0.0))

    def test_identical_points_with_nugget(self):
        X = np.array([[0.2, 0.4], [0.2, 0.4], [0.9, 0.1]])
        covariance_matrix(X, KernelConfig([0.5, 0.5], 1.0, 1e-3))

    def test_hand_set_points(self):
        X = np.array([[0.0], [0.5], [1.0]])
        C = covariance_matrix(X, KernelConfig([1.0], 2.0, 0.0))
        expected = np.array([[2.0 * scalar_matern52(abs(a - b)) for b in (0, 0.5, 1)] for a in (0, 0.5, 1)])
        np.testing.assert_allclose(C, expected, rtol=0, atol=1e-14)

    def test_tensor_product(self):
        A = np.array([[0.1, 0.7]])
        B = np.array([[0.4, 0.2]])
        r = correlation_matrix(A, B, [0.3, 0.9])[0, 0]
        assert r == pytest.approx(scalar_matern52(0.3 / 0.3) * scalar_matern52(0.5 / 0.9), abs=1e-15)

    def test_kernel_validation(self):
        with pytest.raises(InvalidArgumentError):
            KernelConfig([0.0], 1.0)
        with pytest.raises(InvalidArgumentError):
            KernelConfig([1.0], -1.0)
        with pytest.raises(InvalidArgumentError):
            KernelConfig([1.0], 1.0, -1e-3)


class TestLikelihood:
    def test_two_point_dense_formula(self):
        X = np.array([[0.1], [0.6]])
        y = np.array([1.0, 2.5])
        theta, sigma2, tau = 0.4, 1.5, 0.01
        C = sigma2 * np.array([[1, scalar_matern52(0.5 / theta)], [scalar_matern52(0.5 / theta), 1]]) + tau * np.eye(2)
        Ci = np.linalg.inv(C)
        ones = np.ones(2)
        beta = ones @ Ci @ y / (ones @ Ci @ ones)
        r = y - beta
        expected = 0.5 * np.log(np.linalg.det(C)) + 0.5 * r @ Ci @ r + np.log(2 * np.pi)
        got = negative_log_likelihood(X, y, [theta], nugget=tau, process_variance=sigma2)
        assert got == pytest.approx(expected, abs=1e-10)

    def test_profiled_matches_full_at_optimum_variance(self):
        X = np.random.default_rng(2).random((12, 2))
        y = np.cos(4 * X[:, 0]) * X[:, 1]
        nll, info = negative_log_likelihood(X, y, [0.3, 0.8], nugget=1e-3, return_info=True)
        full = negative_log_likelihood(X, y, [0.3, 0.8], nugget=1e-3 * info["sigma2"],
                                       process_variance=info["sigma2"])
        assert nll == pytest.approx(full, abs=1e-9)

    def test_constant_outputs_finite(self):
        X = np.random.default_rng(3).random((10, 1))
        nll = negative_log_likelihood(X, np.full(10, 4.2), [0.3], nugget=1e-2)
        assert np.isfinite(nll) and nll < 1e20

    def test_ill_conditioned_is_penalized(self):
        X = np.array([[0.3], [0.3], [0.8]])
        nll, info = negative_log_likelihood(X, [1.0, 2.0, 3.0], [0.5], nugget=0.0, return_info=True)
        assert info["ill_conditioned"] and nll >= 1e20

    @settings(max_examples=15, deadline=None)
    @given(seed=st.integers(0, 1000))
    def test_row_order_invariance(self, seed):
        rng = np.random.default_rng(seed)
        X = rng.random((15, 2))
        y = np.sin(5 * X[:, 0]) + rng.normal(scale=0.1, size=15)
        perm = rng.permutation(15)
        a = negative_log_likelihood(X, y, [0.4, 0.6], nugget=1e-2)
        b = negative_log_likelihood(X[perm], y[perm], [0.4, 0.6], nugget=1e-2)
        assert a == pytest.approx(b, abs=1e-10)


class TestFit:
    def test_recovers_prior_lengthscale(self):
        rng = np.random.default_rng(4)
        X = np.sort(rng.random(80))[:, None]
        C = covariance_matrix(X, KernelConfig([0.3], 1.0, 1e-8), check=False)
        y = np.linalg.cholesky(C + 1e-10 * np.eye(80)) @ rng.normal(size=80)
        model = fit_gp(X, y)
        assert 0.15 <= model.kernel.lengthscales[0] <= 0.6

    def test_warm_start_is_first(self):
        X = np.random.default_rng(5).random((15, 2))
        y = X[:, 0] + np.sin(6 * X[:, 1])
        init = np.array([0.37, 1.9])
        model = fit_gp(X, y, init=init, n_starts=3)
        assert model.trace.warm_start
        np.testing.assert_array_equal(model.trace.starts[0], init)
        assert len(model.trace.starts) == 3
        assert all(f <= s for f, s in zip(model.trace.final_nll, model.trace.start_nll))

    def test_noiseless_nugget_hits_floor(self):
        X = np.linspace(0, 1, 15)[:, None]
        model = fit_gp(X, np.sin(2 * np.pi * X[:, 0]))
        assert model.kernel.nugget < 1e-4 * model.kernel.process_variance

    def test_too_few_points(self):
        with pytest.raises(InvalidArgumentError):
            fit_gp(np.random.default_rng(0).random((3, 2)), np.zeros(3))

    def test_seeded_fit_is_deterministic(self):
        X = np.random.default_rng(6).random((20, 2))
        y = np.exp(X[:, 0]) - X[:, 1]
        a, b = fit_gp(X, y, random_state=3), fit_gp(X, y, random_state=3)
        np.testing.assert_array_equal(a.kernel.lengthscales, b.kernel.lengthscales)

    def test_heteroscedastic_fixed_nugget(self):
        rng = np.random.default_rng(7)
        X = rng.random((40, 1))
        tau = 0.01 + 0.2 * X[:, 0]
        y = np.sin(4 * X[:, 0]) + rng.normal(size=40) * np.sqrt(tau)
        model = fit_gp(X, y, nugget=tau)
        np.testing.assert_array_equal(model.kernel.nugget, tau)
        assert model.kernel.heteroscedastic

    def test_model_invariants(self):
        model, X, y = toy_model()
        C = covariance_matrix(X, model.kernel, check=False)
        np.testing.assert_allclose(model.covariance, C, rtol=1e-8, atol=1e-12)
        np.testing.assert_allclose(C @ model.alpha_weights, y - model.trend, rtol=1e-8, atol=1e-10)


class TestPrediction:
    def test_interpolation(self):
        model, X, y = toy_model()
        mean, var = gp_predict(model, X)
        assert np.max(np.abs(mean - y)) <= 1e-8 * np.ptp(y)
        assert np.all(var <= 1e-8 * model.kernel.process_variance)

    def test_far_query(self):
        model, X, _ = toy_model()
        mean, var = gp_predict(model, np.array([[100.0, 100.0]]))
        w = np.linalg.solve(model.covariance, np.ones(model.n))
        assert mean[0] == pytest.approx(model.trend, abs=1e-12)
        assert var[0] == pytest.approx(model.kernel.process_variance + 1 / w.sum(), rel=1e-10)

    def test_two_point_kriging_system(self):
        X = np.array([[0.2], [0.7]])
        y = np.array([-1.0, 3.0])
        model = build_model(X, y, KernelConfig([0.5], 2.0, 0.0))
        q = 0.45
        C = 2.0 * np.array([[1, scalar_matern52(1.0)], [scalar_matern52(1.0), 1]])
        c = 2.0 * np.array([scalar_matern52(0.25 / 0.5), scalar_matern52(0.25 / 0.5)])
        # ordinary-kriging system with the unbiasedness constraint
        A = np.block([[C, np.ones((2, 1))], [np.ones((1, 2)), np.zeros((1, 1))]])
        lam = np.linalg.solve(A, np.append(c, 1.0))[:2]
        assert gp_predict(model, [[q]])[0][0] == pytest.approx(lam @ y, abs=1e-10)

    def test_dimension_mismatch(self):
        model, _, _ = toy_model()
        with pytest.raises(InvalidArgumentError):
            gp_predict(model, np.zeros((2, 3)))

    def test_continuity(self):
        model, _, _ = toy_model()
        q = np.array([[0.3, 0.6]])
        a = gp_predict(model, q)[0][0]
        b = gp_predict(model, q + 1e-9)[0][0]
        assert abs(a - b) <= 1e-6 * math.sqrt(model.kernel.process_variance)


class TestLoo:
    def test_matches_drop_one_refit(self):
        model, X, y = toy_model(n=20, nugget=1e-4)
        means, variances = loo_predictions(model)
        for i in range(20):
            keep = np.arange(20) != i
            sub = build_model(X[keep], y[keep], model.kernel)
            m, v = gp_predict(sub, X[[i]])
            assert means[i] == pytest.approx(m[0], abs=1e-6)
            assert variances[i] == pytest.approx(v[0], rel=1e-5, abs=1e-9)
        assert np.all(variances > 0)

    def test_huge_nugget(self):
        # the data are ignored, leaving the trend re-estimated from the other points
        model, _, y = toy_model(nugget=1e8)
        means, _ = loo_predictions(model)
        np.testing.assert_allclose(means, (y.sum() - y) / (y.size - 1), atol=1e-6)


class TestPersistence:
    def test_roundtrip(self, tmp_path):
        X = np.random.default_rng(8).random((15, 2)) * 4 - 2
        y = X[:, 0] ** 2 + X[:, 1]
        model = fit_gp(X, y, input_bounds=([-2, -2], [2, 2]), n_starts=2)
        path = tmp_path / "gp.json"
        save_model(model, path)
        back = load_model(path, data=(X, y))
        Q = np.random.default_rng(9).random((5, 2))
        np.testing.assert_allclose(gp_predict(back, Q)[0], gp_predict(model, Q)[0], rtol=1e-12)

    def test_hash_mismatch(self, tmp_path):
        model, X, y = toy_model()
        path = tmp_path / "gp.json"
        save_model(model, path)
        with pytest.raises(InvalidArgumentError):
            load_model(path, data=(X, y + 1.0))
        payload = json.loads(path.read_text())
        payload["outputs"][0] += 1.0
        path.write_text(json.dumps(payload))
        with pytest.raises(InvalidArgumentError):
            load_model(path)


def test_estimator_api():
    rng = np.random.default_rng(10)
    X = rng.random((25, 2))
    y = np.sin(4 * X[:, 0]) + X[:, 1]
    est = GaussianProcessModel(n_starts=2).fit(X, y)
    assert est.score(X, y) > 0.999
    mean, var = est.predict(X[:3], return_var=True)
    assert mean.shape == var.shape == (3,)
    assert est.loo_predict().shape == (25,)
    assert est.get_params()["n_starts"] == 2
