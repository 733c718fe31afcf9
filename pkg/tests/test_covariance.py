"""Scale-model updates and the profile log-likelihood."""

import numpy as np
import pytest

from tensorreg.covariance import (
    ScaleModel,
    adjust,
    fit_structured_scale,
    mode_sse,
    profile_loglik,
    sigma2_update,
    structured_objective,
)
from tensorreg.errors import ConfigError, DegenerateScaleError, TensorShapeError
from tensorreg.tensor_core import matricize_mode
from tensorreg.tvn import TvnParams, log_density, sample_array


def _spd(rng, m):
    g = rng.standard_normal((m, m))
    s = g @ g.T + m * np.eye(m)
    return s / s[0, 0]


class TestScaleModel:

    def test_kinds_and_alias(self):
        assert ScaleModel("equicorrelation").kind == "equicorr"
        assert ScaleModel.parse("AR1").kind == "ar1"
        with pytest.raises(ConfigError):
            ScaleModel("banded")

    def test_ar1_matrix(self):
        np.testing.assert_allclose(ScaleModel("ar1").matrix(3, 0.5),
                                   [[1.0, 0.5, 0.25], [0.5, 1.0, 0.5], [0.25, 0.5, 1.0]])

    def test_equicorr_matrix(self):
        np.testing.assert_allclose(ScaleModel("equicorr").matrix(3, 0.2),
                                   [[1.0, 0.2, 0.2], [0.2, 1.0, 0.2], [0.2, 0.2, 1.0]])

    def test_rho_range(self):
        with pytest.raises(DegenerateScaleError):
            ScaleModel("ar1").matrix(3, 1.0)
        with pytest.raises(DegenerateScaleError):
            ScaleModel("equicorr").matrix(3, -0.5)
        assert ScaleModel("equicorr").rho_bounds(3) == (-0.5, 1.0)

    def test_param_counts(self):
        assert ScaleModel("unstructured").param_count(4) == 9
        assert ScaleModel("ar1").param_count(4) == 1
        assert ScaleModel("ar1").param_count(1) == 0
        assert ScaleModel("identity").param_count(4) == 0


class TestModeSSE:

    def test_identity_scales_give_plain_cross_products(self):
        rng = np.random.default_rng(42)
        resid = rng.standard_normal((5, 2, 3, 4))
        sse = mode_sse(list(resid), [np.eye(2), np.eye(3), np.eye(4)], 2)
        expected = sum(matricize_mode(z, 2) @ matricize_mode(z, 2).T for z in resid)
        np.testing.assert_allclose(sse.matrix, expected, rtol=1e-10)
        assert sse.df == 5 * 8

    def test_trace_is_the_quadratic_form(self):
        rng = np.random.default_rng(42)
        scales = [_spd(rng, m) for m in (2, 3)]
        resid = rng.standard_normal((6, 2, 3))
        params = TvnParams(np.zeros((2, 3)), scales, 1.0)
        q = sum(-2 * log_density(z, params) for z in resid) - 6 * (
            6 * np.log(2 * np.pi) + 3 * np.linalg.slogdet(scales[0])[1] + 2 * np.linalg.slogdet(scales[1])[1]
        )
        for k in (1, 2):
            sse = mode_sse(resid, scales, k)
            np.testing.assert_allclose(np.trace(np.linalg.solve(scales[k - 1], sse.matrix)), q, rtol=1e-10)

    def test_shape_errors(self):
        with pytest.raises(TensorShapeError):
            mode_sse(np.zeros((2, 2, 3)), [np.eye(2), np.eye(2)], 1)
        with pytest.raises(TensorShapeError):
            mode_sse(np.zeros((2, 2, 3)), [np.eye(2), np.eye(3)], 3)


class TestUpdates:

    def test_adjust_normalizes(self):
        rng = np.random.default_rng(42)
        s = _spd(rng, 4) * 7.0
        out = adjust(10, 2.0, s)
        assert out[0, 0] == 1.0
        np.testing.assert_allclose(out, s / s[0, 0], rtol=1e-12)

    def test_adjust_degenerate_first_coordinate(self):
        s = np.diag([0.0, 1.0, 1.0])
        with pytest.raises(DegenerateScaleError):
            adjust(5, 1.0, s)

    @pytest.mark.parametrize("kind", ["ar1", "equicorr"])
    def test_objective_matches_dense(self, kind):
        rng = np.random.default_rng(42)
        g = rng.standard_normal((5, 20))
        s = g @ g.T
        sigma = ScaleModel(kind).matrix(5, 0.3)
        dense = 0.5 * 20 * np.linalg.slogdet(sigma)[1] + np.trace(np.linalg.solve(sigma, s)) / (2 * 1.7)
        np.testing.assert_allclose(structured_objective(kind, s, 20, 1.7, 0.3), dense, rtol=1e-10)

    @pytest.mark.parametrize("kind,rho", [("ar1", 0.6), ("ar1", -0.4), ("equicorr", 0.3)])
    def test_structured_fit_recovers_rho(self, kind, rho):
        rng = np.random.default_rng(42)
        sigma = ScaleModel(kind).matrix(5, rho)
        params = TvnParams(np.zeros(5), [sigma], 2.0)
        y = sample_array(params, 5000, rng)
        res = fit_structured_scale(kind, y.T @ y, 5000)
        assert abs(res.rho - rho) < 0.05
        assert not res.boundary
        assert res.matrix[0, 0] == pytest.approx(1.0, abs=1e-15)

    def test_identity_is_fixed(self):
        res = fit_structured_scale("identity", np.eye(3) * 4.0, 10)
        np.testing.assert_array_equal(res.matrix, np.eye(3))

    def test_unstructured_goes_through_adjust(self):
        with pytest.raises(ValueError):
            fit_structured_scale("unstructured", np.eye(3), 10)


class TestProfileLoglik:

    def test_equals_summed_density_at_sigma2_hat(self):
        rng = np.random.default_rng(42)
        scales = [_spd(rng, m) for m in (2, 3)]
        resid = rng.standard_normal((7, 2, 3))
        sse = mode_sse(resid, scales, 1)
        sigma2 = sigma2_update(scales[0], sse, 7, 6)
        params = TvnParams(np.zeros((2, 3)), scales, sigma2)
        total = sum(log_density(z, params) for z in resid)
        np.testing.assert_allclose(profile_loglik(sigma2, scales, 7, 6), total, rtol=1e-10)

    def test_zero_sigma2(self):
        with pytest.raises(DegenerateScaleError):
            profile_loglik(0.0, [np.eye(2)], 3, 2)
