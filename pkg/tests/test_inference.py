"""Asymptotic laws of the coefficient, contrasts and the scale information."""

import warnings

import numpy as np
import pytest

from tensorreg.config import BUDGETS
from tensorreg.errors import BudgetExceededError, DegenerateScaleError, TensorShapeError
from tensorreg.estimation import ToTRSpec, fit
from tensorreg.inference import (
    AsymptoticLaw,
    asymptotic_law,
    centered_model_adjustment,
    contrast_transform,
    cp_asymptotic_cov,
    fisher_info_scale,
    is_singular,
    jacobian_blocks,
    marginal_pvalues,
    schur_kernel_residual,
    standardize,
    tr_op_asymptotic_cov,
    tucker_asymptotic_cov,
)
from tensorreg.lowrank import CpCoeff, OpCoeff, TrCoeff, random_coeff, to_full
from tensorreg.modelselect import build_tanova_design
from tensorreg.simulate import cell_design
from tensorreg.tensor_core import DenseTensor, kronecker_all, vec

COV, RESP = (2, 3), (3, 2)
EPS = 1e-3


def _quiet_fit(spec, X, Y):
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", RuntimeWarning)
        return fit(spec, X, Y)


def _numeric_jacobian(build, params, k, to_theta, from_theta):
    """Central differences of vec(B) along vec-coordinates of parameter block k."""
    theta = to_theta(params[k])
    cols = []
    for t in range(theta.size):
        step = np.zeros_like(theta)
        step[t] = EPS
        plus, minus = list(params), list(params)
        plus[k] = from_theta(theta + step, params[k].shape)
        minus[k] = from_theta(theta - step, params[k].shape)
        cols.append((vec(to_full(build(plus))) - vec(to_full(build(minus)))) / (2 * EPS))
    return np.stack(cols, axis=1)


def _mat_theta(a):
    return a.ravel(order="F")


def _mat_from(theta, shape):
    return theta.reshape(shape, order="F")


def _core_theta(core):
    # vec of the mode-2 unfolding
    return core.transpose(1, 0, 2).ravel(order="F")


def _core_from(theta, shape):
    ga, d, gb = shape
    return theta.reshape((d, ga, gb), order="F").transpose(1, 0, 2)


class TestJacobians:

    def test_cp(self):
        rng = np.random.default_rng(42)
        factors = [rng.standard_normal((d, 2)) for d in COV + RESP]

        def build(fs):
            return CpCoeff(None, fs[:2], fs[2:])

        jac = jacobian_blocks(build(factors))
        assert jac.names == ("L_1", "L_2", "M_1", "M_2")
        for k, block in enumerate(jac.blocks):
            expected = _numeric_jacobian(build, factors, k, _mat_theta, _mat_from)
            np.testing.assert_allclose(block, expected, atol=1e-8)

    def test_cp_weights_fold_into_last_response_factor(self):
        rng = np.random.default_rng(42)
        factors = [rng.standard_normal((d, 2)) for d in COV + RESP]
        w = np.array([2.0, 0.5])
        weighted = jacobian_blocks(CpCoeff(w, factors[:2], factors[2:]))
        folded = jacobian_blocks(CpCoeff(None, factors[:2], factors[2:3] + [factors[3] * w]))
        for a, b in zip(weighted.blocks, folded.blocks):
            np.testing.assert_allclose(a, b)

    def test_op(self):
        rng = np.random.default_rng(42)
        mats = [rng.standard_normal((m, h)) for h, m in zip(COV, RESP)]
        jac = jacobian_blocks(OpCoeff(mats))
        for k, block in enumerate(jac.blocks):
            expected = _numeric_jacobian(OpCoeff, mats, k, _mat_theta, _mat_from)
            np.testing.assert_allclose(block, expected, atol=1e-8)

    def test_tr(self):
        rng = np.random.default_rng(42)
        coeff = random_coeff("tr", COV, RESP, (2, 3, 2, 2), seed=rng)
        cores = list(coeff.cores)

        def build(cs):
            return TrCoeff(cs[:2], cs[2:])

        jac = jacobian_blocks(coeff)
        assert jac.matrix.shape == (int(np.prod(COV + RESP)), sum(c.size for c in cores))
        for k, block in enumerate(jac.blocks):
            expected = _numeric_jacobian(build, cores, k, _core_theta, _core_from)
            np.testing.assert_allclose(block, expected, atol=1e-8)

    def test_tucker_has_no_factor_jacobian(self):
        with pytest.raises(TypeError):
            jacobian_blocks(random_coeff("tucker", COV, RESP, (1, 1, 1, 1), seed=0))


class TestTuckerLaw:

    def test_balanced_design_is_per_mode(self):
        rng = np.random.default_rng(42)
        design, X = cell_design((3, 2), 3)
        Y = rng.standard_normal((design.n, 2, 3))
        result = _quiet_fit(ToTRSpec("tucker", (2, 1, 2, 2), intercept=False, max_iter=50), X, Y)
        law = tucker_asymptotic_cov(result, X)
        assert law.structure == "kronecker"
        assert law.scale == pytest.approx(result.sigma2 / 3)
        assert law.block_modes == ((1,), (2,), (3,), (4,))

        # general formula sigma2 (M M') x (P_L (XX')^-1 P_L)
        xmat = X.reshape(design.n, -1, order="F")
        proj = [L @ L.T for L in result.coeff.covariate_factors]
        p_l = np.kron(proj[1], proj[0])
        mm = [M @ M.T for M in result.coeff.response_factors]
        expected = result.sigma2 * kronecker_all([mm[1], mm[0], p_l @ np.linalg.inv(xmat.T @ xmat) @ p_l])
        np.testing.assert_allclose(law.explicit(), expected, rtol=1e-10, atol=1e-14)

    def test_unbalanced_design_keeps_covariate_block_joint(self):
        rng = np.random.default_rng(42)
        labels = np.array([(a, b) for b in (1, 2) for a in (1, 2, 3)] * 3 + [(1, 1)])
        design, X = build_tanova_design((3, 2), labels)
        Y = rng.standard_normal((design.n, 2, 3))
        result = _quiet_fit(ToTRSpec("tucker", (2, 1, 2, 2), intercept=False, max_iter=50), X, Y)
        law = asymptotic_law(result, X)
        assert law.block_modes[0] == (1, 2)
        assert law.scale == result.sigma2
        np.testing.assert_allclose(law.variances.array, np.diag(law.explicit()).reshape(law.dims, order="F"))

    def test_wrong_format(self):
        rng = np.random.default_rng(42)
        X, Y = rng.standard_normal((20, 3)), rng.standard_normal((20, 2))
        with pytest.raises(TypeError):
            tucker_asymptotic_cov(fit(ToTRSpec("op"), X, Y), X)


class TestFactorLaws:

    def test_single_mode_op_is_the_least_squares_law(self):
        rng = np.random.default_rng(42)
        n, h, m = 50, 3, 2
        X = rng.standard_normal((n, h))
        Y = X @ rng.standard_normal((h, m)) + rng.standard_normal((n, m))
        result = fit(ToTRSpec("op"), X, Y)
        law = tr_op_asymptotic_cov(result, X)
        xc = centered_model_adjustment(X, result)
        expected = np.kron(result.sigma2 * result.scales[0], np.linalg.inv(xc.T @ xc))
        np.testing.assert_allclose(law.explicit(), expected, rtol=1e-8, atol=1e-14)

    def test_cp_law_is_positive_semidefinite(self):
        rng = np.random.default_rng(42)
        truth = random_coeff("cp", COV, RESP, 2, seed=rng)
        X = rng.standard_normal((60,) + COV)
        Y = np.tensordot(X, to_full(truth).array, axes=([1, 2], [0, 1])) + 0.1 * rng.standard_normal((60,) + RESP)
        result = _quiet_fit(ToTRSpec("cp", 2, max_iter=100), X, Y)
        law = cp_asymptotic_cov(result, X)
        assert law.structure == "explicit"
        cov = law.explicit()
        np.testing.assert_allclose(cov, cov.T)
        w = np.linalg.eigvalsh(cov)
        assert w[0] > -1e-10 * w[-1]
        assert np.all(law.variances.array > 0)

    def test_over_budget_keeps_marginals(self, monkeypatch):
        rng = np.random.default_rng(42)
        X = rng.standard_normal((40,) + COV)
        Y = rng.standard_normal((40,) + RESP)
        result = _quiet_fit(ToTRSpec("tr", (1, 2, 1, 2), max_iter=30), X, Y)
        full = tr_op_asymptotic_cov(result, X)
        monkeypatch.setitem(BUDGETS, "covariance_entries", 10)
        marginal = tr_op_asymptotic_cov(result, X)
        assert marginal.structure == "marginal"
        np.testing.assert_allclose(marginal.variances.array, full.variances.array, rtol=1e-8)
        with pytest.raises(ValueError):
            marginal.explicit()

    def test_kronecker_explicit_over_budget(self):
        law = AsymptoticLaw(DenseTensor(np.zeros((3, 3))), "kronecker", 1.0, (np.eye(3), np.eye(3)), ((1,), (2,)))
        with pytest.raises(BudgetExceededError):
            law.explicit(budget=10)


class TestContrasts:

    def _law(self):
        rng = np.random.default_rng(42)
        blocks = []
        for d in (3, 2, 2):
            g = rng.standard_normal((d, d))
            blocks.append(g @ g.T + np.eye(d))
        return AsymptoticLaw(DenseTensor(rng.standard_normal((3, 2, 2))), "kronecker", 0.5,
                             tuple(blocks), ((1,), (2,), (3,)))

    def test_matches_explicit_transform(self):
        law = self._law()
        c1 = np.array([1.0, -1.0, 0.0])
        c3 = np.array([[0.5, 0.5]])
        out = contrast_transform(law, [c1, None, c3])
        assert out.dims == (2, 1)
        full = kronecker_all([c3, np.eye(2), c1[None, :]])
        np.testing.assert_allclose(out.explicit(), full @ law.explicit() @ full.T, rtol=1e-10)
        np.testing.assert_allclose(vec(out.mean), full @ vec(law.mean), rtol=1e-10)
        assert out.scale == pytest.approx(0.5 * c1 @ law.blocks[0] @ c1)

    def test_identity_contrasts_change_nothing(self):
        law = self._law()
        out = contrast_transform(law, [None, None, None])
        np.testing.assert_allclose(out.explicit(), law.explicit())

    def test_errors(self):
        law = self._law()
        with pytest.raises(TensorShapeError):
            contrast_transform(law, [None, None])
        with pytest.raises(TensorShapeError):
            contrast_transform(law, [np.ones(2), None, None])
        explicit = AsymptoticLaw(law.mean, "explicit", covariance=law.explicit(),
                                 variances=law.variances)
        with pytest.raises(ValueError):
            contrast_transform(explicit, [None, None, None])


class TestStandardize:

    def test_z_and_pvalues(self):
        law = AsymptoticLaw(DenseTensor(np.zeros((2, 2))), "kronecker", 4.0,
                            (np.eye(2), np.diag([1.0, 4.0])), ((1,), (2,)))
        z = standardize(np.array([[0.0, 4.0], [2.0, 8.0]]), law)
        np.testing.assert_allclose(z.array, [[0.0, 1.0], [1.0, 2.0]])
        rows = marginal_pvalues(z)
        assert [r[0] for r in rows] == [(1, 1), (2, 1), (1, 2), (2, 2)]
        assert rows[0][2] == pytest.approx(1.0)
        assert rows[3][2] == pytest.approx(0.0455, abs=1e-4)

    def test_shape_and_zero_variance(self):
        law = AsymptoticLaw(DenseTensor(np.zeros(2)), "kronecker", 1.0, (np.diag([1.0, 0.0]),), ((1,),))
        with pytest.raises(TensorShapeError):
            standardize(np.zeros(3), law)
        with pytest.raises(DegenerateScaleError):
            standardize(np.ones(2), law)


class TestScaleInformation:

    def test_unconstrained_scales_are_not_identified(self):
        rng = np.random.default_rng(42)
        scales = []
        for d in (2, 2):
            g = rng.standard_normal((d, d))
            scales.append(g @ g.T + np.eye(d))
        info = fisher_info_scale(scales, 10)
        assert info.shape == (6, 6)
        np.testing.assert_allclose(info, info.T)
        assert is_singular(info)
        assert schur_kernel_residual(scales, 10) < 1e-8

    def test_single_mode_block(self):
        with pytest.raises(TensorShapeError):
            fisher_info_scale([np.eye(3)], 5)
        with pytest.raises(TensorShapeError):
            schur_kernel_residual([np.eye(2)] * 3, 5)

    def test_nonsingular_matrix(self):
        assert not is_singular(np.eye(4))
