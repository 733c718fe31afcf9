"""BIC rank search, TANOVA designs and Wilks' Lambda."""

import math
import warnings

import numpy as np
import pytest

from tensorreg.errors import DegenerateScaleError, ModelSelectionError, RankError, TensorShapeError
from tensorreg.estimation import ToTRSpec, fit
from tensorreg.experiments import TanovaGenerator
from tensorreg.lowrank import partial_predict, random_coeff
from tensorreg.modelselect import (
    RankGrid,
    TanovaDesign,
    bic,
    build_tanova_design,
    candidate_seed,
    embed_reduced_coeff,
    fit_nested,
    generalized_logdet,
    parallel_map,
    parameter_count,
    rank_search,
    reduced_design,
    reduced_ranks,
    tanova_fits,
    wilks_lambda,
    wilks_mc_values,
)
from tensorreg.simulate import cell_design, simulate_totr, smooth_images

COV, RESP = (3, 4), (4, 5)


def _cp_data(n, sigma2, seed=42):
    rng = np.random.default_rng(seed)
    truth = random_coeff("cp", COV, RESP, 2, seed=rng)
    X = rng.standard_normal((n,) + COV)
    Y = simulate_totr(truth, X, [np.eye(m) for m in RESP], sigma2, rng)
    return X, Y


def _one_factor(means, reps, sigma2, seed=42):
    rng = np.random.default_rng(seed)
    levels = (means.shape[0],)
    design, X = cell_design(levels, reps)
    Y = X @ means + np.sqrt(sigma2) * rng.standard_normal((design.n, means.shape[1]))
    return design, X, Y


class TestBic:

    def test_parameter_count_and_value(self):
        rng = np.random.default_rng(42)
        X, Y = rng.standard_normal((30, 3)), rng.standard_normal((30, 2))
        result = fit(ToTRSpec("op"), X, Y)
        # sigma2 + (3 - 1) free entries of Sigma_1 + 3 x 2 coefficients
        assert parameter_count(result) == 9
        assert bic(result) == pytest.approx(9 * math.log(30) - 2 * result.loglik)

    def test_structured_scales_count_rho_only(self):
        rng = np.random.default_rng(42)
        X, Y = rng.standard_normal((30, 2, 2)), rng.standard_normal((30, 3, 4))
        unstructured = fit(ToTRSpec("op"), X, Y)
        structured = fit(ToTRSpec("op", scale_models=("ar1", "identity")), X, Y)
        assert parameter_count(unstructured) - parameter_count(structured) == (6 - 1) + (10 - 1) - 1

    def test_unconverged_fit_warns(self):
        X, Y = _cp_data(30, 0.5)
        with warnings.catch_warnings():
            warnings.simplefilter("ignore", RuntimeWarning)
            result = fit(ToTRSpec("cp", 2, max_iter=1), X, Y)
        with pytest.warns(RuntimeWarning, match="unconverged"):
            bic(result)


class TestRankGrid:

    def test_product(self):
        grid = RankGrid.product("TR", ([1, 2], [1], [2, 3], [1]))
        assert grid.fmt == "tr"
        assert len(grid) == 4
        assert list(grid)[0] == (1, 1, 2, 1)

    def test_scalar_candidates(self):
        assert RankGrid("cp", (1, 2, 3)).candidates == ((1,), (2,), (3,))

    def test_empty(self):
        with pytest.raises(ModelSelectionError):
            RankGrid("cp", ())

    def test_validate(self):
        with pytest.raises(RankError):
            RankGrid("tucker", ((4, 1, 1, 1),)).validate(COV, RESP)


class TestRankSearch:

    def test_recovers_true_cp_rank(self):
        X, Y = _cp_data(150, 0.01)
        with warnings.catch_warnings():
            warnings.simplefilter("ignore", RuntimeWarning)
            result = rank_search(ToTRSpec("cp", 1, max_iter=300), RankGrid("cp", (1, 2, 3)), X, Y, jobs=1)
        assert len(result.table) == 3
        assert result.best_ranks == (2,)
        finite = [row.bic for row in result.table if row.error is None]
        assert min(finite) == pytest.approx(bic(result.best))

    def test_grid_order_does_not_matter(self):
        X, Y = _cp_data(60, 0.5)
        spec = ToTRSpec("cp", 1, max_iter=40, seed=5)
        with warnings.catch_warnings():
            warnings.simplefilter("ignore", RuntimeWarning)
            forward = rank_search(spec, RankGrid("cp", (1, 2)), X, Y, jobs=1)
            backward = rank_search(spec, RankGrid("cp", (2, 1)), X, Y, jobs=1)
        assert forward.best_ranks == backward.best_ranks
        assert sorted(r.bic for r in forward.table) == sorted(r.bic for r in backward.table)

    def test_format_mismatch(self):
        X, Y = _cp_data(20, 0.5)
        with pytest.raises(ModelSelectionError):
            rank_search(ToTRSpec("cp", 1), RankGrid("tr", ((1, 1, 1, 1),)), X, Y)

    def test_candidate_seed(self):
        assert candidate_seed(3, (2, 2)) == candidate_seed(3, (2, 2))
        assert candidate_seed(3, (2, 2)) != candidate_seed(3, (2, 3))
        assert candidate_seed(None, (1,)) == candidate_seed(0, (1,))


class TestParallelMap:

    def test_keeps_input_order(self):
        tasks = list(range(10))
        expected = [math.factorial(t) for t in tasks]
        assert parallel_map(math.factorial, tasks, jobs=1) == expected
        assert parallel_map(math.factorial, tasks, jobs=3) == expected

    def test_empty(self):
        assert parallel_map(math.factorial, [], jobs=4) == []


class TestTanovaDesign:

    def test_single_entry_covariates(self):
        design, X = build_tanova_design((3, 2), [(1, 1), (3, 2), (2, 1)])
        assert X.shape == (3, 3, 2)
        assert X[1, 2, 1] == 1.0 and X.sum() == 3.0
        assert design.counts[0, 0] == 1 and design.counts[0, 1] == 0

    def test_balanced_q(self):
        design, _ = cell_design((2, 3), 4)
        assert design.n == 24
        assert design.balanced_q == 4
        with pytest.warns(RuntimeWarning, match="empty"):
            sparse, _ = build_tanova_design((2, 2), [(1, 1), (2, 2)])
        assert sparse.balanced_q is None

    def test_labels_out_of_range(self):
        with pytest.raises(TensorShapeError):
            TanovaDesign((2, 2), [(1, 3)])
        with pytest.raises(TensorShapeError):
            TanovaDesign((2, 2), [(0, 1)])

    def test_reduced_design(self):
        design, _ = cell_design((3, 2), 2)
        reduced = reduced_design(design, 1)
        assert reduced.levels == (1, 2)
        np.testing.assert_array_equal(reduced.labels[:, 0], 1)
        np.testing.assert_array_equal(reduced.labels[:, 1], design.labels[:, 1])
        with pytest.raises(TensorShapeError):
            reduced_design(design, 3)

    def test_reduced_ranks(self):
        assert reduced_ranks("tucker", (3, 2, 2, 2), 1) == (1, 2, 2, 2)
        assert reduced_ranks("cp", (3,), 1) == (3,)
        assert reduced_ranks("tr", (2, 2, 2, 2), 2) == (2, 2, 2, 2)


class TestWilks:

    def test_generalized_logdet_full_rank(self):
        rng = np.random.default_rng(42)
        r = rng.standard_normal((20, 2, 3))
        flat = r.reshape(20, -1)
        value, rank = generalized_logdet(r)
        assert rank == 6
        assert value == pytest.approx(np.linalg.slogdet(flat.T @ flat)[1])

    def test_generalized_logdet_uses_nonzero_spectrum(self):
        rng = np.random.default_rng(42)
        r = rng.standard_normal((4, 10))
        value, rank = generalized_logdet(r)
        assert rank == 4
        assert value == pytest.approx(np.linalg.slogdet(r @ r.T)[1])
        with pytest.raises(DegenerateScaleError):
            generalized_logdet(np.zeros((3, 2)))

    def test_identical_groups_give_lambda_near_one(self):
        _, X, Y = _one_factor(np.tile([1.0, -2.0, 0.5], (3, 1)), 100, 1.0)
        x_red = np.ones((X.shape[0], 1))
        spec = ToTRSpec("op", intercept=False)
        lam = wilks_lambda(fit(spec, X, Y), fit(spec, x_red, Y), Y, X, x_red)
        assert 0.9 < lam <= 1.0

    def test_distinct_groups_give_small_lambda(self):
        means = np.array([[0.0, 0.0, 0.0], [3.0, 0.0, -3.0], [-3.0, 3.0, 0.0]])
        _, X, Y = _one_factor(means, 20, 1.0)
        x_red = np.ones((X.shape[0], 1))
        spec = ToTRSpec("op", intercept=False)
        lam = wilks_lambda(fit(spec, X, Y), fit(spec, x_red, Y), Y, X, x_red)
        assert lam < 0.1

    def test_response_dims_must_agree(self):
        rng = np.random.default_rng(42)
        X = rng.standard_normal((20, 2))
        a = fit(ToTRSpec("op"), X, rng.standard_normal((20, 3)))
        b = fit(ToTRSpec("op"), X, rng.standard_normal((20, 4)))
        with pytest.raises(TensorShapeError):
            wilks_lambda(a, b, rng.standard_normal((20, 3)), X, X)

    def test_monte_carlo_values_are_seeded(self):
        means = np.zeros((3, 2))
        generator = TanovaGenerator(means, (3,), 5, (np.eye(2),), 1.0)
        spec = ToTRSpec("op", intercept=False)
        a = wilks_mc_values(spec, spec, generator, B=4, seed=1, jobs=1)
        b = wilks_mc_values(spec, spec, generator, B=4, seed=1, jobs=1)
        assert a.shape == (4,)
        np.testing.assert_array_equal(a, b)
        assert np.all((a > 0) & (a <= 1.0 + 1e-12))
        with pytest.raises(ValueError):
            wilks_mc_values(spec, spec, generator, B=0)

    def test_lambda_is_invariant_to_observation_order(self):
        means = np.array([[0.0, 1.0, 0.0], [1.0, 0.0, -1.0], [0.5, 0.5, 0.5]])
        _, X, Y = _one_factor(means, 10, 1.0)
        x_red = np.ones((X.shape[0], 1))
        perm = np.random.default_rng(3).permutation(X.shape[0])
        spec = ToTRSpec("op", intercept=False)
        lam = wilks_lambda(fit(spec, X, Y), fit(spec, x_red, Y), Y, X, x_red)
        lam_perm = wilks_lambda(fit(spec, X[perm], Y[perm]), fit(spec, x_red[perm], Y[perm]),
                                Y[perm], X[perm], x_red[perm])
        assert lam_perm == pytest.approx(lam, rel=1e-10)

    def test_lambda_above_one_is_reported_and_capped(self):
        means = np.array([[0.0, 0.0, 0.0], [3.0, 0.0, -3.0], [-3.0, 3.0, 0.0]])
        _, X, Y = _one_factor(means, 20, 1.0)
        x_red = np.ones((X.shape[0], 1))
        spec = ToTRSpec("op", intercept=False)
        full, reduced = fit(spec, X, Y), fit(spec, x_red, Y)
        with pytest.warns(RuntimeWarning, match="Lambda"):
            lam = wilks_lambda(reduced, full, Y, x_red, X)
        assert lam == 1.0


def _null_images(seed, reps=3, sigma2=4.0):
    rng = np.random.default_rng(seed)
    coef = smooth_images(4, 3, 6, 7, rng, distinct=False)
    design, x_full = cell_design((4, 3), reps)
    Y = simulate_totr(coef, x_full, [np.eye(6), np.eye(7)], sigma2, rng)
    return design, x_full, reduced_design(design, 1).covariates(), Y


class TestNestedFits:

    @pytest.mark.parametrize("fmt,ranks", [("cp", (2,)), ("tucker", (2, 2, 2, 2)), ("tr", (2, 1, 2, 2)),
                                           ("op", ())])
    def test_embedded_reduced_coefficient_predicts_the_same(self, fmt, ranks):
        rng = np.random.default_rng(42)
        red_ranks = reduced_ranks(fmt, ranks, 2) or None
        coeff = random_coeff(fmt, (4, 1), (6, 7), red_ranks, seed=rng)
        design, x_full = cell_design((4, 3), 2)
        x_red = reduced_design(design, 2).covariates()
        embedded = embed_reduced_coeff(coeff, (4, 3), ranks or None)
        assert embedded.covariate_dims == (4, 3)
        if ranks:
            assert embedded.ranks == ranks
        np.testing.assert_allclose(partial_predict(embedded, x_full), partial_predict(coeff, x_red),
                                   rtol=1e-12, atol=1e-12)

    def test_embedding_needs_a_collapse(self):
        coeff = random_coeff("cp", (4, 2), (3,), 2, seed=1)
        with pytest.raises(TensorShapeError):
            embed_reduced_coeff(coeff, (4, 3))

    @pytest.mark.parametrize("fmt,ranks", [("cp", (3,)), ("tucker", (3, 3, 3, 3)), ("tr", (2, 2, 2, 2))])
    def test_lambda_stays_in_unit_interval(self, fmt, ranks):
        full_spec = ToTRSpec(fmt, ranks, intercept=False, max_iter=200)
        reduced_spec = ToTRSpec(fmt, reduced_ranks(fmt, ranks, 1), intercept=False, max_iter=200)
        for seed in range(4):
            _, x_full, x_red, Y = _null_images(seed)
            with warnings.catch_warnings():
                warnings.simplefilter("ignore", RuntimeWarning)
                full, reduced, lam = tanova_fits(full_spec, reduced_spec, x_full, x_red, Y)
            assert 0.0 < lam <= 1.0, (fmt, seed)
            assert full.loglik >= reduced.loglik - 1e-6 * abs(reduced.loglik), (fmt, seed)

    def test_nested_fit_keeps_the_better_start(self):
        _, x_full, x_red, Y = _null_images(2)
        spec = ToTRSpec("cp", (3,), intercept=False, max_iter=200)
        with warnings.catch_warnings():
            warnings.simplefilter("ignore", RuntimeWarning)
            reduced = fit(spec, x_red, Y)
            nested = fit_nested(spec, x_full, Y, reduced)
            cold = fit(spec, x_full, Y)
        assert nested.loglik >= cold.loglik
        assert nested.loglik >= reduced.loglik - 1e-6 * abs(reduced.loglik)
