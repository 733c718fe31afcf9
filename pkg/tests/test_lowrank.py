"""Low-rank coefficient formats: reconstruction, contraction, counts and files."""

import numpy as np
import pytest

from tensorreg.errors import RankError, TensorFileError, TensorShapeError
from tensorreg.lowrank import (
    CpCoeff,
    OpCoeff,
    TrCoeff,
    TuckerCoeff,
    coeff_norm,
    load_coeff,
    param_count,
    partial_predict,
    random_coeff,
    save_coeff,
    to_full,
    validate_ranks,
)
from tensorreg.tensor_core import inner, outer_product

COV, RESP = (4, 5), (6, 7)
RANKS = {"tucker": (2, 2, 2, 2), "cp": (2,), "op": None, "tr": (2, 2, 2, 2)}


def _dense_predict(full, X):
    return np.tensordot(X, full, axes=([1, 2], [0, 1]))


class TestReconstruction:

    @pytest.mark.parametrize("fmt", ["tucker", "cp", "op", "tr"])
    def test_partial_predict_matches_dense(self, fmt):
        rng = np.random.default_rng(42)
        coeff = random_coeff(fmt, COV, RESP, RANKS[fmt], seed=rng)
        full = to_full(coeff)
        assert full.dims == COV + RESP
        X = rng.standard_normal((9,) + COV)
        np.testing.assert_allclose(partial_predict(coeff, X), _dense_predict(full.array, X), rtol=1e-10, atol=1e-12)

    @pytest.mark.parametrize("fmt", ["tucker", "cp", "op", "tr"])
    def test_norm_without_dense(self, fmt):
        coeff = random_coeff(fmt, COV, RESP, RANKS[fmt], seed=3)
        np.testing.assert_allclose(coeff_norm(coeff), to_full(coeff).norm(), rtol=1e-10)

    def test_cp_entries(self):
        rng = np.random.default_rng(42)
        w = np.array([2.0, -1.0])
        factors = [rng.standard_normal((d, 2)) for d in (3, 4)]
        coeff = CpCoeff(w, factors[:1], factors[1:])
        expected = sum(w[r] * np.outer(factors[0][:, r], factors[1][:, r]) for r in range(2))
        np.testing.assert_allclose(to_full(coeff).array, expected)

    def test_op_is_outer_product(self):
        rng = np.random.default_rng(42)
        mats = [rng.standard_normal((6, 4)), rng.standard_normal((7, 5))]
        np.testing.assert_allclose(to_full(OpCoeff(mats)).array, outer_product(*mats).array)

    def test_op_inner_product_factorizes(self):
        # <X | M_1 o M_2> = M_1 X M_2' for matrix covariates
        rng = np.random.default_rng(42)
        m1, m2 = rng.standard_normal((6, 4)), rng.standard_normal((7, 5))
        x = rng.standard_normal((4, 5))
        pred = partial_predict(OpCoeff([m1, m2]), x[None])[0]
        np.testing.assert_allclose(pred, m1 @ x @ m2.T, rtol=1e-10)

    def test_tr_single_bond_is_tensor_train(self):
        rng = np.random.default_rng(42)
        cores = [rng.standard_normal(s) for s in ((1, 3, 2), (2, 4, 1))]
        coeff = TrCoeff(cores[:1], cores[1:])
        np.testing.assert_allclose(to_full(coeff).array, cores[0][0] @ cores[1][:, :, 0])

    def test_tr_trace_is_invariant_under_rotation(self):
        rng = np.random.default_rng(42)
        cores = [rng.standard_normal(s) for s in ((2, 3, 3), (3, 4, 2))]
        b = to_full(TrCoeff(cores[:1], cores[1:])).array
        rotated = to_full(TrCoeff(cores[1:], cores[:1])).array
        np.testing.assert_allclose(rotated, b.T, rtol=1e-10)

    def test_tucker_inner_with_x(self):
        rng = np.random.default_rng(42)
        coeff = random_coeff("tucker", (3,), (2,), (2, 2), seed=rng)
        x = rng.standard_normal(3)
        full = to_full(coeff).array
        for j in range(2):
            assert partial_predict(coeff, x[None])[0, j] == pytest.approx(inner(x, full[:, j]))

    def test_wrong_covariate_dims(self):
        coeff = random_coeff("cp", COV, RESP, 2, seed=0)
        with pytest.raises(TensorShapeError):
            partial_predict(coeff, np.zeros((3, 5, 4)))


class TestRanks:

    def test_parameter_counts(self):
        counts = {fmt: param_count(random_coeff(fmt, COV, RESP, RANKS[fmt], seed=0)) for fmt in RANKS}
        assert counts == {"tucker": 48, "cp": 38, "op": 58, "tr": 85}

    def test_validate(self):
        assert validate_ranks("cp", COV, RESP, 3) == (3,)
        assert validate_ranks("op", COV, RESP, None) == ()
        assert validate_ranks("tr", COV, RESP, [1, 2, 3, 4]) == (1, 2, 3, 4)

    @pytest.mark.parametrize("fmt,ranks", [
        ("tucker", (5, 2, 2, 2)),
        ("tucker", (2, 2)),
        ("cp", (2, 2)),
        ("cp", 0),
        ("tr", (2, 2, 2)),
        ("cp", None),
        ("bogus", (1,)),
    ])
    def test_invalid_ranks(self, fmt, ranks):
        with pytest.raises(RankError):
            validate_ranks(fmt, COV, RESP, ranks)

    def test_op_needs_paired_modes(self):
        with pytest.raises(RankError):
            validate_ranks("op", (4,), (6, 7), None)

    def test_tr_cyclic_violation(self):
        with pytest.raises(RankError, match="cyclic"):
            TrCoeff([np.ones((2, 3, 3))], [np.ones((2, 4, 2))])

    def test_tucker_core_mismatch(self):
        with pytest.raises(RankError):
            TuckerCoeff(np.ones((2, 2)), [np.ones((3, 2))], [np.ones((4, 3))])

    def test_cp_weight_length(self):
        with pytest.raises(RankError):
            CpCoeff(np.ones(3), [np.ones((3, 2))], [np.ones((4, 2))])

    def test_random_coeff_is_reproducible(self):
        a = to_full(random_coeff("tr", COV, RESP, (2, 3, 2, 3), seed=11))
        b = to_full(random_coeff("tr", COV, RESP, (2, 3, 2, 3), seed=11))
        assert a == b


class TestCoefficientFiles:

    @pytest.mark.parametrize("fmt", ["tucker", "cp", "op", "tr"])
    def test_save_and_load(self, fmt, tmp_path):
        coeff = random_coeff(fmt, COV, RESP, RANKS[fmt], seed=5)
        save_coeff(coeff, tmp_path / "coeff")
        loaded = load_coeff(tmp_path / "coeff")
        assert loaded.fmt == fmt
        assert tuple(loaded.ranks) == tuple(coeff.ranks)
        assert to_full(loaded) == to_full(coeff)

    def test_missing_manifest(self, tmp_path):
        with pytest.raises(TensorFileError):
            load_coeff(tmp_path)
