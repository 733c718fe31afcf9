"""Synthetic data generators and dataset files."""

import numpy as np
import pytest

from tensorreg.errors import ConfigError, TensorShapeError
from tensorreg.lowrank import load_coeff, random_coeff, to_full
from tensorreg.simulate import (
    make_scale,
    read_dataset,
    read_labels,
    simulate_from_config,
    simulate_totr,
    smooth_images,
    wishart_scale,
    write_dataset,
)
from tensorreg.tensor_io import write_tensor

TRUTH = {
    "format": "cp",
    "ranks": [2],
    "covariate_dims": [3, 4],
    "response_dims": [4, 5],
    "scales": [{"kind": "wishart"}, {"kind": "ar1", "rho": 0.4}],
    "sigma2": 0.5,
    "intercept": True,
}


class TestScales:

    def test_wishart_is_normalized_spd(self):
        s = wishart_scale(4, np.random.default_rng(42))
        assert s[0, 0] == 1.0
        np.testing.assert_allclose(s, s.T)
        assert np.linalg.eigvalsh(s)[0] > 0

    def test_generators(self):
        rng = np.random.default_rng(42)
        np.testing.assert_array_equal(make_scale({"kind": "identity"}, 3, rng), np.eye(3))
        assert make_scale({"kind": "equicorr", "rho": 0.3}, 3, rng)[0, 2] == pytest.approx(0.3)
        with pytest.raises(ConfigError):
            make_scale({"kind": "toeplitz"}, 3, rng)


class TestSimulation:

    def test_zero_noise_is_exact(self):
        rng = np.random.default_rng(42)
        coeff = random_coeff("tucker", (3, 2), (2, 2), (2, 2, 2, 1), seed=rng)
        X = rng.standard_normal((5, 3, 2))
        u = np.arange(4.0).reshape(2, 2)
        Y = simulate_totr(coeff, X, [np.eye(2), np.eye(2)], 0.0, rng, u)
        expected = np.tensordot(X, to_full(coeff).array, axes=([1, 2], [0, 1])) + u
        np.testing.assert_allclose(Y, expected, rtol=1e-12)

    def test_dense_coefficient(self):
        rng = np.random.default_rng(42)
        b = rng.standard_normal((3, 2))
        X = rng.standard_normal((4, 3))
        np.testing.assert_allclose(simulate_totr(b, X, [np.eye(2)], 0.0, rng), X @ b)

    def test_from_config(self):
        data = simulate_from_config({"truth": TRUTH, "design": {"kind": "gaussian", "n": 12}}, seed=3)
        assert data.X.shape == (12, 3, 4)
        assert data.Y.shape == (12, 4, 5)
        assert data.scales[1][0, 1] == pytest.approx(0.4)
        assert data.design is None
        again = simulate_from_config({"truth": TRUTH, "design": {"kind": "gaussian", "n": 12}}, seed=3)
        np.testing.assert_array_equal(data.Y, again.Y)

    def test_tanova_config(self):
        truth = {"format": "tucker", "ranks": [2, 2, 2, 2], "response_dims": [3, 3]}
        data = simulate_from_config({"truth": truth, "design": {"kind": "tanova", "levels": [3, 2],
                                                                "replicates_per_cell": 2}})
        assert data.X.shape == (12, 3, 2)
        assert data.design.balanced_q == 2

    def test_config_errors(self):
        with pytest.raises(ConfigError):
            simulate_from_config({})
        truth = dict(TRUTH, scales=[{"kind": "identity"}])
        with pytest.raises(ConfigError):
            simulate_from_config({"truth": truth})
        truth = {k: v for k, v in TRUTH.items() if k != "covariate_dims"}
        with pytest.raises(ConfigError):
            simulate_from_config({"truth": truth})

    def test_smooth_images(self):
        rng = np.random.default_rng(42)
        same = smooth_images(3, 3, 8, 6, rng, distinct=False)
        assert same.shape == (3, 3, 8, 6)
        np.testing.assert_allclose(same[0], same[2])
        different = smooth_images(3, 3, 8, 6, rng, distinct=True)
        assert not np.allclose(different[0], different[1])


class TestDatasetFiles:

    def test_write_and_read(self, tmp_path):
        data = simulate_from_config({"truth": TRUTH, "design": {"kind": "gaussian", "n": 7}}, seed=1)
        write_dataset(data, tmp_path)
        X, Y = read_dataset(tmp_path / "x.dten", tmp_path / "y.dten")
        np.testing.assert_array_equal(X, data.X)
        np.testing.assert_array_equal(Y, data.Y)
        assert to_full(load_coeff(tmp_path / "truth" / "coeff")) == to_full(data.coeff)
        assert not (tmp_path / "labels.csv").exists()

    def test_labels_file(self, tmp_path):
        truth = {"format": "op", "response_dims": [2]}
        data = simulate_from_config({"truth": truth, "design": {"kind": "tanova", "levels": [3],
                                                                "replicates_per_cell": 2}})
        write_dataset(data, tmp_path)
        np.testing.assert_array_equal(read_labels(tmp_path / "labels.csv"), data.design.labels)

    def test_observation_count_mismatch(self, tmp_path):
        write_tensor(tmp_path / "x.dten", np.zeros((3, 5)))
        write_tensor(tmp_path / "y.dten", np.zeros((2, 4)))
        with pytest.raises(TensorShapeError, match="last mode"):
            read_dataset(tmp_path / "x.dten", tmp_path / "y.dten")
