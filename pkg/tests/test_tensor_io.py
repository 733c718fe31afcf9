"""DTEN1 and CSV files."""

import struct

import numpy as np
import pytest

from tensorreg.errors import TensorFileError
from tensorreg.tensor_core import DenseTensor
from tensorreg.tensor_io import (
    load_tensor,
    read_csv_tensor,
    read_table,
    read_tensor,
    write_csv_tensor,
    write_table,
    write_tensor,
)


class TestDten:

    def test_round_trip_is_exact(self, tmp_path):
        rng = np.random.default_rng(42)
        t = DenseTensor(rng.standard_normal((3, 1, 4, 2)))
        write_tensor(tmp_path / "t.dten", t)
        assert read_tensor(tmp_path / "t.dten") == t

    def test_layout(self, tmp_path):
        write_tensor(tmp_path / "t.dten", np.arange(6.0).reshape((2, 3), order="F"))
        raw = (tmp_path / "t.dten").read_bytes()
        assert raw[:4] == b"DTEN"
        assert raw[4] == 1 and raw[5] == 0
        assert struct.unpack_from("<I2Q", raw, 6) == (2, 2, 3)
        values = np.frombuffer(raw[-48:], dtype="<f8")
        np.testing.assert_array_equal(values, np.arange(6.0))

    def test_bad_magic(self, tmp_path):
        path = tmp_path / "t.dten"
        write_tensor(path, np.ones(3))
        raw = bytearray(path.read_bytes())
        raw[:4] = b"XXXX"
        path.write_bytes(bytes(raw))
        with pytest.raises(TensorFileError, match="DTEN"):
            read_tensor(path)

    def test_truncated_payload(self, tmp_path):
        path = tmp_path / "t.dten"
        write_tensor(path, np.ones((2, 2)))
        path.write_bytes(path.read_bytes()[:-8])
        with pytest.raises(TensorFileError, match="payload"):
            read_tensor(path)

    def test_missing_file(self, tmp_path):
        with pytest.raises(TensorFileError):
            read_tensor(tmp_path / "nope.dten")

    def test_errors_are_os_errors(self, tmp_path):
        with pytest.raises(OSError):
            read_tensor(tmp_path / "nope.dten")


class TestCsv:

    def test_matrix_round_trip(self, tmp_path):
        rng = np.random.default_rng(42)
        t = DenseTensor(rng.standard_normal((3, 4)))
        write_csv_tensor(tmp_path / "m.csv", t)
        assert read_csv_tensor(tmp_path / "m.csv") == t

    def test_vector_is_a_column(self, tmp_path):
        write_csv_tensor(tmp_path / "v.csv", np.array([1.0, 2.0, 3.0]))
        assert (tmp_path / "v.csv").read_text().splitlines() == ["1", "2", "3"]
        assert load_tensor(tmp_path / "v.csv").dims == (3,)

    def test_order_three_refused(self, tmp_path):
        with pytest.raises(TensorFileError):
            write_csv_tensor(tmp_path / "t.csv", np.zeros((2, 2, 2)))

    def test_ragged_and_non_numeric(self, tmp_path):
        (tmp_path / "r.csv").write_text("1,2\n3\n")
        with pytest.raises(TensorFileError, match="ragged"):
            read_csv_tensor(tmp_path / "r.csv")
        (tmp_path / "n.csv").write_text("1,x\n")
        with pytest.raises(TensorFileError, match="non-numeric"):
            read_csv_tensor(tmp_path / "n.csv")


class TestTables:

    def test_seventeen_digits_and_header(self, tmp_path):
        write_table(tmp_path / "t.csv", ["name", "value", "ranks"], [("a", 0.1, (2, 3)), ("b", 1, ())])
        header, rows = read_table(tmp_path / "t.csv")
        assert header == ["name", "value", "ranks"]
        assert rows[0] == ["a", "0.10000000000000001", "2 3"]
        assert float(rows[0][1]) == 0.1
        assert rows[1] == ["b", "1", ""]
