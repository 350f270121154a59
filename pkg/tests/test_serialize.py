import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from evomoe.serialize import (FormatError, dump_json, load_json, matrix_from_json,
                              matrix_to_json)


def test_matrix_round_trip_bit_exact():
    rng = np.random.default_rng(0)
    m = rng.normal(size=(3, 5)) * 10.0 ** rng.integers(-8, 8, size=(3, 5))
    back = matrix_from_json(matrix_to_json(m))
    assert np.array_equal(back, m)
    assert back.dtype == np.float64


@settings(max_examples=50, deadline=None)
@given(st.lists(st.floats(allow_nan=False, allow_infinity=False), min_size=1, max_size=12))
def test_matrix_round_trip_property(values):
    m = np.asarray(values).reshape(1, -1)
    assert np.array_equal(matrix_from_json(matrix_to_json(m)), m)


def test_matrix_from_json_rejects_bad_length():
    with pytest.raises(FormatError):
        matrix_from_json({"rows": 2, "cols": 2, "data": [1.0, 2.0, 3.0]})


def test_matrix_from_json_rejects_nonfinite():
    with pytest.raises(FormatError):
        matrix_from_json({"rows": 1, "cols": 2, "data": [1.0, float("nan")]})


def test_matrix_from_json_rejects_wrong_shape():
    with pytest.raises(FormatError):
        matrix_from_json({"rows": 1, "cols": 2, "data": [1.0, 2.0]}, (2, 1))


def test_dump_load_round_trip(tmp_path):
    doc = {"a": [1.5, -0.0, 2 ** -40], "b": "x"}
    path = tmp_path / "doc.json"
    dump_json(doc, path)
    assert load_json(path) == doc
    first = path.read_bytes()
    dump_json(load_json(path), path)
    assert path.read_bytes() == first


def test_load_json_malformed(tmp_path):
    path = tmp_path / "broken.json"
    path.write_text('{"a": [1, 2')
    with pytest.raises(FormatError):
        load_json(path)


def test_dump_json_refuses_nonfinite(tmp_path):
    with pytest.raises(FormatError):
        dump_json({"x": float("inf")}, tmp_path / "bad.json")
