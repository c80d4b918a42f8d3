import io
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from targetlearn.data import (BadOutcomeValue, BadTreatmentValue, ColumnSchema, Dataset,
                              EmptyBody, MissingColumn, NonNumericCell, parse_csv,
                              serialize_csv, summarize, validate_dataset)

SCHEMA = ColumnSchema(("w",), "a", "y")


def test_parse_two_rows():
    ds = parse_csv("w,a,y\n1,0,2.5\n3,1,4.0\n", SCHEMA)
    assert (ds.n, ds.p) == (2, 1)
    np.testing.assert_array_equal(ds.covariates[:, 0], [1.0, 3.0])
    np.testing.assert_array_equal(ds.treatment, [0.0, 1.0])
    np.testing.assert_array_equal(ds.outcome, [2.5, 4.0])


def test_header_only_is_empty_body():
    with pytest.raises(EmptyBody):
        parse_csv("w,a,y\n", SCHEMA)
    with pytest.raises(EmptyBody):
        parse_csv("", SCHEMA)


def test_bad_treatment_names_row():
    with pytest.raises(BadTreatmentValue) as info:
        parse_csv("w,a,y\n1,2,2.5\n", SCHEMA)
    assert info.value.row == 1


def test_missing_column_and_non_numeric():
    with pytest.raises(MissingColumn) as info:
        parse_csv("w,y\n1,2\n", SCHEMA)
    assert info.value.name == "a"
    with pytest.raises(NonNumericCell) as info:
        parse_csv("w,a,y\n1,0,2\n1,1,abc\n", SCHEMA)
    assert (info.value.row, info.value.col) == (2, "y")
    for bad in ("nan", "inf", "1_0", "0x10", ""):
        with pytest.raises(NonNumericCell):
            parse_csv(f"w,a,y\n{bad},0,1\n", ColumnSchema(("w",), "a", "y"))


def test_binary_outcome_checked_at_parse():
    schema = ColumnSchema(("w",), "a", "y", "binary")
    with pytest.raises(BadOutcomeValue):
        parse_csv("w,a,y\n1,0,0.5\n", schema)
    assert parse_csv("w,a,y\n1,0,1\n", schema).outcome_kind == "binary"


def test_crlf_scientific_and_column_order():
    ds = parse_csv("y,extra,a,w\r\n1e-3,zzz,1,-2.5E2\r\n", SCHEMA)
    assert ds.outcome[0] == 1e-3
    assert ds.covariates[0, 0] == -250.0


def test_stream_input():
    ds = parse_csv(io.StringIO("w,a,y\n1,0,2\n"), SCHEMA)
    assert ds.n == 1


def test_schema_invariants():
    with pytest.raises(ValueError):
        ColumnSchema(("w", "w"))
    with pytest.raises(ValueError):
        ColumnSchema(("A",), "A", "Y")


def test_validate_examples():
    ds = Dataset([[1.0], [2.0]], [0, 1], [1.0, 2.0])
    assert validate_dataset(ds) == []
    ds = Dataset([[1.0], [2.0]], [0, 1], [1.0, math.inf])
    assert [(v.kind, v.row) for v in validate_dataset(ds)] == [("NonFiniteOutcome", 1)]
    ds = Dataset([[1.0], [2.0]], [0, 1], [0.5, 1.0], "binary")
    assert [(v.kind, v.row) for v in validate_dataset(ds)] == [("BinaryOutcomeViolation", 0)]
    ds = Dataset([[np.nan], [2.0]], [0, 3], [0.0, 1.0])
    kinds = {v.kind for v in validate_dataset(ds)}
    assert kinds == {"NonFiniteCovariate", "BadTreatmentValue"}


def test_dataset_is_read_only():
    ds = Dataset([[1.0]], [0], [1.0])
    with pytest.raises(ValueError):
        ds.outcome[0] = 2.0


def test_empty_covariates_allowed():
    ds = parse_csv("a,y\n0,1\n1,2\n", ColumnSchema((), "a", "y"))
    assert ds.p == 0 and ds.covariates.shape == (2, 0)
    assert summarize(ds)["empty_covariates"]


def test_summarize_examples():
    ds = Dataset(np.zeros((2, 0)), [1, 0], [0.0, 2.0])
    s = summarize(ds)
    assert s["columns"]["Y"] == {"mean": 1.0, "min": 0.0, "max": 2.0}
    ds = Dataset(np.arange(4.0), [1, 1, 0, 0], np.ones(4))
    assert summarize(ds)["treated_fraction"] == 0.5
    ds = Dataset([[7.5]], [1], [3.25])
    col = summarize(ds)["columns"]["W1"]
    assert col["mean"] == col["min"] == col["max"] == 7.5


finite = st.floats(allow_nan=False, allow_infinity=False, width=64)


@settings(max_examples=60, deadline=None)
@given(st.integers(1, 12), st.integers(0, 3), st.data())
def test_round_trip_is_identity(n, p, data):
    W = np.array(data.draw(st.lists(finite, min_size=n * p, max_size=n * p))).reshape(n, p)
    A = data.draw(st.lists(st.sampled_from([0, 1]), min_size=n, max_size=n))
    Y = data.draw(st.lists(finite, min_size=n, max_size=n))
    ds = Dataset(W, A, Y)
    back = parse_csv(serialize_csv(ds), ds.schema)
    np.testing.assert_array_equal(back.covariates, ds.covariates)
    np.testing.assert_array_equal(back.treatment, ds.treatment)
    np.testing.assert_array_equal(back.outcome, ds.outcome)
    assert validate_dataset(back) == []
