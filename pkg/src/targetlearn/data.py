"""Observed-data container and CSV ingestion.

A dataset holds ``n`` independent units ``O_i = (W_i, A_i, Y_i)``: a covariate
matrix ``W`` (n x p, possibly p = 0), a binary treatment ``A`` and an outcome
``Y`` that is either continuous or binary.
"""
from __future__ import annotations

import csv
import io
import math
import re
from dataclasses import dataclass, field
from typing import NamedTuple

import numpy as np

OUTCOME_KINDS = ("continuous", "binary")

# locale-independent decimal with optional exponent
_DECIMAL = re.compile(r"^[+-]?(\d+\.?\d*|\.\d+)([eE][+-]?\d+)?$")


class DataError(ValueError):
    """Base class for ingestion failures."""


class MissingColumn(DataError):
    def __init__(self, name):
        super().__init__(f"column {name!r} not found in header")
        self.name = name


class NonNumericCell(DataError):
    def __init__(self, row, col, value):
        super().__init__(f"row {row}, column {col!r}: not a finite decimal: {value!r}")
        self.row = row
        self.col = col
        self.value = value


class BadTreatmentValue(DataError):
    def __init__(self, row, value):
        super().__init__(f"row {row}: treatment must be 0 or 1, got {value!r}")
        self.row = row
        self.value = value


class BadOutcomeValue(DataError):
    def __init__(self, row, value):
        super().__init__(f"row {row}: binary outcome must be 0 or 1, got {value!r}")
        self.row = row
        self.value = value


class EmptyBody(DataError):
    def __init__(self):
        super().__init__("no data rows after the header")


class Violation(NamedTuple):
    """One invariant violation; ``row`` is a 0-based unit index or None."""

    kind: str
    row: int | None
    detail: str = ""


@dataclass(frozen=True)
class ColumnSchema:
    covariate_names: tuple[str, ...]
    treatment_name: str = "A"
    outcome_name: str = "Y"
    outcome_kind: str = "continuous"

    def __post_init__(self):
        object.__setattr__(self, "covariate_names", tuple(self.covariate_names))
        names = list(self.covariate_names)
        if len(set(names)) != len(names):
            raise ValueError("covariate names must be distinct")
        if self.treatment_name in names or self.outcome_name in names:
            raise ValueError("treatment/outcome names must not be covariate names")
        if self.treatment_name == self.outcome_name:
            raise ValueError("treatment and outcome names must differ")
        if self.outcome_kind not in OUTCOME_KINDS:
            raise ValueError(f"outcome_kind must be one of {OUTCOME_KINDS}")


@dataclass(frozen=True, eq=False)
class Dataset:
    """Immutable bundle of covariates, treatment and outcome.

    Construction never validates beyond shape coercion; call
    :func:`validate_dataset` to list invariant violations.
    """

    covariates: np.ndarray
    treatment: np.ndarray
    outcome: np.ndarray
    outcome_kind: str = "continuous"
    covariate_names: tuple[str, ...] = field(default=())
    treatment_name: str = "A"
    outcome_name: str = "Y"

    def __post_init__(self):
        y = np.array(self.outcome, dtype=float).reshape(-1)
        w = np.array(self.covariates, dtype=float)
        if w.ndim == 1:
            w = w.reshape(-1, 1)
        if w.size == 0:
            w = np.zeros((y.size, 0))
        a = np.array(self.treatment, dtype=float).reshape(-1)
        for arr in (w, a, y):
            arr.setflags(write=False)
        object.__setattr__(self, "covariates", w)
        object.__setattr__(self, "treatment", a)
        object.__setattr__(self, "outcome", y)
        names = tuple(self.covariate_names) or tuple(f"W{j + 1}" for j in range(w.shape[1]))
        object.__setattr__(self, "covariate_names", names)

    @property
    def n(self) -> int:
        return self.outcome.shape[0]

    @property
    def p(self) -> int:
        return self.covariates.shape[1]

    @property
    def schema(self) -> ColumnSchema:
        return ColumnSchema(self.covariate_names, self.treatment_name,
                            self.outcome_name, self.outcome_kind)

    def subset(self, idx) -> "Dataset":
        idx = np.asarray(idx)
        return Dataset(self.covariates[idx], self.treatment[idx], self.outcome[idx],
                       self.outcome_kind, self.covariate_names,
                       self.treatment_name, self.outcome_name)

    def with_outcome(self, y, outcome_kind=None) -> "Dataset":
        return Dataset(self.covariates, self.treatment, y, outcome_kind or self.outcome_kind,
                       self.covariate_names, self.treatment_name, self.outcome_name)


def _parse_cell(text, row, col):
    s = text.strip()
    if not _DECIMAL.match(s):
        raise NonNumericCell(row, col, text)
    value = float(s)
    if not math.isfinite(value):
        raise NonNumericCell(row, col, text)
    return value


def parse_csv(text, schema: ColumnSchema) -> Dataset:
    """Parse comma-separated numeric text into a :class:`Dataset`.

    ``text`` may be a string or a text stream. Rows in errors are 1-based
    data rows (the header is not counted).
    """
    stream = io.StringIO(text) if isinstance(text, str) else text
    reader = csv.reader(stream)
    try:
        header = [h.strip() for h in next(reader)]
    except StopIteration:
        raise EmptyBody() from None
    needed = [*schema.covariate_names, schema.treatment_name, schema.outcome_name]
    for name in needed:
        if name not in header:
            raise MissingColumn(name)
    cols = [header.index(name) for name in needed]
    w_rows, a_vals, y_vals = [], [], []
    p = len(schema.covariate_names)
    for i, rec in enumerate(reader, start=1):
        if not rec or all(not c.strip() for c in rec):
            continue
        if len(rec) < len(header):
            raise NonNumericCell(i, header[len(rec)], "")
        vals = [_parse_cell(rec[c], i, header[c]) for c in cols]
        a = vals[p]
        if a not in (0.0, 1.0):
            raise BadTreatmentValue(i, rec[cols[p]])
        y = vals[p + 1]
        if schema.outcome_kind == "binary" and y not in (0.0, 1.0):
            raise BadOutcomeValue(i, rec[cols[p + 1]])
        w_rows.append(vals[:p])
        a_vals.append(a)
        y_vals.append(y)
    if not y_vals:
        raise EmptyBody()
    w = np.array(w_rows, dtype=float).reshape(len(y_vals), p)
    return Dataset(w, np.array(a_vals), np.array(y_vals), schema.outcome_kind,
                   schema.covariate_names, schema.treatment_name, schema.outcome_name)


def _fmt(x):
    return format(float(x), ".17g")


def serialize_csv(ds: Dataset) -> str:
    """Render a dataset as CSV text; :func:`parse_csv` inverts it exactly."""
    lines = [",".join([*ds.covariate_names, ds.treatment_name, ds.outcome_name])]
    for i in range(ds.n):
        cells = [_fmt(v) for v in ds.covariates[i]]
        cells.append(str(int(ds.treatment[i])))
        cells.append(_fmt(ds.outcome[i]))
        lines.append(",".join(cells))
    return "\n".join(lines) + "\n"


def validate_dataset(ds: Dataset) -> list[Violation]:
    out = []
    if ds.n < 1:
        out.append(Violation("EmptyDataset", None))
    if ds.covariates.shape[0] != ds.n or ds.treatment.shape[0] != ds.n:
        out.append(Violation("ShapeMismatch", None,
                             f"W rows {ds.covariates.shape[0]}, A {ds.treatment.shape[0]}, Y {ds.n}"))
        return out
    if ds.outcome_kind not in OUTCOME_KINDS:
        out.append(Violation("UnknownOutcomeKind", None, str(ds.outcome_kind)))
    bad_w = ~np.isfinite(ds.covariates)
    for i in np.flatnonzero(bad_w.any(axis=1)):
        out.append(Violation("NonFiniteCovariate", int(i)))
    for i in np.flatnonzero((ds.treatment != 0) & (ds.treatment != 1)):
        out.append(Violation("BadTreatmentValue", int(i), repr(ds.treatment[i])))
    finite_y = np.isfinite(ds.outcome)
    for i in np.flatnonzero(~finite_y):
        out.append(Violation("NonFiniteOutcome", int(i)))
    if ds.outcome_kind == "binary":
        bad = finite_y & (ds.outcome != 0) & (ds.outcome != 1)
        for i in np.flatnonzero(bad):
            out.append(Violation("BinaryOutcomeViolation", int(i), repr(ds.outcome[i])))
    return out


def summarize(ds: Dataset) -> dict:
    """Per-column mean/min/max plus the treated fraction."""
    if ds.n < 1:
        raise ValueError("summarize needs at least one row")
    cols = {name: ds.covariates[:, j] for j, name in enumerate(ds.covariate_names)}
    cols[ds.treatment_name] = ds.treatment
    cols[ds.outcome_name] = ds.outcome
    summary = {
        name: {"mean": float(np.mean(v)), "min": float(np.min(v)), "max": float(np.max(v))}
        for name, v in cols.items()
    }
    return {"n": ds.n, "p": ds.p, "columns": summary,
            "treated_fraction": float(np.mean(ds.treatment)),
            "empty_covariates": ds.p == 0}
