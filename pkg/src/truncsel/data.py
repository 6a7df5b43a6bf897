"""Dataset containers, CSV schemas, and validation.

Two on-disk schemas are supported, both comma-separated UTF-8 with a header
row and ``.`` decimal point:

* survey:    ``x1,...,xLx,m1,...,mJ,opinion``
* truncated: ``y1,w1,...,wLw,z1,...,zLz,x1,...,xLx,m1,...,mJ``

Manifest codes are 1-based integers (0 is reserved as invalid); opinions are
binary.  Reals are serialized with 17 significant digits so a save/load round
trip is exact.  Datasets are immutable after construction.
"""

from __future__ import annotations

import csv
import re
from dataclasses import dataclass, field

import numpy as np

from .errors import IoError, MissingColumn, NonNumericCell, OutOfRangeCategory

_FLOAT_FMT = "%.17g"


def _validate_responses(responses, category_counts):
    responses = np.asarray(responses)
    if responses.ndim != 2:
        raise OutOfRangeCategory(0, "responses", responses.shape, "a 2-d code matrix")
    for j in range(responses.shape[1]):
        col = responses[:, j]
        bad = (col < 1) | (col > category_counts[j])
        if bad.any():
            i = int(np.argmax(bad))
            raise OutOfRangeCategory(i, f"m{j + 1}", int(col[i]), f"[1, {category_counts[j]}]")


@dataclass(frozen=True)
class SurveyDataset:
    """Expert rows: group covariates, manifest responses, binary opinion."""

    x: np.ndarray          # (n_experts, L_x) real group-level covariates
    responses: np.ndarray  # (n_experts, J) 1-based category codes
    opinions: np.ndarray   # (n_experts,) in {0, 1}
    category_counts: np.ndarray = field(default=None)  # (J,) codes per manifest variable

    def __post_init__(self):
        x = np.ascontiguousarray(np.asarray(self.x, dtype=float))
        responses = np.ascontiguousarray(np.asarray(self.responses, dtype=np.int64))
        opinions = np.ascontiguousarray(np.asarray(self.opinions, dtype=np.int64))
        if x.ndim != 2 or len(x) < 1:
            raise MissingColumn("x")
        if len(responses) != len(x) or len(opinions) != len(x):
            raise MissingColumn("responses/opinions with matching row count")
        if not np.isfinite(x).all():
            i, j = np.argwhere(~np.isfinite(x))[0]
            raise NonNumericCell(int(i), f"x{j + 1}", x[i, j])
        counts = self.category_counts
        if counts is None:
            counts = responses.max(axis=0)
        counts = np.asarray(counts, dtype=np.int64)
        _validate_responses(responses, counts)
        bad = (opinions != 0) & (opinions != 1)
        if bad.any():
            i = int(np.argmax(bad))
            raise OutOfRangeCategory(i, "opinion", int(opinions[i]), "{0, 1}")
        object.__setattr__(self, "x", x)
        object.__setattr__(self, "responses", responses)
        object.__setattr__(self, "opinions", opinions)
        object.__setattr__(self, "category_counts", counts)

    @property
    def n_experts(self) -> int:
        return len(self.x)

    @property
    def n_manifest(self) -> int:
        return self.responses.shape[1]

    def __eq__(self, other):
        return (isinstance(other, SurveyDataset)
                and np.array_equal(self.x, other.x)
                and np.array_equal(self.responses, other.responses)
                and np.array_equal(self.opinions, other.opinions)
                and np.array_equal(self.category_counts, other.category_counts))


@dataclass(frozen=True)
class TruncatedDataset:
    """Observed participant rows of the self-selected sample."""

    y1: np.ndarray         # (n,) outcomes
    w: np.ndarray          # (n, L_w) substantive covariates
    z: np.ndarray          # (n, L_z) individual-level covariates
    x: np.ndarray          # (n, L_x) group-level covariates
    responses: np.ndarray  # (n, J) manifest codes
    x_contextual_idx: tuple = None  # columns of x acting as contextual covariates
    category_counts: np.ndarray = field(default=None)

    def __post_init__(self):
        y1 = np.ascontiguousarray(np.asarray(self.y1, dtype=float))
        w = np.ascontiguousarray(np.asarray(self.w, dtype=float))
        z = np.ascontiguousarray(np.asarray(self.z, dtype=float))
        x = np.ascontiguousarray(np.asarray(self.x, dtype=float))
        responses = np.ascontiguousarray(np.asarray(self.responses, dtype=np.int64))
        n = len(y1)
        for name, arr in (("w", w), ("z", z), ("x", x), ("responses", responses)):
            if len(arr) != n:
                raise MissingColumn(f"{name} rows ({len(arr)}) != y1 rows ({n})")
        for name, arr in (("y1", y1), ("w", w), ("z", z), ("x", x)):
            if not np.isfinite(arr).all():
                flat = np.argwhere(~np.isfinite(np.atleast_2d(arr.T).T))[0]
                raise NonNumericCell(int(flat[0]), name, "non-finite")
        idx = self.x_contextual_idx
        if idx is None:
            idx = (x.shape[1] - 1,)
        idx = tuple(int(i) for i in idx)
        if not set(idx) < set(range(x.shape[1])):
            # exclusion restriction: contextual columns must be a strict subset
            raise OutOfRangeCategory(0, "x_contextual_idx", idx,
                                     f"a strict subset of 0..{x.shape[1] - 1}")
        counts = self.category_counts
        if counts is None:
            counts = responses.max(axis=0)
        counts = np.asarray(counts, dtype=np.int64)
        _validate_responses(responses, counts)
        object.__setattr__(self, "y1", y1)
        object.__setattr__(self, "w", w)
        object.__setattr__(self, "z", z)
        object.__setattr__(self, "x", x)
        object.__setattr__(self, "responses", responses)
        object.__setattr__(self, "x_contextual_idx", idx)
        object.__setattr__(self, "category_counts", counts)

    @property
    def n(self) -> int:
        return len(self.y1)

    @property
    def x_contextual(self) -> np.ndarray:
        return self.x[:, list(self.x_contextual_idx)]

    def __eq__(self, other):
        return (isinstance(other, TruncatedDataset)
                and np.array_equal(self.y1, other.y1)
                and np.array_equal(self.w, other.w)
                and np.array_equal(self.z, other.z)
                and np.array_equal(self.x, other.x)
                and np.array_equal(self.responses, other.responses)
                and self.x_contextual_idx == other.x_contextual_idx)


@dataclass(frozen=True)
class LabeledDataset:
    """A dataset together with fitted class labels in 1..k."""

    base: object
    labels: np.ndarray
    k: int

    def __post_init__(self):
        labels = np.ascontiguousarray(np.asarray(self.labels, dtype=np.int64))
        n = self.base.n_experts if isinstance(self.base, SurveyDataset) else self.base.n
        if len(labels) != n:
            raise MissingColumn(f"labels rows ({len(labels)}) != base rows ({n})")
        bad = (labels < 1) | (labels > self.k)
        if bad.any():
            i = int(np.argmax(bad))
            raise OutOfRangeCategory(i, "labels", int(labels[i]), f"[1, {self.k}]")
        object.__setattr__(self, "labels", labels)


def _header(schema, l_x, n_manifest, l_w=0, l_z=0):
    if schema == "survey":
        return ([f"x{i + 1}" for i in range(l_x)]
                + [f"m{j + 1}" for j in range(n_manifest)] + ["opinion"])
    return (["y1"] + [f"w{i + 1}" for i in range(l_w)] + [f"z{i + 1}" for i in range(l_z)]
            + [f"x{i + 1}" for i in range(l_x)] + [f"m{j + 1}" for j in range(n_manifest)])


def save_csv(dataset, path) -> None:
    """Write a dataset under its schema with full-precision reals."""
    if isinstance(dataset, LabeledDataset):
        dataset = dataset.base
    try:
        fh = open(path, "w", newline="", encoding="utf-8")
    except OSError as exc:
        raise IoError(f"cannot write {path!r}: {exc}") from exc
    with fh:
        writer = csv.writer(fh)
        if isinstance(dataset, SurveyDataset):
            writer.writerow(_header("survey", dataset.x.shape[1], dataset.n_manifest))
            for i in range(dataset.n_experts):
                writer.writerow([_FLOAT_FMT % v for v in dataset.x[i]]
                                + [str(int(v)) for v in dataset.responses[i]]
                                + [str(int(dataset.opinions[i]))])
        elif isinstance(dataset, TruncatedDataset):
            writer.writerow(_header("truncated", dataset.x.shape[1],
                                    dataset.responses.shape[1],
                                    dataset.w.shape[1], dataset.z.shape[1]))
            for i in range(dataset.n):
                writer.writerow([_FLOAT_FMT % dataset.y1[i]]
                                + [_FLOAT_FMT % v for v in dataset.w[i]]
                                + [_FLOAT_FMT % v for v in dataset.z[i]]
                                + [_FLOAT_FMT % v for v in dataset.x[i]]
                                + [str(int(v)) for v in dataset.responses[i]])
        else:
            raise IoError(f"cannot save object of type {type(dataset).__name__}")


def _split_header(header, schema):
    """Group header names into column blocks, enforcing the schema layout."""
    pat = {"y1": r"y1", "w": r"w(\d+)", "z": r"z(\d+)", "x": r"x(\d+)", "m": r"m(\d+)",
           "opinion": r"opinion"}
    blocks = {"y1": [], "w": [], "z": [], "x": [], "m": [], "opinion": []}
    for pos, name in enumerate(header):
        for key, p in pat.items():
            if re.fullmatch(p, name):
                blocks[key].append(pos)
                break
        else:
            raise MissingColumn(f"unrecognized column {name!r}")
    if schema == "survey":
        required = [("x", 1), ("m", 1), ("opinion", 1)]
        forbidden = ["y1", "w", "z"]
    else:
        required = [("y1", 1), ("w", 1), ("z", 1), ("x", 1), ("m", 1)]
        forbidden = ["opinion"]
    for key, least in required:
        if len(blocks[key]) < least:
            raise MissingColumn(f"{key}1")
    for key in forbidden:
        if blocks[key]:
            raise MissingColumn(f"column {key!r} not allowed in {schema} schema")
    return blocks


def _parse_cell(value, row, column, as_int=False):
    try:
        if as_int:
            return int(value)
        return float(value)
    except (TypeError, ValueError):
        raise NonNumericCell(row, column, value) from None


def load_csv(path, schema: str, x_contextual_idx=None):
    """Load a survey or truncated CSV into its validated dataset.

    ``category_counts`` are inferred as per-column maxima.  For the truncated
    schema, ``x_contextual_idx`` defaults to the last x column.
    """
    if schema not in ("survey", "truncated"):
        raise IoError(f"unknown schema {schema!r}")
    try:
        fh = open(path, "r", newline="", encoding="utf-8")
    except OSError as exc:
        raise IoError(f"cannot read {path!r}: {exc}") from exc
    with fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise MissingColumn("header", path) from None
        blocks = _split_header([h.strip() for h in header], schema)
        rows = [row for row in reader if row]
    n = len(rows)
    if n == 0:
        raise MissingColumn("at least one data row", path)

    def gather(key, as_int=False):
        cols = blocks[key]
        out = np.empty((n, len(cols)), dtype=np.int64 if as_int else float)
        for i, row in enumerate(rows):
            if len(row) != len(header):
                raise NonNumericCell(i, "<row>", f"{len(row)} cells, expected {len(header)}")
            for jj, pos in enumerate(cols):
                out[i, jj] = _parse_cell(row[pos].strip(), i, header[pos], as_int)
        return out

    x = gather("x")
    responses = gather("m", as_int=True)
    if schema == "survey":
        opinions = gather("opinion", as_int=True)[:, 0]
        return SurveyDataset(x=x, responses=responses, opinions=opinions)
    y1 = gather("y1")[:, 0]
    w = gather("w")
    z = gather("z")
    return TruncatedDataset(y1=y1, w=w, z=z, x=x, responses=responses,
                            x_contextual_idx=x_contextual_idx)
