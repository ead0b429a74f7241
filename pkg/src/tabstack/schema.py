"""Raw CSV ingestion, column-kind inference, and problem-type detection.

Cells stay as strings (or None for missing) until preprocessing; inference
here only decides what each column *is*, never rewrites values.
"""

from __future__ import annotations

import csv
import enum
import json
import logging
from dataclasses import dataclass, field
from datetime import datetime

from .errors import (
    DegenerateProblemError,
    DuplicateHeaderError,
    LabelNotFoundError,
    MissingLabelValuesError,
    RaggedRowError,
)

logger = logging.getLogger(__name__)

# Tokens treated as missing, compared case-insensitively.
MISSING_TOKENS = frozenset({"", "na", "n/a", "null", "nan"})

TEXT_DISTINCT_FRACTION = 0.90
TEXT_MEAN_GAPS = 3.0
NUMERIC_PARSE_FRACTION = 0.95
DATETIME_PARSE_FRACTION = 0.95
DISCARD_DISTINCT_FRACTION = 0.99

REGRESSION_DISTINCT_RATIO = 0.05
REGRESSION_MIN_DISTINCT = 20

_DATETIME_FORMATS = ("%Y/%m/%d", "%Y/%m/%d %H:%M:%S", "%m/%d/%Y")


class ColumnKind(str, enum.Enum):
    NUMERIC = "numeric"
    CATEGORICAL = "categorical"
    TEXT = "text"
    DATETIME = "datetime"
    DISCARDED = "discarded"


@dataclass(frozen=True)
class ProblemType:
    """What kind of target we are predicting."""

    kind: str  # "binary" | "multiclass" | "regression"
    num_classes: int = 0

    @property
    def is_classification(self) -> bool:
        return self.kind in ("binary", "multiclass")

    def to_dict(self) -> dict:
        return {"kind": self.kind, "num_classes": self.num_classes}

    @classmethod
    def from_dict(cls, d: dict) -> "ProblemType":
        return cls(kind=d["kind"], num_classes=int(d["num_classes"]))


BINARY = "binary"
MULTICLASS = "multiclass"
REGRESSION = "regression"


@dataclass
class Column:
    """One named column: raw cells (None = missing) plus its inferred kind."""

    name: str
    kind: ColumnKind
    values: list  # list[str | None], immutable by convention after load

    @property
    def missing_count(self) -> int:
        return sum(1 for v in self.values if v is None)

    @property
    def distinct_count(self) -> int:
        return len({v for v in self.values if v is not None})


@dataclass
class TabularDataset:
    """Columns in file order; the label column, when named, is one of them."""

    columns: list[Column]
    label: str | None = None
    _by_name: dict = field(default_factory=dict, repr=False)

    def __post_init__(self):
        self._by_name = {c.name: c for c in self.columns}
        if len(self._by_name) != len(self.columns):
            raise DuplicateHeaderError("duplicate column names in dataset")
        if self.label is not None and self.label not in self._by_name:
            raise LabelNotFoundError(f"label column {self.label!r} not present")

    @property
    def row_count(self) -> int:
        return len(self.columns[0].values) if self.columns else 0

    @property
    def feature_columns(self) -> list[Column]:
        return [c for c in self.columns if c.name != self.label]

    def column(self, name: str) -> Column:
        try:
            return self._by_name[name]
        except KeyError:
            raise LabelNotFoundError(f"no column named {name!r}") from None

    def label_column(self) -> Column:
        if self.label is None:
            raise LabelNotFoundError("dataset has no label column set")
        return self._by_name[self.label]

    def schema_records(self) -> list[dict]:
        return [
            {
                "name": c.name,
                "kind": c.kind.value,
                "distinct": c.distinct_count,
                "missing": c.missing_count,
            }
            for c in self.columns
        ]


def is_missing_token(cell: str) -> bool:
    return cell.strip().lower() in MISSING_TOKENS


def parse_number(cell: str):
    """float value, or None when the cell is not numeric."""
    try:
        return float(cell.strip())
    except (ValueError, OverflowError):
        return None


def parse_datetime(cell: str):
    """datetime, or None when the cell is not a recognizable timestamp."""
    s = cell.strip()
    # Pure numbers are numbers, not dates, even though "2016" would parse.
    if parse_number(s) is not None:
        return None
    try:
        return datetime.fromisoformat(s)
    except ValueError:
        pass
    for fmt in _DATETIME_FORMATS:
        try:
            return datetime.strptime(s, fmt)
        except ValueError:
            continue
    return None


def _whitespace_gaps(s: str) -> int:
    # Maximal whitespace runs between tokens; leading/trailing runs excluded.
    return max(len(s.split()) - 1, 0)


def infer_column_kind(values) -> ColumnKind:
    """Decide a column's kind from its raw cells (None = missing).

    Order matters: text, numeric, datetime, discard, else categorical.
    """
    present = [v for v in values if v is not None]
    if not present:
        return ColumnKind.DISCARDED
    n = len(present)
    distinct_frac = len(set(present)) / n

    if distinct_frac >= TEXT_DISTINCT_FRACTION:
        mean_gaps = sum(_whitespace_gaps(v) for v in present) / n
        if mean_gaps > TEXT_MEAN_GAPS:
            return ColumnKind.TEXT

    numeric_hits = sum(1 for v in present if parse_number(v) is not None)
    if numeric_hits / n >= NUMERIC_PARSE_FRACTION:
        return ColumnKind.NUMERIC

    datetime_hits = sum(1 for v in present if parse_datetime(v) is not None)
    if datetime_hits / n >= DATETIME_PARSE_FRACTION:
        return ColumnKind.DATETIME

    if distinct_frac >= DISCARD_DISTINCT_FRACTION:
        return ColumnKind.DISCARDED

    return ColumnKind.CATEGORICAL


def infer_problem_type(values) -> ProblemType:
    """Classify the prediction problem from raw label cells."""
    if any(v is None for v in values):
        raise MissingLabelValuesError("label column contains missing values")
    if not values:
        raise DegenerateProblemError("label column is empty")
    distinct = set(values)
    if len(distinct) == 1:
        raise DegenerateProblemError("label column has a single distinct value")

    all_numeric = all(parse_number(v) is not None for v in values)
    if all_numeric:
        ratio = len(distinct) / len(values)
        if ratio >= REGRESSION_DISTINCT_RATIO and len(distinct) > REGRESSION_MIN_DISTINCT:
            return ProblemType(REGRESSION)

    if len(distinct) == 2:
        return ProblemType(BINARY, num_classes=2)
    return ProblemType(MULTICLASS, num_classes=len(distinct))


def load_csv(path, label: str | None = None) -> TabularDataset:
    """Read a CSV into a TabularDataset, inferring every column's kind.

    Raises on ragged rows (with the offending row number) and duplicate
    headers. Missing tokens become None; all other cells stay verbatim.
    """
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise RaggedRowError(f"{path}: empty file") from None
        if len(set(header)) != len(header):
            dupes = sorted({h for h in header if header.count(h) > 1})
            raise DuplicateHeaderError(f"{path}: duplicate header names {dupes}")
        cells: list[list] = [[] for _ in header]
        for rownum, row in enumerate(reader, start=2):
            if len(row) != len(header):
                raise RaggedRowError(
                    f"{path}: row {rownum} has {len(row)} cells, header has {len(header)}"
                )
            for col, cell in zip(cells, row):
                col.append(None if is_missing_token(cell) else cell)

    if label is not None and label not in header:
        raise LabelNotFoundError(f"{path}: label column {label!r} not in header")

    columns = []
    for name, vals in zip(header, cells):
        kind = infer_column_kind(vals)
        if kind is ColumnKind.DISCARDED and not any(v is not None for v in vals):
            logger.warning("column %r is entirely missing; discarded", name)
        columns.append(Column(name=name, kind=kind, values=vals))
    return TabularDataset(columns=columns, label=label)


def save_csv(dataset: TabularDataset, path) -> None:
    """Write the dataset back out; missing cells become empty strings."""
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow([c.name for c in dataset.columns])
        for i in range(dataset.row_count):
            writer.writerow(
                ["" if c.values[i] is None else c.values[i] for c in dataset.columns]
            )


def schema_to_json(dataset: TabularDataset) -> dict:
    return {"label": dataset.label, "columns": dataset.schema_records()}


def save_schema(dataset: TabularDataset, path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(schema_to_json(dataset), fh, indent=2, sort_keys=True)
        fh.write("\n")
