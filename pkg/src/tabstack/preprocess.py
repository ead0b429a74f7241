"""Two-stage feature preprocessing.

Stage one (model-agnostic) turns raw columns into a numeric block plus
integer-coded categorical block, fitted once per run. Stage two
(model-specific) adapts that matrix per learner family: trees keep codes,
linear/distance models get full one-hot + standardization, neural gets
quantile/standard scaling and one-hot only for tiny cardinalities.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from datetime import datetime, timezone

import numpy as np
from scipy import stats as _sstats
from sklearn.base import BaseEstimator, TransformerMixin

from .errors import SchemaMismatchError
from .schema import ColumnKind, TabularDataset, parse_datetime, parse_number

logger = logging.getLogger(__name__)

NGRAM_MIN_OCCURRENCE = 3
NGRAM_VOCAB_CAP = 512
CATEGORY_RETAIN_MAX = 100
SKEW_THRESHOLD = 1.0
NEURAL_ONE_HOT_BELOW = 4  # cats with fewer observed levels one-hot for the net

PREPROCESS_FAMILIES = ("tree", "linear", "neural")

_EPOCH = datetime(1970, 1, 1)


@dataclass(frozen=True)
class CatColumnInfo:
    """Code-space description of one encoded categorical column.

    Codes: 0 = Unknown (missing or never seen), 1..len(levels) = retained
    levels, len(levels)+1 = Other (present only when ``truncated``).
    """

    name: str
    levels: tuple
    observed_k: int  # distinct non-missing levels at fit time
    truncated: bool

    @property
    def code_size(self) -> int:
        return len(self.levels) + (2 if self.truncated else 1)


@dataclass
class FeatureMatrix:
    """Numeric block + integer-coded categorical block with provenance.

    ``provenance[name]`` records where each output feature came from and
    which transform produced it.
    """

    numeric: np.ndarray  # float64 (n, d_num)
    categorical: np.ndarray  # int64 (n, d_cat)
    numeric_names: list[str]
    cat_info: list[CatColumnInfo]
    provenance: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.numeric.ndim != 2 or self.categorical.ndim != 2:
            raise ValueError("feature blocks must be 2-d")
        if len(self.numeric) != len(self.categorical):
            raise ValueError("numeric and categorical blocks disagree on rows")
        if self.numeric.shape[1] != len(self.numeric_names):
            raise ValueError("numeric_names length mismatch")
        if self.categorical.shape[1] != len(self.cat_info):
            raise ValueError("cat_info length mismatch")

    @property
    def n_rows(self) -> int:
        return self.numeric.shape[0]

    @property
    def width(self) -> int:
        return self.numeric.shape[1] + self.categorical.shape[1]

    @property
    def cat_names(self) -> list[str]:
        return [c.name for c in self.cat_info]

    def take(self, rows) -> "FeatureMatrix":
        """Row subset; metadata shared."""
        idx = np.asarray(rows)
        return FeatureMatrix(
            numeric=self.numeric[idx],
            categorical=self.categorical[idx],
            numeric_names=self.numeric_names,
            cat_info=self.cat_info,
            provenance=self.provenance,
        )

    def with_numeric_appended(self, names, block, provenance) -> "FeatureMatrix":
        block = np.asarray(block, dtype=np.float64)
        if block.shape[0] != self.n_rows:
            raise SchemaMismatchError(
                f"appended block has {block.shape[0]} rows, matrix has {self.n_rows}"
            )
        if block.shape[1] != len(names):
            raise ValueError("appended names length mismatch")
        merged = dict(self.provenance)
        merged.update(provenance)
        return FeatureMatrix(
            numeric=np.hstack([self.numeric, block]),
            categorical=self.categorical,
            numeric_names=[*self.numeric_names, *names],
            cat_info=self.cat_info,
            provenance=merged,
        )


def _datetime_fields(dt: datetime) -> list:
    if dt.tzinfo is not None:
        epoch = dt.timestamp()
        dt = dt.astimezone(timezone.utc).replace(tzinfo=None)
    else:
        epoch = (dt - _EPOCH).total_seconds()
    # weekday(): Monday=0 .. Sunday=6
    return [dt.year, dt.month, dt.day, dt.weekday(), dt.hour, epoch]


_DT_SUFFIXES = ("year", "month", "day", "weekday", "hour", "epoch")


def _grams(cell: str) -> list:
    toks = cell.lower().split()
    return toks + [f"{a} {b}" for a, b in zip(toks, toks[1:])]


class ModelAgnosticPreprocessor(BaseEstimator, TransformerMixin):
    """Raw dataset -> FeatureMatrix, shared by every learner family.

    Numeric columns pass through (unparseable -> NaN); datetimes expand to
    calendar fields + epoch seconds; text becomes capped n-gram counts;
    categoricals become integer codes with Unknown/Other handling.
    """

    def __init__(
        self,
        ngram_min_occurrence: int = NGRAM_MIN_OCCURRENCE,
        ngram_vocab_cap: int = NGRAM_VOCAB_CAP,
        max_levels: int = CATEGORY_RETAIN_MAX,
    ):
        self.ngram_min_occurrence = ngram_min_occurrence
        self.ngram_vocab_cap = ngram_vocab_cap
        self.max_levels = max_levels

    def fit(self, dataset: TabularDataset, y=None):
        cols = []
        for col in dataset.feature_columns:
            if col.kind is ColumnKind.DISCARDED:
                continue
            spec: dict = {"name": col.name, "kind": col.kind.value}
            if col.kind is ColumnKind.CATEGORICAL:
                counts: dict = {}
                for v in col.values:
                    if v is not None:
                        counts[v] = counts.get(v, 0) + 1
                ordered = sorted(counts, key=lambda v: (-counts[v], v))
                retained = ordered[: self.max_levels]
                spec["levels"] = retained
                spec["observed_k"] = len(ordered)
                spec["truncated"] = len(ordered) > self.max_levels
                spec["other_levels"] = sorted(ordered[self.max_levels :])
            elif col.kind is ColumnKind.TEXT:
                counts = {}
                for v in col.values:
                    if v is None:
                        continue
                    for g in _grams(v):
                        counts[g] = counts.get(g, 0) + 1
                vocab = [g for g in counts if counts[g] >= self.ngram_min_occurrence]
                vocab.sort(key=lambda g: (-counts[g], g))
                spec["vocab"] = vocab[: self.ngram_vocab_cap]
            cols.append(spec)
        self.columns_ = cols
        return self

    def transform(self, dataset: TabularDataset) -> FeatureMatrix:
        n = dataset.row_count
        num_blocks: list = []
        num_names: list = []
        provenance: dict = {}
        cat_codes: list = []
        cat_info: list = []

        for spec in self.columns_:
            name = spec["name"]
            try:
                col = dataset.column(name)
            except Exception:
                raise SchemaMismatchError(f"column {name!r} missing at apply time") from None
            kind = spec["kind"]
            if kind == ColumnKind.NUMERIC.value:
                vals = np.array(
                    [np.nan if v is None else _num_or_nan(v) for v in col.values],
                    dtype=np.float64,
                )
                num_blocks.append(vals[:, None])
                num_names.append(name)
                provenance[name] = {"source": name, "transform": "numeric"}
            elif kind == ColumnKind.DATETIME.value:
                block = np.full((n, 6), np.nan)
                for i, v in enumerate(col.values):
                    if v is None:
                        continue
                    dt = parse_datetime(v)
                    if dt is not None:
                        block[i] = _datetime_fields(dt)
                num_blocks.append(block)
                for suf in _DT_SUFFIXES:
                    out = f"{name}~{suf}"
                    num_names.append(out)
                    provenance[out] = {"source": name, "transform": f"datetime:{suf}"}
            elif kind == ColumnKind.TEXT.value:
                vocab = spec["vocab"]
                index = {g: j for j, g in enumerate(vocab)}
                block = np.zeros((n, len(vocab)))
                for i, v in enumerate(col.values):
                    if v is None:
                        continue
                    for g in _grams(v):
                        j = index.get(g)
                        if j is not None:
                            block[i, j] += 1.0
                num_blocks.append(block)
                for g in vocab:
                    out = f"{name}~tf:{g}"
                    num_names.append(out)
                    provenance[out] = {"source": name, "transform": "ngram_count"}
            elif kind == ColumnKind.CATEGORICAL.value:
                levels = spec["levels"]
                code_map = {v: j + 1 for j, v in enumerate(levels)}
                other_set = set(spec["other_levels"])
                other_code = len(levels) + 1
                codes = np.zeros(n, dtype=np.int64)
                for i, v in enumerate(col.values):
                    if v is None:
                        continue
                    c = code_map.get(v)
                    if c is not None:
                        codes[i] = c
                    elif v in other_set:
                        codes[i] = other_code
                cat_codes.append(codes[:, None])
                info = CatColumnInfo(
                    name=name,
                    levels=tuple(levels),
                    observed_k=spec["observed_k"],
                    truncated=spec["truncated"],
                )
                cat_info.append(info)
                provenance[name] = {"source": name, "transform": "category_code"}

        numeric = np.hstack(num_blocks) if num_blocks else np.zeros((n, 0))
        categorical = (
            np.hstack(cat_codes) if cat_codes else np.zeros((n, 0), dtype=np.int64)
        )
        return FeatureMatrix(
            numeric=numeric,
            categorical=categorical,
            numeric_names=num_names,
            cat_info=cat_info,
            provenance=provenance,
        )

    def to_config(self) -> dict:
        return {
            "params": {
                "ngram_min_occurrence": self.ngram_min_occurrence,
                "ngram_vocab_cap": self.ngram_vocab_cap,
                "max_levels": self.max_levels,
            },
            "columns": self.columns_,
        }

    @classmethod
    def from_config(cls, cfg: dict) -> "ModelAgnosticPreprocessor":
        obj = cls(**cfg["params"])
        obj.columns_ = cfg["columns"]
        return obj


def _num_or_nan(v: str) -> float:
    x = parse_number(v)
    return np.nan if x is None else x


class ModelSpecificPreprocessor(BaseEstimator, TransformerMixin):
    """FeatureMatrix -> family-adapted FeatureMatrix.

    family "tree": impute numeric medians; codes pass through.
    family "linear": impute + standardize numerics; one-hot every categorical.
    family "neural": impute; skewed numerics (|skew| > 1) get an empirical-CDF
    quantile map, the rest standardize; categoricals with observed_k <
    NEURAL_ONE_HOT_BELOW one-hot, larger ones stay coded for embeddings.
    """

    def __init__(self, family: str):
        if family not in PREPROCESS_FAMILIES:
            raise ValueError(f"unknown preprocess family {family!r}")
        self.family = family

    def fit(self, fm: FeatureMatrix, y=None):
        num = fm.numeric
        d = num.shape[1]
        medians = np.zeros(d)
        for j in range(d):
            col = num[:, j]
            finite = col[np.isfinite(col)]
            medians[j] = np.median(finite) if finite.size else 0.0
        self.medians_ = medians
        self.numeric_names_ = list(fm.numeric_names)
        self.cat_info_ = list(fm.cat_info)

        self.transforms_: list = []  # per numeric col: ("identity"|"standardize"|"quantile", payload)
        if self.family == "tree":
            self.transforms_ = [("identity", None)] * d
        else:
            imputed = np.where(np.isfinite(num), num, medians)
            for j in range(d):
                col = imputed[:, j]
                mean = float(col.mean())
                std = float(col.std())
                if self.family == "neural" and std > 0.0:
                    skew = float(_sstats.skew(col))
                    if np.isfinite(skew) and abs(skew) > SKEW_THRESHOLD:
                        u, counts = np.unique(col, return_counts=True)
                        less = np.concatenate([[0], np.cumsum(counts)[:-1]])
                        cdf = (less + 0.5 * counts) / len(col)
                        self.transforms_.append(
                            ("quantile", (u.tolist(), cdf.tolist()))
                        )
                        continue
                self.transforms_.append(("standardize", (mean, std)))

        if self.family == "tree":
            self.onehot_cats_ = []
        elif self.family == "linear":
            self.onehot_cats_ = list(range(len(fm.cat_info)))
        else:
            self.onehot_cats_ = [
                i
                for i, info in enumerate(fm.cat_info)
                if info.observed_k < NEURAL_ONE_HOT_BELOW
            ]
        return self

    def transform(self, fm: FeatureMatrix) -> FeatureMatrix:
        if list(fm.numeric_names) != self.numeric_names_ or [
            c.name for c in fm.cat_info
        ] != [c.name for c in self.cat_info_]:
            raise SchemaMismatchError("feature matrix does not match fitted structure")

        num = np.where(np.isfinite(fm.numeric), fm.numeric, self.medians_)
        out = np.empty_like(num)
        names = list(self.numeric_names_)
        provenance = dict(fm.provenance)
        for j, (kind, payload) in enumerate(self.transforms_):
            col = num[:, j]
            if kind == "identity":
                out[:, j] = col
            elif kind == "standardize":
                mean, std = payload
                out[:, j] = (col - mean) / std if std > 0.0 else 0.0
                provenance[names[j]] = {
                    **provenance.get(names[j], {"source": names[j]}),
                    "transform": "standardize" if std > 0.0 else "zero_variance",
                }
            else:
                u, cdf = payload
                out[:, j] = np.interp(col, u, cdf)
                provenance[names[j]] = {
                    **provenance.get(names[j], {"source": names[j]}),
                    "transform": "quantile_cdf",
                }

        onehot_set = set(self.onehot_cats_)
        oh_blocks: list = []
        oh_names: list = []
        keep_cat_cols: list = []
        keep_info: list = []
        for i, info in enumerate(self.cat_info_):
            if i in onehot_set:
                codes = fm.categorical[:, i]
                width = info.code_size
                block = np.zeros((fm.n_rows, width))
                block[np.arange(fm.n_rows), codes] = 1.0
                oh_blocks.append(block)
                labels = ["(unknown)", *info.levels]
                if info.truncated:
                    labels.append("(other)")
                for lab in labels:
                    out_name = f"{info.name}={lab}"
                    oh_names.append(out_name)
                    provenance[out_name] = {"source": info.name, "transform": "onehot"}
            else:
                keep_cat_cols.append(fm.categorical[:, i : i + 1])
                keep_info.append(info)

        numeric = np.hstack([out, *oh_blocks]) if oh_blocks else out
        categorical = (
            np.hstack(keep_cat_cols)
            if keep_cat_cols
            else np.zeros((fm.n_rows, 0), dtype=np.int64)
        )
        return FeatureMatrix(
            numeric=numeric,
            categorical=categorical,
            numeric_names=[*names, *oh_names],
            cat_info=keep_info,
            provenance=provenance,
        )

    def to_config(self) -> dict:
        return {
            "family": self.family,
            "medians": self.medians_.tolist(),
            "numeric_names": self.numeric_names_,
            "transforms": [
                {"kind": k, "payload": p} for k, p in self.transforms_
            ],
            "onehot_cats": self.onehot_cats_,
            "cat_info": [
                {
                    "name": c.name,
                    "levels": list(c.levels),
                    "observed_k": c.observed_k,
                    "truncated": c.truncated,
                }
                for c in self.cat_info_
            ],
        }

    @classmethod
    def from_config(cls, cfg: dict) -> "ModelSpecificPreprocessor":
        obj = cls(cfg["family"])
        obj.medians_ = np.asarray(cfg["medians"], dtype=np.float64)
        obj.numeric_names_ = list(cfg["numeric_names"])
        obj.transforms_ = [
            (
                t["kind"],
                tuple(t["payload"]) if isinstance(t["payload"], list) else t["payload"],
            )
            for t in cfg["transforms"]
        ]
        obj.onehot_cats_ = list(cfg["onehot_cats"])
        obj.cat_info_ = [
            CatColumnInfo(
                name=c["name"],
                levels=tuple(c["levels"]),
                observed_k=c["observed_k"],
                truncated=c["truncated"],
            )
            for c in cfg["cat_info"]
        ]
        return obj
