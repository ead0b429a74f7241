"""Shared builders for the test suite."""

import csv

import numpy as np
import pytest

from tabstack.preprocess import CatColumnInfo, FeatureMatrix
from tabstack.schema import Column, TabularDataset, infer_column_kind


def dataset_from_dict(values: dict, label=None) -> TabularDataset:
    """Build a TabularDataset from {name: [cell, ...]}; cells are stringified."""
    cols = []
    for name, cells in values.items():
        vals = [None if c is None else str(c) for c in cells]
        cols.append(Column(name, infer_column_kind(vals), vals))
    return TabularDataset(columns=cols, label=label)


def write_csv(path, header, rows) -> str:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(header)
        w.writerows(rows)
    return str(path)


def numeric_matrix(X, names=None) -> FeatureMatrix:
    """Wrap a plain numeric array as a FeatureMatrix with no categoricals."""
    X = np.asarray(X, dtype=np.float64)
    names = names or [f"x{i}" for i in range(X.shape[1])]
    return FeatureMatrix(
        numeric=X,
        categorical=np.zeros((X.shape[0], 0), dtype=np.int64),
        numeric_names=list(names),
        cat_info=[],
        provenance={},
    )


def matrix_with_cats(X, codes, levels_per_col) -> FeatureMatrix:
    """FeatureMatrix with numeric block X and categorical code columns."""
    X = np.asarray(X, dtype=np.float64)
    codes = np.asarray(codes, dtype=np.int64)
    infos = []
    for j, levels in enumerate(levels_per_col):
        infos.append(
            CatColumnInfo(
                name=f"c{j}",
                levels=tuple(levels),
                observed_k=len(levels),
                truncated=False,
            )
        )
    return FeatureMatrix(
        numeric=X,
        categorical=codes,
        numeric_names=[f"x{i}" for i in range(X.shape[1])],
        cat_info=infos,
        provenance={},
    )


@pytest.fixture
def rng():
    return np.random.default_rng(0)
