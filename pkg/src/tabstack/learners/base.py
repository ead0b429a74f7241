"""Shared learner contract.

Every learner fits on a FeatureMatrix and predicts a dense float64 matrix:
(n, num_classes) probabilities for classification, (n, 1) values for
regression. Fitting accepts an optional holdout (for early stopping) and an
optional wall-clock allowance in seconds.
"""

from __future__ import annotations

import json
import pickle
import time

import numpy as np
from sklearn.base import BaseEstimator

from ..errors import ModelUnavailableError, SchemaMismatchError
from ..preprocess import FeatureMatrix
from ..schema import ProblemType


class BaseLearner(BaseEstimator):
    family = "abstract"

    def __init__(self, problem: ProblemType = None, seed: int = 0):
        self.problem = problem
        self.seed = seed

    # -- subclass surface ---------------------------------------------------

    def _fit(self, fm, y, holdout, time_allowance):
        raise NotImplementedError

    def _predict(self, fm) -> np.ndarray:
        raise NotImplementedError

    # -- public API ---------------------------------------------------------

    @property
    def out_dim(self) -> int:
        return self.problem.num_classes if self.problem.is_classification else 1

    def fit(self, fm: FeatureMatrix, y, holdout=None, time_allowance: float = None):
        """Train on fm/y; holdout = (FeatureMatrix, y) when given.

        Records fit_seconds_ and the fitted input shape for apply-time
        validation. Raises ModelUnavailableError when nothing usable could
        be trained inside the allowance.
        """
        t0 = time.monotonic()
        if time_allowance is not None and time_allowance <= 0:
            raise ModelUnavailableError(f"{self.family}: no time allowance left")
        y = np.asarray(y)
        if self.problem.is_classification:
            y = y.astype(np.int64)
        else:
            y = y.astype(np.float64)
        self._fit_width = (fm.numeric.shape[1], fm.categorical.shape[1])
        self._fit_code_sizes = [c.code_size for c in fm.cat_info]
        self._fit(fm, y, holdout, time_allowance)
        self.fit_seconds_ = time.monotonic() - t0
        return self

    def predict(self, fm: FeatureMatrix) -> np.ndarray:
        self._check_apply(fm)
        if fm.n_rows == 0:
            return np.zeros((0, self.out_dim))
        out = np.asarray(self._predict(fm), dtype=np.float64)
        if out.ndim == 1:
            out = out[:, None]
        return out

    def _check_apply(self, fm: FeatureMatrix) -> None:
        shape = (fm.numeric.shape[1], fm.categorical.shape[1])
        if shape != self._fit_width:
            raise SchemaMismatchError(
                f"{self.family}: apply-time blocks {shape} != fit-time {self._fit_width}"
            )

    # -- persistence ----------------------------------------------------------

    def save(self, path) -> None:
        """Pickle to path; a .json sidecar carries human-readable metadata.

        Wall-clock fit time lives only in the sidecar so the pickle bytes
        are a pure function of data + seed (resume reproduces them exactly).
        """
        seconds = self.__dict__.pop("fit_seconds_", None)
        try:
            with open(path, "wb") as fh:
                pickle.dump(self, fh, protocol=pickle.HIGHEST_PROTOCOL)
        finally:
            if seconds is not None:
                self.fit_seconds_ = seconds
        sidecar = {
            "family": self.family,
            "out_dim": self.out_dim,
            "seed": self.seed,
            "fit_seconds": seconds,
            "problem": self.problem.to_dict(),
        }
        with open(f"{path}.json", "w", encoding="utf-8") as fh:
            json.dump(sidecar, fh, indent=2, sort_keys=True)
            fh.write("\n")

    @staticmethod
    def load(path) -> "BaseLearner":
        with open(path, "rb") as fh:
            return pickle.load(fh)


def align_proba(raw: np.ndarray, model_classes, num_classes: int) -> np.ndarray:
    """Expand a fitted model's probability columns onto the full class set.

    A fold's training slice can miss rare classes entirely; absent classes
    get probability zero.
    """
    raw = np.asarray(raw, dtype=np.float64)
    if raw.ndim == 1:
        raw = raw[:, None]
    idx = np.asarray(model_classes, dtype=np.int64)
    if len(idx) == num_classes and np.array_equal(idx, np.arange(num_classes)):
        return raw
    full = np.zeros((raw.shape[0], num_classes))
    full[:, idx] = raw
    return full


def time_left(t0: float, allowance) -> float:
    if allowance is None:
        return float("inf")
    return allowance - (time.monotonic() - t0)
