"""Forest, boosting, linear, and nearest-neighbor learners.

All wrap scikit-learn estimators behind the package's learner contract:
time-sliced fitting via warm starts, holdout early stopping with argmin
truncation for boosting, and probability columns aligned to the full class
set even when a fold's training slice misses a class.
"""

from __future__ import annotations

import time

import numpy as np
from sklearn.ensemble import (
    ExtraTreesClassifier,
    ExtraTreesRegressor,
    GradientBoostingClassifier,
    GradientBoostingRegressor,
    RandomForestClassifier,
    RandomForestRegressor,
)
from sklearn.linear_model import LogisticRegression, Ridge
from sklearn.neighbors import KNeighborsClassifier, KNeighborsRegressor

from ..errors import ModelUnavailableError
from ..metrics import loss as metric_loss
from .base import BaseLearner, align_proba, time_left

FOREST_CHUNK = 25  # trees grown between clock checks
BOOST_CHUNK = 16  # rounds grown between clock checks


def tree_matrix(fm) -> np.ndarray:
    """Numeric block + one-hot expansion of every categorical code column.

    Width is fixed by fit-time code sizes, so train and apply matrices
    always line up.
    """
    blocks = [fm.numeric]
    for i, info in enumerate(fm.cat_info):
        codes = fm.categorical[:, i]
        block = np.zeros((fm.n_rows, info.code_size))
        block[np.arange(fm.n_rows), codes] = 1.0
        blocks.append(block)
    return np.hstack(blocks) if len(blocks) > 1 else fm.numeric


class _ForestLearner(BaseLearner):
    """Shared warm-start chunked fitting for both forest flavors."""

    _cls_factory = None
    _reg_factory = None

    def __init__(
        self,
        problem=None,
        seed: int = 0,
        n_estimators: int = 300,
        max_depth=None,
        min_samples_leaf: int = 1,
        bootstrap=None,
    ):
        super().__init__(problem=problem, seed=seed)
        self.n_estimators = n_estimators
        self.max_depth = max_depth
        self.min_samples_leaf = min_samples_leaf
        self.bootstrap = bootstrap

    def _make(self):
        common = dict(
            n_estimators=0,
            warm_start=True,
            max_depth=self.max_depth,
            min_samples_leaf=self.min_samples_leaf,
            random_state=self.seed,
            n_jobs=1,
        )
        if self.bootstrap is not None:
            common["bootstrap"] = self.bootstrap
        if self.problem.is_classification:
            return type(self)._cls_factory(max_features="sqrt", **common)
        return type(self)._reg_factory(max_features=1.0, **common)

    def _fit(self, fm, y, holdout, time_allowance):
        t0 = time.monotonic()
        X = tree_matrix(fm)
        est = self._make()
        grown = 0
        while grown < self.n_estimators:
            if grown > 0 and time_left(t0, time_allowance) <= 0:
                break
            step = min(FOREST_CHUNK, self.n_estimators - grown)
            est.n_estimators = grown + step
            est.fit(X, y)
            grown += step
        if grown == 0:
            raise ModelUnavailableError(f"{self.family}: no trees fit in allowance")
        self.est_ = est
        self.n_trees_ = grown

    def _predict(self, fm):
        X = tree_matrix(fm)
        if self.problem.is_classification:
            return align_proba(
                self.est_.predict_proba(X), self.est_.classes_, self.problem.num_classes
            )
        return self.est_.predict(X)


class RandomForestLearner(_ForestLearner):
    family = "random_forest"
    _cls_factory = RandomForestClassifier
    _reg_factory = RandomForestRegressor


class ExtraTreesLearner(_ForestLearner):
    family = "extra_trees"
    _cls_factory = ExtraTreesClassifier
    _reg_factory = ExtraTreesRegressor


class GradientBoostingLearner(BaseLearner):
    """Exact-split boosted trees with holdout argmin truncation.

    Grows in warm-start chunks; when a holdout is supplied the final model
    keeps only the round minimizing holdout loss (0 rounds = prior allowed),
    and growth stops once the best round is `patience` rounds stale.
    """

    family = "gradient_boosting"

    def __init__(
        self,
        problem=None,
        seed: int = 0,
        n_estimators: int = 10000,
        learning_rate: float = 0.05,
        max_leaf_nodes: int = 31,
        patience: int = 50,
    ):
        super().__init__(problem=problem, seed=seed)
        self.n_estimators = n_estimators
        self.learning_rate = learning_rate
        self.max_leaf_nodes = max_leaf_nodes
        self.patience = patience

    def _make(self):
        common = dict(
            n_estimators=0,
            warm_start=True,
            learning_rate=self.learning_rate,
            max_leaf_nodes=self.max_leaf_nodes,
            max_depth=None,
            random_state=self.seed,
        )
        if self.problem.is_classification:
            return GradientBoostingClassifier(**common)
        return GradientBoostingRegressor(**common)

    def _holdout_loss_curve(self, est, X_h, y_h, upto: int) -> np.ndarray:
        """Holdout loss at each round 1..upto (prior handled separately)."""
        losses = np.empty(upto)
        if self.problem.is_classification:
            stage = est.staged_predict_proba(X_h)
            for r, proba in enumerate(stage):
                if r >= upto:
                    break
                p = align_proba(proba, est.classes_, self.problem.num_classes)
                losses[r] = metric_loss("log_loss", p, y_h)
        else:
            stage = est.staged_predict(X_h)
            for r, pred in enumerate(stage):
                if r >= upto:
                    break
                losses[r] = metric_loss("mse", pred, y_h)
        return losses

    def _prior_vector(self, y) -> np.ndarray:
        if self.problem.is_classification:
            counts = np.bincount(y, minlength=self.problem.num_classes)
            return counts / counts.sum()
        return np.array([float(np.mean(y))])

    def _prior_loss(self, y_h) -> float:
        p = np.tile(self.prior_, (len(y_h), 1))
        if self.problem.is_classification:
            return metric_loss("log_loss", p, y_h)
        return metric_loss("mse", p[:, 0], y_h)

    def _fit(self, fm, y, holdout, time_allowance):
        t0 = time.monotonic()
        X = tree_matrix(fm)
        self.prior_ = self._prior_vector(y)
        est = self._make()

        have_holdout = holdout is not None
        if have_holdout:
            X_h = tree_matrix(holdout[0])
            y_h = np.asarray(holdout[1])
            if self.problem.is_classification:
                y_h = y_h.astype(np.int64)
            best_loss = self._prior_loss(y_h)
            best_round = 0  # 0 = prior only
        grown = 0
        while grown < self.n_estimators:
            if grown > 0 and time_left(t0, time_allowance) <= 0:
                break
            step = min(BOOST_CHUNK, self.n_estimators - grown)
            est.n_estimators = grown + step
            est.fit(X, y)
            grown = est.n_estimators
            if have_holdout:
                curve = self._holdout_loss_curve(est, X_h, y_h, grown)
                r_best = int(np.argmin(curve))
                if curve[r_best] < best_loss:
                    best_loss = float(curve[r_best])
                    best_round = r_best + 1
                if grown - best_round >= self.patience:
                    break

        if grown == 0:
            raise ModelUnavailableError(f"{self.family}: no rounds fit in allowance")

        if have_holdout:
            self.best_round_ = best_round
            self.holdout_loss_ = best_loss
            if best_round == 0:
                self.est_ = None  # prior-only model
            else:
                est.estimators_ = est.estimators_[:best_round]
                est.n_estimators = best_round
                self.est_ = est
        else:
            self.best_round_ = grown
            self.est_ = est

    def _predict(self, fm):
        if self.est_ is None:
            return np.tile(self.prior_, (fm.n_rows, 1))
        X = tree_matrix(fm)
        if self.problem.is_classification:
            return align_proba(
                self.est_.predict_proba(X), self.est_.classes_, self.problem.num_classes
            )
        return self.est_.predict(X)


class LinearLearner(BaseLearner):
    """L-BFGS logistic regression / ridge with L2 penalty 1e-4.

    Expects the linear-family preprocessed matrix (standardized, all
    categoricals one-hot), so the categorical block is empty.
    """

    family = "linear_model"

    def __init__(self, problem=None, seed: int = 0, l2: float = 1e-4, max_iter: int = 1000):
        super().__init__(problem=problem, seed=seed)
        self.l2 = l2
        self.max_iter = max_iter

    def _fit(self, fm, y, holdout, time_allowance):
        X = tree_matrix(fm)
        if self.problem.is_classification:
            # sklearn's C sits on the data term; 1/C = our penalty weight
            self.est_ = LogisticRegression(
                C=1.0 / self.l2, solver="lbfgs", max_iter=self.max_iter
            ).fit(X, y)
        else:
            self.est_ = Ridge(alpha=self.l2).fit(X, y)

    def _predict(self, fm):
        X = tree_matrix(fm)
        if self.problem.is_classification:
            return align_proba(
                self.est_.predict_proba(X), self.est_.classes_, self.problem.num_classes
            )
        return self.est_.predict(X)


class KNNLearner(BaseLearner):
    """Brute-force Euclidean k-nearest-neighbors on standardized features."""

    family = "k_nearest_neighbors"

    def __init__(self, problem=None, seed: int = 0, n_neighbors: int = 5):
        super().__init__(problem=problem, seed=seed)
        self.n_neighbors = n_neighbors

    def _fit(self, fm, y, holdout, time_allowance):
        X = tree_matrix(fm)
        k = min(self.n_neighbors, len(X))
        if self.problem.is_classification:
            self.est_ = KNeighborsClassifier(n_neighbors=k, algorithm="brute").fit(X, y)
        else:
            self.est_ = KNeighborsRegressor(n_neighbors=k, algorithm="brute").fit(X, y)

    def _predict(self, fm):
        X = tree_matrix(fm)
        if self.problem.is_classification:
            return align_proba(
                self.est_.predict_proba(X), self.est_.classes_, self.problem.num_classes
            )
        return self.est_.predict(X)
