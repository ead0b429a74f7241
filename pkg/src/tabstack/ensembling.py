"""Fold plans, repeated k-fold bagged model groups, stack features, and
greedy ensemble selection.

The OOF discipline lives here: a row's out-of-fold prediction always comes
from a model whose training slice excluded that row, and higher stack layers
train only on those OOF matrices.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np
from scipy.sparse import csr_matrix
from scipy.sparse.csgraph import maximum_flow

from .errors import FoldCountError, ModelUnavailableError, SchemaMismatchError
from .learners import LearnerSpec, make_learner
from .metrics import loss as metric_loss
from .preprocess import FeatureMatrix

logger = logging.getLogger(__name__)

DEFAULT_FOLDS = 5
DEFAULT_SELECTION_ITERATIONS = 100


@dataclass(frozen=True)
class FoldPlan:
    """Per-repeat assignment of each row to exactly one fold."""

    k: int
    n: int
    seed: int
    assignments: np.ndarray  # (n, rows) int

    @property
    def rows(self) -> int:
        return self.assignments.shape[1]

    def fold_rows(self, repeat: int, fold: int) -> np.ndarray:
        return np.flatnonzero(self.assignments[repeat] == fold)

    def train_rows(self, repeat: int, fold: int) -> np.ndarray:
        return np.flatnonzero(self.assignments[repeat] != fold)


def _stratified_assignment(y: np.ndarray, k: int, rng) -> np.ndarray:
    """Label-stratified folds by quota rounding.

    Fold sizes are fixed as balanced as possible, then each (class, fold)
    count is the exact proportional share count_c * size_f / n rounded up or
    down, with row and column sums preserved (an integral max-flow picks
    which cells round up; one always exists because the fractional quota
    matrix is itself a feasible flow). Every per-fold class proportion
    therefore lands strictly within 1/fold_size of the global proportion.
    Simpler dealing schemes miss that bound when a class's rounded-up extras
    pile onto folds that are already oversized.
    """
    n = len(y)
    _, inverse = np.unique(y, return_inverse=True)
    counts = np.bincount(inverse)
    n_classes = len(counts)

    q, r = divmod(n, k)
    sizes = np.full(k, q, dtype=np.int64)
    sizes[rng.permutation(k)[:r]] += 1

    # integer arithmetic keeps the floor exact
    shares = counts[:, None] * sizes[None, :]
    base = shares // n
    fractional = (shares % n) != 0
    surplus_class = counts - base.sum(axis=1)
    surplus_fold = sizes - base.sum(axis=0)
    per_class = base
    if surplus_class.sum() > 0:
        per_class = base + _route_surplus(surplus_class, surplus_fold, fractional)

    assign = np.empty(n, dtype=np.int64)
    for c in range(n_classes):
        idx = np.flatnonzero(inverse == c)
        idx = idx[rng.permutation(len(idx))]
        assign[idx] = np.repeat(np.arange(k), per_class[c])
    return assign


def _route_surplus(
    surplus_class: np.ndarray, surplus_fold: np.ndarray, fractional: np.ndarray
) -> np.ndarray:
    """Choose which fractional quota cells round up, one unit per cell,
    meeting the per-class and per-fold surplus totals exactly."""
    n_classes, k = fractional.shape
    total = int(surplus_class.sum())
    src, snk = 0, n_classes + k + 1
    cap = np.zeros((snk + 1, snk + 1), dtype=np.int32)
    cap[src, 1 : 1 + n_classes] = surplus_class
    cap[1 : 1 + n_classes, 1 + n_classes : 1 + n_classes + k] = fractional
    cap[1 + n_classes : 1 + n_classes + k, snk] = surplus_fold
    result = maximum_flow(csr_matrix(cap), src, snk)
    if result.flow_value != total:
        raise AssertionError("quota rounding flow must saturate")
    flow = result.flow.toarray()[1 : 1 + n_classes, 1 + n_classes : 1 + n_classes + k]
    return np.maximum(flow, 0).astype(np.int64)


def _quantile_assignment(y: np.ndarray, k: int, rng) -> np.ndarray:
    """Regression folds: sort by target, spread each consecutive block of k
    rows across all folds in random order."""
    n = len(y)
    order = np.lexsort((rng.permutation(n), y))
    assign = np.empty(n, dtype=np.int64)
    for start in range(0, n, k):
        block = order[start : start + k]
        assign[block] = rng.permutation(k)[: len(block)]
    return assign


def make_fold_plan(labels, k: int, n: int, seed: int, stratify: str = "class") -> FoldPlan:
    """Build n independent k-fold partitions.

    stratify "class": per-fold class proportions stay within 1/fold_size of
    global. stratify "quantile": target-sorted block dealing for regression.
    """
    y = np.asarray(labels)
    if k < 2:
        raise FoldCountError(f"fold count must be >= 2, got {k}")
    if len(y) < k:
        raise FoldCountError(f"{len(y)} rows cannot fill {k} folds")
    if n < 1:
        raise FoldCountError(f"repeat count must be >= 1, got {n}")
    if stratify not in ("class", "quantile"):
        raise ValueError(f"unknown stratify mode {stratify!r}")

    assignments = np.empty((n, len(y)), dtype=np.int64)
    for i in range(n):
        rng = np.random.default_rng([seed, i])
        if stratify == "class":
            assignments[i] = _stratified_assignment(y, k, rng)
        else:
            assignments[i] = _quantile_assignment(y.astype(np.float64), k, rng)
    return FoldPlan(k=k, n=n, seed=seed, assignments=assignments)


@dataclass
class BaggedModelGroup:
    """All fold models of one family in one layer, plus per-repeat OOF."""

    family: str
    layer: int
    out_dim: int
    models: list = field(default_factory=list)  # [repeat][fold] -> learner | None
    oof_repeats: list = field(default_factory=list)  # [repeat] -> (rows, out_dim)
    coverage: list = field(default_factory=list)  # [repeat] -> (rows,) bool
    row_indices: np.ndarray | None = None  # rows the OOF covers (None = all)

    @property
    def n_repeats(self) -> int:
        return len(self.oof_repeats)

    def add_repeat(self, fold_models: list, oof: np.ndarray, covered: np.ndarray) -> None:
        self.models.append(fold_models)
        self.oof_repeats.append(oof)
        self.coverage.append(covered)

    def oof(self) -> np.ndarray:
        """Average OOF over repeats; rows never covered get the mean row."""
        if not self.oof_repeats:
            raise ModelUnavailableError(f"{self.family}: no completed repeats")
        stack = np.stack(self.oof_repeats)  # (n_rep, rows, out_dim)
        cov = np.stack(self.coverage)  # (n_rep, rows)
        counts = cov.sum(axis=0)  # per-row covered repeats
        summed = (stack * cov[:, :, None]).sum(axis=0)
        out = np.empty_like(summed)
        have = counts > 0
        out[have] = summed[have] / counts[have, None]
        if (~have).any():
            fill = out[have].mean(axis=0) if have.any() else np.full(
                self.out_dim, 1.0 / max(self.out_dim, 1)
            )
            out[~have] = fill
        return out

    def predict(self, features: FeatureMatrix) -> np.ndarray:
        preds = [
            m.predict(features)
            for fold_models in self.models
            for m in fold_models
            if m is not None
        ]
        if not preds:
            raise ModelUnavailableError(f"{self.family}: group holds no models")
        return np.mean(preds, axis=0)


def group_predict(group: BaggedModelGroup, features: FeatureMatrix) -> np.ndarray:
    return group.predict(features)


def fit_fold(
    spec: LearnerSpec,
    problem,
    features: FeatureMatrix,
    targets: np.ndarray,
    train_idx: np.ndarray,
    holdout_idx: np.ndarray,
    seed: int = 0,
    time_allowance: float = None,
):
    """Train one fold model and return (model, holdout predictions)."""
    model = make_learner(spec, problem, seed=seed)
    fm_train = features.take(train_idx)
    fm_hold = features.take(holdout_idx)
    y = np.asarray(targets)
    model.fit(
        fm_train,
        y[train_idx],
        holdout=(fm_hold, y[holdout_idx]),
        time_allowance=time_allowance,
    )
    return model, model.predict(fm_hold)


def fit_bagged_group(
    spec: LearnerSpec,
    problem,
    features: FeatureMatrix,
    targets,
    plan: FoldPlan,
    time_allowance: float = None,
    base_seed: int = 0,
    layer: int = 1,
    on_fold=None,
) -> BaggedModelGroup:
    """Train all n x k fold models of one family.

    Each fold model early-stops on its own OOF fold. At most one fold may
    fail per repeat; a second failure fails the whole group. ``on_fold``
    receives (repeat, fold, train_idx, holdout_idx) before each fit, for
    instrumentation.
    """
    if plan.rows != features.n_rows:
        raise SchemaMismatchError("fold plan does not cover the feature rows")
    y = np.asarray(targets)
    out_dim = problem.num_classes if problem.is_classification else 1
    group = BaggedModelGroup(
        family=spec.family, layer=layer, out_dim=out_dim, row_indices=None
    )
    for i in range(plan.n):
        fold_models: list = []
        oof = np.zeros((plan.rows, out_dim))
        covered = np.zeros(plan.rows, dtype=bool)
        failures = 0
        for j in range(plan.k):
            train_idx = plan.train_rows(i, j)
            hold_idx = plan.fold_rows(i, j)
            if on_fold is not None:
                on_fold(i, j, train_idx, hold_idx)
            try:
                model, preds = fit_fold(
                    spec,
                    problem,
                    features,
                    y,
                    train_idx,
                    hold_idx,
                    seed=base_seed + i * plan.k + j,
                    time_allowance=time_allowance,
                )
            except ModelUnavailableError:
                failures += 1
                if failures > 1:
                    raise ModelUnavailableError(
                        f"{spec.family}: {failures} fold failures in repeat {i}"
                    ) from None
                logger.warning(
                    "%s repeat %d fold %d failed; continuing", spec.family, i, j
                )
                fold_models.append(None)
                continue
            fold_models.append(model)
            oof[hold_idx] = preds
            covered[hold_idx] = True
        group.add_repeat(fold_models, oof, covered)
    return group


def build_stack_features(
    base_features: FeatureMatrix,
    groups,
    mode: str = "train_oof",
    predictions=None,
) -> FeatureMatrix:
    """Concatenate base features with one prediction block per group.

    train_oof mode uses each group's stored OOF matrix; inference mode takes
    precomputed ``predictions`` (one matrix per group, computed by the caller
    from that group's own preprocessed view).
    """
    if mode not in ("train_oof", "inference"):
        raise ValueError(f"unknown stack mode {mode!r}")
    groups = list(groups)
    if mode == "inference":
        if predictions is None or len(predictions) != len(groups):
            raise ValueError("inference mode needs one prediction matrix per group")
        blocks = [np.asarray(p, dtype=np.float64) for p in predictions]
    else:
        blocks = [g.oof() for g in groups]

    out = base_features
    for g, block in zip(groups, blocks):
        if block.shape[0] != base_features.n_rows:
            raise SchemaMismatchError(
                f"stack block for {g.family} has {block.shape[0]} rows, "
                f"base has {base_features.n_rows}"
            )
        names = [f"l{g.layer}:{g.family}:p{c}" for c in range(block.shape[1])]
        prov = {
            name: {"source": g.family, "transform": "stack_prediction", "layer": g.layer}
            for name in names
        }
        out = out.with_numeric_appended(names, block, prov)
    return out


@dataclass
class WeightedEnsemble:
    """Greedy-selection output: fractional weights over candidate groups."""

    weights: np.ndarray
    loss: float
    steps: int
    counts: np.ndarray

    def to_dict(self) -> dict:
        return {
            "weights": self.weights.tolist(),
            "loss": self.loss,
            "steps": self.steps,
            "counts": self.counts.tolist(),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "WeightedEnsemble":
        return cls(
            weights=np.asarray(d["weights"], dtype=np.float64),
            loss=float(d["loss"]),
            steps=int(d["steps"]),
            counts=np.asarray(d["counts"], dtype=np.int64),
        )


def ensemble_selection(
    oof_predictions,
    targets,
    metric: str,
    iterations: int = DEFAULT_SELECTION_ITERATIONS,
) -> WeightedEnsemble:
    """Greedy forward selection with replacement over candidate groups.

    Each step adds the candidate minimizing the loss of the running uniform
    average; ties go to the lowest index. Selection stops early once the
    best candidate strictly worsens the current loss, which keeps the
    running-loss trace non-increasing. Weights are counts / steps taken.
    """
    preds = [np.asarray(p, dtype=np.float64) for p in oof_predictions]
    if not preds:
        raise ValueError("ensemble selection needs at least one group")
    if iterations < 1:
        raise ValueError("iterations must be >= 1")
    counts = np.zeros(len(preds), dtype=np.int64)
    running = np.zeros_like(preds[0])
    current_loss = np.inf
    steps = 0
    for _ in range(iterations):
        best_g = -1
        best_loss = np.inf
        for g, p in enumerate(preds):
            cand = (running + p) / (steps + 1)
            cand_loss = metric_loss(metric, cand, targets)
            if cand_loss < best_loss:
                best_loss = cand_loss
                best_g = g
        if steps > 0 and best_loss > current_loss:
            break
        counts[best_g] += 1
        running = running + preds[best_g]
        current_loss = best_loss
        steps += 1
    return WeightedEnsemble(
        weights=counts / steps, loss=float(current_loss), steps=steps, counts=counts
    )
