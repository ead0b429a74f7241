"""Base-learner roster: registry, construction, and fit-time estimation."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Mapping

from .base import BaseLearner, align_proba
from .classical import (
    ExtraTreesLearner,
    GradientBoostingLearner,
    KNNLearner,
    LinearLearner,
    RandomForestLearner,
    tree_matrix,
)
from .net import TabularNetLearner, embedding_dim, numeric_embed_width

# Fixed roster order: cheap and reliable families first.
ROSTER = (
    "random_forest",
    "extra_trees",
    "gradient_boosting",
    "linear_model",
    "k_nearest_neighbors",
    "tabular_net",
)

REGISTRY = {
    "random_forest": RandomForestLearner,
    "extra_trees": ExtraTreesLearner,
    "gradient_boosting": GradientBoostingLearner,
    "linear_model": LinearLearner,
    "k_nearest_neighbors": KNNLearner,
    "tabular_net": TabularNetLearner,
}

# Which model-specific preprocessing each family consumes.
PREPROCESS_FAMILY = {
    "random_forest": "tree",
    "extra_trees": "tree",
    "gradient_boosting": "tree",
    "linear_model": "linear",
    "k_nearest_neighbors": "linear",
    "tabular_net": "neural",
}

# Fallback seconds-per-cell when a family has no fit history yet. Kept low
# on purpose: a first-touch family should be attempted, not pre-skipped.
DEFAULT_RATE = {
    "random_forest": 3e-6,
    "extra_trees": 3e-6,
    "gradient_boosting": 6e-6,
    "linear_model": 5e-7,
    "k_nearest_neighbors": 3e-7,
    "tabular_net": 4e-5,
}


@dataclass(frozen=True)
class LearnerSpec:
    family: str
    params: Mapping = field(default_factory=dict)

    def __post_init__(self):
        if self.family not in REGISTRY:
            raise ValueError(f"unknown learner family {self.family!r}")

    @property
    def priority(self) -> int:
        return ROSTER.index(self.family)


def make_learner(spec: LearnerSpec, problem, seed: int = 0) -> BaseLearner:
    return REGISTRY[spec.family](problem=problem, seed=seed, **dict(spec.params))


@dataclass(frozen=True)
class FitRecord:
    family: str
    rows: int
    cols: int
    seconds: float


def estimate_fit_seconds(spec: LearnerSpec, rows: int, cols: int, history) -> float:
    """Predicted seconds for one fit, extrapolating seconds ~ c * rows * cols.

    c comes from a least-squares fit through the origin over same-family
    history; without history, a fixed per-family rate.
    """
    x = float(max(rows, 1) * max(cols, 1))
    recs = [r for r in history if r.family == spec.family]
    if recs:
        num = sum(r.seconds * r.rows * r.cols for r in recs)
        den = sum(float(r.rows * r.cols) ** 2 for r in recs)
        c = num / den if den > 0 else DEFAULT_RATE[spec.family]
    else:
        c = DEFAULT_RATE[spec.family]
    return max(c * x, 1e-3)


__all__ = [
    "ROSTER",
    "REGISTRY",
    "PREPROCESS_FAMILY",
    "LearnerSpec",
    "FitRecord",
    "BaseLearner",
    "make_learner",
    "estimate_fit_seconds",
    "align_proba",
    "tree_matrix",
    "embedding_dim",
    "numeric_embed_width",
    "RandomForestLearner",
    "ExtraTreesLearner",
    "GradientBoostingLearner",
    "LinearLearner",
    "KNNLearner",
    "TabularNetLearner",
]
