"""Evaluation metrics, loss transforms, and cross-system comparison reports.

Classification metrics consume an (n, n_classes) probability matrix and
integer-coded targets; regression metrics consume 1-d value arrays.
"""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field

import numpy as np
from scipy import stats

from .errors import MetricDomainError, UndefinedMetricError

PROBA_CLAMP = 1e-15
RANK_DECIMALS = 5


@dataclass(frozen=True)
class Metric:
    name: str
    greater_is_better: bool
    needs_probabilities: bool
    problems: tuple  # problem kinds the metric applies to


_METRICS = {
    "auc": Metric("auc", True, True, ("binary",)),
    "gini": Metric("gini", True, True, ("binary",)),
    "log_loss": Metric("log_loss", False, True, ("binary", "multiclass")),
    "accuracy": Metric("accuracy", True, True, ("binary", "multiclass")),
    "mse": Metric("mse", False, False, ("regression",)),
    "mae": Metric("mae", False, False, ("regression",)),
    "rmsle": Metric("rmsle", False, False, ("regression",)),
    "r2": Metric("r2", True, False, ("regression",)),
}


def metric_names() -> list[str]:
    return sorted(_METRICS)


def get_metric(name: str) -> Metric:
    try:
        return _METRICS[name]
    except KeyError:
        raise UndefinedMetricError(
            f"unknown metric {name!r}; choose from {', '.join(metric_names())}"
        ) from None


def default_metric(problem_kind: str) -> str:
    return {"binary": "log_loss", "multiclass": "log_loss", "regression": "mse"}[
        problem_kind
    ]


def _as_2d(predictions) -> np.ndarray:
    p = np.asarray(predictions, dtype=np.float64)
    if p.ndim == 1:
        p = p[:, None]
    return p


def _binary_scores(predictions) -> np.ndarray:
    """Positive-class score column from (n,), (n,1) or (n,2) predictions."""
    p = _as_2d(predictions)
    if p.shape[1] > 2:
        raise UndefinedMetricError("auc is undefined for more than two classes")
    return p[:, -1]


def _auc(predictions, targets) -> float:
    y = np.asarray(targets)
    s = _binary_scores(predictions)
    pos = y == 1
    n_pos = int(pos.sum())
    n_neg = len(y) - n_pos
    if n_pos == 0 or n_neg == 0:
        raise UndefinedMetricError("auc needs both classes present in targets")
    ranks = stats.rankdata(s)  # average ranks on ties
    return float((ranks[pos].sum() - n_pos * (n_pos + 1) / 2.0) / (n_pos * n_neg))


def _log_loss(predictions, targets) -> float:
    p = _as_2d(predictions)
    y = np.asarray(targets, dtype=np.int64)
    if p.shape[1] == 1:  # single positive-class column
        p = np.hstack([1.0 - p, p])
    p = np.clip(p, PROBA_CLAMP, 1.0 - PROBA_CLAMP)
    return float(-np.mean(np.log(p[np.arange(len(y)), y])))


def _accuracy(predictions, targets) -> float:
    p = _as_2d(predictions)
    y = np.asarray(targets, dtype=np.int64)
    if p.shape[1] == 1:
        pred = (p[:, 0] >= 0.5).astype(np.int64)
    else:
        pred = p.argmax(axis=1)
    return float(np.mean(pred == y))


def _values(predictions) -> np.ndarray:
    p = np.asarray(predictions, dtype=np.float64)
    return p.reshape(-1) if p.ndim > 1 else p


def _mse(predictions, targets) -> float:
    d = _values(predictions) - np.asarray(targets, dtype=np.float64)
    return float(np.mean(d * d))


def _mae(predictions, targets) -> float:
    d = _values(predictions) - np.asarray(targets, dtype=np.float64)
    return float(np.mean(np.abs(d)))


def _rmsle(predictions, targets) -> float:
    p = _values(predictions)
    t = np.asarray(targets, dtype=np.float64)
    if (p < 0).any() or (t < 0).any():
        raise MetricDomainError("rmsle requires non-negative predictions and targets")
    d = np.log1p(p) - np.log1p(t)
    return float(np.sqrt(np.mean(d * d)))


def _r2(predictions, targets) -> float:
    p = _values(predictions)
    t = np.asarray(targets, dtype=np.float64)
    ss_tot = float(np.sum((t - t.mean()) ** 2))
    if ss_tot == 0.0:
        raise UndefinedMetricError("r2 is undefined for constant targets")
    ss_res = float(np.sum((t - p) ** 2))
    return 1.0 - ss_res / ss_tot


_SCORERS = {
    "auc": _auc,
    "gini": lambda p, t: 2.0 * _auc(p, t) - 1.0,
    "log_loss": _log_loss,
    "accuracy": _accuracy,
    "mse": _mse,
    "mae": _mae,
    "rmsle": _rmsle,
    "r2": _r2,
}


def score(name: str, predictions, targets) -> float:
    """Metric value in its native orientation."""
    get_metric(name)
    return _SCORERS[name](predictions, targets)


def loss(name: str, predictions, targets) -> float:
    """Lower-is-better view of the metric.

    Bounded higher-is-better metrics flip as 1 - score; everything else
    passes through raw.
    """
    m = get_metric(name)
    s = score(name, predictions, targets)
    if m.greater_is_better:
        return 1.0 - s
    return s


@dataclass(frozen=True)
class MetricWrapper:
    """How the training pipeline internalizes a requested metric.

    ``inner_metric`` is what selection and early stopping optimize;
    target/prediction transforms bridge between user space and model space.
    """

    requested: str
    inner_metric: str

    def transform_targets(self, y: np.ndarray) -> np.ndarray:
        if self.requested == "rmsle":
            y = np.asarray(y, dtype=np.float64)
            if (y < 0).any():
                raise MetricDomainError("rmsle requires non-negative targets")
            return np.log1p(y)
        return y

    def invert_predictions(self, p: np.ndarray) -> np.ndarray:
        if self.requested == "rmsle":
            return np.expm1(p)
        return p


def wrap_metric(name: str) -> MetricWrapper:
    get_metric(name)
    if name == "rmsle":
        return MetricWrapper(requested=name, inner_metric="mse")
    if name == "gini":
        return MetricWrapper(requested=name, inner_metric="auc")
    return MetricWrapper(requested=name, inner_metric=name)


def rescale_losses(losses) -> np.ndarray:
    """Map losses onto [0, 1] per dataset: 0 = best system, 1 = worst.

    Non-finite entries stay non-finite. All-equal finite losses map to 0.
    """
    arr = np.asarray(losses, dtype=np.float64)
    finite = np.isfinite(arr)
    if finite.sum() < 2:
        raise ValueError("rescale_losses needs at least 2 finite entries")
    lo = arr[finite].min()
    hi = arr[finite].max()
    out = np.full_like(arr, np.nan)
    if hi == lo:
        out[finite] = 0.0
    else:
        out[finite] = (arr[finite] - lo) / (hi - lo)
    return out


@dataclass
class SystemSummary:
    system: str
    wins: int = 0
    losses: int = 0
    ties: int = 0
    failures: int = 0
    champion: int = 0
    avg_rank: float = float("nan")
    avg_rescaled_loss: float = float("nan")


@dataclass
class EvalReport:
    """Cross-system comparison over a shared pool of datasets.

    Rank and win/tie/loss calls use losses rounded to 5 decimals; averages
    cover only datasets where every system produced a finite loss.
    """

    systems: list[str]
    datasets: list[str]
    losses: dict  # losses[system][dataset] -> float (nan = failure)
    reference: str
    summaries: list[SystemSummary] = field(default_factory=list)
    complete_datasets: list[str] = field(default_factory=list)

    def to_json(self, path) -> None:
        payload = {
            "reference": self.reference,
            "datasets": self.datasets,
            "complete_datasets": self.complete_datasets,
            "losses": {
                s: {d: self.losses[s][d] for d in self.datasets} for s in self.systems
            },
            "summaries": [vars(s) for s in self.summaries],
        }
        with open(path, "w", encoding="utf-8") as fh:
            json.dump(payload, fh, indent=2, allow_nan=True)
            fh.write("\n")

    def to_csv(self, path) -> None:
        with open(path, "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh)
            w.writerow(
                [
                    "system",
                    "wins",
                    "losses",
                    "ties",
                    "failures",
                    "champion",
                    "avg_rank",
                    "avg_rescaled_loss",
                ]
            )
            for s in self.summaries:
                w.writerow(
                    [
                        s.system,
                        s.wins,
                        s.losses,
                        s.ties,
                        s.failures,
                        s.champion,
                        f"{s.avg_rank:.6f}" if np.isfinite(s.avg_rank) else "",
                        f"{s.avg_rescaled_loss:.6f}"
                        if np.isfinite(s.avg_rescaled_loss)
                        else "",
                    ]
                )

    def format_table(self) -> str:
        header = f"{'system':<24}{'wins':>6}{'losses':>8}{'ties':>6}{'fail':>6}{'champ':>7}{'rank':>8}{'rescaled':>10}"
        lines = [header, "-" * len(header)]
        for s in self.summaries:
            rank = f"{s.avg_rank:.3f}" if np.isfinite(s.avg_rank) else "-"
            resc = f"{s.avg_rescaled_loss:.4f}" if np.isfinite(s.avg_rescaled_loss) else "-"
            lines.append(
                f"{s.system:<24}{s.wins:>6}{s.losses:>8}{s.ties:>6}{s.failures:>6}{s.champion:>7}{rank:>8}{resc:>10}"
            )
        return "\n".join(lines)


def build_report(results: dict, reference: str | None = None) -> EvalReport:
    """Summarize per-dataset losses across systems.

    ``results[system][dataset]`` is a loss (lower better); None/nan marks a
    failure. Averages span only datasets complete for all systems.
    """
    systems = list(results)
    if not systems:
        raise ValueError("no systems to compare")
    if reference is None:
        reference = systems[0]
    if reference not in results:
        raise ValueError(f"reference system {reference!r} not in results")

    datasets: list[str] = []
    for s in systems:
        for d in results[s]:
            if d not in datasets:
                datasets.append(d)

    table = {
        s: {
            d: float(results[s].get(d)) if results[s].get(d) is not None else float("nan")
            for d in datasets
        }
        for s in systems
    }

    complete = [
        d for d in datasets if all(np.isfinite(table[s][d]) for s in systems)
    ]

    summaries = {s: SystemSummary(system=s) for s in systems}
    for s in systems:
        summaries[s].failures = sum(
            1 for d in datasets if not np.isfinite(table[s][d])
        )

    # Champions and pairwise win/loss/tie calls count every dataset where the
    # compared entries are finite; only the averaged columns below are
    # restricted to datasets complete for all systems.
    for d in datasets:
        rounded = {s: round(table[s][d], RANK_DECIMALS) for s in systems}
        finite = [s for s in systems if np.isfinite(rounded[s])]
        if finite:
            best = min(rounded[s] for s in finite)
            for s in finite:
                if rounded[s] == best:
                    summaries[s].champion += 1
        ref_val = rounded[reference]
        if not np.isfinite(ref_val):
            continue
        for s in systems:
            if s == reference or not np.isfinite(rounded[s]):
                continue
            if rounded[s] < ref_val:
                summaries[s].wins += 1
            elif rounded[s] > ref_val:
                summaries[s].losses += 1
            else:
                summaries[s].ties += 1

    ranks: dict = {s: [] for s in systems}
    rescaled: dict = {s: [] for s in systems}
    for d in complete:
        raw = np.array([table[s][d] for s in systems])
        rounded_arr = np.round(raw, RANK_DECIMALS)
        r = stats.rankdata(rounded_arr, method="average")
        resc = rescale_losses(raw) if len(systems) >= 2 else np.zeros(1)
        for i, s in enumerate(systems):
            ranks[s].append(r[i])
            rescaled[s].append(resc[i])

    for s in systems:
        if ranks[s]:
            summaries[s].avg_rank = float(np.mean(ranks[s]))
            summaries[s].avg_rescaled_loss = float(np.mean(rescaled[s]))

    return EvalReport(
        systems=systems,
        datasets=datasets,
        losses=table,
        reference=reference,
        summaries=[summaries[s] for s in systems],
        complete_datasets=complete,
    )
