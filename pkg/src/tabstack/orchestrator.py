"""Budgeted end-to-end training: per-layer time slices, cost-estimate
skipping, adaptive bagging repeats, immediate checkpointing, resume, and
ablation switches.

The run directory is the artifact: metadata.json, preprocess/*.json,
layer{l}/{family}/r{i}_f{j}.model, oof/layer{l}_{family}.bin, ensemble.json,
checkpoint.json. Every decision the clock influences (skips, repeat counts,
layer closes) is recorded in the checkpoint and replayed on resume, so a
resumed run reproduces the uninterrupted artifact exactly when the budget
is ample.
"""

from __future__ import annotations

import logging
import math
import os
import time
from dataclasses import dataclass, field, asdict

import numpy as np

from .ensembling import (
    BaggedModelGroup,
    WeightedEnsemble,
    build_stack_features,
    ensemble_selection,
    make_fold_plan,
)
from .errors import (
    BudgetTooSmallError,
    CorruptCheckpointError,
    DataError,
    LabelNotFoundError,
    ModelUnavailableError,
    UndefinedMetricError,
)
from .learners import (
    PREPROCESS_FAMILY,
    ROSTER,
    BaseLearner,
    FitRecord,
    LearnerSpec,
    estimate_fit_seconds,
    make_learner,
)
from .metrics import (
    default_metric,
    get_metric,
    loss as metric_loss,
    score as metric_score,
    wrap_metric,
)
from .persist import (
    Checkpoint,
    CheckpointEntry,
    atomic_write_json,
    derive_seed,
    load_oof,
    read_json,
    save_oof,
    sha256_file,
)
from .preprocess import (
    ModelAgnosticPreprocessor,
    ModelSpecificPreprocessor,
)
from .schema import TabularDataset, infer_problem_type, load_csv, parse_number

logger = logging.getLogger(__name__)

METADATA_NAME = "metadata.json"
ENSEMBLE_NAME = "ensemble.json"
DEFAULT_MAX_REPEATS = 20


@dataclass
class StackPlan:
    """Everything fit() needs besides the data: budget, shape, ablations."""

    time_budget: float = 3600.0
    layers: int = 2
    folds: int = 5
    max_repeats: int = DEFAULT_MAX_REPEATS
    metric: str = None
    roster: tuple = ROSTER
    seed: int = 0
    no_repeat: bool = False
    no_multistack: bool = False
    no_bag: bool = False
    no_network: bool = False
    selection_iterations: int = 100
    holdout_fraction: float = 0.2
    learner_params: dict = field(default_factory=dict)  # family -> ctor overrides

    def validate(self) -> None:
        if self.time_budget <= 0:
            raise ValueError("time_budget must be positive")
        if self.layers < 1:
            raise ValueError("layers must be >= 1")
        if self.folds < 2:
            raise ValueError("folds must be >= 2")
        if self.max_repeats < 1:
            raise ValueError("max_repeats must be >= 1")
        if not 0.0 < self.holdout_fraction < 1.0:
            raise ValueError("holdout_fraction must be in (0, 1)")
        for fam in self.roster:
            if fam not in ROSTER:
                raise ValueError(f"unknown roster family {fam!r}")
        if self.metric is not None:
            get_metric(self.metric)

    def effective_layers(self) -> int:
        return 1 if (self.no_multistack or self.no_bag) else self.layers

    def effective_roster(self) -> tuple:
        if self.no_network:
            return tuple(f for f in self.roster if f != "tabular_net")
        return tuple(self.roster)

    def effective_max_repeats(self) -> int:
        return 1 if (self.no_repeat or self.no_bag) else self.max_repeats

    def layer_budget(self) -> float:
        return self.time_budget / self.effective_layers()

    def to_dict(self) -> dict:
        d = asdict(self)
        d["roster"] = list(self.roster)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "StackPlan":
        d = dict(d)
        d["roster"] = tuple(d.get("roster", ROSTER))
        return cls(**d)


@dataclass
class PredictionResult:
    problem_kind: str
    classes: list  # label vocabulary (classification), [] for regression
    probabilities: np.ndarray = None  # (n, C)
    labels: list = None  # predicted label strings
    values: np.ndarray = None  # (n,) regression predictions

    @property
    def n_rows(self) -> int:
        if self.values is not None:
            return len(self.values)
        return len(self.probabilities)


def _prepare_targets(train: TabularDataset):
    """Problem type, class vocabulary, and numeric target vector."""
    col = train.label_column()
    problem = infer_problem_type(col.values)
    if problem.is_classification:
        classes = sorted(set(col.values))
        index = {c: i for i, c in enumerate(classes)}
        y = np.array([index[v] for v in col.values], dtype=np.int64)
        return problem, classes, y
    y = np.array([parse_number(v) for v in col.values], dtype=np.float64)
    return problem, [], y


def _targets_from_labels(values, classes) -> np.ndarray:
    index = {c: i for i, c in enumerate(classes)}
    out = np.empty(len(values), dtype=np.int64)
    for i, v in enumerate(values):
        if v is None or v not in index:
            raise DataError(f"label value {v!r} not in training classes")
        out[i] = index[v]
    return out


class PredictorBundle:
    """A completed run: preprocessors, fold models, weights. Immutable."""

    def __init__(
        self,
        run_dir,
        metadata: dict,
        agnostic: ModelAgnosticPreprocessor,
        ms_pre: dict,  # (layer, pfamily) -> ModelSpecificPreprocessor
        groups: dict,  # (layer, family) -> BaggedModelGroup
        layer_families: dict,  # layer -> ordered family list
        final_layer: int,
        ensemble: WeightedEnsemble,
        leaderboard: list,
    ):
        self.run_dir = run_dir
        self.metadata = metadata
        self.agnostic = agnostic
        self.ms_pre = ms_pre
        self.groups = groups
        self.layer_families = layer_families
        self.final_layer = final_layer
        self.ensemble = ensemble
        self.leaderboard = leaderboard
        self.problem_kind = metadata["problem"]["kind"]
        self.classes = metadata["classes"]
        self.metric_name = metadata["metric"]
        self.wrapper = wrap_metric(self.metric_name)

    def _layer_predictions(self, test: TabularDataset):
        """Per-family raw predictions at the final layer."""
        stack = self.agnostic.transform(test)
        final_preds = None
        for layer in range(1, self.final_layer + 1):
            fams = self.layer_families[layer]
            needed = {PREPROCESS_FAMILY[f] for f in fams}
            mats = {
                p: self.ms_pre[(layer, p)].transform(stack) for p in sorted(needed)
            }
            preds = [
                self.groups[(layer, f)].predict(mats[PREPROCESS_FAMILY[f]])
                for f in fams
            ]
            if layer == self.final_layer:
                final_preds = preds
            else:
                stack = build_stack_features(
                    stack,
                    [self.groups[(layer, f)] for f in fams],
                    mode="inference",
                    predictions=preds,
                )
        return final_preds

    def predict(self, test: TabularDataset) -> PredictionResult:
        fams = self.layer_families[self.final_layer]
        preds = self._layer_predictions(test)
        w = self.ensemble.weights
        combined = sum(w[i] * preds[i] for i in range(len(fams)))
        if self.problem_kind == "regression":
            values = self.wrapper.invert_predictions(combined[:, 0])
            return PredictionResult(
                problem_kind=self.problem_kind, classes=[], values=values
            )
        labels = [self.classes[i] for i in combined.argmax(axis=1)]
        return PredictionResult(
            problem_kind=self.problem_kind,
            classes=list(self.classes),
            probabilities=combined,
            labels=labels,
        )

    def evaluate(self, test: TabularDataset, metric: str = None) -> dict:
        """Score labeled data; defaults to the training metric."""
        name = metric or self.metric_name
        m = get_metric(name)
        if self.problem_kind not in m.problems:
            raise UndefinedMetricError(
                f"metric {name!r} undefined for {self.problem_kind} problems"
            )
        if name != self.metric_name:
            logger.warning(
                "evaluating with %s; model was trained for %s", name, self.metric_name
            )
        result = self.predict(test)
        col = test.column(self.metadata["label"])
        if self.problem_kind == "regression":
            targets = np.array([parse_number(v) for v in col.values], dtype=np.float64)
            preds = result.values
        else:
            targets = _targets_from_labels(col.values, self.classes)
            preds = result.probabilities
        return {
            "metric": name,
            "score": metric_score(name, preds, targets),
            "loss": metric_loss(name, preds, targets),
        }


class _Hooks:
    """Optional instrumentation; every attribute may be None."""

    def __init__(self, fold_callback=None):
        self.fold_callback = fold_callback


class _Runner:
    """One fit/resume execution over a run directory."""

    def __init__(
        self,
        train: TabularDataset,
        plan: StackPlan,
        run_dir,
        ckpt: Checkpoint,
        metadata: dict,
        agnostic: ModelAgnosticPreprocessor,
        hooks: _Hooks,
    ):
        self.train = train
        self.plan = plan
        self.run_dir = run_dir
        self.ckpt = ckpt
        self.metadata = metadata
        self.agnostic = agnostic
        self.hooks = hooks

        self.problem, self.classes, self.y_raw = _prepare_targets(train)
        self.metric_name = metadata["metric"]
        self.wrapper = wrap_metric(self.metric_name)
        self.y = (
            self.y_raw
            if self.problem.is_classification
            else self.wrapper.transform_targets(self.y_raw)
        )
        self.out_dim = self.problem.num_classes if self.problem.is_classification else 1

        self.base_features = self.agnostic.transform(train)
        self.history = [
            FitRecord(e.family, e.rows, e.cols, e.seconds) for e in ckpt.entries
        ]
        self.prior_elapsed = ckpt.elapsed
        self.t_anchor = time.monotonic()

        self.ms_pre: dict = {}
        self.groups: dict = {}
        self.layer_families: dict = {}
        self.nobag_split = None  # (train_idx, hold_idx) when plan.no_bag
        self._plans: dict = {}  # (layer, repeat) -> FoldPlan
        self._mats: dict = {}  # layer -> {pfamily: FeatureMatrix}

    # -- clocks ---------------------------------------------------------------

    def elapsed(self) -> float:
        return self.prior_elapsed + (time.monotonic() - self.t_anchor)

    def _remaining(self, layer: int) -> float:
        opened = self.ckpt.find_decision("layer_opened", layer=layer)
        return self.plan.layer_budget() - (self.elapsed() - opened["elapsed_at"])

    def _save_ckpt(self) -> None:
        self.ckpt.elapsed = self.elapsed()
        self.ckpt.save(self.run_dir)

    # -- fold plumbing ----------------------------------------------------------

    def _fold_plan_rows(self, layer: int, repeat: int, fold: int):
        if self.plan.no_bag:
            if self.nobag_split is None:
                k = max(2, round(1.0 / self.plan.holdout_fraction))
                plan = make_fold_plan(
                    self.y,
                    k=k,
                    n=1,
                    seed=derive_seed(self.plan.seed, "holdout"),
                    stratify="class" if self.problem.is_classification else "quantile",
                )
                self.nobag_split = (plan.train_rows(0, 0), plan.fold_rows(0, 0))
            return self.nobag_split
        key = (layer, repeat)
        if key not in self._plans:
            self._plans[key] = make_fold_plan(
                self.y,
                k=self.plan.folds,
                n=1,
                seed=derive_seed(self.plan.seed, "fold", layer, repeat),
                stratify="class" if self.problem.is_classification else "quantile",
            )
        p = self._plans[key]
        return p.train_rows(0, fold), p.fold_rows(0, fold)

    def _folds_per_repeat(self) -> int:
        return 1 if self.plan.no_bag else self.plan.folds

    def _spec(self, family: str) -> LearnerSpec:
        return LearnerSpec(family, self.plan.learner_params.get(family, {}))

    def _needed_pfamilies(self):
        return sorted({PREPROCESS_FAMILY[f] for f in self.plan.effective_roster()})

    def _layer_matrices(self, layer: int, stack_fm) -> dict:
        if layer not in self._mats:
            self._mats[layer] = {
                pfam: self._ms_preprocessor(layer, pfam, stack_fm).transform(stack_fm)
                for pfam in self._needed_pfamilies()
            }
        return self._mats[layer]

    def _ms_preprocessor(self, layer: int, pfam: str, stack_fm):
        if (layer, pfam) in self.ms_pre:
            return self.ms_pre[(layer, pfam)]
        path = os.path.join(self.run_dir, "preprocess", f"layer{layer}_{pfam}.json")
        if os.path.exists(path):
            pre = ModelSpecificPreprocessor.from_config(read_json(path))
        else:
            pre = ModelSpecificPreprocessor(pfam).fit(stack_fm)
            atomic_write_json(path, pre.to_config())
        self.ms_pre[(layer, pfam)] = pre
        return pre

    # -- single fold ------------------------------------------------------------

    def _ensure_fold(self, layer, family, repeat, fold, matrix, allowance):
        """Load the fold model if checkpointed, else fit and checkpoint it.

        Returns (model, holdout_predictions) or (None, None) on failure.
        """
        train_idx, hold_idx = self._fold_plan_rows(layer, repeat, fold)
        rel = os.path.join(f"layer{layer}", family, f"r{repeat}_f{fold}.model")
        full = os.path.join(self.run_dir, rel)
        if self.ckpt.has(layer, family, repeat, fold):
            model = BaseLearner.load(full)
            return model, model.predict(matrix.take(hold_idx))

        if self.hooks.fold_callback is not None:
            self.hooks.fold_callback(
                {
                    "layer": layer,
                    "family": family,
                    "repeat": repeat,
                    "fold": fold,
                    "train_idx": train_idx,
                    "holdout_idx": hold_idx,
                }
            )
        seed = derive_seed(self.plan.seed, layer, family, repeat, fold)
        model = make_learner(self._spec(family), self.problem, seed=seed)
        t0 = time.monotonic()
        try:
            model.fit(
                matrix.take(train_idx),
                self.y[train_idx],
                holdout=(matrix.take(hold_idx), self.y[hold_idx]),
                time_allowance=allowance,
            )
        except ModelUnavailableError as exc:
            self.ckpt.record(
                {
                    "event": "fold_failed",
                    "layer": layer,
                    "family": family,
                    "repeat": repeat,
                    "fold": fold,
                    "reason": str(exc),
                }
            )
            self._save_ckpt()
            logger.warning("fold failed: %s", exc)
            return None, None
        seconds = time.monotonic() - t0
        os.makedirs(os.path.dirname(full), exist_ok=True)
        model.save(full)
        self.ckpt.entries.append(
            CheckpointEntry(
                layer=layer,
                family=family,
                repeat=repeat,
                fold=fold,
                path=rel,
                sha256=sha256_file(full),
                seconds=seconds,
                seed=seed,
                rows=len(train_idx),
                cols=matrix.width,
            )
        )
        self._save_ckpt()
        self.history.append(
            FitRecord(family, len(train_idx), matrix.width, seconds)
        )
        return model, model.predict(matrix.take(hold_idx))

    # -- repeats ------------------------------------------------------------------

    def _run_repeat(self, layer, family, repeat, matrix):
        """All folds of one (family, repeat). Returns (status, payload).

        status: "ok" (payload = (models, oof, covered)), "failed", or
        "out_of_time" (payload = partial (models, oof, covered, folds_done)).
        """
        k = self._folds_per_repeat()
        # In no-bag mode "OOF" rows are just the holdout slice.
        oof_rows = (
            len(self._fold_plan_rows(layer, repeat, 0)[1])
            if self.plan.no_bag
            else matrix.n_rows
        )
        models: list = []
        oof = np.zeros((oof_rows, self.out_dim))
        covered = np.zeros(oof_rows, dtype=bool)
        failures = 0
        folds_done: list = []
        for fold in range(k):
            already = self.ckpt.has(layer, family, repeat, fold)
            remaining = self._remaining(layer)
            if not already and remaining <= 0:
                return "out_of_time", (models, oof, covered, folds_done)
            model, preds = self._ensure_fold(
                layer, family, repeat, fold, matrix, allowance=remaining
            )
            if model is None:
                failures += 1
                models.append(None)
                if failures > 1:
                    return "failed", None
                continue
            models.append(model)
            if self.plan.no_bag:
                oof[:] = preds
                covered[:] = True
            else:
                _, hold_idx = self._fold_plan_rows(layer, repeat, fold)
                oof[hold_idx] = preds
                covered[hold_idx] = True
            folds_done.append(fold)
        return "ok", (models, oof, covered, folds_done)

    # -- one layer ----------------------------------------------------------------

    def _run_layer(self, layer: int, stack_fm):
        """Execute (or re-enter) one stack layer; returns {family: group}."""
        plan = self.plan
        roster = plan.effective_roster()
        k = self._folds_per_repeat()

        closed = self.ckpt.find_decision("layer_closed", layer=layer)
        if closed is not None:
            # preprocessors still need loading for later inference
            for pfam in self._needed_pfamilies():
                self._ms_preprocessor(layer, pfam, stack_fm)
            return self._load_closed_layer(layer, closed)

        if self.ckpt.find_decision("layer_opened", layer=layer) is None:
            self.ckpt.record(
                {
                    "event": "layer_opened",
                    "layer": layer,
                    "budget": plan.layer_budget(),
                    "elapsed_at": self.elapsed(),
                }
            )
            self._save_ckpt()

        matrices = self._layer_matrices(layer, stack_fm)

        layer_groups: dict = {}
        partial: dict = {}  # family -> (models, oof, covered, folds_done)
        out_of_time = False

        def gate_estimate(family):
            n_rows = stack_fm.n_rows
            fold_rows = (
                int(n_rows * (1 - plan.holdout_fraction))
                if plan.no_bag
                else int(n_rows * (k - 1) / k)
            )
            width = matrices[PREPROCESS_FAMILY[family]].width
            return k * estimate_fit_seconds(
                self._spec(family), fold_rows, width, self.history
            )

        # Layer-1 guarantee: when every family's estimate exceeds the budget
        # and nothing is trained yet, attempt the cheapest anyway.
        forced = None
        if layer == 1 and not self.ckpt.entries:
            rem = self._remaining(layer)
            estimates = {f: gate_estimate(f) for f in roster}
            if all(est > rem for est in estimates.values()):
                forced = min(estimates, key=lambda f: (estimates[f], roster.index(f)))
                if self.ckpt.find_decision("forced_attempt", layer=layer) is None:
                    self.ckpt.record(
                        {
                            "event": "forced_attempt",
                            "layer": layer,
                            "family": forced,
                            "estimate": estimates[forced],
                        }
                    )
                    self._save_ckpt()

        # Phase 1: repeat 1 for each family in roster order.
        for family in roster:
            if out_of_time:
                break
            if self.ckpt.find_decision(
                "family_skipped", layer=layer, family=family
            ) or self.ckpt.find_decision("family_failed", layer=layer, family=family):
                continue
            started = bool(self.ckpt.entries_for(layer, family))
            if not started and family != forced:
                est = gate_estimate(family)
                if est > self._remaining(layer):
                    self.ckpt.record(
                        {
                            "event": "family_skipped",
                            "layer": layer,
                            "family": family,
                            "estimate": est,
                        }
                    )
                    self._save_ckpt()
                    continue
            matrix = matrices[PREPROCESS_FAMILY[family]]
            status, payload = self._run_repeat(layer, family, 1, matrix)
            if status == "failed":
                self.ckpt.record(
                    {"event": "family_failed", "layer": layer, "family": family}
                )
                self._save_ckpt()
                continue
            models, oof, covered, folds_done = payload
            if status == "out_of_time":
                if folds_done:
                    partial[family] = payload
                out_of_time = True
                break
            group = BaggedModelGroup(
                family=family, layer=layer, out_dim=self.out_dim,
                row_indices=None if not plan.no_bag else self.nobag_split[1],
            )
            group.add_repeat(models, oof, covered)
            layer_groups[family] = group

        # Phase 2: adaptive extra repeats, round-robin across families.
        if not out_of_time and layer_groups and not plan.no_bag:
            planned = self.ckpt.find_decision("repeats_planned", layer=layer)
            if planned is None:
                cost1 = sum(
                    e.seconds
                    for f in layer_groups
                    for e in self.ckpt.entries_for(layer, f)
                    if e.repeat == 1
                )
                rem = self._remaining(layer)
                if cost1 > 0 and rem > 0:
                    n = 1 + int(math.floor(rem / cost1))
                else:
                    n = 1
                n = max(1, min(n, plan.effective_max_repeats()))
                planned = {"event": "repeats_planned", "layer": layer, "n": n}
                self.ckpt.record(planned)
                self._save_ckpt()
            n_repeats = planned["n"]
            active = [
                f
                for f in roster
                if f in layer_groups
                and self.ckpt.find_decision("repeat_failed", layer=layer, family=f)
                is None
            ]
            for repeat in range(2, n_repeats + 1):
                if out_of_time:
                    break
                for family in list(active):
                    matrix = matrices[PREPROCESS_FAMILY[family]]
                    status, payload = self._run_repeat(layer, family, repeat, matrix)
                    if status == "failed":
                        # keep earlier repeats; stop growing this family
                        self.ckpt.record(
                            {
                                "event": "repeat_failed",
                                "layer": layer,
                                "family": family,
                                "repeat": repeat,
                            }
                        )
                        self._save_ckpt()
                        active.remove(family)
                        continue
                    models, oof, covered, folds_done = payload
                    if status == "out_of_time":
                        out_of_time = True
                        break
                    layer_groups[family].add_repeat(models, oof, covered)

        # Layer-1 guarantee fallback: nothing survived but partial folds exist.
        for family, (models, oof, covered, folds_done) in partial.items():
            if family not in layer_groups and folds_done:
                group = BaggedModelGroup(
                    family=family, layer=layer, out_dim=self.out_dim,
                    row_indices=None if not plan.no_bag else self.nobag_split[1],
                )
                group.add_repeat(models, oof, covered)
                layer_groups[family] = group
                self.ckpt.record(
                    {
                        "event": "partial_repeat_kept",
                        "layer": layer,
                        "family": family,
                        "folds": folds_done,
                    }
                )

        # Close: persist OOF, then record the close (order matters for resume).
        ordered = [f for f in roster if f in layer_groups]
        for family in ordered:
            g = layer_groups[family]
            base = os.path.join(self.run_dir, "oof", f"layer{layer}_{family}")
            os.makedirs(os.path.dirname(base), exist_ok=True)
            save_oof(base, g.oof_repeats, g.coverage)
        self.ckpt.record(
            {
                "event": "layer_closed",
                "layer": layer,
                "families": ordered,
                "repeats": {f: layer_groups[f].n_repeats for f in ordered},
                "fold_slots": {
                    f: [
                        [1 if m is not None else 0 for m in rep]
                        for rep in layer_groups[f].models
                    ]
                    for f in ordered
                },
            }
        )
        self._save_ckpt()
        self.layer_families[layer] = ordered
        for family in ordered:
            self.groups[(layer, family)] = layer_groups[family]
        return layer_groups

    def _load_closed_layer(self, layer: int, closed: dict) -> dict:
        """Rebuild groups of an already-closed layer from disk."""
        layer_groups: dict = {}
        for family in closed["families"]:
            oof_repeats, coverage = load_oof(
                os.path.join(self.run_dir, "oof", f"layer{layer}_{family}")
            )
            n_repeats = closed["repeats"][family]
            slots = closed["fold_slots"][family]
            models = []
            for r_i, rep_slots in enumerate(slots, start=1):
                rep_models = []
                for f_i, present in enumerate(rep_slots):
                    if present:
                        rel = os.path.join(
                            f"layer{layer}", family, f"r{r_i}_f{f_i}.model"
                        )
                        rep_models.append(
                            BaseLearner.load(os.path.join(self.run_dir, rel))
                        )
                    else:
                        rep_models.append(None)
                models.append(rep_models)
            group = BaggedModelGroup(
                family=family,
                layer=layer,
                out_dim=self.out_dim,
                row_indices=None if not self.plan.no_bag else self._nobag_hold_rows(),
            )
            for r in range(n_repeats):
                group.add_repeat(models[r], oof_repeats[r], coverage[r])
            layer_groups[family] = group
        ordered = list(closed["families"])
        self.layer_families[layer] = ordered
        for family in ordered:
            self.groups[(layer, family)] = layer_groups[family]
        return layer_groups

    def _nobag_hold_rows(self):
        self._fold_plan_rows(1, 1, 0)  # ensures the split exists
        return self.nobag_split[1]

    # -- whole run -----------------------------------------------------------------

    def run(self) -> PredictorBundle:
        plan = self.plan
        stack_fm = self.base_features
        n_layers = plan.effective_layers()
        for layer in range(1, n_layers + 1):
            layer_groups = self._run_layer(layer, stack_fm)
            if not layer_groups:
                break
            if layer < n_layers:
                ordered = self.layer_families[layer]
                stack_fm = build_stack_features(
                    stack_fm,
                    [layer_groups[f] for f in ordered],
                    mode="train_oof",
                )

        final_layer = max(
            (l for l in self.layer_families if self.layer_families[l]), default=0
        )
        if final_layer == 0:
            cheapest = min(
                plan.effective_roster(),
                key=lambda f: estimate_fit_seconds(
                    self._spec(f), self.base_features.n_rows, self.base_features.width, []
                ),
            )
            est = estimate_fit_seconds(
                self._spec(cheapest),
                self.base_features.n_rows,
                self.base_features.width,
                [],
            )
            raise BudgetTooSmallError(
                f"budget {plan.time_budget}s produced no models; cheapest family "
                f"{cheapest} needs about {est * self._folds_per_repeat():.1f}s"
            )

        return self._finish(final_layer)

    def _selection_targets(self):
        if self.plan.no_bag:
            hold = self._nobag_hold_rows()
            return self.y[hold]
        return self.y

    def _finish(self, final_layer: int) -> PredictorBundle:
        fams = self.layer_families[final_layer]
        groups = [self.groups[(final_layer, f)] for f in fams]
        targets = self._selection_targets()
        oofs = [g.oof() for g in groups]

        inner = self.wrapper.inner_metric
        try:
            metric_loss(inner, oofs[0], targets)
        except UndefinedMetricError:
            fallback = "log_loss" if self.problem.is_classification else "mse"
            self.ckpt.record(
                {"event": "selection_metric_fallback", "from": inner, "to": fallback}
            )
            inner = fallback

        ens = ensemble_selection(
            oofs, targets, inner, iterations=self.plan.selection_iterations
        )
        leaderboard = []
        for f, g, oof in zip(fams, groups, oofs):
            leaderboard.append(
                {
                    "layer": final_layer,
                    "family": f,
                    "repeats": g.n_repeats,
                    "oof_loss": metric_loss(inner, oof, targets),
                    "weight": float(ens.weights[fams.index(f)]),
                }
            )
        payload = {
            "final_layer": final_layer,
            "families": fams,
            "selection_metric": inner,
            "ensemble": ens.to_dict(),
            "layers": [
                {
                    "layer": l,
                    "families": self.layer_families[l],
                    "repeats": {
                        f: self.groups[(l, f)].n_repeats for f in self.layer_families[l]
                    },
                }
                for l in sorted(self.layer_families)
            ],
            "leaderboard": leaderboard,
        }
        atomic_write_json(os.path.join(self.run_dir, ENSEMBLE_NAME), payload)
        if self.ckpt.find_decision("run_complete") is None:
            self.ckpt.record({"event": "run_complete"})
        self._save_ckpt()

        return PredictorBundle(
            run_dir=self.run_dir,
            metadata=self.metadata,
            agnostic=self.agnostic,
            ms_pre=self.ms_pre,
            groups=self.groups,
            layer_families=self.layer_families,
            final_layer=final_layer,
            ensemble=ens,
            leaderboard=leaderboard,
        )


def fit(
    train: TabularDataset,
    plan: StackPlan,
    output_dir,
    fold_callback=None,
    train_path=None,
) -> PredictorBundle:
    """Train a full stack under the plan's budget into output_dir."""
    plan.validate()
    if train.label is None:
        raise LabelNotFoundError("training data has no label column set")
    os.makedirs(output_dir, exist_ok=True)
    if os.path.exists(os.path.join(output_dir, "checkpoint.json")):
        raise DataError(
            f"{output_dir} already contains a run; use continue training to resume"
        )

    problem, classes, y_raw = _prepare_targets(train)
    metric = plan.metric or default_metric(problem.kind)
    m = get_metric(metric)
    if problem.kind not in m.problems:
        raise UndefinedMetricError(
            f"metric {metric!r} undefined for {problem.kind} problems"
        )
    if problem.kind == "regression":
        # rmsle rejects negative targets; surface that before any fitting
        wrap_metric(metric).transform_targets(y_raw)

    metadata = {
        "version": 1,
        "label": train.label,
        "problem": problem.to_dict(),
        "classes": classes,
        "metric": metric,
        "plan": plan.to_dict(),
        "root_seed": plan.seed,
        "schema": train.schema_records(),
        "train_path": str(train_path) if train_path is not None else None,
    }
    atomic_write_json(os.path.join(output_dir, METADATA_NAME), metadata)

    agnostic = ModelAgnosticPreprocessor().fit(train)
    os.makedirs(os.path.join(output_dir, "preprocess"), exist_ok=True)
    atomic_write_json(
        os.path.join(output_dir, "preprocess", "agnostic.json"), agnostic.to_config()
    )

    ckpt = Checkpoint(root_seed=plan.seed)
    ckpt.record({"event": "run_started"})
    ckpt.save(output_dir)

    runner = _Runner(
        train=train,
        plan=plan,
        run_dir=output_dir,
        ckpt=ckpt,
        metadata=metadata,
        agnostic=agnostic,
        hooks=_Hooks(fold_callback=fold_callback),
    )
    return runner.run()


def resume(
    output_dir,
    train: TabularDataset = None,
    time_budget: float = None,
    fold_callback=None,
) -> PredictorBundle:
    """Continue an interrupted run; a completed run returns immediately."""
    meta_path = os.path.join(output_dir, METADATA_NAME)
    if not os.path.exists(meta_path):
        raise DataError(f"{output_dir} has no {METADATA_NAME}")
    metadata = read_json(meta_path)
    ckpt = Checkpoint.load(output_dir)
    ckpt.verify_files(output_dir)
    if ckpt.find_decision("run_complete") is not None:
        return load_bundle(output_dir)

    plan = StackPlan.from_dict(metadata["plan"])
    if time_budget is not None:
        plan.time_budget = time_budget
    if train is None:
        path = metadata.get("train_path")
        if not path:
            raise DataError("no training data given and none recorded in metadata")
        train = load_csv(path, label=metadata["label"])
    agnostic_path = os.path.join(output_dir, "preprocess", "agnostic.json")
    if not os.path.exists(agnostic_path):
        raise CorruptCheckpointError(f"missing {agnostic_path}")
    agnostic = ModelAgnosticPreprocessor.from_config(read_json(agnostic_path))
    runner = _Runner(
        train=train,
        plan=plan,
        run_dir=output_dir,
        ckpt=ckpt,
        metadata=metadata,
        agnostic=agnostic,
        hooks=_Hooks(fold_callback=fold_callback),
    )
    return runner.run()


def load_bundle(output_dir) -> PredictorBundle:
    """Load a completed run directory for prediction."""
    meta_path = os.path.join(output_dir, METADATA_NAME)
    ens_path = os.path.join(output_dir, ENSEMBLE_NAME)
    for p in (meta_path, ens_path):
        if not os.path.exists(p):
            raise DataError(
                f"{output_dir} is not a completed model directory (missing {os.path.basename(p)})"
            )
    metadata = read_json(meta_path)
    payload = read_json(ens_path)
    agnostic = ModelAgnosticPreprocessor.from_config(
        read_json(os.path.join(output_dir, "preprocess", "agnostic.json"))
    )

    problem_kind = metadata["problem"]["kind"]
    out_dim = metadata["problem"]["num_classes"] if problem_kind != "regression" else 1
    plan = StackPlan.from_dict(metadata["plan"])

    groups: dict = {}
    layer_families: dict = {}
    ms_pre: dict = {}
    ckpt = Checkpoint.load(output_dir)
    for layer_info in payload["layers"]:
        layer = layer_info["layer"]
        fams = layer_info["families"]
        layer_families[layer] = fams
        for pfam in sorted({PREPROCESS_FAMILY[f] for f in plan.effective_roster()}):
            path = os.path.join(output_dir, "preprocess", f"layer{layer}_{pfam}.json")
            if os.path.exists(path):
                ms_pre[(layer, pfam)] = ModelSpecificPreprocessor.from_config(
                    read_json(path)
                )
        closed = ckpt.find_decision("layer_closed", layer=layer)
        for family in fams:
            oof_repeats, coverage = load_oof(
                os.path.join(output_dir, "oof", f"layer{layer}_{family}")
            )
            slots = closed["fold_slots"][family]
            n_repeats = layer_info["repeats"][family]
            group = BaggedModelGroup(
                family=family, layer=layer, out_dim=out_dim, row_indices=None
            )
            for r_i in range(n_repeats):
                rep_models = []
                for f_i, present in enumerate(slots[r_i]):
                    if present:
                        rel = os.path.join(
                            f"layer{layer}", family, f"r{r_i + 1}_f{f_i}.model"
                        )
                        rep_models.append(
                            BaseLearner.load(os.path.join(output_dir, rel))
                        )
                    else:
                        rep_models.append(None)
                group.add_repeat(rep_models, oof_repeats[r_i], coverage[r_i])
            groups[(layer, family)] = group

    ens = WeightedEnsemble.from_dict(payload["ensemble"])
    return PredictorBundle(
        run_dir=output_dir,
        metadata=metadata,
        agnostic=agnostic,
        ms_pre=ms_pre,
        groups=groups,
        layer_families=layer_families,
        final_layer=payload["final_layer"],
        ensemble=ens,
        leaderboard=payload["leaderboard"],
    )
