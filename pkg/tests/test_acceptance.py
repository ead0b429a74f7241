"""Release-gate checks, one printed verdict line per numbered criterion.

These are the slow end-to-end gates: ablation ordering on the shared
corpus, construction invariants of the stacking pipeline, and oracle
equivalences for the numeric kernels. Each test emits exactly one
``ACCEPTANCE NN PASS/FAIL`` line on the real stdout (capture is bypassed)
and then asserts, so a plain ``pytest -v`` run shows every verdict.

Expect the full file to take tens of minutes; criterion 1 alone trains
72 stacks.
"""

import math
import shutil
import time

import numpy as np
import pytest
import torch
from scipy import stats

from tabstack.ensembling import BaggedModelGroup, build_stack_features
from tabstack.learners import ROSTER, LearnerSpec, make_learner
from tabstack.learners.base import BaseLearner
from tabstack.learners.net import (
    NetConfig,
    TabularNetModule,
    embedding_dim,
    numeric_embed_width,
)
from tabstack.metrics import build_report, rescale_losses, score
from tabstack.orchestrator import StackPlan, fit, load_bundle, resume
from tabstack.schema import Column, ProblemType, TabularDataset, infer_column_kind

from conftest import matrix_with_cats, numeric_matrix
from corpus import GENERATORS, LABEL, corpus_split

SEEDS = (0, 1, 2)
NET_PARAMS = {"tabular_net": {"max_epochs": 60, "patience": 15}}
CHAIN = ("full", "no_repeat", "no_multistack", "no_bag")
ABLATION_FLAGS = {
    "full": {},
    "no_repeat": {"no_repeat": True},
    "no_multistack": {"no_repeat": True, "no_multistack": True},
    "no_bag": {"no_bag": True},
}

FAST = ("linear_model", "k_nearest_neighbors")
MID = ("random_forest", "linear_model", "k_nearest_neighbors")
MID_PARAMS = {"random_forest": {"n_estimators": 25}}


@pytest.fixture
def verdict(capsys):
    def emit(criterion: int, ok: bool, detail: str) -> None:
        line = f"ACCEPTANCE {criterion:02d} {'PASS' if ok else 'FAIL'}: {detail}"
        with capsys.disabled():
            print(line, flush=True)
        assert ok, line

    return emit


def corpus_plan(seed: int, budget: float, **flags) -> StackPlan:
    return StackPlan(
        time_budget=budget,
        layers=2,
        folds=5,
        max_repeats=3,
        seed=seed,
        learner_params=NET_PARAMS,
        **flags,
    )


def table(features: dict, labels: list) -> TabularDataset:
    cols = []
    for name, values in features.items():
        vals = tuple(str(v) for v in values)
        cols.append(Column(name, infer_column_kind(vals), vals))
    lab = tuple(str(v) for v in labels)
    cols.append(Column(LABEL, infer_column_kind(lab), lab))
    return TabularDataset(columns=cols, label=LABEL)


def random_task(rng, kind: str, n: int) -> TabularDataset:
    X = rng.normal(size=(n, 4))
    color = rng.integers(0, 3, n)
    if kind == "regression":
        y = X @ [1.0, -2.0, 0.5, 0.0] + 0.3 * color + rng.normal(0, 0.4, n)
        labels = [f"{v:.6f}" for v in y]
    else:
        classes = 2 if kind == "binary" else 3
        cls = rng.integers(0, classes, n)
        X[:, 0] += 1.8 * cls
        labels = ["cls%d" % v for v in cls]
    feats = {f"x{j}": [f"{v:.6f}" for v in X[:, j]] for j in range(4)}
    feats["color"] = [("red", "green", "blue")[v] for v in color]
    return table(feats, labels)


class TestAblationOrdering:
    def test_01_chain_direction_on_corpus(self, tmp_path, verdict):
        """Six datasets, three seeds, four stack variants under a 600s budget.

        Mean rank over datasets (losses averaged over seeds first, ranked
        after rounding to 5 decimals) must not decrease along the chain
        full -> no_repeat -> no_multistack -> no_bag, and full must strictly
        beat no_bag on at least 4 of 6 datasets. Whole run capped at 6h.
        """
        t_start = time.monotonic()
        losses: dict = {}
        run = 0
        for seed in SEEDS:
            for name in GENERATORS:
                train, test = corpus_split(name, seed)
                for vname, flags in ABLATION_FLAGS.items():
                    out = tmp_path / f"run{run}"
                    run += 1
                    bundle = fit(train, corpus_plan(seed, 600.0, **flags), out)
                    loss = bundle.evaluate(test)["loss"]
                    losses.setdefault((name, vname), []).append(loss)
                    shutil.rmtree(out, ignore_errors=True)
        elapsed = time.monotonic() - t_start

        mean = {k: float(np.mean(v)) for k, v in losses.items()}
        rank_sum = {v: 0.0 for v in CHAIN}
        for name in GENERATORS:
            vals = np.round([mean[(name, v)] for v in CHAIN], 5)
            for v, r in zip(CHAIN, stats.rankdata(vals, method="average")):
                rank_sum[v] += r
        mean_rank = {v: rank_sum[v] / len(GENERATORS) for v in CHAIN}

        monotone = all(
            mean_rank[CHAIN[i]] <= mean_rank[CHAIN[i + 1]]
            for i in range(len(CHAIN) - 1)
        )
        wins = sum(
            1 for name in GENERATORS if mean[(name, "full")] < mean[(name, "no_bag")]
        )
        ranks_txt = ", ".join(f"{v}={mean_rank[v]:.3f}" for v in CHAIN)
        verdict(
            1,
            monotone and wins >= 4 and elapsed <= 6 * 3600,
            f"mean ranks {ranks_txt}; full beats no_bag on {wins}/6; "
            f"{elapsed:.0f}s elapsed",
        )


class TestSelectionDominance:
    def test_02_ensemble_never_worse_than_best_group(self, tmp_path, verdict):
        """Fifty randomized fits; selection loss <= best single-group OOF loss.

        Holds with no tolerance: selection starts from the best single
        candidate and only keeps strict improvements.
        """
        rng = np.random.default_rng(20)
        checked = 0
        worst_margin = -np.inf
        for i in range(50):
            kind = ("binary", "multiclass", "regression")[int(rng.integers(0, 3))]
            train = random_task(rng, kind, n=int(rng.integers(50, 140)))
            roster = tuple(
                rng.choice(MID, size=int(rng.integers(2, 4)), replace=False)
            )
            plan = StackPlan(
                time_budget=120.0,
                layers=int(rng.integers(1, 3)),
                folds=int(rng.integers(2, 4)),
                max_repeats=int(rng.integers(1, 3)),
                roster=roster,
                learner_params={"random_forest": {"n_estimators": 15}},
                no_bag=bool(rng.random() < 0.25),
                seed=i,
            )
            bundle = fit(train, plan, tmp_path / f"sel{i}")
            best_single = min(row["oof_loss"] for row in bundle.leaderboard)
            margin = best_single - bundle.ensemble.loss
            worst_margin = max(worst_margin, -margin)
            if bundle.ensemble.loss > best_single:
                verdict(2, False, f"run {i}: {bundle.ensemble.loss} > {best_single}")
            checked += 1
            shutil.rmtree(tmp_path / f"sel{i}", ignore_errors=True)
        verdict(
            2,
            checked == 50,
            f"selection <= best single group on {checked}/50 randomized fits "
            f"(worst excess {max(worst_margin, 0.0) + 0.0:.3g})",
        )


class TestFoldHygiene:
    def test_03_no_model_predicts_its_own_training_rows(self, tmp_path, verdict):
        """Instrumented fold membership on a 500-row task, k=5, n=3, 2 layers.

        Every (layer, family, repeat, fold) fit must see disjoint train and
        holdout row sets that jointly cover the table, each repeat's holdouts
        must partition all rows, and the full combination grid must appear.
        """
        rng = np.random.default_rng(30)
        train = random_task(rng, "binary", n=500)
        events = []
        plan = StackPlan(
            time_budget=900.0,
            layers=2,
            folds=5,
            max_repeats=3,
            roster=MID,
            learner_params=MID_PARAMS,
            seed=3,
        )
        fit(train, plan, tmp_path / "hyg", fold_callback=events.append)

        all_rows = frozenset(range(500))
        overlaps = 0
        for ev in events:
            tr = frozenset(ev["train_idx"])
            ho = frozenset(ev["holdout_idx"])
            if tr & ho:
                overlaps += 1
            assert tr | ho == all_rows

        partitions_ok = True
        by_group: dict = {}
        for ev in events:
            key = (ev["layer"], ev["family"], ev["repeat"])
            by_group.setdefault(key, []).append(list(ev["holdout_idx"]))
        for key, holds in by_group.items():
            flat = np.concatenate(holds)
            if len(flat) != 500 or len(np.unique(flat)) != 500:
                partitions_ok = False

        seen = {(e["layer"], e["family"], e["repeat"], e["fold"]) for e in events}
        grid = {
            (layer, fam, rep, fold)
            for layer in (1, 2)
            for fam in MID
            for rep in (1, 2, 3)
            for fold in range(5)
        }
        verdict(
            3,
            overlaps == 0 and partitions_ok and seen == grid,
            f"{len(events)} fits, 0 train/holdout overlaps expected "
            f"(got {overlaps}), all {len(grid)} grid cells covered: {seen == grid}",
        )


def loss_at(module, x_num, x_cat, y):
    out = module(x_num, x_cat)
    return torch.nn.functional.cross_entropy(out, y)


def relu_margin(module, x_num, x_cat) -> float:
    """Smallest |pre-activation| feeding either ReLU, over all rows."""
    pre = []
    hooks = [
        layer.register_forward_hook(lambda m, i, out: pre.append(out.detach()))
        for layer in (module.branch[1], module.branch[5])
    ]
    with torch.no_grad():
        module(x_num, x_cat)
    for h in hooks:
        h.remove()
    return min(float(t.abs().min()) for t in pre)


class TestGradientOracle:
    def test_04_analytic_gradients_match_central_differences(self, verdict):
        """20 seeds of a 20-row, 5-feature net; step 1e-5 in float64.

        Central differences are only meaningful where the loss is smooth
        across the step, so inputs are resampled until every ReLU
        pre-activation clears the step size by two orders of magnitude.
        """
        worst = 0.0
        for seed in range(20):
            rng = np.random.default_rng(seed)
            cfg = NetConfig(
                cat_cardinalities=[5, 7],
                cat_embed_dims=[embedding_dim(5), embedding_dim(7)],
                numeric_dim=3,
                numeric_embed=numeric_embed_width(3, 2),
                hidden=(8, 4),
                out_dim=3,
                dropout=0.0,
            )
            torch.manual_seed(int(rng.integers(0, 2**31)))
            module = TabularNetModule(cfg).to(torch.float64)
            module.eval()
            x_cat = torch.tensor(
                np.stack([rng.integers(0, 5, 20), rng.integers(0, 7, 20)], axis=1)
            )
            for _ in range(50):
                x_num = torch.tensor(rng.normal(size=(20, 3)), dtype=torch.float64)
                if relu_margin(module, x_num, x_cat) > 1e-3:
                    break
            else:
                pytest.fail(f"seed {seed}: no kink-free sample in 50 draws")
            y = torch.tensor(rng.integers(0, 3, 20))

            module.zero_grad()
            loss_at(module, x_num, x_cat, y).backward()
            analytic = {n: p.grad.clone() for n, p in module.named_parameters()}

            h = 1e-5
            with torch.no_grad():
                for name, p in module.named_parameters():
                    flat = p.view(-1)
                    grad = analytic[name].view(-1)
                    for i in range(flat.numel()):
                        orig = flat[i].item()
                        flat[i] = orig + h
                        up = loss_at(module, x_num, x_cat, y).item()
                        flat[i] = orig - h
                        down = loss_at(module, x_num, x_cat, y).item()
                        flat[i] = orig
                        fd = (up - down) / (2 * h)
                        a = grad[i].item()
                        rel = abs(a - fd) / max(abs(a) + abs(fd), 1e-6)
                        worst = max(worst, rel)
        verdict(4, worst < 1e-4, f"max relative error {worst:.3g} over 20 seeds")


class TestSizingTable:
    def test_05_embedding_dims_at_reference_cardinalities(self, verdict):
        want = {
            4: 4,
            10: 6,
            100: 22,
            1000: math.ceil(1.6 * 1000**0.56),
            10**6: 100,
        }
        got = {k: embedding_dim(k) for k in want}
        assert want[1000] == 77
        verdict(5, got == want, f"embedding_dim table {got}")


class TestStackWidth:
    def test_06_layer2_width_is_base_plus_prediction_columns(self, verdict):
        """width(d, M, C) == d + sum of group out_dims, 200 random cases."""
        rng = np.random.default_rng(60)
        bad = 0
        for _ in range(200):
            d = int(rng.integers(1, 41))
            m = int(rng.integers(1, 9))
            out_dims = rng.integers(1, 7, size=m)
            rows = int(rng.integers(5, 30))
            base = numeric_matrix(rng.normal(size=(rows, d)))
            groups = []
            for j, c in enumerate(out_dims):
                g = BaggedModelGroup(family=f"g{j}", layer=1, out_dim=int(c))
                g.add_repeat(
                    [None], rng.random(size=(rows, c)), np.ones(rows, dtype=bool)
                )
                groups.append(g)
            stacked = build_stack_features(base, groups, mode="train_oof")
            if stacked.width != d + int(out_dims.sum()):
                bad += 1
        verdict(6, bad == 0, f"width identity held on {200 - bad}/200 cases")


class TestBudgetAdherence:
    def test_07_wall_clock_within_budget_and_nonempty(self, tmp_path, verdict):
        """Budgets 60s and 300s on the corpus: wall <= 1.25x, models exist."""
        worst_ratio = 0.0
        runs = 0
        for budget in (60.0, 300.0):
            for name in GENERATORS:
                train, _ = corpus_split(name, 0)
                out = tmp_path / f"b{int(budget)}_{name}"
                t0 = time.monotonic()
                bundle = fit(train, corpus_plan(0, budget), out)
                wall = time.monotonic() - t0
                worst_ratio = max(worst_ratio, wall / budget)
                fitted = sum(
                    m is not None
                    for g in bundle.groups.values()
                    for rep in g.models
                    for m in rep
                )
                if wall > 1.25 * budget or fitted < 1 or not bundle.leaderboard:
                    verdict(
                        7,
                        False,
                        f"{name} at {budget:.0f}s: wall {wall:.1f}s, "
                        f"{fitted} models",
                    )
                runs += 1
                shutil.rmtree(out, ignore_errors=True)
        verdict(
            7,
            runs == 12,
            f"12/12 runs within 1.25x budget (worst ratio {worst_ratio:.2f}) "
            f"with at least one fitted model each",
        )


class _Kill(Exception):
    """Raised by the interrupt callback to simulate a process death."""


def kill_after(n: int):
    state = {"count": 0}

    def callback(info):
        if state["count"] >= n:
            raise _Kill(f"killed before fold fit {n}")
        state["count"] += 1

    return callback


def prediction_array(result):
    if result.values is not None:
        return result.values
    return result.probabilities


class TestResumeDeterminism:
    def test_08_resumed_runs_match_uninterrupted_bitwise(self, tmp_path, verdict):
        """5 random kill points on each of 2 datasets, same root seed."""
        mismatches = 0
        total = 0
        for di, name in enumerate(("moons", "friedman")):
            train, test = corpus_split(name, 0)
            plan = StackPlan(
                time_budget=1200.0,
                layers=2,
                folds=5,
                max_repeats=2,
                roster=MID,
                learner_params=MID_PARAMS,
                seed=7,
            )
            events = []
            ref = fit(train, plan, tmp_path / f"ref{di}", fold_callback=events.append)
            ref_pred = prediction_array(ref.predict(test))

            rng = np.random.default_rng(80 + di)
            kills = rng.choice(np.arange(1, len(events)), size=5, replace=False)
            for k in sorted(int(k) for k in kills):
                out = tmp_path / f"kill{di}_{k}"
                with pytest.raises(_Kill):
                    fit(train, plan, out, fold_callback=kill_after(k))
                resumed = resume(out, train)
                got = prediction_array(resumed.predict(test))
                total += 1
                if not np.array_equal(got, ref_pred):
                    mismatches += 1
                shutil.rmtree(out, ignore_errors=True)
        verdict(
            8,
            mismatches == 0 and total == 10,
            f"{total - mismatches}/{total} resumed runs bit-identical "
            f"to uninterrupted",
        )


class TestMetricOracles:
    def test_09_auc_rescale_and_tie_rules(self, verdict):
        """Pairwise AUC oracle at n=200, exact rescale points, 5-decimal ties."""
        rng = np.random.default_rng(90)
        # two decimals force plenty of tied scores
        s = np.round(rng.normal(size=200), 2)
        targets = rng.integers(0, 2, 200)
        targets[:2] = [0, 1]
        probs = np.column_stack([1 - s, s])
        pos = s[targets == 1]
        neg = s[targets == 0]
        wins = (pos[:, None] > neg[None, :]).sum()
        ties = (pos[:, None] == neg[None, :]).sum()
        oracle = (wins + 0.5 * ties) / (len(pos) * len(neg))
        auc_err = abs(score("auc", probs, targets) - oracle)

        rescaled = rescale_losses([0.2, 0.5, 0.8])
        rescale_err = float(np.max(np.abs(rescaled - np.array([0.0, 0.5, 1.0]))))

        report = build_report(
            {
                "a": {"d1": 0.111111, "d2": 0.11111},
                "b": {"d1": 0.111112, "d2": 0.11112},
            }
        )
        by_name = {s.system: s for s in report.summaries}
        b = by_name["b"]
        tie_ok = b.ties == 1 and b.losses == 1 and b.wins == 0
        champ_ok = by_name["a"].champion == 2 and b.champion == 1

        verdict(
            9,
            auc_err <= 1e-12 and rescale_err <= 1e-12 and tie_ok and champ_ok,
            f"auc vs pairwise oracle err {auc_err:.2e}; "
            f"rescale [0.2,0.5,0.8] err {rescale_err:.2e}; "
            f"sub-1e-5 gap ties, 1e-5 gap splits: {tie_ok and champ_ok}",
        )


LEARNER_PARAMS = {
    "random_forest": {"n_estimators": 20},
    "extra_trees": {"n_estimators": 20},
    "gradient_boosting": {"n_estimators": 60, "patience": 10},
    "linear_model": {},
    "k_nearest_neighbors": {},
    "tabular_net": {"hidden": (8, 4), "batch_size": 32, "max_epochs": 10},
}


class TestPersistenceRoundtrip:
    def test_10_saved_models_predict_identically(self, tmp_path, verdict):
        """save + load + predict within 1e-12 of in-memory, every family."""
        rng = np.random.default_rng(100)
        y = rng.integers(0, 2, 90)
        X = rng.normal(size=(90, 3)) + 1.5 * y[:, None]
        codes = rng.integers(0, 4, size=(90, 1)).astype(np.int64)
        fm = matrix_with_cats(X, codes, [("a", "b", "c", "d")])
        problem = ProblemType("binary", 2)
        cut = 70
        worst = 0.0
        for family in ROSTER:
            model = make_learner(
                LearnerSpec(family, LEARNER_PARAMS[family]), problem, seed=4
            )
            model.fit(
                fm.take(range(cut)),
                y[:cut],
                holdout=(fm.take(range(cut, 90)), y[cut:]),
            )
            before = model.predict(fm)
            path = tmp_path / f"{family}.model"
            model.save(path)
            after = BaseLearner.load(path).predict(fm)
            worst = max(worst, float(np.max(np.abs(before - after))))

        train = random_task(rng, "binary", n=100)
        plan = StackPlan(
            time_budget=120.0, layers=1, folds=3, max_repeats=1, roster=MID,
            learner_params=MID_PARAMS, seed=5,
        )
        bundle = fit(train, plan, tmp_path / "bundle")
        test = random_task(rng, "binary", n=40)
        direct = bundle.predict(test).probabilities
        reloaded = load_bundle(tmp_path / "bundle").predict(test).probabilities
        worst = max(worst, float(np.max(np.abs(direct - reloaded))))
        verdict(
            10,
            worst <= 1e-12,
            f"max roundtrip prediction drift {worst:.2e} across "
            f"{len(ROSTER)} families and the full bundle",
        )
