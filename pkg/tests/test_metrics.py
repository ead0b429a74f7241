"""Metric values against brute-force oracles, wrappers, and report math."""

import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from tabstack.errors import MetricDomainError, UndefinedMetricError
from tabstack.metrics import (
    build_report,
    default_metric,
    get_metric,
    loss,
    metric_names,
    rescale_losses,
    score,
    wrap_metric,
)


def auc_pairwise(scores: np.ndarray, labels: np.ndarray) -> float:
    """O(n^2) definition: P(score_pos > score_neg) + 0.5 P(equal)."""
    pos = scores[labels == 1]
    neg = scores[labels == 0]
    total = wins = ties = 0
    for p in pos:
        for q in neg:
            total += 1
            if p > q:
                wins += 1
            elif p == q:
                ties += 1
    return (wins + 0.5 * ties) / total


class TestRegistry:
    def test_exact_metric_set(self):
        assert set(metric_names()) == {
            "auc",
            "gini",
            "log_loss",
            "accuracy",
            "mse",
            "mae",
            "rmsle",
            "r2",
        }

    def test_defaults(self):
        assert default_metric("binary") == "log_loss"
        assert default_metric("multiclass") == "log_loss"
        assert default_metric("regression") == "mse"

    def test_unknown_metric(self):
        with pytest.raises(UndefinedMetricError):
            get_metric("f1")


class TestAuc:
    def test_matches_pairwise_oracle(self, rng):
        labels = rng.integers(0, 2, 200)
        labels[:3] = [0, 1, 0]  # both classes guaranteed
        scores = np.round(rng.random(200), 2)  # coarse grid forces ties
        probs = np.column_stack([1 - scores, scores])
        assert abs(score("auc", probs, labels) - auc_pairwise(scores, labels)) < 1e-12

    def test_perfect_and_reversed(self):
        y = np.array([0, 0, 1, 1])
        p = np.array([[0.9, 0.1], [0.8, 0.2], [0.2, 0.8], [0.1, 0.9]])
        assert score("auc", p, y) == 1.0
        assert score("auc", p[::-1], y) == 0.0

    def test_single_class_undefined(self):
        p = np.array([[0.4, 0.6], [0.3, 0.7]])
        with pytest.raises(UndefinedMetricError):
            score("auc", p, np.array([1, 1]))

    def test_multiclass_undefined(self):
        p = np.full((4, 3), 1 / 3)
        with pytest.raises(UndefinedMetricError):
            score("auc", p, np.array([0, 1, 2, 0]))

    def test_gini_is_2auc_minus_1(self, rng):
        labels = rng.integers(0, 2, 50)
        labels[:2] = [0, 1]
        p = rng.random(50)
        probs = np.column_stack([1 - p, p])
        assert score("gini", probs, labels) == pytest.approx(
            2 * score("auc", probs, labels) - 1, abs=1e-15
        )

    @given(st.integers(0, 2**32 - 1))
    @settings(max_examples=30, deadline=None)
    def test_auc_invariant_under_monotone_transform(self, seed):
        rng = np.random.default_rng(seed)
        labels = rng.integers(0, 2, 30)
        labels[:2] = [0, 1]
        s = rng.random(30)
        a1 = score("auc", np.column_stack([1 - s, s]), labels)
        t = np.exp(3 * s)  # strictly increasing
        t = t / (t.max() + 1)
        a2 = score("auc", np.column_stack([1 - t, t]), labels)
        assert a1 == pytest.approx(a2, abs=1e-12)


class TestLogLoss:
    @pytest.mark.parametrize("c", [2, 3, 7])
    def test_uniform_prediction_is_ln_c(self, c):
        n = 30
        probs = np.full((n, c), 1.0 / c)
        y = np.arange(n) % c
        assert score("log_loss", probs, y) == pytest.approx(math.log(c), abs=1e-12)

    def test_clamping_keeps_loss_finite(self):
        probs = np.array([[1.0, 0.0], [0.0, 1.0]])
        y = np.array([1, 0])  # confidently wrong
        val = score("log_loss", probs, y)
        assert np.isfinite(val)
        assert val == pytest.approx(-math.log(1e-15), rel=1e-6)

    def test_single_column_binary(self):
        # (n, 1) positive-class probabilities are accepted for binary
        p1 = np.array([[0.8], [0.3]])
        p2 = np.array([[0.2, 0.8], [0.7, 0.3]])
        y = np.array([1, 0])
        assert score("log_loss", p1, y) == pytest.approx(score("log_loss", p2, y))


class TestRegressionMetrics:
    def test_mse_mae(self):
        y = np.array([1.0, 2.0, 3.0])
        p = np.array([1.0, 2.5, 2.0])
        assert score("mse", p, y) == pytest.approx((0 + 0.25 + 1.0) / 3)
        assert score("mae", p, y) == pytest.approx((0 + 0.5 + 1.0) / 3)

    def test_r2(self):
        y = np.array([1.0, 2.0, 3.0, 4.0])
        assert score("r2", y.copy(), y) == 1.0
        assert score("r2", np.full(4, y.mean()), y) == pytest.approx(0.0)

    def test_r2_constant_targets_undefined(self):
        with pytest.raises(UndefinedMetricError):
            score("r2", np.array([1.0, 2.0]), np.array([3.0, 3.0]))

    def test_rmsle(self):
        y = np.array([0.0, 9.0])
        p = np.array([0.0, 9.0])
        assert score("rmsle", p, y) == 0.0

    def test_rmsle_negative_rejected(self):
        with pytest.raises(MetricDomainError):
            score("rmsle", np.array([1.0]), np.array([-0.5]))
        with pytest.raises(MetricDomainError):
            score("rmsle", np.array([-1.0]), np.array([0.5]))

    def test_accuracy(self):
        probs = np.array([[0.9, 0.1], [0.2, 0.8], [0.6, 0.4]])
        assert score("accuracy", probs, np.array([0, 1, 1])) == pytest.approx(2 / 3)


class TestLossOrientation:
    def test_greater_is_better_flipped(self):
        y = np.array([0, 1, 0, 1])
        p = np.array([[0.9, 0.1], [0.1, 0.9], [0.8, 0.2], [0.2, 0.8]])
        assert loss("auc", p, y) == pytest.approx(1 - score("auc", p, y))
        assert loss("accuracy", p, y) == pytest.approx(0.0)

    def test_lower_is_better_passthrough(self):
        y = np.array([1.0, 2.0])
        p = np.array([1.5, 2.5])
        assert loss("mse", p, y) == score("mse", p, y)


class TestWrappers:
    def test_rmsle_trains_on_log_space(self):
        w = wrap_metric("rmsle")
        assert w.inner_metric == "mse"
        y = np.array([0.0, 1.0, 99.0])
        t = w.transform_targets(y)
        assert t == pytest.approx(np.log1p(y))
        assert w.invert_predictions(t) == pytest.approx(y, abs=1e-9)

    def test_gini_optimizes_auc(self):
        w = wrap_metric("gini")
        assert w.inner_metric == "auc"

    def test_identity_wrappers(self):
        for name in ("log_loss", "mse", "accuracy"):
            w = wrap_metric(name)
            assert w.inner_metric == name
            y = np.array([1.0, 2.0])
            assert np.array_equal(w.transform_targets(y), y)

    def test_rmsle_squared_relation(self):
        # rmsle(p, y) == sqrt(mse(log1p p, log1p y)): the wrapper's whole point
        y = np.array([1.0, 5.0, 20.0])
        p = np.array([2.0, 4.0, 25.0])
        inner = score("mse", np.log1p(p), np.log1p(y))
        assert score("rmsle", p, y) == pytest.approx(math.sqrt(inner), abs=1e-12)


class TestRescale:
    def test_exact_example(self):
        assert rescale_losses([0.2, 0.5, 0.8]) == pytest.approx([0.0, 0.5, 1.0])

    def test_all_equal_goes_to_zero(self):
        assert rescale_losses([0.7, 0.7, 0.7]) == pytest.approx([0.0, 0.0, 0.0])

    def test_needs_two_finite(self):
        with pytest.raises(ValueError):
            rescale_losses([0.5, float("nan")])

    def test_nan_preserved(self):
        out = rescale_losses([0.0, float("nan"), 1.0])
        assert np.isnan(out[1]) and out[0] == 0.0 and out[2] == 1.0

    @given(
        st.lists(st.floats(0, 100, allow_nan=False), min_size=2, max_size=20).filter(
            lambda xs: len(set(xs)) >= 2
        )
    )
    @settings(max_examples=60, deadline=None)
    def test_range_and_order(self, xs):
        out = np.asarray(rescale_losses(xs))
        assert out.min() == 0.0 and out.max() == 1.0
        order = np.argsort(xs, kind="stable")
        assert np.all(np.diff(out[order]) >= -1e-12)


class TestReport:
    def build(self):
        results = {
            "sys_a": {"d1": 0.10, "d2": 0.30, "d3": 0.50},
            "sys_b": {"d1": 0.20, "d2": 0.30, "d3": float("nan")},
            "sys_c": {"d1": 0.40, "d2": 0.90, "d3": 0.10},
        }
        return build_report(results)

    def test_reference_defaults_to_first(self):
        rep = self.build()
        assert rep.reference == "sys_a"

    def test_wins_losses_vs_reference(self):
        rep = self.build()
        by = {s.system: s for s in rep.summaries}
        # sys_b vs sys_a: d1 loses, d2 ties, d3 not comparable (failure)
        assert (by["sys_b"].wins, by["sys_b"].losses, by["sys_b"].ties) == (0, 1, 1)
        # sys_c vs sys_a: d3 wins, d1 and d2 lose
        assert (by["sys_c"].wins, by["sys_c"].losses) == (1, 2)

    def test_champion_counts(self):
        rep = self.build()
        by = {s.system: s for s in rep.summaries}
        assert by["sys_a"].champion == 2  # d1, d2 (tie still best-equal on d2)
        assert by["sys_c"].champion == 1  # d3

    def test_averages_span_complete_datasets_only(self):
        rep = self.build()
        assert rep.complete_datasets == ["d1", "d2"]
        by = {s.system: s for s in rep.summaries}
        # ranks on d1: a=1, b=2, c=3; d2: a=1.5, b=1.5, c=3
        assert by["sys_a"].avg_rank == pytest.approx(1.25)
        assert by["sys_b"].avg_rank == pytest.approx(1.75)
        assert by["sys_c"].avg_rank == pytest.approx(3.0)

    def test_failures_counted(self):
        rep = self.build()
        by = {s.system: s for s in rep.summaries}
        assert by["sys_b"].failures == 1

    def test_tie_at_five_decimals(self):
        results = {
            "s1": {"d": 0.123456},
            "s2": {"d": 0.123459},
            "s3": {"d": 0.2},
        }
        rep = build_report(results)
        by = {s.system: s for s in rep.summaries}
        assert by["s2"].ties == 1  # 0.12346 == 0.12346 after rounding
        assert by["s1"].avg_rank == by["s2"].avg_rank == pytest.approx(1.5)

    def test_rescaled_spans_unit_interval(self):
        rep = self.build()
        by = {s.system: s for s in rep.summaries}
        # d1 rescaled: a=0, b=1/3, c=1; d2: a=0, b=0, c=1
        assert by["sys_a"].avg_rescaled_loss == pytest.approx(0.0)
        assert by["sys_c"].avg_rescaled_loss == pytest.approx(1.0)

    def test_serialization(self, tmp_path):
        rep = self.build()
        rep.to_csv(tmp_path / "report.csv")
        rep.to_json(tmp_path / "report.json")
        text = (tmp_path / "report.csv").read_text()
        assert "sys_a" in text and "avg_rescaled_loss" in text.splitlines()[0]
        table = rep.format_table()
        assert "sys_c" in table
