import json
from collections import Counter

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from cmser.data import MSP_PROPORTIONS, allocate_counts
from cmser.metrics import (accuracy, bootstrap_bsf1, confusion_matrix, evaluate, macro_f1,
                           precision_recall_f1)


def brute_macro_f1(y_true, y_pred, n_classes):
    """Per-class TP/FP/FN counted pair by pair."""
    total = 0.0
    for c in range(n_classes):
        tp = fp = fn = 0
        for t, p in zip(y_true, y_pred):
            if p == c and t == c:
                tp += 1
            elif p == c:
                fp += 1
            elif t == c:
                fn += 1
        precision = tp / (tp + fp) if tp + fp else 0.0
        recall = tp / (tp + fn) if tp + fn else 0.0
        total += 2 * precision * recall / (precision + recall) if precision + recall else 0.0
    return total / n_classes


@st.composite
def labelled(draw):
    e = draw(st.integers(2, 8))
    n = draw(st.integers(1, 200))
    labels = st.lists(st.integers(0, e - 1), min_size=n, max_size=n)
    return e, draw(labels), draw(labels)


class TestMacroF1:
    def test_examples(self):
        assert macro_f1([0, 1, 2], [0, 1, 2], 3) == 1.0
        assert abs(macro_f1([0, 0, 1, 1], [0, 1, 1, 1], 2) - (2 / 3 + 4 / 5) / 2) < 1e-15
        assert abs(macro_f1([0, 0, 1, 1], [0, 0, 0, 0], 2) - 1 / 3) < 1e-15

    def test_absent_class_scores_zero(self):
        assert macro_f1([0, 1], [0, 1], 4) == 0.5

    @settings(max_examples=1000, deadline=None)
    @given(labelled())
    def test_matches_brute_force(self, case):
        e, t, p = case
        assert macro_f1(t, p, e) == brute_macro_f1(t, p, e)

    def test_joint_permutation(self, rng):
        t, p = rng.integers(0, 5, 300), rng.integers(0, 5, 300)
        perm = rng.permutation(300)
        assert macro_f1(t[perm], p[perm], 5) == pytest.approx(macro_f1(t, p, 5), abs=1e-15)

    def test_out_of_range(self):
        with pytest.raises(ValueError):
            macro_f1([0, 2], [0, 1], 2)

    def test_confusion_orientation(self):
        cm = confusion_matrix([0, 0, 1], [1, 1, 1], 2)
        assert cm.tolist() == [[0, 2], [0, 1]]
        pr, rc, f1 = precision_recall_f1([0, 0, 1], [1, 1, 1], 2)
        assert pr.tolist() == [0.0, 1 / 3] and rc.tolist() == [0.0, 1.0]


class TestAccuracy:
    def test_examples(self):
        assert accuracy([1, 2, 3], [1, 2, 3]) == 1.0
        assert accuracy([1, 2], [2, 1]) == 0.0
        assert accuracy([1, 2, 3, 4], [1, 0, 3, 0]) == 0.5

    def test_length_mismatch(self):
        with pytest.raises(ValueError):
            accuracy([1, 2], [1])


def imbalanced_predictions(seed, total=2000, hit=0.6):
    r = np.random.default_rng(seed)
    counts = allocate_counts(total, MSP_PROPORTIONS)
    y = r.permutation(np.repeat(np.arange(8), counts))
    pred = np.where(r.random(y.size) < hit, y, r.integers(0, 8, size=y.size))
    return y, pred


class TestBootstrap:
    def test_perfect_predictor(self):
        y = np.repeat([0, 1, 2], [5, 9, 3])
        b = bootstrap_bsf1(y, y, 3, 20)
        assert b.mean == b.min == b.max == 1.0

    def test_single_replicate(self):
        y, p = imbalanced_predictions(0, 400)
        b = bootstrap_bsf1(y, p, 8, 1)
        assert b.mean == b.min == b.max

    def test_replicates_are_balanced(self):
        y, p = imbalanced_predictions(1)
        b = bootstrap_bsf1(y, p, 8, 100, seed=1, keep_subsets=True)
        assert b.per_class_n == min(np.bincount(y))
        for subset in b.subsets:
            assert set(Counter(y[subset].tolist()).values()) == {b.per_class_n}
            assert np.unique(subset).size == subset.size
        assert b.min <= b.mean <= b.max

    def test_mean_inside_range_when_constant(self):
        y = np.repeat([0, 1, 2, 3], 10)
        p = np.r_[y[:30], np.zeros(10, int)]
        b = bootstrap_bsf1(y, p, 4, 100)
        assert b.min <= b.mean <= b.max

    def test_seed_stability(self):
        y, p = imbalanced_predictions(2)
        a, b = bootstrap_bsf1(y, p, 8, 100, seed=0), bootstrap_bsf1(y, p, 8, 100, seed=1)
        assert abs(a.mean - b.mean) < 0.02 and a.replicates != b.replicates

    def test_deterministic(self):
        y, p = imbalanced_predictions(3, 500)
        assert bootstrap_bsf1(y, p, 8, 30, seed=5).replicates == bootstrap_bsf1(y, p, 8, 30, seed=5).replicates

    def test_errors(self):
        with pytest.raises(ValueError, match=r"\[2\]"):
            bootstrap_bsf1([0, 1, 1], [0, 1, 1], 3)
        with pytest.raises(ValueError):
            bootstrap_bsf1([0, 1, 1], [0, 1, 1], 2, per_class_n=2)


class TestReport:
    def test_fields(self):
        y, p = imbalanced_predictions(4, 600)
        report, boot = evaluate(y, p, 8, n_bootstrap=50, seed=1)
        text = report.to_text()
        keys = [line.split("\t")[0] for line in text.splitlines()]
        for key in ("F1", "Acc", "BS-F1", "BS-F1 range"):
            assert key in keys
        assert f"[{boot.min:.4f}, {boot.max:.4f}]" in text
        doc = json.loads(report.to_json())
        assert doc["macro_f1"] == macro_f1(y, p, 8)
        assert doc["bootstrap"]["replicates"] == 50 and doc["bootstrap"]["mean"] == boot.mean

    def test_without_bootstrap(self):
        report, boot = evaluate([0, 1, 1], [0, 1, 0], 2)
        assert boot is None and "BS-F1" not in report.to_text()
