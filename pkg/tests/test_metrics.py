import itertools

import numpy as np
import pytest

from compnet.metrics import (
    MethodResults,
    average_accuracy,
    average_rank,
    detection_table,
    overall_accuracy,
    roc_auc,
    wilcoxon_one_sided,
)


def auc_by_pair_counting(scores, labels):
    """Concordant-pair oracle with half credit for ties."""
    pos = [s for s, l in zip(scores, labels) if l == 1]
    neg = [s for s, l in zip(scores, labels) if l == 0]
    total = 0.0
    for p in pos:
        for q in neg:
            if p > q:
                total += 1.0
            elif p == q:
                total += 0.5
    return total / (len(pos) * len(neg))


def wilcoxon_by_enumeration(a, b):
    """Brute-force oracle over all 2^n sign assignments."""
    d = np.asarray(a, float) - np.asarray(b, float)
    d = d[d != 0]
    absd = np.abs(d)
    order = np.argsort(absd)
    ranks = np.empty(len(d))
    sorted_abs = absd[order]
    i = 0
    while i < len(d):
        j = i
        while j + 1 < len(d) and sorted_abs[j + 1] == sorted_abs[i]:
            j += 1
        ranks[order[i:j + 1]] = 0.5 * (i + j) + 1.0
        i = j + 1
    w_obs = ranks[d > 0].sum()
    count = 0
    for signs in itertools.product([0, 1], repeat=len(d)):
        w = sum(r for r, s in zip(ranks, signs) if s)
        if w >= w_obs - 1e-12:
            count += 1
    return count / 2 ** len(d)


class TestAccuracy:
    def test_all_correct(self):
        assert overall_accuracy([1, 2, 3], [1, 2, 3]) == 1.0

    def test_two_thirds(self):
        assert abs(overall_accuracy([0, 1, 1], [0, 1, 0]) - 2 / 3) < 1e-12

    def test_matches_direct_count(self):
        rng = np.random.default_rng(0)
        for _ in range(20):
            n = int(rng.integers(1, 50))
            preds = rng.integers(0, 4, n)
            labels = rng.integers(0, 4, n)
            expected = sum(int(p == l) for p, l in zip(preds, labels)) / n
            assert abs(overall_accuracy(preds, labels) - expected) < 1e-12

    def test_average_accuracy_balanced_equals_overall(self):
        preds = [0, 0, 1, 1]
        labels = [0, 1, 1, 0]
        assert average_accuracy(preds, labels) == overall_accuracy(preds, labels)

    def test_average_accuracy_weights_classes_equally(self):
        preds = [0] * 10 + [0]
        labels = [0] * 10 + [1]
        assert abs(average_accuracy(preds, labels) - 0.5) < 1e-12

    def test_average_accuracy_loop_oracle(self):
        rng = np.random.default_rng(1)
        for _ in range(20):
            labels = rng.integers(0, 3, 30)
            preds = rng.integers(0, 3, 30)
            recalls = []
            for c in set(labels.tolist()):
                members = [i for i, l in enumerate(labels) if l == c]
                recalls.append(
                    sum(int(preds[i] == c) for i in members) / len(members))
            expected = sum(recalls) / len(recalls)
            assert abs(average_accuracy(preds, labels) - expected) < 1e-12


class TestRocAuc:
    def test_perfect_separation(self):
        assert roc_auc([0.9, 0.8, 0.1, 0.2], [1, 1, 0, 0]) == 1.0

    def test_one_quarter(self):
        # anomalous {0.5, 0.1} vs normal {0.9, 0.4}: 1 concordant of 4 pairs
        assert abs(roc_auc([0.5, 0.1, 0.9, 0.4], [1, 1, 0, 0]) - 0.25) < 1e-12

    def test_all_ties(self):
        assert roc_auc([1.0, 1.0, 1.0, 1.0], [1, 0, 1, 0]) == 0.5

    def test_single_class_rejected(self):
        with pytest.raises(ValueError, match="AUC undefined"):
            roc_auc([1.0, 2.0], [1, 1])

    def test_matches_pair_counting_oracle(self):
        rng = np.random.default_rng(2)
        for trial in range(100):
            n = int(rng.integers(2, 51))
            labels = rng.integers(0, 2, n)
            if labels.min() == labels.max():
                labels[0] = 1 - labels[0]
            # quantized scores produce plenty of exact ties
            scores = np.round(rng.normal(size=n), 1)
            expected = auc_by_pair_counting(scores.tolist(), labels.tolist())
            assert abs(roc_auc(scores, labels) - expected) < 1e-12

    def test_monotone_transform_invariance(self):
        rng = np.random.default_rng(3)
        scores = rng.normal(size=40)
        labels = rng.integers(0, 2, 40)
        labels[0], labels[1] = 0, 1
        base = roc_auc(scores, labels)
        assert roc_auc(np.exp(scores), labels) == base
        assert roc_auc(3.0 * scores + 7.0, labels) == base

    def test_negation_complements(self):
        rng = np.random.default_rng(4)
        scores = rng.normal(size=30)  # continuous: no ties
        labels = rng.integers(0, 2, 30)
        labels[0], labels[1] = 0, 1
        assert abs(roc_auc(scores, labels) + roc_auc(-scores, labels) - 1.0) < 1e-12


class TestAverageRank:
    def test_strict_winner(self):
        res = [MethodResults("a", [0.9, 0.8]), MethodResults("b", [0.5, 0.6])]
        ranks = average_rank(res)
        assert ranks == {"a": 1.0, "b": 2.0}

    def test_split_wins(self):
        res = [MethodResults("a", [0.9, 0.1]), MethodResults("b", [0.5, 0.6])]
        ranks = average_rank(res)
        assert ranks == {"a": 1.5, "b": 1.5}

    def test_exact_tie_mid_rank(self):
        res = [MethodResults("a", [0.7]), MethodResults("b", [0.7])]
        ranks = average_rank(res)
        assert ranks == {"a": 1.5, "b": 1.5}

    def test_ranks_sum_invariant(self):
        rng = np.random.default_rng(5)
        for _ in range(20):
            m = int(rng.integers(2, 6))
            c = int(rng.integers(1, 8))
            res = [MethodResults(f"m{i}", rng.random(c)) for i in range(m)]
            total = sum(average_rank(res).values())
            assert abs(total - m * (m + 1) / 2) < 1e-9


class TestWilcoxon:
    def test_five_positive_differences(self):
        a = [2.0, 3.0, 4.0, 5.0, 6.0]
        b = [1.0, 1.5, 2.0, 2.5, 3.0]
        assert abs(wilcoxon_one_sided(a, b) - 1 / 32) < 1e-12

    def test_identical_inputs_rejected(self):
        with pytest.raises(ValueError, match="no information"):
            wilcoxon_one_sided([1.0, 2.0], [1.0, 2.0])

    def test_too_few_differences(self):
        with pytest.raises(ValueError, match="at least 5"):
            wilcoxon_one_sided([1, 2, 3, 4], [0, 0, 0, 0])

    def test_matches_enumeration_oracle(self):
        rng = np.random.default_rng(6)
        for trial in range(10):
            n = int(rng.integers(5, 11))
            a = np.round(rng.normal(size=n), 1)
            b = np.round(rng.normal(size=n), 1)
            if ((a - b) != 0).sum() < 5:
                continue
            expected = wilcoxon_by_enumeration(a, b)
            assert abs(wilcoxon_one_sided(a, b, method="exact") - expected) < 1e-12

    def test_mirrored_statistic(self):
        rng = np.random.default_rng(7)
        a = rng.normal(size=8)
        b = rng.normal(size=8)
        p_ab = wilcoxon_one_sided(a, b, method="exact")
        p_ba = wilcoxon_one_sided(b, a, method="exact")
        # complementary tails overlap exactly on the observed statistic
        d = a - b
        ranks_w = np.abs(d)
        order = np.argsort(ranks_w)
        ranks = np.empty(8)
        ranks[order] = np.arange(1, 9)
        w = ranks[d > 0].sum()
        total = 0
        for signs in itertools.product([0, 1], repeat=8):
            if abs(sum(r for r, s in zip(ranks, signs) if s) - w) < 1e-12:
                total += 1
        p_at_w = total / 256
        assert abs(p_ab + p_ba - 1.0 - p_at_w) < 1e-12

    def test_exact_close_to_normal_at_n20(self):
        rng = np.random.default_rng(8)
        for trial in range(5):
            a = rng.normal(size=20)
            b = rng.normal(size=20)
            p_exact = wilcoxon_one_sided(a, b, method="exact")
            p_normal = wilcoxon_one_sided(a, b, method="normal")
            assert abs(p_exact - p_normal) < 0.02


class TestDetectionTable:
    def test_layout(self):
        per_method = {
            "ifor": [0.7, 0.5, 0.9, 0.6, 0.55, 0.65, 0.45],
            "ours": [0.9, 0.8, 0.95, 0.85, 0.9, 0.7, 0.8],
        }
        classes = [f"c{i}" for i in range(7)]
        text, rows = detection_table(per_method, classes)
        lines = text.splitlines()
        assert lines[0].split()[:3] == ["Class", "ifor", "ours"]
        assert len(rows) == 1 + 7 + 2
        assert rows[-2][0] == "Avg. Rank"
        assert rows[-1][0] == "Wilcoxon-p"
        # best method gets the dash
        assert rows[-1][rows[0].index("ours")] == "--"
        assert rows[-1][rows[0].index("ifor")] not in ("--", "n/a")

    def test_short_class_list_marks_na(self):
        per_method = {"a": [0.9, 0.8], "b": [0.5, 0.6]}
        text, rows = detection_table(per_method, ["x", "y"])
        assert rows[-1][1:] == ["--", "n/a"]
