import numpy as np
import pytest

from causaldg.errors import ContractError, MetricUndefinedError
from causaldg.metrics import auc, average_precision, drop, split_report


def auc_bruteforce(scores, labels):
    # All positive-negative pairs: win = 1, tie = 1/2.
    scores = np.asarray(scores, dtype=float)
    labels = np.asarray(labels)
    pos = scores[labels == 1]
    neg = scores[labels == 0]
    total = 0.0
    for p in pos:
        for n in neg:
            if p > n:
                total += 1.0
            elif p == n:
                total += 0.5
    return total / (len(pos) * len(neg))


def ap_bruteforce(scores, labels):
    scores = np.asarray(scores, dtype=float)
    labels = np.asarray(labels)
    order = np.argsort(-scores, kind="stable")
    ranked = labels[order]
    n_pos = ranked.sum()
    ap = 0.0
    hits = 0
    for k, lab in enumerate(ranked, start=1):
        if lab == 1:
            hits += 1
            ap += (hits / k) * (1.0 / n_pos)
    return ap


class TestAuc:
    def test_separated_scores(self):
        assert auc([0.9, 0.8, 0.1, 0.2], [1, 1, 0, 0]) == 1.0

    def test_all_ties(self):
        assert auc([0.5, 0.5, 0.5, 0.5], [1, 0, 1, 0]) == 0.5

    def test_worked_example(self):
        # pairs: (0.9 vs 0.8) win, (0.3 vs 0.8) loss
        assert auc([0.9, 0.8, 0.3], [1, 0, 1]) == pytest.approx(0.5, abs=1e-12)

    def test_reversed_scores(self):
        assert auc([0.1, 0.2, 0.9], [1, 1, 0]) == 0.0

    def test_single_class_raises(self):
        with pytest.raises(MetricUndefinedError):
            auc([0.1, 0.2], [1, 1])

    def test_matches_bruteforce_oracle(self):
        rng = np.random.default_rng(7)
        for _ in range(1000):
            n = rng.integers(2, 51)
            labels = rng.integers(0, 2, n)
            if labels.min() == labels.max():
                labels[0] = 1 - labels[0]
            scores = np.round(rng.random(n), 2)  # rounding forces ties
            assert auc(scores, labels) == pytest.approx(auc_bruteforce(scores, labels), abs=1e-9)

    def test_monotone_transform_invariance(self):
        rng = np.random.default_rng(11)
        for _ in range(50):
            n = int(rng.integers(4, 30))
            labels = rng.integers(0, 2, n)
            if labels.min() == labels.max():
                labels[0] = 1 - labels[0]
            scores = rng.normal(size=n)
            base = auc(scores, labels)
            assert auc(3.0 * scores + 2.0, labels) == base
            assert auc(np.exp(scores), labels) == base
            assert auc(np.arctan(scores), labels) == base


class TestAveragePrecision:
    def test_positives_first(self):
        assert average_precision([0.9, 0.8, 0.2, 0.1], [1, 1, 0, 0]) == 1.0

    def test_one_positive_last(self):
        for n in (3, 5, 10):
            scores = np.linspace(1.0, 0.1, n)
            labels = np.zeros(n, dtype=int)
            labels[-1] = 1
            assert average_precision(scores, labels) == pytest.approx(1.0 / n, abs=1e-12)

    def test_worked_example(self):
        # (1/1)*(1/2) + (2/3)*(1/2)
        assert average_precision([0.9, 0.8, 0.3], [1, 0, 1]) == pytest.approx(5.0 / 6.0, abs=1e-12)

    def test_no_positive_raises(self):
        with pytest.raises(MetricUndefinedError):
            average_precision([0.5, 0.2], [0, 0])

    def test_matches_bruteforce_oracle(self):
        rng = np.random.default_rng(13)
        for _ in range(1000):
            n = int(rng.integers(2, 51))
            labels = rng.integers(0, 2, n)
            if labels.sum() == 0:
                labels[0] = 1
            scores = np.round(rng.random(n), 2)
            assert average_precision(scores, labels) == pytest.approx(ap_bruteforce(scores, labels), abs=1e-9)


class TestDrop:
    def test_printed_reference_values(self):
        assert drop(83.94, 76.09) == pytest.approx(9.35, abs=0.01)
        assert drop(73.02, 64.71) == pytest.approx(11.38, abs=0.01)

    def test_equal_means(self):
        assert drop(0.83, 0.83) == 0.0

    def test_nonpositive_id_mean(self):
        with pytest.raises(ContractError):
            drop(0.0, 0.5)
        with pytest.raises(ContractError):
            drop(-1.0, 0.5)


class TestSplitReport:
    def test_degenerate_class_excluded(self):
        scores = np.array([[0.9, 0.4], [0.1, 0.6], [0.8, 0.5]])
        labels = np.array([[1, 1], [0, 1], [1, 1]])  # second class has no negatives
        report = split_report(scores, labels, ["a", "b"], "ID")
        assert report.per_class_auc["a"] == 1.0
        assert np.isnan(report.per_class_auc["b"])
        assert report.mean_auc == 1.0  # NaN excluded from the mean

    def test_row_count_matches_classes(self):
        rng = np.random.default_rng(3)
        scores = rng.random((20, 5))
        labels = rng.integers(0, 2, (20, 5))
        labels[0] = 1  # ensure both values per class
        labels[1] = 0
        report = split_report(scores, labels, [f"c{i}" for i in range(5)], "ID")
        assert len(report.per_class_auc) == 5
        assert len(report.per_class_ap) == 5
