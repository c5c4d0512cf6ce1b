import itertools
import math

import numpy as np
import pytest
from numpy.testing import assert_allclose

from src.evaluation import (active_prototypes, cluster_acc, error_taxonomy, evaluate, hungarian,
                            marginal_kl, matched_labels, pred_histogram)
from src.exceptions import EmptyEvaluationError


PERMUTATIONS = {n: np.array(list(itertools.permutations(range(n)))) for n in range(1, 8)}


def brute_force_cost(cost: np.ndarray) -> float:
    perms = PERMUTATIONS[len(cost)]
    return float(cost[np.arange(len(cost)), perms].sum(axis=1).min())


def brute_force_acc(y_true: np.ndarray, y_pred: np.ndarray, size: int) -> float:
    counts = np.zeros((size, size), dtype=np.int64)
    np.add.at(counts, (y_pred, y_true), 1)
    perms = PERMUTATIONS[size]
    return float(counts[np.arange(size), perms].sum(axis=1).max()) / len(y_true)


class TestHungarian:
    def test_matches_exhaustive_search(self):
        rng = np.random.default_rng(0)
        for _ in range(1000):
            n = int(rng.integers(1, 8))
            cost = rng.integers(-20, 21, size=(n, n)).astype(np.float64)
            assignment, total = hungarian(cost)
            assert sorted(assignment.values()) == list(range(n))
            assert total == brute_force_cost(cost)
            assert total == sum(cost[r, c] for r, c in assignment.items())

    def test_rejects_rectangular(self):
        with pytest.raises(ValueError):
            hungarian(np.zeros((2, 3)))

    def test_rejects_non_finite(self):
        with pytest.raises(ValueError):
            hungarian(np.array([[0.0, np.inf], [1.0, 0.0]]))


class TestClusterAcc:
    def test_matches_brute_force(self):
        rng = np.random.default_rng(1)
        for _ in range(1000):
            k = int(rng.integers(1, 8))
            n = int(rng.integers(1, 30))
            y_true = rng.integers(0, k, n)
            y_pred = rng.integers(0, k, n)
            old = set(rng.choice(k, size=int(rng.integers(0, k + 1)), replace=False).tolist())
            report = cluster_acc(y_true, y_pred, old, k_pred=k, num_classes=k)
            assert report.acc_all == brute_force_acc(y_true, y_pred, k)
            matched = matched_labels(y_pred, report.permutation)
            taxonomy = error_taxonomy(y_true, matched, old)
            assert abs(taxonomy.total + report.acc_all - 1.0) <= 1e-12

    def test_perfect_up_to_relabelling(self):
        report = cluster_acc([0, 0, 1, 1, 2, 2], [2, 2, 0, 0, 1, 1], {0}, k_pred=3)
        assert report.acc_all == 1.0
        assert report.permutation == {0: 1, 1: 2, 2: 0}
        assert report.nmi == pytest.approx(1.0)
        assert report.ari == pytest.approx(1.0)

    def test_invariant_to_prediction_relabelling(self, rng):
        y_true = rng.integers(0, 5, 60)
        y_pred = rng.integers(0, 6, 60)
        relabel = rng.permutation(6)
        first = cluster_acc(y_true, y_pred, {0, 1}, k_pred=6)
        second = cluster_acc(y_true, relabel[y_pred], {0, 1}, k_pred=6)
        assert first.acc_all == second.acc_all

    def test_extra_prototypes_do_not_change_accuracy(self, rng):
        y_true = rng.integers(0, 4, 50)
        y_pred = rng.integers(0, 4, 50)
        narrow = cluster_acc(y_true, y_pred, {0, 1}, k_pred=4)
        wide = cluster_acc(y_true, y_pred, {0, 1}, k_pred=9)
        assert narrow.acc_all == wide.acc_all

    def test_splits_use_the_global_matching(self):
        # one global map (0->0, 1->1) scores old perfectly and new at zero
        y_true = np.array([0, 0, 0, 1, 1])
        y_pred = np.array([0, 0, 0, 0, 0])
        report = cluster_acc(y_true, y_pred, {0}, k_pred=2)
        assert report.acc_all == pytest.approx(0.6)
        assert report.acc_old == 1.0
        assert report.acc_new == 0.0
        assert (report.num_old, report.num_new) == (3, 2)

    def test_rematched_splits(self):
        y_true = np.array([0, 0, 1, 1])
        y_pred = np.array([1, 1, 1, 1])
        report = cluster_acc(y_true, y_pred, {0}, k_pred=2, rematch_splits=True)
        assert report.acc_all == 0.5
        assert report.acc_old == 1.0
        assert report.acc_new == 1.0

    def test_empty(self):
        with pytest.raises(EmptyEvaluationError):
            cluster_acc([], [], {0}, k_pred=2)

    def test_prediction_out_of_range(self):
        with pytest.raises(ValueError):
            cluster_acc([0, 1], [0, 2], {0}, k_pred=2)


class TestTaxonomy:
    def test_four_way_split(self):
        # classes 0,1 old; 2,3 new
        y_true = np.array([0, 0, 1, 2, 3, 3, 2, 0])
        matched = np.array([1, 2, 1, 0, 2, 3, 2, 0])
        taxonomy = error_taxonomy(y_true, matched, {0, 1})
        assert taxonomy.true_old == 1 / 8
        assert taxonomy.false_new == 1 / 8
        assert taxonomy.false_old == 1 / 8
        assert taxonomy.true_new == 1 / 8

    def test_padding_ids_count_as_new(self):
        taxonomy = error_taxonomy(np.array([0, 1]), np.array([5, 1]), {0})
        assert taxonomy.false_new == 0.5
        assert taxonomy.total == 0.5

    def test_empty(self):
        with pytest.raises(EmptyEvaluationError):
            error_taxonomy([], [], {0})


class TestHistogramAndActivity:
    def test_histogram_mass(self):
        hist = pred_histogram([0, 0, 1, 2], [0, 1, 1, 1], size=4)
        assert hist.predicted_counts == [1, 3, 0, 0]
        assert hist.true_counts == [2, 1, 1, 0]

    def test_marginal_kl_zero_when_matched(self):
        assert marginal_kl([5, 5, 5], [5, 5, 5]) == pytest.approx(0.0, abs=1e-12)

    def test_marginal_kl_of_full_collapse(self):
        counts = [100] + [0] * 9
        assert marginal_kl(counts, [10] * 10) == pytest.approx(math.log(10), rel=1e-6)

    def test_active_prototypes(self):
        y_pred = [0, 0, 0, 3, 3, 5]
        assert active_prototypes(y_pred, k_pred=8) == 3
        assert active_prototypes(y_pred, k_pred=8, min_count=2) == 2


class TestEvaluate:
    def test_report_is_consistent(self, rng):
        y_true = rng.integers(0, 6, 80)
        y_pred = rng.integers(0, 8, 80)
        report = evaluate(y_true, y_pred, {0, 1, 2}, k_pred=8, num_classes=6)
        assert report.num_prototypes == 8
        assert len(report.histogram.predicted_counts) == 8
        assert sum(report.histogram.predicted_counts) == 80
        assert abs(report.taxonomy.total + report.acc.acc_all - 1.0) <= 1e-12
        assert report.marginal_kl >= 0.0
        assert report.active_prototypes == len(np.unique(y_pred))

    def test_serialized_report_keys(self):
        report = evaluate([0, 1, 1], [1, 0, 0], {0}, k_pred=2)
        data = report.serialize()
        assert set(data) == {"acc", "taxonomy", "histogram", "active_prototypes", "num_prototypes",
                             "marginal_kl", "extra"}
        assert data["acc"]["permutation"] == {"0": 1, "1": 0}
        assert_allclose(data["acc"]["acc_all"], 1.0)
