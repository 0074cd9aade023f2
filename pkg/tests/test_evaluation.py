"""
Tests for AUC, ranking metrics and the case-study export.
"""
import csv

import numpy as np
import pytest

from src.ccl_rec.data import load_dataset, substream
from src.ccl_rec.errors import UndefinedMetricError
from src.ccl_rec.evaluation import (
    EvalResult,
    RankedPrediction,
    auc,
    auc_pairwise,
    evaluate,
    export_case_study,
    format_epoch_line,
    format_metrics_line,
    precision_recall_f1_at_k,
)
from src.ccl_rec.model import ModelParams


def ranked(user, item_ids, scores, labels):
    return RankedPrediction(user, np.array(item_ids), np.array(scores, dtype=float), np.array(labels, dtype=float))


class TestAuc:
    def test_example(self):
        assert auc([0.8, 0.6, 0.4], [1, 0, 1]) == pytest.approx(0.5)

    def test_perfect_and_reversed(self):
        assert auc([0.9, 0.8, 0.1], [1, 1, 0]) == 1.0
        assert auc([0.1, 0.2, 0.9], [1, 1, 0]) == 0.0

    def test_ties_count_half(self):
        assert auc([0.5, 0.5], [1, 0]) == pytest.approx(0.5)

    def test_matches_pairwise_definition(self):
        rng = np.random.default_rng(8)
        checked = 0
        for _ in range(150):
            n = int(rng.integers(2, 201))
            scores = rng.integers(0, 6, size=n) / 5.0
            labels = rng.integers(0, 2, size=n)
            if labels.min() == labels.max():
                continue
            assert auc(scores, labels) == pytest.approx(auc_pairwise(scores, labels), abs=1e-12)
            checked += 1
        assert checked >= 100

    def test_against_scalar_double_loop(self):
        rng = np.random.default_rng(21)
        for _ in range(100):
            n = int(rng.integers(2, 60))
            scores = np.round(rng.uniform(size=n), 1)
            labels = np.concatenate([[0, 1], rng.integers(0, 2, size=n - 2)])
            wins = pairs = 0.0
            for i in range(n):
                for j in range(n):
                    if labels[i] == 1 and labels[j] == 0:
                        pairs += 1
                        wins += 1.0 if scores[i] > scores[j] else 0.5 if scores[i] == scores[j] else 0.0
            assert auc(scores, labels) == pytest.approx(wins / pairs, abs=1e-10)

    @pytest.mark.parametrize("labels", [[1, 1, 1], [0, 0, 0]])
    def test_single_class_undefined(self, labels):
        with pytest.raises(UndefinedMetricError):
            auc([0.1, 0.2, 0.3], labels)


class TestRankingMetrics:
    def test_single_user(self):
        p, r, f1 = precision_recall_f1_at_k([ranked(0, [1, 2, 3, 4], [0.9, 0.8, 0.1, 0.2], [1, 0, 0, 1])], k=2)
        assert (p, r, f1) == pytest.approx((0.5, 0.5, 0.5))

    def test_macro_average_then_f1(self):
        predictions = [
            ranked(0, [1, 2], [0.9, 0.8], [1, 1]),
            ranked(1, [3, 4], [0.9, 0.1], [0, 1]),
        ]
        p, r, f1 = precision_recall_f1_at_k(predictions, k=1)
        assert p == pytest.approx(0.5)
        assert r == pytest.approx(0.25)
        assert f1 == pytest.approx(1.0 / 3.0)

    def test_ties_broken_by_item_id(self):
        p, _, _ = precision_recall_f1_at_k([ranked(0, [5, 2], [0.5, 0.5], [1, 0])], k=1)
        assert p == 0.0

    def test_short_lists_use_their_length(self):
        p, r, _ = precision_recall_f1_at_k([ranked(0, [1, 2], [0.3, 0.7], [1, 0])], k=50)
        assert p == pytest.approx(0.5)
        assert r == 1.0

    def test_no_clicks_anywhere(self):
        p, r, f1 = precision_recall_f1_at_k([ranked(0, [1, 2], [0.3, 0.7], [0, 0])], k=1)
        assert (p, r, f1) == (0.0, 0.0, 0.0)

    def test_empty(self):
        with pytest.raises(UndefinedMetricError):
            precision_recall_f1_at_k([], k=5)


class TestEvaluate:
    @pytest.fixture
    def dataset(self, tiny):
        return load_dataset(tiny())

    def test_metrics_in_range(self, dataset):
        params = ModelParams.initialize(dataset.features.dim, substream(0, "init"))
        result = evaluate(params, dataset.features, dataset.heldout, k=5)
        assert result.n_users == len(dataset.heldout)
        assert 0.0 <= result.auc <= 1.0
        assert 0.0 <= result.f1 <= 1.0
        assert result.k == 5

    def test_nothing_to_evaluate(self, dataset):
        params = ModelParams.initialize(dataset.features.dim, substream(0, "init"))
        with pytest.raises(UndefinedMetricError):
            evaluate(params, dataset.features, [], k=5)


class TestFormatting:
    result = EvalResult(auc=0.75, precision=0.5, recall=0.25, f1=1.0 / 3.0, k=10, n_users=4)

    def test_epoch_line(self):
        assert format_epoch_line(2, self.result) == "epoch 2 0.750000 0.500000 0.250000 0.333333"

    def test_metrics_line(self):
        assert format_metrics_line(self.result) == (
            "auc 0.750000 precision@10 0.500000 recall@10 0.250000 f1@10 0.333333"
        )


class TestCaseStudyExport:
    def test_rows(self, tiny, tmp_path):
        config = tiny(n_p=4, n_n=4)
        dataset = load_dataset(config)
        params = ModelParams.initialize(dataset.features.dim, substream(0, "init"))
        path = tmp_path / "export" / "case_study.csv"

        written = export_case_study(params, dataset.features, dataset.heldout, config, path, n_users=2)

        assert written == 18
        with open(path, newline="") as f:
            rows = list(csv.reader(f))
        assert rows[0] == ["user_id", "role", "hardness", "dim_0", "dim_1", "dim_2", "dim_3"]
        body = rows[1:]
        assert len(body) == 18
        assert len({row[0] for row in body}) == 2
        for row in body:
            if row[1] == "query":
                assert row[2] == ""
            else:
                assert row[1] in ("pos", "neg")
                assert 0.0 < float(row[2]) <= 1.0
        assert sum(row[1] == "pos" for row in body) == 8

    def test_same_seed_same_file(self, tiny, tmp_path):
        config = tiny()
        dataset = load_dataset(config)
        params = ModelParams.initialize(dataset.features.dim, substream(0, "init"))
        export_case_study(params, dataset.features, dataset.heldout, config, tmp_path / "a.csv")
        export_case_study(params, dataset.features, dataset.heldout, config, tmp_path / "b.csv")
        assert (tmp_path / "a.csv").read_text() == (tmp_path / "b.csv").read_text()
