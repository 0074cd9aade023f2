"""
Tests for interaction logs, feature tables, instances and the synthetic corpus.
"""
import numpy as np
import pytest
from scipy.stats import pearsonr

from src.ccl_rec.config import SyntheticSpec
from src.ccl_rec.data import (
    FeatureTable,
    Interaction,
    build_eval_instances,
    build_instances,
    generate_synthetic,
    latent_scores,
    load_features,
    load_interactions,
    sample_substitute_pool,
    split_leave_latest,
    substream,
    write_features,
    write_interactions,
)
from src.ccl_rec.errors import CapacityError, FeatureIndexError, ParseError
from src.ccl_rec.evaluation import auc


class TestInteractionLog:
    def test_empty_file(self, tmp_path):
        path = tmp_path / "empty.tsv"
        path.write_text("")
        assert load_interactions(path) == []

    def test_header_and_sorting(self, tmp_path):
        path = tmp_path / "log.tsv"
        path.write_text("user_id\titem_id\ttimestamp\tlabel\n1\t5\t20\t0\n0\t3\t9\t1\n1\t4\t10\t1\n")
        log = load_interactions(path)
        assert log == [Interaction(0, 3, 9, 1), Interaction(1, 4, 10, 1), Interaction(1, 5, 20, 0)]

    def test_bad_label_reports_line(self, tmp_path):
        path = tmp_path / "log.tsv"
        path.write_text("0\t1\t1\t1\n0\t2\t2\t2\n")
        with pytest.raises(ParseError, match=":2: label"):
            load_interactions(path)

    def test_wrong_field_count_skipped(self, tmp_path):
        path = tmp_path / "log.tsv"
        path.write_text("0\t1\t1\t1\n0\t2\t2\n0\t3\t3\t0\n")
        assert [r.item for r in load_interactions(path)] == [1, 3]

    def test_write_then_load(self, tmp_path):
        log = [Interaction(0, 1, 0, 1), Interaction(0, 2, 1, 0), Interaction(3, 7, 5, 1)]
        path = tmp_path / "out" / "log.tsv"
        write_interactions(path, log)
        assert load_interactions(path) == log


class TestFeatureTable:
    def test_binary_round_trip_widens_float32(self, tmp_path):
        rows = np.array([[0.5, -1.25], [3.0, 0.1]])
        path = tmp_path / "f.cclf"
        write_features(path, FeatureTable(rows))
        loaded = load_features(path)
        assert loaded.rows.dtype == np.float64
        np.testing.assert_allclose(loaded.rows, rows.astype(np.float32))
        assert path.read_bytes()[:4] == b"CCLF"

    def test_csv(self, tmp_path):
        path = tmp_path / "f.csv"
        path.write_text("1,2,3\n4,5,6\n")
        table = load_features(path)
        assert (table.n_items, table.dim) == (2, 3)

    def test_bad_magic(self, tmp_path):
        path = tmp_path / "f.cclf"
        path.write_bytes(b"XXXX" + b"\x00" * 8)
        with pytest.raises(ParseError, match="magic"):
            load_features(path)

    def test_lookup_out_of_range(self):
        table = FeatureTable(np.zeros((3, 2)))
        with pytest.raises(FeatureIndexError):
            table.lookup([0, 3])

    def test_rejects_non_finite(self):
        with pytest.raises(ValueError):
            FeatureTable(np.array([[np.nan, 1.0]]))


class TestInstances:
    def test_history_before_exposure(self):
        log = [Interaction(0, 10, 0, 1), Interaction(0, 11, 1, 1), Interaction(0, 12, 2, 0)]
        instances = build_instances(log, n_max=50)
        assert [inst.history for inst in instances] == [(10,), (10, 11)]
        assert instances[0].targets == ((11, 1),)
        assert instances[1].targets == ((12, 0),)

    def test_exposure_before_any_click_dropped(self):
        log = [Interaction(0, 5, 0, 0), Interaction(0, 6, 1, 1)]
        assert build_instances(log, n_max=50) == []

    def test_exposures_sharing_a_prefix_form_one_instance(self):
        log = [
            Interaction(0, 1, 0, 1),
            Interaction(0, 2, 1, 0),
            Interaction(0, 3, 2, 0),
            Interaction(0, 4, 3, 1),
            Interaction(0, 5, 4, 0),
        ]
        first, second = build_instances(log, n_max=50)
        assert first.history == (1,)
        assert first.targets == ((2, 0), (3, 0), (4, 1))
        assert second.history == (1, 4)
        assert second.targets == ((5, 0),)

    def test_truncation_keeps_most_recent(self):
        log = [Interaction(0, i, i, 1) for i in range(60)] + [Interaction(0, 100, 60, 0)]
        last = build_instances(log, n_max=50)[-1]
        assert last.history == tuple(range(10, 60))

    def test_no_target_in_its_history(self):
        log = [Interaction(0, 1, 0, 1), Interaction(0, 1, 1, 0), Interaction(0, 2, 2, 1)]
        for instance in build_instances(log, n_max=50):
            assert not set(instance.target_items) & set(instance.history)

    def test_leave_latest_split(self):
        log = [Interaction(0, i, i, 1) for i in range(3)] + [Interaction(1, 9, 0, 1)]
        train, heldout = split_leave_latest(log, holdout=1)
        assert heldout == [Interaction(0, 2, 2, 1)]
        assert Interaction(1, 9, 0, 1) in train

    def test_eval_instances_use_all_training_clicks(self):
        train = [Interaction(0, 1, 0, 1), Interaction(0, 2, 1, 0), Interaction(0, 3, 2, 1)]
        heldout = [Interaction(0, 4, 3, 0)]
        [instance] = build_eval_instances(train, heldout, n_max=50)
        assert instance.history == (1, 3)
        assert instance.targets == ((4, 0),)


class TestSynthetic:
    def test_deterministic(self):
        spec = SyntheticSpec(n_users=10, n_items=40, dim=4, latent_dim=2, exposures_per_user=8, click_noise_rate=0.0)
        features_a, log_a = generate_synthetic(spec)
        features_b, log_b = generate_synthetic(spec)
        np.testing.assert_array_equal(features_a.rows, features_b.rows)
        assert log_a == log_b

    def test_noise_free_labels_follow_latent_scores(self):
        spec = SyntheticSpec(click_noise_rate=0.0)
        _, log = generate_synthetic(spec)
        scores = latent_scores(spec, log)
        assert auc(scores, [r.label for r in log]) > 0.95

    @pytest.mark.slow
    def test_half_noise_destroys_signal(self):
        spec = SyntheticSpec(n_users=400, click_noise_rate=0.5)
        _, log = generate_synthetic(spec)
        assert len(log) >= 10_000
        r, _ = pearsonr(latent_scores(spec, log), [rec.label for rec in log])
        assert abs(r) < 0.05

    def test_spec_validation(self):
        with pytest.raises(ValueError):
            SyntheticSpec(dim=4, latent_dim=8)
        with pytest.raises(ValueError):
            SyntheticSpec(click_noise_rate=0.7)


class TestSubstitutePool:
    def test_exhaustive_draw_is_a_permutation(self):
        pool = sample_substitute_pool(5, 5, None, substream(1, "pool"))
        assert sorted(pool) == [0, 1, 2, 3, 4]

    def test_empty_pool(self):
        assert sample_substitute_pool(5, 0, None, substream(1, "pool")) == []

    def test_same_seed_same_pool(self):
        assert sample_substitute_pool(100, 10, None, substream(4, "pool", 2)) == sample_substitute_pool(
            100, 10, None, substream(4, "pool", 2)
        )

    def test_exclusions_respected(self):
        pool = sample_substitute_pool(6, 4, {0, 1}, substream(0, "pool"))
        assert sorted(pool) == [2, 3, 4, 5]

    def test_capacity(self):
        with pytest.raises(CapacityError):
            sample_substitute_pool(5, 4, {0, 1}, substream(0, "pool"))

    def test_substreams_are_distinct(self):
        a = substream(7, "augment", 1).random(4)
        b = substream(7, "augment", 2).random(4)
        assert not np.array_equal(a, b)
