import numpy as np
import pandas as pd
import pytest

from app.core.config import DEFAULT_ALPHAS
from app.core.errors import EmptyRecords, FoldFailed, InsufficientSubjects, NonFiniteLoss, OutOfScale
from app.models.domain import ClassZones, EvalRecord, ValencePosterior
from app.services import evaluation
from app.services.evaluation import (
    alpha_sweep,
    binarize_label,
    evaluate_fold,
    holdout_split,
    make_folds,
    point_metrics,
    run_cross_validation,
)
from app.services.reporting import report_frame

from tests.helpers import point_mass_record


@pytest.mark.parametrize(
    "raw, lo, hi, label",
    [(7, 1, 9, "high"), (2, 1, 5, "low"), (5, 1, 9, "low"), (3, 1, 5, "low"), (3.5, 1, 5, "high")],
)
def test_binarize_label(raw, lo, hi, label):
    assert binarize_label(raw, lo, hi) == label


@pytest.mark.parametrize("raw, lo, hi", [(11, 1, 9), (0, 1, 9), (3, 5, 5)])
def test_binarize_label_out_of_scale(raw, lo, hi):
    with pytest.raises(OutOfScale):
        binarize_label(raw, lo, hi)


class TestFolds:
    def test_forty_subjects(self):
        subjects = [f"S{i:02d}" for i in range(40)]
        plan = make_folds(subjects, k_out=4, n_folds=10, seed=1)

        tested = [s for fold in plan.folds for s in fold.test_subject_ids]
        assert sorted(tested) == sorted(subjects)
        for fold in plan.folds:
            train, val, test = map(set, (fold.train_subject_ids, fold.val_subject_ids, fold.test_subject_ids))
            assert len(train) == 32 and len(val) == 4 and len(test) == 4
            assert not (train & val or train & test or val & test)

    def test_twenty_five_subjects_leave_five_untested(self):
        subjects = [f"S{i:02d}" for i in range(25)]
        plan = make_folds(subjects, k_out=2, n_folds=10, seed=0)

        tested = {s for fold in plan.folds for s in fold.test_subject_ids}
        assert len(tested) == 20
        assert len(plan) == 10

    def test_same_seed_same_plan(self):
        subjects = [f"S{i:02d}" for i in range(12)]
        assert make_folds(subjects, 2, 5, seed=3) == make_folds(subjects, 2, 5, seed=3)
        assert make_folds(subjects, 2, 5, seed=3) != make_folds(subjects, 2, 5, seed=4)

    def test_leave_one_subject_out(self):
        subjects = [f"S{i}" for i in range(8)]
        plan = make_folds(subjects, k_out=1, n_folds=8, seed=0, n_val_subjects=2)
        assert sorted(s for f in plan.folds for s in f.test_subject_ids) == sorted(subjects)

    def test_insufficient_subjects(self):
        with pytest.raises(InsufficientSubjects):
            make_folds([f"S{i}" for i in range(25)], k_out=3, n_folds=10, seed=0)

    def test_holdout_split(self):
        fold = holdout_split([f"S{i}" for i in range(10)], 4, seed=2)
        assert len(fold.val_subject_ids) == 4
        assert len(fold.train_subject_ids) == 6
        assert fold.test_subject_ids == ()


class TestMetrics:
    def test_counting_example(self, binary_zones):
        records = (
            [point_mass_record(0.9, "high") for _ in range(6)]
            + [point_mass_record(0.9, "low") for _ in range(2)]
            + [EvalRecord("s", "t", "high", ValencePosterior([0.1] * 5 + [0.9] * 5)) for _ in range(2)]
        )

        metrics = evaluate_fold(records, binary_zones, 0.9)

        assert metrics.coverage == pytest.approx(0.8)
        assert metrics.accuracy == pytest.approx(0.75)
        assert metrics.n_committed == 8 and metrics.n_total == 10
        assert metrics.confusion.loc["high", "abstain"] == 2
        assert metrics.confusion.loc["low", "high"] == 2
        assert metrics.confusion.loc["high", "high"] == 6
        assert int(metrics.confusion.values.sum()) == 10

    def test_point_masses_on_true_zone(self, binary_zones):
        records = [point_mass_record(0.8, "high"), point_mass_record(0.2, "low")]
        for alpha in DEFAULT_ALPHAS:
            metrics = evaluate_fold(records, binary_zones, alpha)
            assert metrics.accuracy == 1.0 and metrics.coverage == 1.0 and metrics.macro_f1 == 1.0

    def test_nothing_committed_has_no_accuracy(self, binary_zones):
        records = [EvalRecord("s", "t", "low", ValencePosterior([0.1, 0.9]))]
        metrics = evaluate_fold(records, binary_zones, 0.9)
        assert metrics.coverage == 0.0
        assert metrics.accuracy is None and metrics.macro_f1 is None

    def test_constant_labels(self, binary_zones):
        records = [point_mass_record(0.9, "high") for _ in range(4)]
        metrics = evaluate_fold(records, binary_zones, 0.5)
        assert metrics.accuracy == 1.0
        assert metrics.macro_f1 == 1.0

    def test_empty_records(self, binary_zones):
        with pytest.raises(EmptyRecords):
            evaluate_fold([], binary_zones, 0.5)

    def test_point_metrics(self, binary_zones):
        records = [
            EvalRecord("s", "1", "high", ValencePosterior([0.9]), point_estimate=0.7),
            EvalRecord("s", "2", "low", ValencePosterior([0.9]), point_estimate=0.6),
        ]
        accuracy, f1 = point_metrics(records, binary_zones)
        assert accuracy == 0.5
        assert f1 == pytest.approx((2 / 3 + 0.0) / 2)


class TestAlphaSweep:
    def test_mass_exactly_point_nine(self, binary_zones):
        samples = [0.8] * 9 + [0.2]
        records = [EvalRecord("s", str(i), "high", ValencePosterior(samples)) for i in range(5)]

        report = alpha_sweep(records, binary_zones, [0.5, 0.9, 0.95])

        assert report.alphas == [0.5, 0.9, 0.95]
        assert report.for_alpha(0.5).accuracy == report.for_alpha(0.9).accuracy == 1.0
        assert report.coverages == [1.0, 1.0, 0.0]
        assert report.for_alpha(0.95).accuracy is None

    def test_empty_alpha_list(self, binary_zones):
        assert len(alpha_sweep([point_mass_record(0.2, "low")], binary_zones, [])) == 0

    def test_coverage_law_on_random_posterior_sets(self, binary_zones):
        rng = np.random.default_rng(11)
        for _ in range(100):
            records = []
            for i in range(int(rng.integers(1, 20))):
                centre = rng.uniform(0, 1)
                samples = np.clip(rng.normal(centre, rng.uniform(0.01, 0.4), int(rng.integers(1, 60))), 0, 1)
                records.append(EvalRecord("s", str(i), rng.choice(["low", "high"]), ValencePosterior(samples)))

            report = alpha_sweep(records, binary_zones, DEFAULT_ALPHAS)

            assert report.coverages[0] == 1.0
            assert all(a >= b for a, b in zip(report.coverages, report.coverages[1:]))
            for row in report.rows:
                assert 0.0 <= row.coverage <= 1.0
                assert row.n_committed + int(row.confusion["abstain"].sum()) == row.n_total
                if row.accuracy is not None:
                    assert 0.0 <= row.accuracy <= 1.0 and 0.0 <= row.macro_f1 <= 1.0

    def test_requested_order_is_kept(self, binary_zones):
        report = alpha_sweep([point_mass_record(0.2, "low")], binary_zones, [0.9, 0.5, 0.7])
        assert report.alphas == [0.9, 0.5, 0.7]


class TestCrossValidation:
    def _run(self, dataset, config, workers=1, seed=3):
        plan = make_folds(dataset.subject_ids, k_out=2, n_folds=2, seed=seed, n_val_subjects=2)
        return run_cross_validation(dataset, config, plan, n_passes=5, alphas=[0.5, 0.75, 0.9], seed=seed,
                                    workers=workers)

    def test_report_shape(self, tiny_dataset, tiny_config):
        report = self._run(tiny_dataset, tiny_config)

        assert len(report.folds) == 2
        assert all(len(f.records) == 4 for f in report.folds)
        assert report.pooled.for_alpha(0.5).coverage == 1.0
        assert len(report.variances) == 8
        assert report.uncertainty is None or report.uncertainty.direction
        for fold in report.folds:
            assert len(fold.history.epochs) == tiny_config.epochs
            assert fold.point_accuracy is not None

    def test_same_seed_same_report(self, tiny_dataset, tiny_config):
        a = report_frame(self._run(tiny_dataset, tiny_config))
        b = report_frame(self._run(tiny_dataset, tiny_config))
        pd.testing.assert_frame_equal(a, b)

    def test_parallel_matches_serial(self, tiny_dataset, tiny_config):
        serial = report_frame(self._run(tiny_dataset, tiny_config, workers=1))
        parallel = report_frame(self._run(tiny_dataset, tiny_config, workers=2))
        pd.testing.assert_frame_equal(serial, parallel)

    def test_failed_fold_is_named(self, tiny_dataset, tiny_config, monkeypatch):
        def explode(*args, **kwargs):
            raise NonFiniteLoss(0, float("nan"))

        monkeypatch.setattr(evaluation, "train", explode)
        with pytest.raises(FoldFailed) as info:
            self._run(tiny_dataset, tiny_config)
        assert info.value.fold_index == 0
        assert isinstance(info.value.cause, NonFiniteLoss)

    def test_fold_subjects_must_exist(self, tiny_dataset, tiny_config):
        plan = make_folds([f"X{i}" for i in range(8)], 2, 2, seed=0, n_val_subjects=2)
        with pytest.raises(InsufficientSubjects):
            run_cross_validation(tiny_dataset, tiny_config, plan, 5, [0.5], seed=0)

    def test_multi_zone_labels_follow_zones(self, tiny_dataset, tiny_config):
        zones = ClassZones((0.4, 0.6), ("low", "neutral", "high"))
        plan = make_folds(tiny_dataset.subject_ids, 2, 1, seed=0, n_val_subjects=2)
        report = run_cross_validation(tiny_dataset, tiny_config, plan, 5, [0.5], seed=0, zones=zones)
        assert {r.true_label for r in report.records} <= {"low", "high"}
        assert list(report.pooled.rows[0].confusion.columns) == ["low", "neutral", "high", "abstain"]
