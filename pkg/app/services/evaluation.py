"""
Leave-k-subjects-out evaluation of the Monte-Carlo dropout classifier.
"""
import logging
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
import pandas as pd
from sklearn.metrics import confusion_matrix, f1_score

from ..core.config import ModelConfig, derive_seed
from ..core.errors import (
    CoverageNotMonotone,
    EmptyRecords,
    FoldFailed,
    InsufficientSubjects,
    OutOfScale,
)
from ..models.domain import (
    AlphaSweepReport,
    ClassZones,
    Dataset,
    Decision,
    EvalRecord,
    Fold,
    FoldMetrics,
    FoldPlan,
    TrainHistory,
    TrialSample,
)
from .network import predict_batch
from .posterior import decide, posterior_variance, sample_posterior, zone_masses
from .signal_processor import repad
from .statistics import MannWhitneyResult, direction, mann_whitney_u
from .training import train

logger = logging.getLogger(__name__)

ABSTAIN = "abstain"


def binarize_label(valence_raw: float, scale_min: float, scale_max: float) -> str:
    """High/low split at the scale midpoint; the midpoint itself is low"""
    if not scale_min < scale_max:
        raise OutOfScale(f"invalid scale ({scale_min}, {scale_max})")
    if not scale_min <= valence_raw <= scale_max:
        raise OutOfScale(f"valence {valence_raw} outside [{scale_min}, {scale_max}]")
    midpoint = (scale_min + scale_max) / 2.0
    return "high" if valence_raw > midpoint else "low"


def make_folds(subject_ids: Sequence[str], k_out: int, n_folds: int, seed: int,
               n_val_subjects: int = 4) -> FoldPlan:
    """
    Shuffle subjects by seed and hold out disjoint blocks of k_out test subjects;
    each fold also sets aside n_val_subjects validation subjects from the rest.
    """
    subjects = sorted(set(str(s) for s in subject_ids))
    if k_out < 1 or n_folds < 1:
        raise InsufficientSubjects("k_out and n_folds must be positive")
    if n_folds * k_out > len(subjects):
        raise InsufficientSubjects(f"{n_folds} folds x {k_out} test subjects > {len(subjects)} subjects")
    if len(subjects) - k_out - n_val_subjects < 1:
        raise InsufficientSubjects(
            f"{len(subjects)} subjects leave no training subjects after {k_out} test + {n_val_subjects} validation"
        )

    order = list(np.random.default_rng(seed).permutation(len(subjects)))
    shuffled = [subjects[i] for i in order]
    folds = []
    for index in range(n_folds):
        test = shuffled[index * k_out:(index + 1) * k_out]
        rest = [s for s in shuffled if s not in set(test)]
        pick = np.random.default_rng(derive_seed(seed, "val", index)).permutation(len(rest))[:n_val_subjects]
        val = [rest[i] for i in sorted(pick)]
        train_ids = [s for s in rest if s not in set(val)]
        folds.append(Fold(tuple(train_ids), tuple(val), tuple(test)))
    return FoldPlan(tuple(folds), k_out, seed)


def holdout_split(subject_ids: Sequence[str], n_val_subjects: int, seed: int) -> Fold:
    """Train/validation subject split for fitting one model on the whole corpus"""
    subjects = sorted(set(str(s) for s in subject_ids))
    if len(subjects) - n_val_subjects < 1 or n_val_subjects < 1:
        raise InsufficientSubjects(f"{len(subjects)} subjects cannot spare {n_val_subjects} for validation")
    pick = set(np.random.default_rng(derive_seed(seed, "holdout")).permutation(len(subjects))[:n_val_subjects])
    val = tuple(s for i, s in enumerate(subjects) if i in pick)
    return Fold(tuple(s for s in subjects if s not in val), val, ())


def pad_to_training(train_samples: Sequence[TrialSample], *others: Sequence[TrialSample]
                    ) -> Tuple[int, List[List[TrialSample]]]:
    """Re-pad every split to the longest training series; longer series are truncated"""
    if not train_samples:
        raise EmptyRecords("training split is empty")
    pad_length = max(s.prepared.valid_length for s in train_samples)
    splits = [train_samples, *others]
    return pad_length, [[replace(s, prepared=repad(s.prepared, pad_length)) for s in split] for split in splits]


# ----------------------------------------------------------------------
# Metrics
# ----------------------------------------------------------------------

def _metrics(true_labels: Sequence[str], decisions: Sequence[Decision], zones: ClassZones,
             alpha: float) -> FoldMetrics:
    total = len(decisions)
    predicted = [d.outcome for d in decisions]
    committed = [(t, p) for t, p in zip(true_labels, predicted) if p != ABSTAIN]
    n_committed = len(committed)

    accuracy: Optional[float] = None
    macro_f1: Optional[float] = None
    if committed:
        y_true = [t for t, _ in committed]
        y_pred = [p for _, p in committed]
        accuracy = sum(t == p for t, p in committed) / n_committed
        present = [label for label in zones.zone_labels if label in set(y_true) | set(y_pred)]
        macro_f1 = float(f1_score(y_true, y_pred, labels=present, average="macro", zero_division=0))

    columns = list(zones.zone_labels) + [ABSTAIN]
    counts = confusion_matrix(list(true_labels), predicted, labels=columns)[: zones.n_zones]
    confusion = pd.DataFrame(counts, index=pd.Index(zones.zone_labels, name="true"), columns=columns)
    return FoldMetrics(alpha, accuracy, n_committed / total, macro_f1, n_committed, total, confusion)


def _masses(records: Sequence[EvalRecord], zones: ClassZones) -> List[Tuple[np.ndarray, float]]:
    return [(zone_masses(r.posterior, zones), float(r.posterior.samples.mean())) for r in records]


def evaluate_fold(records: Sequence[EvalRecord], zones: ClassZones, alpha: float) -> FoldMetrics:
    if not records:
        raise EmptyRecords("no evaluation records")
    decisions = [decide(m, zones, alpha, mean) for m, mean in _masses(records, zones)]
    return _metrics([r.true_label for r in records], decisions, zones, alpha)


def alpha_sweep(records: Sequence[EvalRecord], zones: ClassZones, alphas: Sequence[float]) -> AlphaSweepReport:
    report = AlphaSweepReport()
    if not alphas:
        return report
    if not records:
        raise EmptyRecords("no evaluation records")
    masses = _masses(records, zones)
    truth = [r.true_label for r in records]
    for alpha in alphas:
        decisions = [decide(m, zones, alpha, mean) for m, mean in masses]
        report.rows.append(_metrics(truth, decisions, zones, alpha))

    by_alpha = sorted(report.rows, key=lambda r: r.alpha)
    for lower, higher in zip(by_alpha, by_alpha[1:]):
        if higher.coverage > lower.coverage:
            raise CoverageNotMonotone(
                f"coverage rose from {lower.coverage} at alpha {lower.alpha} to {higher.coverage} at {higher.alpha}"
            )
    return report


def point_metrics(records: Sequence[EvalRecord], zones: ClassZones) -> Tuple[Optional[float], Optional[float]]:
    """Accuracy and macro-F1 of the single dropout-off prediction (no abstention)"""
    scored = [r for r in records if r.point_estimate is not None]
    if not scored:
        return None, None
    y_true = [r.true_label for r in scored]
    y_pred = [zones.label_of(r.point_estimate) for r in scored]
    present = [label for label in zones.zone_labels if label in set(y_true) | set(y_pred)]
    accuracy = sum(t == p for t, p in zip(y_true, y_pred)) / len(scored)
    return accuracy, float(f1_score(y_true, y_pred, labels=present, average="macro", zero_division=0))


# ----------------------------------------------------------------------
# Cross-validation
# ----------------------------------------------------------------------

@dataclass
class FoldResult:
    fold_index: int
    sweep: AlphaSweepReport
    records: List[EvalRecord]
    history: TrainHistory
    pad_length: int
    point_accuracy: Optional[float]
    point_f1: Optional[float]


@dataclass
class UncertaintyComparison:
    low_label: str
    high_label: str
    low_variances: List[float]
    high_variances: List[float]
    test: Optional[MannWhitneyResult]
    direction: str


@dataclass
class CrossValidationReport:
    folds: List[FoldResult]
    alphas: List[float]
    zones: ClassZones
    n_passes: int
    pooled: AlphaSweepReport
    uncertainty: Optional[UncertaintyComparison]
    variances: List[Tuple[str, str, str, float]] = field(default_factory=list)

    def fold_mean(self, alpha: float) -> Dict[str, Optional[float]]:
        rows = [f.sweep.for_alpha(alpha) for f in self.folds]
        rows = [r for r in rows if r is not None]
        accs = [r.accuracy for r in rows if r.accuracy is not None]
        f1s = [r.macro_f1 for r in rows if r.macro_f1 is not None]
        return {
            "accuracy": float(np.mean(accs)) if accs else None,
            "coverage": float(np.mean([r.coverage for r in rows])) if rows else None,
            "macro_f1": float(np.mean(f1s)) if f1s else None,
        }

    def point_mean(self) -> Dict[str, Optional[float]]:
        accs = [f.point_accuracy for f in self.folds if f.point_accuracy is not None]
        f1s = [f.point_f1 for f in self.folds if f.point_f1 is not None]
        return {
            "accuracy": float(np.mean(accs)) if accs else None,
            "macro_f1": float(np.mean(f1s)) if f1s else None,
        }

    @property
    def records(self) -> List[EvalRecord]:
        return [r for f in self.folds for r in f.records]


def _run_fold(fold_index: int, fold: Fold, dataset: Dataset, config: ModelConfig, n_passes: int,
              alphas: Sequence[float], seed: int, zones: ClassZones) -> FoldResult:
    fold_seed = derive_seed(seed, "fold", fold_index)
    train_samples = dataset.for_subjects(fold.train_subject_ids)
    val_samples = dataset.for_subjects(fold.val_subject_ids)
    test_samples = dataset.for_subjects(fold.test_subject_ids)
    if not test_samples:
        raise EmptyRecords(f"no trials for test subjects {fold.test_subject_ids}")

    pad_length, (train_samples, val_samples, test_samples) = pad_to_training(train_samples, val_samples, test_samples)
    fold_config = config.model_copy(update={"input_length": pad_length})
    logger.info(
        f"Fold {fold_index}: {len(train_samples)} train / {len(val_samples)} val / {len(test_samples)} test trials, "
        f"pad length {pad_length}"
    )
    params, history = train(fold_config, train_samples, val_samples, derive_seed(fold_seed, "train"))

    points = predict_batch([s.prepared for s in test_samples], params, fold_config)
    records = []
    for sample, point in zip(test_samples, points):
        posterior = sample_posterior(
            sample.prepared, params, fold_config, n_passes,
            derive_seed(fold_seed, "posterior", sample.subject_id, sample.trial_id),
        )
        records.append(EvalRecord(sample.subject_id, sample.trial_id, zones.label_of(sample.target), posterior, float(point)))

    sweep = alpha_sweep(records, zones, alphas)
    point_accuracy, point_f1 = point_metrics(records, zones)
    for row in sweep.rows:
        if row.n_committed == 0:
            logger.warning(f"Fold {fold_index}: no committed predictions at alpha {row.alpha}")
    return FoldResult(fold_index, sweep, records, history, pad_length, point_accuracy, point_f1)


def _run_fold_job(args) -> FoldResult:
    return _run_fold(*args)


def compare_uncertainty(records: Sequence[EvalRecord], zones: ClassZones) -> Optional[UncertaintyComparison]:
    """Posterior variance of the lowest vs the highest zone's trials"""
    if not records or records[0].posterior.n_passes < 2:
        return None
    low_label, high_label = zones.zone_labels[0], zones.zone_labels[-1]
    low = [posterior_variance(r.posterior) for r in records if r.true_label == low_label]
    high = [posterior_variance(r.posterior) for r in records if r.true_label == high_label]
    if not low or not high:
        return UncertaintyComparison(low_label, high_label, low, high, None, "n/a")
    test = mann_whitney_u(low, high)
    return UncertaintyComparison(low_label, high_label, low, high, test, direction(low, high, low_label, high_label))


def run_cross_validation(dataset: Dataset, config: ModelConfig, fold_plan: FoldPlan, n_passes: int,
                         alphas: Sequence[float], seed: int, zones: Optional[ClassZones] = None,
                         workers: int = 1) -> CrossValidationReport:
    """
    Train, sample posteriors and score every fold.

    Args:
        dataset: Prepared trials; every subject named by the plan must be present
        config: Network and optimiser settings shared by all folds
        fold_plan: Subject-disjoint train/validation/test splits
        n_passes: Dropout-on forward passes per test trial
        alphas: Abstention thresholds to score, each in [0.5, 1]
        seed: Run seed; fold seeds derive from (seed, fold index)
        zones: Valence zones, the binary low/high split when None
        workers: Folds trained in parallel processes when > 1

    Returns:
        CrossValidationReport with per-fold and pooled alpha sweeps, the point-estimate
        baseline and the posterior-variance comparison. Serial and parallel runs are identical.

    Raises:
        InsufficientSubjects if the plan names unknown subjects, FoldFailed if a fold cannot be trained
    """
    zones = zones or ClassZones.binary()
    known = set(dataset.subject_ids)
    for fold in fold_plan.folds:
        missing = set(fold.train_subject_ids + fold.val_subject_ids + fold.test_subject_ids) - known
        if missing:
            raise InsufficientSubjects(f"dataset has no trials for subjects {sorted(missing)}")

    jobs = [(i, fold, dataset, config, n_passes, list(alphas), seed, zones) for i, fold in enumerate(fold_plan.folds)]
    results: List[FoldResult] = []
    if workers > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            futures = [pool.submit(_run_fold_job, job) for job in jobs]
            for index, future in enumerate(futures):
                try:
                    results.append(future.result())
                except Exception as e:
                    raise FoldFailed(index, e) from e
    else:
        for job in jobs:
            try:
                results.append(_run_fold_job(job))
            except Exception as e:
                raise FoldFailed(job[0], e) from e

    records = [r for f in results for r in f.records]
    pooled = alpha_sweep(records, zones, list(alphas))
    uncertainty = compare_uncertainty(records, zones)
    variances = []
    if n_passes >= 2:
        variances = [(r.subject_id, r.trial_id, r.true_label, posterior_variance(r.posterior)) for r in records]
    logger.info(f"Cross-validation finished: {len(results)} folds, {len(records)} test trials")
    return CrossValidationReport(results, list(alphas), zones, n_passes, pooled, uncertainty, variances)
