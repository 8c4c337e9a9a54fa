"""
Evaluation report files.

report.csv        fold,alpha,accuracy,coverage,macro_f1,n_committed,n_total
                  (one row per fold and alpha, plus `mean` and `pooled` rows)
confusion_<a>.csv pooled confusion counts per alpha, with an abstain column
uncertainty.csv   subject,trial,true_class,posterior_variance
point.csv         fold,accuracy,macro_f1 of the dropout-off prediction
posteriors/       <subject>_<trial>.csv (pass_index,y_hat) per test trial, summary.csv
summary.txt       rebuilt from the CSVs above, so `report` can regenerate it
"""
import logging
from pathlib import Path
from typing import List, Optional, Sequence

import numpy as np
import pandas as pd

from ..core.config import iter_alpha_labels, settings
from ..core.errors import EmptyInput, MissingReport
from .evaluation import CrossValidationReport
from .posterior import PosteriorSummary, write_posterior_csv
from .statistics import direction, mann_whitney_u

logger = logging.getLogger(__name__)

REPORT_COLUMNS = ["fold", "alpha", "accuracy", "coverage", "macro_f1", "n_committed", "n_total"]
UNCERTAINTY_COLUMNS = ["subject", "trial", "true_class", "posterior_variance"]
POINT_COLUMNS = ["fold", "accuracy", "macro_f1"]
POSTERIOR_SUMMARY_COLUMNS = ["subject", "trial", "true_class", "mean", "median", "variance", "lower", "upper",
                             "point_estimate"]


def report_frame(report: CrossValidationReport) -> pd.DataFrame:
    rows = []
    for fold in report.folds:
        for m in fold.sweep.rows:
            rows.append([str(fold.fold_index), m.alpha, m.accuracy, m.coverage, m.macro_f1, m.n_committed, m.n_total])
    for alpha in report.alphas:
        mean = report.fold_mean(alpha)
        pooled = report.pooled.for_alpha(alpha)
        rows.append(["mean", alpha, mean["accuracy"], mean["coverage"], mean["macro_f1"],
                     pooled.n_committed, pooled.n_total])
        rows.append(["pooled", alpha, pooled.accuracy, pooled.coverage, pooled.macro_f1,
                     pooled.n_committed, pooled.n_total])
    return pd.DataFrame(rows, columns=REPORT_COLUMNS)


def uncertainty_frame(report: CrossValidationReport) -> pd.DataFrame:
    return pd.DataFrame(report.variances, columns=UNCERTAINTY_COLUMNS)


def point_frame(report: CrossValidationReport) -> pd.DataFrame:
    rows = [[str(f.fold_index), f.point_accuracy, f.point_f1] for f in report.folds]
    mean = report.point_mean()
    rows.append(["mean", mean["accuracy"], mean["macro_f1"]])
    return pd.DataFrame(rows, columns=POINT_COLUMNS)


def write_evaluation_report(report: CrossValidationReport, out_dir: Path) -> List[Path]:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    written = []

    path = out_dir / "report.csv"
    report_frame(report).to_csv(path, index=False)
    written.append(path)

    for alpha, label in zip(report.alphas, iter_alpha_labels(report.alphas)):
        path = out_dir / f"confusion_{label}.csv"
        report.pooled.for_alpha(alpha).confusion.to_csv(path)
        written.append(path)

    path = out_dir / "uncertainty.csv"
    uncertainty_frame(report).to_csv(path, index=False)
    written.append(path)

    path = out_dir / "point.csv"
    point_frame(report).to_csv(path, index=False)
    written.append(path)

    written.extend(write_posteriors(report, out_dir / "posteriors"))

    written.append(write_summary(out_dir, zone_labels=report.zones.zone_labels))
    logger.info(f"Wrote {len(written)} report files to {out_dir}")
    return written


def write_posteriors(report: CrossValidationReport, out_dir: Path) -> List[Path]:
    """
    Dump every test trial's posterior samples and a per-trial summary.

    Args:
        report: finished cross-validation run
        out_dir: target directory, created if missing

    Returns:
        Paths of `<subject>_<trial>.csv` (pass_index,y_hat) files followed by `summary.csv`.
    """
    out_dir = Path(out_dir)
    written, rows = [], []
    for record in report.records:
        written.append(write_posterior_csv(record.posterior, out_dir / f"{record.subject_id}_{record.trial_id}.csv"))
        s = PosteriorSummary.of(record.posterior)
        rows.append([record.subject_id, record.trial_id, record.true_label, s.mean, s.median, s.variance,
                     s.lower, s.upper, record.point_estimate])
    out_dir.mkdir(parents=True, exist_ok=True)
    path = out_dir / "summary.csv"
    pd.DataFrame(rows, columns=POSTERIOR_SUMMARY_COLUMNS).to_csv(path, index=False)
    written.append(path)
    return written


# ----------------------------------------------------------------------
# Summary
# ----------------------------------------------------------------------

def _fmt(value) -> str:
    if value is None or (isinstance(value, float) and np.isnan(value)):
        return "n/a"
    return f"{float(value):.4f}"


def _row_for(frame: pd.DataFrame, fold: str, alpha: float) -> Optional[pd.Series]:
    hit = frame[(frame["fold"] == fold) & (np.isclose(frame["alpha"].astype(float), alpha))]
    return None if hit.empty else hit.iloc[0]


def uncertainty_line(uncertainty: pd.DataFrame, zone_labels: Sequence[str]) -> str:
    low_label, high_label = zone_labels[0], zone_labels[-1]
    low = uncertainty.loc[uncertainty["true_class"] == low_label, "posterior_variance"].astype(float).tolist()
    high = uncertainty.loc[uncertainty["true_class"] == high_label, "posterior_variance"].astype(float).tolist()
    prefix = f"Mann-Whitney posterior variance ({low_label} vs {high_label}):"
    try:
        result = mann_whitney_u(low, high)
    except EmptyInput:
        return f"{prefix} U=n/a p=n/a direction=n/a"
    return (f"{prefix} U={result.u_a:.1f} p={result.p_value:.4g} "
            f"direction={direction(low, high, low_label, high_label)} ({result.method})")


def summary_text(report: pd.DataFrame, uncertainty: pd.DataFrame, point: Optional[pd.DataFrame],
                 zone_labels: Sequence[str] = ("low", "high")) -> str:
    report = report.assign(fold=report["fold"].astype(str))
    folds = sorted({f for f in report["fold"] if f not in ("mean", "pooled")})
    alphas = sorted(set(report["alpha"].astype(float)))
    n_trials = int(_row_for(report, "pooled", alphas[0])["n_total"]) if alphas else 0

    lines = [f"{settings.app_name} evaluation summary", f"folds: {len(folds)}  test trials: {n_trials}", ""]
    lines.append(f"{'alpha':<7}{'accuracy':>10}{'coverage':>10}{'macro_f1':>10}   (fold mean)")
    for alpha, label in zip(alphas, iter_alpha_labels(alphas)):
        row = _row_for(report, "mean", alpha)
        lines.append(f"{label:<7}{_fmt(row['accuracy']):>10}{_fmt(row['coverage']):>10}{_fmt(row['macro_f1']):>10}")

    lines += ["", f"{'method':<16}{'accuracy':>10}{'macro_f1':>10}"]
    if point is not None and not point.empty:
        mean = point[point["fold"].astype(str) == "mean"]
        if not mean.empty:
            lines.append(f"{'Non-Bayes':<16}{_fmt(mean.iloc[0]['accuracy']):>10}{_fmt(mean.iloc[0]['macro_f1']):>10}")
    for alpha in (0.5, 0.9):
        row = _row_for(report, "mean", alpha)
        if row is not None:
            lines.append(f"{'Bayes a=' + format(alpha, '.2f'):<16}{_fmt(row['accuracy']):>10}{_fmt(row['macro_f1']):>10}")

    lines += ["", uncertainty_line(uncertainty, zone_labels)]
    return "\n".join(lines) + "\n"


def _zone_labels_from(out_dir: Path) -> List[str]:
    confusions = sorted(out_dir.glob("confusion_*.csv"))
    if confusions:
        return pd.read_csv(confusions[0], index_col=0).index.astype(str).tolist()
    return ["low", "high"]


def write_summary(out_dir: Path, zone_labels: Optional[Sequence[str]] = None) -> Path:
    """Build summary.txt from the CSVs in out_dir"""
    out_dir = Path(out_dir)
    report_path = out_dir / "report.csv"
    if not report_path.exists():
        raise MissingReport(f"report.csv not found in {out_dir}")
    report = pd.read_csv(report_path, dtype={"fold": str})

    uncertainty_path = out_dir / "uncertainty.csv"
    if uncertainty_path.exists():
        uncertainty = pd.read_csv(uncertainty_path, dtype={"subject": str, "trial": str, "true_class": str})
    else:
        uncertainty = pd.DataFrame(columns=UNCERTAINTY_COLUMNS)
    point_path = out_dir / "point.csv"
    point = pd.read_csv(point_path, dtype={"fold": str}) if point_path.exists() else None

    labels = list(zone_labels) if zone_labels else _zone_labels_from(out_dir)
    path = out_dir / "summary.txt"
    path.write_text(summary_text(report, uncertainty, point, labels), encoding="utf-8")
    return path
