import pandas as pd
import pytest

from app.core.errors import MissingReport
from app.services.evaluation import make_folds, run_cross_validation
from app.services.reporting import (
    POSTERIOR_SUMMARY_COLUMNS,
    REPORT_COLUMNS,
    summary_text,
    uncertainty_line,
    write_evaluation_report,
    write_summary,
)

ALPHAS = [0.5, 0.75, 0.9]


@pytest.fixture
def report_dir(tmp_path, tiny_dataset, tiny_config):
    plan = make_folds(tiny_dataset.subject_ids, k_out=2, n_folds=2, seed=1, n_val_subjects=2)
    report = run_cross_validation(tiny_dataset, tiny_config, plan, n_passes=6, alphas=ALPHAS, seed=1)
    out = tmp_path / "report"
    write_evaluation_report(report, out)
    return out


def test_writes_every_report_file(report_dir):
    names = sorted(p.name for p in report_dir.iterdir())
    assert names == sorted([
        "report.csv", "confusion_0.50.csv", "confusion_0.75.csv", "confusion_0.90.csv",
        "uncertainty.csv", "point.csv", "summary.txt", "posteriors",
    ])


def test_posterior_dump_per_test_trial(report_dir):
    posteriors = report_dir / "posteriors"
    trial_files = sorted(p for p in posteriors.glob("*.csv") if p.name != "summary.csv")
    summary = pd.read_csv(posteriors / "summary.csv", dtype={"subject": str, "trial": str})

    assert len(trial_files) == 8
    assert list(summary.columns) == POSTERIOR_SUMMARY_COLUMNS
    assert sorted(f"{s}_{t}.csv" for s, t in zip(summary["subject"], summary["trial"])) == [p.name for p in trial_files]
    for path in trial_files:
        frame = pd.read_csv(path)
        assert list(frame.columns) == ["pass_index", "y_hat"]
        assert frame["pass_index"].tolist() == list(range(6))
    assert (summary["lower"] <= summary["median"]).all() and (summary["median"] <= summary["upper"]).all()


def test_report_rows(report_dir):
    report = pd.read_csv(report_dir / "report.csv", dtype={"fold": str})

    assert list(report.columns) == REPORT_COLUMNS
    assert sorted(report["fold"].unique()) == ["0", "1", "mean", "pooled"]
    for fold in ("0", "1", "mean", "pooled"):
        assert report.loc[report["fold"] == fold, "alpha"].tolist() == ALPHAS

    mean = report[report["fold"] == "mean"]["coverage"].tolist()
    assert all(a >= b for a, b in zip(mean, mean[1:]))
    pooled = report[report["fold"] == "pooled"]
    assert (pooled["n_total"] == 8).all()


def test_pooled_confusion_counts_every_trial(report_dir):
    confusion = pd.read_csv(report_dir / "confusion_0.90.csv", index_col=0)
    assert list(confusion.columns) == ["low", "high", "abstain"]
    assert int(confusion.values.sum()) == 8


def test_uncertainty_rows(report_dir):
    uncertainty = pd.read_csv(report_dir / "uncertainty.csv")
    assert list(uncertainty.columns) == ["subject", "trial", "true_class", "posterior_variance"]
    assert len(uncertainty) == 8
    assert (uncertainty["posterior_variance"] >= 0).all()


def test_summary_mentions_both_methods(report_dir):
    text = (report_dir / "summary.txt").read_text()
    assert "Non-Bayes" in text
    assert "Bayes a=0.50" in text and "Bayes a=0.90" in text
    assert "Mann-Whitney posterior variance (low vs high):" in text


def test_summary_is_rebuilt_from_csvs(report_dir):
    original = (report_dir / "summary.txt").read_text()
    (report_dir / "summary.txt").unlink()

    write_summary(report_dir)

    assert (report_dir / "summary.txt").read_text() == original


def test_missing_report(tmp_path):
    with pytest.raises(MissingReport):
        write_summary(tmp_path)


def test_summary_with_nothing_committed():
    report = pd.DataFrame(
        [["0", 0.9, None, 0.0, None, 0, 4], ["mean", 0.9, None, 0.0, None, 0, 4], ["pooled", 0.9, None, 0.0, None, 0, 4]],
        columns=REPORT_COLUMNS,
    )
    uncertainty = pd.DataFrame(columns=["subject", "trial", "true_class", "posterior_variance"])

    text = summary_text(report, uncertainty, None)

    assert "n/a" in text
    assert "U=n/a p=n/a direction=n/a" in text


def test_uncertainty_line_direction():
    frame = pd.DataFrame({
        "subject": ["a"] * 6,
        "trial": list("123456"),
        "true_class": ["low"] * 3 + ["high"] * 3,
        "posterior_variance": [0.3, 0.4, 0.5, 0.01, 0.02, 0.03],
    })
    line = uncertainty_line(frame, ["low", "high"])
    assert "U=9.0" in line
    assert "direction=low > high" in line
    assert line.endswith("(exact)")
