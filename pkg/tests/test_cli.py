from pathlib import Path

import pandas as pd
import pytest

import app.main
from app.core.errors import NonFiniteLoss
from app.main import run
from app.services import evaluation

from tests.helpers import write_run_config

SMALL_SPEC = "n_subjects = 8\ntrials_per_subject = 2\nmin_beats = 10\nmax_beats = 14\nseed = 5\n"


@pytest.fixture
def corpus(tmp_path) -> Path:
    spec = tmp_path / "spec.txt"
    spec.write_text(SMALL_SPEC)
    root = tmp_path / "corpus"
    assert run(["synth", "--spec", str(spec), "--out", str(root)]) == 0
    return root


@pytest.fixture
def run_config(tmp_path, corpus) -> Path:
    return write_run_config(tmp_path / "run.txt", corpus)


def _bytes(directory: Path) -> dict:
    return {p.relative_to(directory): p.read_bytes() for p in sorted(directory.rglob("*")) if p.is_file()}


class TestSynth:
    def test_writes_manifest(self, corpus):
        manifest = pd.read_csv(corpus / "manifest.csv")
        assert len(manifest) == 16
        assert (corpus / "synthetic_spec.txt").exists()
        assert "n_subjects = 8" in (corpus / "synthetic_spec.txt").read_text()

    def test_seed_option(self, tmp_path):
        assert run(["synth", "--out", str(tmp_path / "a"), "--seed", "1"]) == 0
        assert "seed = 1" in (tmp_path / "a" / "synthetic_spec.txt").read_text()

    def test_invalid_spec(self, tmp_path):
        spec = tmp_path / "bad.txt"
        spec.write_text("n_subjects = 0\n")
        assert run(["synth", "--spec", str(spec), "--out", str(tmp_path / "out")]) == 6


class TestPreprocess:
    def test_missing_manifest(self, tmp_path):
        (tmp_path / "empty").mkdir()
        assert run(["preprocess", "--root", str(tmp_path / "empty"), "--out", str(tmp_path / "out")]) == 2

    def test_writes_ibi_files_idempotently(self, tiny_corpus, tmp_path):
        out = tmp_path / "ibi"
        assert run(["preprocess", "--root", str(tiny_corpus), "--out", str(out)]) == 0
        first = _bytes(out)
        assert run(["preprocess", "--root", str(tiny_corpus), "--out", str(out)]) == 0

        assert len(list(out.glob("*/*.ibi.csv"))) == 16
        assert (out / "skipped.csv").exists()
        assert (out / "manifest.csv").exists()
        assert _bytes(out) == first


class TestTrain:
    def test_writes_model_and_history(self, run_config, tmp_path):
        out = tmp_path / "model"
        assert run(["train", "--config", str(run_config), "--out", str(out)]) == 0

        assert (out / "model.meta").exists() and (out / "model.bin").exists()
        history = pd.read_csv(out / "history.csv")
        assert list(history.columns) == ["epoch", "train_mse", "val_mse", "lr"]
        assert len(history) == 3
        assert "seed = 3" in (out / "run_config.txt").read_text()

    def test_model_records_rating_scale(self, tmp_path):
        spec = tmp_path / "spec.txt"
        spec.write_text(SMALL_SPEC + "scale_min = 0\nscale_max = 10\n")
        root = tmp_path / "corpus"
        assert run(["synth", "--spec", str(spec), "--out", str(root)]) == 0
        config = write_run_config(tmp_path / "run.txt", root)

        assert run(["train", "--config", str(config), "--out", str(tmp_path / "m")]) == 0
        assert "config.label_scale = 0.0, 10.0" in (tmp_path / "m" / "model.meta").read_text()

    def test_same_seed_same_bytes(self, run_config, tmp_path):
        assert run(["train", "--config", str(run_config), "--out", str(tmp_path / "a")]) == 0
        assert run(["train", "--config", str(run_config), "--out", str(tmp_path / "b")]) == 0
        for name in ("model.meta", "model.bin", "history.csv"):
            assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()

    def test_seed_override_changes_weights(self, run_config, tmp_path):
        assert run(["train", "--config", str(run_config), "--out", str(tmp_path / "a")]) == 0
        assert run(["train", "--config", str(run_config), "--out", str(tmp_path / "b"), "--seed", "4"]) == 0
        assert (tmp_path / "a" / "model.bin").read_bytes() != (tmp_path / "b" / "model.bin").read_bytes()

    def test_non_finite_loss_exit_code(self, run_config, tmp_path, monkeypatch):
        def explode(*args, **kwargs):
            raise NonFiniteLoss(1, float("inf"))

        monkeypatch.setattr(app.main, "train", explode)
        assert run(["train", "--config", str(run_config), "--out", str(tmp_path / "m")]) == 3


class TestEvaluate:
    def test_writes_report(self, run_config, tmp_path, capsys):
        out = tmp_path / "eval"
        assert run(["evaluate", "--config", str(run_config), "--out", str(out)]) == 0

        report = pd.read_csv(out / "report.csv", dtype={"fold": str})
        assert sorted(set(report["alpha"])) == [0.5, 0.75, 0.9]
        assert len(list((out / "histories").glob("fold_*.csv"))) == 2
        assert "Mann-Whitney" in capsys.readouterr().out

    def test_writes_posterior_dumps(self, run_config, tmp_path):
        out = tmp_path / "eval"
        assert run(["evaluate", "--config", str(run_config), "--out", str(out)]) == 0

        posteriors = out / "posteriors"
        summary = pd.read_csv(posteriors / "summary.csv", dtype={"subject": str, "trial": str})
        assert len(summary) == 8
        for subject, trial in zip(summary["subject"], summary["trial"]):
            frame = pd.read_csv(posteriors / f"{subject}_{trial}.csv")
            assert list(frame.columns) == ["pass_index", "y_hat"]
            assert len(frame) == 5

    def test_close_alphas_get_their_own_confusion_files(self, tmp_path, corpus):
        config = write_run_config(tmp_path / "run.txt", corpus, alphas="0.5, 0.925, 0.93")
        out = tmp_path / "eval"
        assert run(["evaluate", "--config", str(config), "--out", str(out)]) == 0

        names = sorted(p.name for p in out.glob("confusion_*.csv"))
        assert names == ["confusion_0.50.csv", "confusion_0.925.csv", "confusion_0.93.csv"]

    def test_ragged_manifest_exit_code(self, run_config, corpus, tmp_path):
        manifest = corpus / "manifest.csv"
        lines = manifest.read_text().splitlines()
        lines[2] += ",extra"
        manifest.write_text("\n".join(lines) + "\n")
        assert run(["evaluate", "--config", str(run_config), "--out", str(tmp_path / "e")]) == 2

    def test_failed_fold_exit_code(self, run_config, tmp_path, monkeypatch):
        def explode(*args, **kwargs):
            raise NonFiniteLoss(0, float("nan"))

        monkeypatch.setattr(evaluation, "train", explode)
        assert run(["evaluate", "--config", str(run_config), "--out", str(tmp_path / "e")]) == 4

    def test_report_rebuilds_summary(self, run_config, tmp_path):
        out = tmp_path / "eval"
        assert run(["evaluate", "--config", str(run_config), "--out", str(out)]) == 0
        original = (out / "summary.txt").read_text()
        (out / "summary.txt").unlink()

        assert run(["report", "--out", str(out)]) == 0
        assert (out / "summary.txt").read_text() == original

    def test_report_without_evaluation(self, tmp_path):
        assert run(["report", "--out", str(tmp_path)]) == 4


class TestSweep:
    def test_picks_one_winner(self, run_config, tmp_path):
        grid = tmp_path / "grid.csv"
        grid.write_text("conv_filters,lstm_hidden_units\n2,2\n3,2\n")
        out = tmp_path / "sweep"

        assert run(["sweep", "--config", str(run_config), "--grid", str(grid), "--out", str(out)]) == 0

        results = pd.read_csv(out / "grid_results.csv")
        assert results["row"].tolist() == [1, 2]
        assert results["winner"].sum() == 1
        best = results["best_val_mse"].min()
        assert results.loc[results["winner"], "best_val_mse"].iloc[0] == best

    def test_invalid_row_exit_code(self, run_config, tmp_path):
        grid = tmp_path / "grid.csv"
        grid.write_text("conv_dropout_rate\n0.3\n-0.1\n")
        assert run(["sweep", "--config", str(run_config), "--grid", str(grid), "--out", str(tmp_path / "s")]) == 5

    @pytest.mark.parametrize("text", [
        "conv_filters\n2\n3,4\n",
        "conv_filters,winner\n2,true\n",
        "row,conv_filters\n1,2\n",
    ])
    def test_unreadable_grid_exit_code(self, run_config, tmp_path, text):
        grid = tmp_path / "grid.csv"
        grid.write_text(text)
        assert run(["sweep", "--config", str(run_config), "--grid", str(grid), "--out", str(tmp_path / "s")]) == 5


class TestUsage:
    def test_unknown_option(self):
        assert run(["train", "--bogus"]) == 1

    def test_unknown_command(self):
        assert run(["launch"]) == 1

    def test_unknown_config_key(self, tmp_path, corpus):
        config = write_run_config(tmp_path / "run.txt", corpus, colour="red")
        assert run(["evaluate", "--config", str(config), "--out", str(tmp_path / "e")]) == 1

    def test_missing_dataset_root(self, tmp_path):
        config = tmp_path / "run.txt"
        config.write_text("n_passes = 5\n")
        assert run(["train", "--config", str(config), "--out", str(tmp_path / "m")]) == 1
