# app/main.py
import logging
import sys
from pathlib import Path
from typing import List, Optional

import click
import numpy as np
import pandas as pd

from .core.config import RunConfig, derive_seed, format_value, load_run_config, model_config_with, settings
from .core.errors import (
    AllTrialsSkipped,
    FoldFailed,
    InvalidConfig,
    InvalidSpec,
    MalformedGrid,
    MalformedRow,
    MissingManifest,
    NonFiniteLoss,
    ValenceError,
)
from .models.domain import Dataset
from .services.dataset import load_dataset, parser_error_line, write_ibi_cache
from .services.evaluation import holdout_split, make_folds, pad_to_training, run_cross_validation
from .services.model_store import save_model
from .services.reporting import write_evaluation_report, write_summary
from .services.synthetic import load_synthetic_spec, write_synthetic_corpus
from .services.training import train

logger = logging.getLogger("app")

# ------------------------------------------------------------------------------
# Exit codes
# ------------------------------------------------------------------------------
EXIT_OK = 0
EXIT_USAGE = 1
EXIT_DATA = 2
EXIT_TRAIN = 3
EXIT_EVALUATE = 4
EXIT_GRID = 5
EXIT_SPEC = 6

# first match wins; anything unlisted falls back to the command's own code
ERROR_CODES = [
    (InvalidConfig, EXIT_USAGE),
    ((MissingManifest, MalformedRow, AllTrialsSkipped), EXIT_DATA),
    (FoldFailed, EXIT_EVALUATE),
    (NonFiniteLoss, EXIT_TRAIN),
    (MalformedGrid, EXIT_GRID),
    (InvalidSpec, EXIT_SPEC),
]


def _exit_code(error: ValenceError, default: int) -> int:
    for kinds, code in ERROR_CODES:
        if isinstance(error, kinds):
            return code
    return default


def _guard(default_code: int, action, *args) -> int:
    try:
        action(*args)
    except ValenceError as e:
        code = _exit_code(e, default_code)
        logger.error(f"{type(e).__name__}: {e} (exit {code})")
        return code
    return EXIT_OK


# ------------------------------------------------------------------------------
# Helpers
# ------------------------------------------------------------------------------
def _run_config(config_path: Optional[str], out: Optional[str] = None, seed: Optional[int] = None,
                workers: Optional[int] = None) -> RunConfig:
    config = load_run_config(Path(config_path) if config_path else None)
    return config.with_overrides(output_dir=out, seed=seed, workers=workers)


def _dataset(config: RunConfig) -> Dataset:
    if config.dataset_root is None:
        raise InvalidConfig("dataset_root is not set")
    return load_dataset(config.dataset_root, config.use_precomputed_ibi, config.detector)


def _write_skipped(dataset: Dataset, out_dir: Path) -> None:
    pd.DataFrame(dataset.skipped, columns=["subject_id", "trial_id", "reason"]).to_csv(out_dir / "skipped.csv", index=False)


# ------------------------------------------------------------------------------
# Commands
# ------------------------------------------------------------------------------
@click.group()
@click.option("--log-level", default=settings.log_level, show_default=True,
              type=click.Choice(["DEBUG", "INFO", "WARNING", "ERROR"], case_sensitive=False))
def cli(log_level: str):
    """Heartbeat valence estimation with Monte-Carlo dropout and abstention."""
    logging.basicConfig(level=log_level.upper(), format=settings.log_format, force=True)


@cli.command()
@click.option("--root", required=True, type=click.Path(file_okay=False), help="Corpus root holding manifest.csv")
@click.option("--out", required=True, type=click.Path(file_okay=False), help="Directory for the IBI cache")
@click.option("--config", "config_path", type=click.Path(dir_okay=False), help="Run config (detector constants)")
def preprocess(root: str, out: str, config_path: Optional[str]):
    """Detect R-peaks for every manifest trial and write <trial>.ibi.csv files."""
    def action():
        config = _run_config(config_path).with_overrides(dataset_root=root, output_dir=out)
        written, skipped = write_ibi_cache(Path(root), Path(out), config.detector)
        config.write(Path(out))
        click.echo(f"{len(written)} trials written, {len(skipped)} skipped")

    return _guard(EXIT_DATA, action)


@cli.command("train")
@click.option("--config", "config_path", type=click.Path(dir_okay=False))
@click.option("--out", type=click.Path(file_okay=False))
@click.option("--seed", type=int)
def train_command(config_path: Optional[str], out: Optional[str], seed: Optional[int]):
    """Fit one model on the whole corpus (validation subjects held out)."""
    def action():
        config = _run_config(config_path, out, seed)
        out_dir = Path(config.output_dir)
        dataset = _dataset(config)
        split = holdout_split(dataset.subject_ids, config.n_val_subjects, config.seed)
        pad_length, (train_set, val_set) = pad_to_training(
            dataset.for_subjects(split.train_subject_ids), dataset.for_subjects(split.val_subject_ids)
        )
        update = {"input_length": pad_length}
        if dataset.label_scale is not None:
            # targets are rescaled to [0, 1]; the saved model records the scale they came from
            update["label_scale"] = dataset.label_scale
        model_config = config.model.model_copy(update=update)
        params, history = train(model_config, train_set, val_set, derive_seed(config.seed, "train"))

        out_dir.mkdir(parents=True, exist_ok=True)
        save_model(out_dir, params, model_config, config.seed)
        history.to_frame().to_csv(out_dir / "history.csv", index=False)
        _write_skipped(dataset, out_dir)
        config.write(out_dir)
        click.echo(f"best validation MSE {history.best_val_mse:.6f} at epoch {history.best_epoch}")

    return _guard(EXIT_TRAIN, action)


@cli.command()
@click.option("--config", "config_path", type=click.Path(dir_okay=False))
@click.option("--out", type=click.Path(file_okay=False))
@click.option("--seed", type=int)
@click.option("--workers", type=click.IntRange(min=1))
def evaluate(config_path: Optional[str], out: Optional[str], seed: Optional[int], workers: Optional[int]):
    """Leave-k-subjects-out cross-validation across the alpha grid."""
    def action():
        config = _run_config(config_path, out, seed, workers)
        out_dir = Path(config.output_dir)
        dataset = _dataset(config)
        plan = make_folds(dataset.subject_ids, config.k_out, config.n_folds, config.seed, config.n_val_subjects)
        report = run_cross_validation(dataset, config.model, plan, config.n_passes, config.alphas, config.seed,
                                      workers=config.workers)

        write_evaluation_report(report, out_dir)
        histories = out_dir / "histories"
        histories.mkdir(exist_ok=True)
        for fold in report.folds:
            fold.history.to_frame().to_csv(histories / f"fold_{fold.fold_index}.csv", index=False)
        _write_skipped(dataset, out_dir)
        config.write(out_dir)
        click.echo((out_dir / "summary.txt").read_text(encoding="utf-8"), nl=False)

    return _guard(EXIT_EVALUATE, action)


GRID_RESULT_COLUMNS = ["row", "best_val_mse", "best_epoch", "winner"]


def _read_grid(path: Path) -> List[dict]:
    if not path.exists():
        raise MalformedGrid(None, f"grid file not found: {path}")
    try:
        grid = pd.read_csv(path, dtype=str, skipinitialspace=True)
    except pd.errors.EmptyDataError:
        raise MalformedGrid(None, "grid file is empty")
    except pd.errors.ParserError as e:
        line = parser_error_line(e)
        raise MalformedGrid(line - 1 if line and line > 1 else None, f"unparseable row ({e})") from e
    if grid.empty:
        raise MalformedGrid(None, "grid has no rows")
    reserved = sorted(set(grid.columns) & set(GRID_RESULT_COLUMNS))
    if reserved:
        raise MalformedGrid(None, f"column(s) {reserved} are reserved for the results file")
    return [{k: v.strip() for k, v in row.items() if isinstance(v, str) and v.strip()}
            for row in grid.to_dict(orient="records")]


@cli.command()
@click.option("--config", "config_path", type=click.Path(dir_okay=False))
@click.option("--grid", "grid_path", required=True, type=click.Path(dir_okay=False),
              help="CSV: one hyperparameter combination per row, model keys as columns")
@click.option("--out", type=click.Path(file_okay=False))
@click.option("--seed", type=int)
def sweep(config_path: Optional[str], grid_path: str, out: Optional[str], seed: Optional[int]):
    """Rank hyperparameter combinations by best validation MSE (first-listed wins ties)."""
    def action():
        config = _run_config(config_path, out, seed)
        out_dir = Path(config.output_dir)
        rows = _read_grid(Path(grid_path))
        combos = []
        for number, overrides in enumerate(rows, start=1):
            try:
                combos.append(model_config_with(config.model, overrides))
            except InvalidConfig as e:
                raise MalformedGrid(number, str(e)) from e

        dataset = _dataset(config)
        split = holdout_split(dataset.subject_ids, config.n_val_subjects, config.seed)
        pad_length, (train_set, val_set) = pad_to_training(
            dataset.for_subjects(split.train_subject_ids), dataset.for_subjects(split.val_subject_ids)
        )
        results = []
        for number, (overrides, model_config) in enumerate(zip(rows, combos), start=1):
            logger.info(f"Grid row {number}/{len(rows)}: {overrides}")
            _, history = train(model_config.model_copy(update={"input_length": pad_length}), train_set, val_set,
                               derive_seed(config.seed, "train"))
            results.append({"row": number, **overrides, "best_val_mse": history.best_val_mse,
                            "best_epoch": history.best_epoch})

        frame = pd.DataFrame(results)
        frame["winner"] = False
        frame.loc[int(np.argmin(frame["best_val_mse"].to_numpy())), "winner"] = True
        out_dir.mkdir(parents=True, exist_ok=True)
        frame.to_csv(out_dir / "grid_results.csv", index=False)
        config.write(out_dir)
        winner = frame[frame["winner"]].iloc[0]
        click.echo(f"winner: grid row {winner['row']} (val MSE {winner['best_val_mse']:.6f})")

    return _guard(EXIT_GRID, action)


@cli.command()
@click.option("--spec", "spec_path", type=click.Path(dir_okay=False), help="Synthetic corpus spec (key = value)")
@click.option("--out", required=True, type=click.Path(file_okay=False))
@click.option("--seed", type=int)
@click.option("--ecg/--no-ecg", default=False, help="Also render ECG waveforms")
def synth(spec_path: Optional[str], out: str, seed: Optional[int], ecg: bool):
    """Write a synthetic corpus in the manifest layout."""
    def action():
        spec = load_synthetic_spec(Path(spec_path) if spec_path else None)
        if seed is not None:
            spec = spec.model_copy(update={"seed": seed})
        manifest = write_synthetic_corpus(spec, Path(out), render_ecg=ecg)
        (Path(out) / "synthetic_spec.txt").write_text(
            "".join(f"{k} = {format_value(v)}\n" for k, v in spec.model_dump().items()), encoding="utf-8"
        )
        click.echo(f"corpus written: {manifest}")

    return _guard(EXIT_SPEC, action)


@cli.command()
@click.option("--out", required=True, type=click.Path(file_okay=False), help="Directory of a finished evaluate run")
def report(out: str):
    """Rebuild summary.txt from report.csv and uncertainty.csv."""
    def action():
        click.echo(write_summary(Path(out)).read_text(encoding="utf-8"), nl=False)

    return _guard(EXIT_EVALUATE, action)


# ------------------------------------------------------------------------------
# Entry points
# ------------------------------------------------------------------------------
def run(argv: Optional[List[str]] = None) -> int:
    """Invoke the CLI and return its exit code instead of exiting"""
    try:
        result = cli.main(args=argv, prog_name="valence", standalone_mode=False)
    except click.exceptions.UsageError as e:
        click.echo(f"Error: {e.format_message()}", err=True)
        return EXIT_USAGE
    except click.exceptions.Abort:
        return EXIT_USAGE
    return result if isinstance(result, int) else EXIT_OK


def main():
    sys.exit(run())


if __name__ == "__main__":
    main()
