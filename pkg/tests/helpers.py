from pathlib import Path

import numpy as np

from app.models.domain import EvalRecord, ValencePosterior


def write_run_config(path: Path, dataset_root: Path, **extra) -> Path:
    values = {
        "dataset_root": str(dataset_root),
        "use_precomputed_ibi": "true",
        "n_passes": 5,
        "alphas": "0.5, 0.75, 0.9",
        "k_out": 2,
        "n_folds": 2,
        "n_val_subjects": 2,
        "seed": 3,
        "conv_layers": 2,
        "conv_filters": 2,
        "conv_window_sizes": "3, 2",
        "lstm_hidden_units": 2,
        "epochs": 3,
        "batch_size": 4,
        "log_every": 0,
    }
    values.update(extra)
    lines = ["# tiny run"] + [f"{k} = {v}" for k, v in values.items()]
    path.write_text("\n".join(lines) + "\n", encoding="utf-8")
    return path


def point_mass_record(value: float, true_label: str, n: int = 10, subject: str = "s", trial: str = "t") -> EvalRecord:
    return EvalRecord(subject, trial, true_label, ValencePosterior(np.full(n, value)))
