from pathlib import Path

import pytest

from app.core.config import ModelConfig
from app.models.domain import ClassZones, SyntheticSpec
from app.services.synthetic import synth_ibi_dataset, write_synthetic_corpus

TINY_MODEL = dict(
    conv_layers=2,
    conv_filters=2,
    conv_window_sizes=(3, 2),
    lstm_hidden_units=2,
    epochs=3,
    batch_size=4,
    lr_patience_epochs=2,
    log_every=0,
)


@pytest.fixture
def tiny_config() -> ModelConfig:
    return ModelConfig(**TINY_MODEL)


@pytest.fixture
def tiny_spec() -> SyntheticSpec:
    return SyntheticSpec(n_subjects=8, trials_per_subject=2, min_beats=10, max_beats=14, seed=5)


@pytest.fixture
def tiny_dataset(tiny_spec):
    return synth_ibi_dataset(tiny_spec)


@pytest.fixture
def tiny_corpus(tmp_path, tiny_spec) -> Path:
    root = tmp_path / "corpus"
    write_synthetic_corpus(tiny_spec, root, render_ecg=True)
    return root


@pytest.fixture
def binary_zones() -> ClassZones:
    return ClassZones.binary()
