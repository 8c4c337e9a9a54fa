"""
Domain types shared by the services.
Array-carrying records are dataclasses over numpy arrays; the synthetic corpus
description is a pydantic model because it is read from a config file.
"""
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
import pandas as pd
from pydantic import BaseModel, ConfigDict, model_validator


@dataclass(frozen=True)
class EcgRecord:
    subject_id: str
    trial_id: str
    sample_rate_hz: float
    samples: np.ndarray  # millivolts

    def __post_init__(self):
        if not self.sample_rate_hz > 0:
            raise ValueError(f"sample_rate_hz must be positive, got {self.sample_rate_hz}")
        object.__setattr__(self, "samples", np.asarray(self.samples, dtype=np.float64).ravel())

    @property
    def duration_s(self) -> float:
        return len(self.samples) / self.sample_rate_hz


@dataclass(frozen=True)
class BeatSequence:
    r_peak_indices: np.ndarray
    sample_rate_hz: float

    def __post_init__(self):
        idx = np.asarray(self.r_peak_indices, dtype=np.int64).ravel()
        if idx.size and (idx[0] < 0 or np.any(np.diff(idx) <= 0)):
            raise ValueError("R-peak indices must be non-negative and strictly increasing")
        object.__setattr__(self, "r_peak_indices", idx)

    def __len__(self) -> int:
        return int(self.r_peak_indices.size)


@dataclass(frozen=True)
class IbiSeries:
    subject_id: str
    trial_id: str
    intervals_s: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "intervals_s", np.asarray(self.intervals_s, dtype=np.float64).ravel())

    def __len__(self) -> int:
        return int(self.intervals_s.size)


@dataclass(frozen=True)
class PreparedSeries:
    """Z-scored intervals followed by zero padding; model input x"""
    values: np.ndarray
    valid_length: int

    def __post_init__(self):
        values = np.asarray(self.values, dtype=np.float64).ravel()
        if not 0 < self.valid_length <= values.size:
            raise ValueError(f"valid_length {self.valid_length} outside (0, {values.size}]")
        object.__setattr__(self, "values", values)

    @property
    def padded_length(self) -> int:
        return int(self.values.size)


@dataclass(frozen=True)
class DropoutMask:
    keep_flags: np.ndarray
    rate: float
    rng_seed: int

    @property
    def scale(self) -> float:
        return 1.0 / (1.0 - self.rate)

    @property
    def shape(self) -> Tuple[int, ...]:
        return tuple(self.keep_flags.shape)


@dataclass(frozen=True)
class EpochRecord:
    epoch: int
    train_mse: float
    val_mse: float
    learning_rate: float


@dataclass
class TrainHistory:
    epochs: List[EpochRecord] = field(default_factory=list)
    best_epoch: int = -1
    best_val_mse: float = float("inf")

    def to_frame(self) -> pd.DataFrame:
        return pd.DataFrame(
            [(e.epoch, e.train_mse, e.val_mse, e.learning_rate) for e in self.epochs],
            columns=["epoch", "train_mse", "val_mse", "lr"],
        )

    @property
    def learning_rates(self) -> List[float]:
        return [e.learning_rate for e in self.epochs]


@dataclass(frozen=True)
class ValencePosterior:
    samples: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "samples", np.asarray(self.samples, dtype=np.float64).ravel())

    @property
    def n_passes(self) -> int:
        return int(self.samples.size)


@dataclass(frozen=True)
class ClassZones:
    """Ordered boundaries split the output line into len(boundaries) + 1 labelled zones"""
    boundaries: Tuple[float, ...]
    zone_labels: Tuple[str, ...]

    def __post_init__(self):
        bounds = tuple(float(b) for b in self.boundaries)
        labels = tuple(str(l) for l in self.zone_labels)
        if len(bounds) < 1:
            raise ValueError("At least one boundary is required")
        if any(a >= b for a, b in zip(bounds, bounds[1:])):
            raise ValueError("Boundaries must be strictly increasing")
        if len(labels) != len(bounds) + 1:
            raise ValueError(f"Expected {len(bounds) + 1} zone labels, got {len(labels)}")
        if len(set(labels)) != len(labels) or "abstain" in labels:
            raise ValueError("Zone labels must be unique and may not be 'abstain'")
        object.__setattr__(self, "boundaries", bounds)
        object.__setattr__(self, "zone_labels", labels)

    @classmethod
    def binary(cls, boundary: float = 0.5, labels: Sequence[str] = ("low", "high")) -> "ClassZones":
        return cls((boundary,), tuple(labels))

    @property
    def n_zones(self) -> int:
        return len(self.zone_labels)

    def zone_index(self, values) -> np.ndarray:
        # a value equal to a boundary belongs to the zone below it
        return np.searchsorted(np.asarray(self.boundaries), np.asarray(values, dtype=np.float64), side="left")

    def label_of(self, value: float) -> str:
        return self.zone_labels[int(self.zone_index([value])[0])]


@dataclass(frozen=True)
class Decision:
    label: Optional[str]
    covered_fraction: float
    alpha: float
    zone_index: Optional[int] = None

    @property
    def abstained(self) -> bool:
        return self.label is None

    @property
    def outcome(self) -> str:
        return "abstain" if self.label is None else self.label


@dataclass(frozen=True)
class Fold:
    train_subject_ids: Tuple[str, ...]
    val_subject_ids: Tuple[str, ...]
    test_subject_ids: Tuple[str, ...]


@dataclass(frozen=True)
class FoldPlan:
    folds: Tuple[Fold, ...]
    k_out: int
    seed: int

    def __len__(self) -> int:
        return len(self.folds)


@dataclass(frozen=True)
class EvalRecord:
    subject_id: str
    trial_id: str
    true_label: str
    posterior: ValencePosterior
    point_estimate: Optional[float] = None  # dropout-off prediction

    def __post_init__(self):
        if self.posterior.n_passes < 1:
            raise ValueError("EvalRecord posterior must be non-empty")


@dataclass
class FoldMetrics:
    alpha: float
    accuracy: Optional[float]
    coverage: float
    macro_f1: Optional[float]
    n_committed: int
    n_total: int
    confusion: pd.DataFrame


@dataclass
class AlphaSweepReport:
    rows: List[FoldMetrics] = field(default_factory=list)

    @property
    def alphas(self) -> List[float]:
        return [r.alpha for r in self.rows]

    @property
    def coverages(self) -> List[float]:
        return [r.coverage for r in self.rows]

    @property
    def accuracies(self) -> List[Optional[float]]:
        return [r.accuracy for r in self.rows]

    def for_alpha(self, alpha: float) -> Optional[FoldMetrics]:
        for row in self.rows:
            if abs(row.alpha - alpha) < 1e-12:
                return row
        return None

    def __len__(self) -> int:
        return len(self.rows)


@dataclass(frozen=True)
class TrialSample:
    subject_id: str
    trial_id: str
    prepared: PreparedSeries
    valence_raw: float
    scale_min: float
    scale_max: float

    def __post_init__(self):
        if not self.scale_min <= self.valence_raw <= self.scale_max:
            raise ValueError(f"valence_raw {self.valence_raw} outside [{self.scale_min}, {self.scale_max}]")

    @property
    def target(self) -> float:
        """Label rescaled to [0, 1]"""
        return (self.valence_raw - self.scale_min) / (self.scale_max - self.scale_min)


@dataclass
class Dataset:
    samples: List[TrialSample]
    pad_length: int
    name: str = "dataset"
    skipped: List[Tuple[str, str, str]] = field(default_factory=list)  # (subject, trial, reason)

    def __len__(self) -> int:
        return len(self.samples)

    @property
    def subject_ids(self) -> List[str]:
        seen: Dict[str, None] = {}
        for s in self.samples:
            seen.setdefault(s.subject_id, None)
        return list(seen)

    def for_subjects(self, subject_ids: Sequence[str]) -> List[TrialSample]:
        wanted = set(subject_ids)
        return [s for s in self.samples if s.subject_id in wanted]

    @property
    def label_scale(self) -> Optional[Tuple[float, float]]:
        """The rating scale shared by every trial, or None when trials mix scales"""
        scales = {(s.scale_min, s.scale_max) for s in self.samples}
        return scales.pop() if len(scales) == 1 else None


class SyntheticSpec(BaseModel):
    """Description of a synthetic AR(1) IBI corpus"""
    model_config = ConfigDict(frozen=True)

    name: str = "synthetic"
    n_subjects: int = 20
    trials_per_subject: int = 8
    class_balance: float = 0.5  # probability that a trial is high valence
    low_mean_s: float = 0.8
    low_sd_s: float = 0.12
    low_rho: float = 0.6
    high_mean_s: float = 0.8
    high_sd_s: float = 0.03
    high_rho: float = 0.1
    min_beats: int = 60
    max_beats: int = 90
    subject_offset_sd_s: float = 0.05
    scale_min: float = 1.0
    scale_max: float = 9.0
    label_offset: float = 2.0
    sample_rate_hz: float = 256.0
    ecg_noise_sd_mv: float = 0.02
    seed: int = 0

    @model_validator(mode="after")
    def _check(self):
        if self.n_subjects < 1 or self.trials_per_subject < 1:
            raise ValueError("n_subjects and trials_per_subject must be positive")
        if not 0.0 <= self.class_balance <= 1.0:
            raise ValueError("class_balance must be in [0, 1]")
        for prefix in ("low", "high"):
            mean = getattr(self, f"{prefix}_mean_s")
            if not 0.2 < mean < 3.0:
                raise ValueError(f"{prefix}_mean_s must be in (0.2, 3.0) s")
            if getattr(self, f"{prefix}_sd_s") < 0:
                raise ValueError(f"{prefix}_sd_s must be >= 0")
            if not -1.0 < getattr(self, f"{prefix}_rho") < 1.0:
                raise ValueError(f"{prefix}_rho must be in (-1, 1)")
        if self.min_beats < 2 or self.max_beats < self.min_beats:
            raise ValueError("require 2 <= min_beats <= max_beats (interval counts)")
        if self.scale_min >= self.scale_max:
            raise ValueError("scale_min must be below scale_max")
        mid = (self.scale_min + self.scale_max) / 2.0
        if not 0 < self.label_offset <= (self.scale_max - mid):
            raise ValueError("label_offset must place labels inside the scale")
        if self.subject_offset_sd_s < 0 or self.ecg_noise_sd_mv < 0 or self.sample_rate_hz <= 0:
            raise ValueError("subject_offset_sd_s and ecg_noise_sd_mv must be >= 0, sample_rate_hz > 0")
        return self
