"""
Synthetic ECG and IBI corpora for exercising the pipeline without the
access-restricted recordings.
"""
import logging
from pathlib import Path
from typing import List, Optional, Sequence, Tuple

import numpy as np
import pandas as pd
from pydantic import ValidationError

from ..core.config import derive_seed, parse_key_value_text
from ..core.errors import InvalidBeatTimes, InvalidSpec
from ..models.domain import BeatSequence, Dataset, EcgRecord, SyntheticSpec, TrialSample
from .dataset import MANIFEST_COLUMNS, MANIFEST_NAME, ecg_path, ibi_path
from .signal_processor import zero_pad, zscore

logger = logging.getLogger(__name__)

QRS_WIDTH_S = 0.02
QRS_AMPLITUDE_MV = 1.0
# keeps generated intervals inside the (0.2, 3.0) s cleaning band
IBI_CLIP_S = (0.25, 2.95)
ECG_LEAD_IN_S = 0.5


def synth_ecg(beat_times_s: Sequence[float], duration_s: float, sample_rate_hz: float = 256.0,
              noise_sd_mv: float = 0.0, seed: int = 0, subject_id: str = "synthetic",
              trial_id: str = "0") -> Tuple[EcgRecord, BeatSequence]:
    """Gaussian QRS templates at the beat times plus white noise; returns the ground-truth peaks too"""
    beats = np.asarray(beat_times_s, dtype=np.float64).ravel()
    if duration_s <= 0 or sample_rate_hz <= 0 or noise_sd_mv < 0:
        raise InvalidBeatTimes("duration, sample rate must be positive and noise non-negative")
    if beats.size and (beats[0] < 0 or beats[-1] >= duration_s or np.any(np.diff(beats) <= 0)):
        raise InvalidBeatTimes("beat times must be increasing and inside [0, duration)")

    n = int(round(duration_s * sample_rate_hz))
    t = np.arange(n) / sample_rate_hz
    signal = np.zeros(n)
    reach = int(np.ceil(6 * QRS_WIDTH_S * sample_rate_hz))
    for b in beats:
        centre = int(round(b * sample_rate_hz))
        lo, hi = max(0, centre - reach), min(n, centre + reach + 1)
        signal[lo:hi] += QRS_AMPLITUDE_MV * np.exp(-0.5 * ((t[lo:hi] - b) / QRS_WIDTH_S) ** 2)
    if noise_sd_mv > 0:
        signal = signal + np.random.default_rng(seed).normal(0.0, noise_sd_mv, n)

    truth = np.round(beats * sample_rate_hz).astype(np.int64)
    if np.any(np.diff(truth) <= 0) or (truth.size and truth[-1] >= n):
        raise InvalidBeatTimes("beats closer than one sample apart")
    return EcgRecord(subject_id, trial_id, sample_rate_hz, signal), BeatSequence(truth, sample_rate_hz)


def ar1_series(n: int, mean: float, sd: float, rho: float, rng: np.random.Generator) -> np.ndarray:
    """Stationary AR(1) with the given marginal mean, SD and lag-1 autocorrelation"""
    x = np.empty(n)
    x[0] = rng.normal(0.0, sd)
    innovation_sd = sd * np.sqrt(1.0 - rho ** 2)
    for i in range(1, n):
        x[i] = rho * x[i - 1] + rng.normal(0.0, innovation_sd)
    return mean + x


def _ids(spec: SyntheticSpec) -> Tuple[List[str], List[str]]:
    sw = max(2, len(str(spec.n_subjects)))
    tw = max(2, len(str(spec.trials_per_subject)))
    subjects = [f"S{i + 1:0{sw}d}" for i in range(spec.n_subjects)]
    trials = [f"T{j + 1:0{tw}d}" for j in range(spec.trials_per_subject)]
    return subjects, trials


def synth_ibi_trials(spec: SyntheticSpec) -> List[Tuple[str, str, float, np.ndarray]]:
    """(subject_id, trial_id, valence_raw, raw IBIs) per trial"""
    subjects, trials = _ids(spec)
    midpoint = (spec.scale_min + spec.scale_max) / 2.0
    out = []
    for subject in subjects:
        offset = np.random.default_rng(derive_seed(spec.seed, "subject", subject)).normal(0.0, spec.subject_offset_sd_s)
        for trial in trials:
            rng = np.random.default_rng(derive_seed(spec.seed, "trial", subject, trial))
            high = rng.random() < spec.class_balance
            prefix = "high" if high else "low"
            n = int(rng.integers(spec.min_beats, spec.max_beats + 1))
            ibis = ar1_series(n, getattr(spec, f"{prefix}_mean_s") + offset, getattr(spec, f"{prefix}_sd_s"),
                              getattr(spec, f"{prefix}_rho"), rng)
            valence = midpoint + spec.label_offset if high else midpoint - spec.label_offset
            out.append((subject, trial, valence, np.clip(ibis, *IBI_CLIP_S)))
    return out


def synth_ibi_dataset(spec: SyntheticSpec) -> Dataset:
    trials = synth_ibi_trials(spec)
    normalised = [(s, t, v, zscore(ibis)) for s, t, v, ibis in trials]
    pad_length = max(values.size for *_, values in normalised)
    samples = [
        TrialSample(s, t, zero_pad(values, pad_length), v, spec.scale_min, spec.scale_max)
        for s, t, v, values in normalised
    ]
    return Dataset(samples, pad_length, name=spec.name)


def write_synthetic_corpus(spec: SyntheticSpec, out_dir: Path, render_ecg: bool = False) -> Path:
    """
    Manifest plus one `.ibi.csv` per trial; with render_ecg the beats are also
    rendered to `<trial>.csv` ECG so the detector path can be run.
    """
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    rows = []
    for subject, trial, valence, ibis in synth_ibi_trials(spec):
        rows.append([subject, trial, spec.sample_rate_hz, valence, spec.scale_min, spec.scale_max])
        path = ibi_path(out_dir, subject, trial)
        path.parent.mkdir(parents=True, exist_ok=True)
        pd.DataFrame({"ibi_s": ibis}).to_csv(path, index=False)
        if render_ecg:
            beats = ECG_LEAD_IN_S + np.concatenate([[0.0], np.cumsum(ibis)])
            ecg, _ = synth_ecg(beats, beats[-1] + ECG_LEAD_IN_S, spec.sample_rate_hz, spec.ecg_noise_sd_mv,
                               derive_seed(spec.seed, "ecg", subject, trial), subject, trial)
            t_s = np.arange(ecg.samples.size) / spec.sample_rate_hz
            pd.DataFrame({"t_s": t_s, "ecg_mv": ecg.samples}).to_csv(ecg_path(out_dir, subject, trial), index=False)

    manifest = out_dir / MANIFEST_NAME
    pd.DataFrame(rows, columns=MANIFEST_COLUMNS).to_csv(manifest, index=False)
    logger.info(f"Wrote synthetic corpus {spec.name!r}: {len(rows)} trials to {out_dir}")
    return manifest


def load_synthetic_spec(path: Optional[Path]) -> SyntheticSpec:
    """Read a `key = value` spec file; no path gives the default separable corpus"""
    if path is None:
        return SyntheticSpec()
    path = Path(path)
    if not path.exists():
        raise InvalidSpec(f"Spec file not found: {path}")
    try:
        entries = parse_key_value_text(path.read_text(encoding="utf-8"))
    except ValueError as e:
        raise InvalidSpec(str(e)) from e
    unknown = [k for k in entries if k not in SyntheticSpec.model_fields]
    if unknown:
        raise InvalidSpec(f"line {entries[unknown[0]][0]}: unknown key {unknown[0]!r}")
    try:
        return SyntheticSpec(**{k: v for k, (_, v) in entries.items()})
    except ValidationError as e:
        raise InvalidSpec("; ".join(f"{'.'.join(map(str, err['loc'])) or 'spec'}: {err['msg']}" for err in e.errors())) from e
