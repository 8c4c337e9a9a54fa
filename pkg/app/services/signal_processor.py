import logging
from typing import Optional, Sequence

import numpy as np
from scipy.ndimage import uniform_filter1d
from scipy.signal import find_peaks

from ..core.config import DetectorConfig
from ..core.errors import (
    EmptyAfterCleaning,
    SignalTooShort,
    StageError,
    TargetTooSmall,
    TooFewBeats,
    TooShort,
    ValenceError,
)
from ..models.domain import BeatSequence, EcgRecord, IbiSeries, PreparedSeries

logger = logging.getLogger(__name__)


def _odd_window(seconds: float, sample_rate_hz: float) -> int:
    """Centred moving averages need an odd sample count"""
    n = max(1, int(round(seconds * sample_rate_hz)))
    return n if n % 2 == 1 else n + 1


class EcgPreprocessor:
    """
    Turns one trial of single-lead ECG into a z-scored, zero-padded IBI sequence.

    Detection uses a complex lead built from moving-average differences and an
    adaptive threshold that decays per sample and resets on every detection.
    """

    def __init__(self, config: Optional[DetectorConfig] = None):
        self.config = config or DetectorConfig()

    # ------------------------------------------------------------------
    # R-peak detection
    # ------------------------------------------------------------------
    def band_limit(self, samples: np.ndarray, sample_rate_hz: float) -> np.ndarray:
        """Baseline-removed, smoothed ECG"""
        cfg = self.config
        baseline = uniform_filter1d(samples, _odd_window(cfg.baseline_window_s, sample_rate_hz), mode="nearest")
        return uniform_filter1d(samples - baseline, _odd_window(cfg.smoothing_window_s, sample_rate_hz), mode="nearest")

    def complex_lead(self, filtered: np.ndarray, sample_rate_hz: float) -> np.ndarray:
        """Smoothed absolute derivative of the band-limited signal"""
        slope = np.abs(np.gradient(filtered))
        return uniform_filter1d(slope, _odd_window(self.config.smoothing_window_s, sample_rate_hz), mode="nearest")

    def detect_r_peaks(self, ecg: EcgRecord) -> BeatSequence:
        """
        Locate R-peaks with an adaptive threshold on the smoothed slope of the ECG.

        Args:
            ecg: One trial's samples, at least `min_duration_s` long

        Returns:
            Strictly increasing R-peak sample indices, possibly empty for a flat signal
        """
        cfg = self.config
        fs = ecg.sample_rate_hz
        x = ecg.samples
        if x.size < cfg.min_duration_s * fs:
            raise SignalTooShort(
                f"{ecg.subject_id}/{ecg.trial_id}: {x.size} samples < {cfg.min_duration_s} s at {fs} Hz"
            )

        filtered = self.band_limit(x, fs)
        lead = self.complex_lead(filtered, fs)

        init_span = max(1, int(round(cfg.threshold_init_window_s * fs)))
        threshold = cfg.threshold_init_fraction * float(np.max(lead[:init_span]))
        reset_at = 0

        refractory = int(np.ceil(cfg.refractory_s * fs))
        search = max(1, int(round(cfg.peak_search_s * fs)))

        candidates, _ = find_peaks(lead)
        detections = []
        last_detection = -refractory
        for n in candidates:
            if n - last_detection < refractory:
                continue
            level = threshold * cfg.threshold_decay ** (n - reset_at)
            if lead[n] > level:
                detections.append(int(n))
                last_detection = int(n)
                threshold = cfg.threshold_reset_fraction * float(lead[n])
                reset_at = int(n)

        peaks = []
        for n in detections:
            lo, hi = max(0, n - search), min(x.size, n + search + 1)
            peak = lo + int(np.argmax(filtered[lo:hi]))
            if peaks and peak - peaks[-1] < refractory:
                continue
            peaks.append(peak)

        logger.debug(f"{ecg.subject_id}/{ecg.trial_id}: {len(peaks)} R-peaks over {ecg.duration_s:.1f} s")
        return BeatSequence(np.asarray(peaks, dtype=np.int64), fs)

    # ------------------------------------------------------------------
    # Intervals
    # ------------------------------------------------------------------
    def extract_ibi(self, beats: BeatSequence, subject_id: str = "", trial_id: str = "") -> IbiSeries:
        cfg = self.config
        if len(beats) < 3:
            raise TooFewBeats(f"{len(beats)} R-peaks found, at least 3 are required")
        intervals = np.diff(beats.r_peak_indices) / beats.sample_rate_hz
        keep = (intervals > cfg.min_ibi_s) & (intervals < cfg.max_ibi_s)
        dropped = int(intervals.size - keep.sum())
        if dropped:
            logger.debug(f"{subject_id}/{trial_id}: removed {dropped} intervals outside ({cfg.min_ibi_s}, {cfg.max_ibi_s}) s")
        cleaned = intervals[keep]
        if cleaned.size < 2:
            raise EmptyAfterCleaning(f"{cleaned.size} interval(s) left after cleaning, at least 2 are required")
        return IbiSeries(subject_id, trial_id, cleaned)

    def preprocess_trial(self, ecg: EcgRecord, target_length: int) -> PreparedSeries:
        ibi = self.ibi_from_ecg(ecg)
        values = _run_stage("zscore", zscore, ibi)
        return _run_stage("zero_pad", zero_pad, values, target_length)

    def ibi_from_ecg(self, ecg: EcgRecord) -> IbiSeries:
        beats = _run_stage("detect_r_peaks", self.detect_r_peaks, ecg)
        return _run_stage("extract_ibi", self.extract_ibi, beats, ecg.subject_id, ecg.trial_id)


def _run_stage(stage: str, fn, *args):
    try:
        return fn(*args)
    except ValenceError as e:
        raise StageError(stage, e) from e


# ----------------------------------------------------------------------
# Normalisation and padding
# ----------------------------------------------------------------------

def zscore(ibi) -> np.ndarray:
    """Per-trial z-score with the population standard deviation; constant input maps to zeros"""
    x = np.asarray(ibi.intervals_s if isinstance(ibi, IbiSeries) else ibi, dtype=np.float64).ravel()
    if x.size < 2:
        raise TooShort(f"z-scoring needs at least 2 values, got {x.size}")
    mean = x.mean()
    sd = x.std()
    if sd <= 1e-12 * max(1.0, abs(mean)):
        return np.zeros_like(x)
    return (x - mean) / sd


def zero_pad(values: Sequence[float], target_length: int) -> PreparedSeries:
    v = np.asarray(values, dtype=np.float64).ravel()
    if target_length < v.size or target_length < 1:
        raise TargetTooSmall(f"target_length {target_length} < {v.size} values")
    out = np.zeros(target_length, dtype=np.float64)
    out[: v.size] = v
    return PreparedSeries(out, int(v.size))


def repad(prepared: PreparedSeries, target_length: int) -> PreparedSeries:
    """Pad or truncate (at the end) to a new length"""
    if target_length < 1:
        raise TargetTooSmall(f"target_length must be positive, got {target_length}")
    valid = min(prepared.valid_length, target_length)
    out = np.zeros(target_length, dtype=np.float64)
    out[:valid] = prepared.values[:valid]
    return PreparedSeries(out, valid)


_default = EcgPreprocessor()


def detect_r_peaks(ecg: EcgRecord) -> BeatSequence:
    return _default.detect_r_peaks(ecg)


def extract_ibi(beats: BeatSequence) -> IbiSeries:
    return _default.extract_ibi(beats)


def preprocess_trial(ecg: EcgRecord, target_length: int) -> PreparedSeries:
    return _default.preprocess_trial(ecg, target_length)
