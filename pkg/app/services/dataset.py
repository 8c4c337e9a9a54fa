"""
Corpus ingestion.

<root>/manifest.csv                     subject_id,trial_id,sample_rate_hz,valence_raw,scale_min,scale_max
<root>/<subject_id>/<trial_id>.csv      t_s,ecg_mv
<root>/<subject_id>/<trial_id>.ibi.csv  ibi_s
"""
import logging
import re
from dataclasses import dataclass
from pathlib import Path
from typing import List, Optional, Tuple

import numpy as np
import pandas as pd

from ..core.config import DetectorConfig
from ..core.errors import AllTrialsSkipped, MalformedRow, MissingManifest, ValenceError
from ..models.domain import Dataset, EcgRecord, IbiSeries, TrialSample
from .signal_processor import EcgPreprocessor, zero_pad, zscore

logger = logging.getLogger(__name__)

MANIFEST_NAME = "manifest.csv"
MANIFEST_COLUMNS = ["subject_id", "trial_id", "sample_rate_hz", "valence_raw", "scale_min", "scale_max"]
_PARSER_LINE = re.compile(r"line (\d+)")


@dataclass(frozen=True)
class ManifestRow:
    line: int
    subject_id: str
    trial_id: str
    sample_rate_hz: float
    valence_raw: float
    scale_min: float
    scale_max: float


def parser_error_line(error: Exception) -> Optional[int]:
    """File line named in a pandas tokenizer error, if any"""
    match = _PARSER_LINE.search(str(error))
    return int(match.group(1)) if match else None


def ecg_path(root: Path, subject_id: str, trial_id: str) -> Path:
    return Path(root) / subject_id / f"{trial_id}.csv"


def ibi_path(root: Path, subject_id: str, trial_id: str) -> Path:
    return Path(root) / subject_id / f"{trial_id}.ibi.csv"


def read_manifest(root: Path) -> List[ManifestRow]:
    path = Path(root) / MANIFEST_NAME
    if not path.exists():
        raise MissingManifest(f"{MANIFEST_NAME} not found in {root}")
    try:
        df = pd.read_csv(path, dtype={"subject_id": str, "trial_id": str})
    except pd.errors.EmptyDataError:
        return []
    except pd.errors.ParserError as e:
        raise MalformedRow(parser_error_line(e) or 1, f"unparseable row ({e})") from e
    missing = [c for c in MANIFEST_COLUMNS if c not in df.columns]
    if missing:
        raise MalformedRow(1, f"missing columns {missing}")

    rows = []
    for index, record in df.iterrows():
        line = index + 2  # header is line 1
        try:
            sample_rate = float(record["sample_rate_hz"])
            valence = float(record["valence_raw"])
            lo, hi = float(record["scale_min"]), float(record["scale_max"])
        except (TypeError, ValueError) as e:
            raise MalformedRow(line, f"non-numeric field ({e})") from e
        subject, trial = record["subject_id"], record["trial_id"]
        if pd.isna(subject) or pd.isna(trial) or not str(subject).strip() or not str(trial).strip():
            raise MalformedRow(line, "empty subject_id or trial_id")
        if not np.isfinite([sample_rate, valence, lo, hi]).all():
            raise MalformedRow(line, "non-finite numeric field")
        if sample_rate <= 0:
            raise MalformedRow(line, f"sample_rate_hz {sample_rate} must be positive")
        if lo >= hi:
            raise MalformedRow(line, f"scale ({lo}, {hi}) is empty")
        if not lo <= valence <= hi:
            raise MalformedRow(line, f"valence_raw {valence} outside [{lo}, {hi}]")
        rows.append(ManifestRow(line, str(subject).strip(), str(trial).strip(), sample_rate, valence, lo, hi))
    return rows


def read_ecg(root: Path, row: ManifestRow) -> EcgRecord:
    df = pd.read_csv(ecg_path(root, row.subject_id, row.trial_id))
    if "ecg_mv" not in df.columns:
        raise ValenceError(f"{row.subject_id}/{row.trial_id}: ECG file lacks an ecg_mv column")
    return EcgRecord(row.subject_id, row.trial_id, row.sample_rate_hz, df["ecg_mv"].to_numpy(dtype=np.float64))


def read_ibi(root: Path, row: ManifestRow) -> IbiSeries:
    df = pd.read_csv(ibi_path(root, row.subject_id, row.trial_id))
    if "ibi_s" not in df.columns:
        raise ValenceError(f"{row.subject_id}/{row.trial_id}: IBI file lacks an ibi_s column")
    return IbiSeries(row.subject_id, row.trial_id, df["ibi_s"].to_numpy(dtype=np.float64))


def trial_ibi(root: Path, row: ManifestRow, use_precomputed_ibi: bool, preprocessor: EcgPreprocessor) -> IbiSeries:
    if use_precomputed_ibi:
        return read_ibi(root, row)
    return preprocessor.ibi_from_ecg(read_ecg(root, row))


def _skip_reason(error: Exception) -> str:
    if isinstance(error, FileNotFoundError):
        return f"missing file {Path(error.filename).name if error.filename else ''}".strip()
    return str(error)


def collect_ibis(root: Path, use_precomputed_ibi: bool = False, detector_config: Optional[DetectorConfig] = None
                 ) -> Tuple[List[Tuple[ManifestRow, IbiSeries]], List[Tuple[str, str, str]]]:
    """Raw IBIs for every manifest trial in manifest order, plus the (subject, trial, reason) skip list"""
    root = Path(root)
    rows = read_manifest(root)
    preprocessor = EcgPreprocessor(detector_config)
    loaded, skipped = [], []
    for row in rows:
        try:
            ibi = trial_ibi(root, row, use_precomputed_ibi, preprocessor)
            zscore(ibi)  # rejects series too short to normalise
        except (ValenceError, FileNotFoundError, pd.errors.ParserError, pd.errors.EmptyDataError) as e:
            reason = _skip_reason(e)
            logger.warning(f"Skipping {row.subject_id}/{row.trial_id} (manifest line {row.line}): {reason}")
            skipped.append((row.subject_id, row.trial_id, reason))
            continue
        loaded.append((row, ibi))
    if not loaded:
        raise AllTrialsSkipped(f"no usable trials in {root} ({len(rows)} manifest rows, {len(skipped)} skipped)")
    return loaded, skipped


def load_dataset(root: Path, use_precomputed_ibi: bool = False,
                 detector_config: Optional[DetectorConfig] = None) -> Dataset:
    """
    Read, preprocess and pad every manifest trial.

    Args:
        root: Corpus directory holding `manifest.csv`
        use_precomputed_ibi: Read `<trial>.ibi.csv` instead of detecting R-peaks in `<trial>.csv`
        detector_config: R-peak detector settings, defaults when None

    Returns:
        Dataset padded to its longest series (folds re-pad to their training split).
        Trials that fail preprocessing are listed in `Dataset.skipped`.

    Raises:
        MissingManifest, MalformedRow, AllTrialsSkipped
    """
    root = Path(root)
    loaded, skipped = collect_ibis(root, use_precomputed_ibi, detector_config)
    normalised = [(row, zscore(ibi)) for row, ibi in loaded]
    pad_length = max(values.size for _, values in normalised)
    samples = [
        TrialSample(row.subject_id, row.trial_id, zero_pad(values, pad_length), row.valence_raw, row.scale_min, row.scale_max)
        for row, values in normalised
    ]
    logger.info(f"Loaded {len(samples)} trials from {root} (pad length {pad_length}, {len(skipped)} skipped)")
    return Dataset(samples, pad_length, name=root.name, skipped=skipped)


def write_ibi_cache(root: Path, out_dir: Path, detector_config: Optional[DetectorConfig] = None
                    ) -> Tuple[List[Path], List[Tuple[str, str, str]]]:
    """
    Run R-peak detection on every trial and write `<out>/<s>/<t>.ibi.csv`, a copy
    of the manifest and `skipped.csv`, so `out_dir` loads with use_precomputed_ibi.

    Returns:
        (written interval files, (subject, trial, reason) for each skipped trial)
    """
    root, out_dir = Path(root), Path(out_dir)
    loaded, skipped = collect_ibis(root, False, detector_config)
    out_dir.mkdir(parents=True, exist_ok=True)

    written = []
    for row, ibi in loaded:
        path = ibi_path(out_dir, row.subject_id, row.trial_id)
        path.parent.mkdir(parents=True, exist_ok=True)
        pd.DataFrame({"ibi_s": ibi.intervals_s}).to_csv(path, index=False)
        written.append(path)

    manifest = pd.read_csv(root / MANIFEST_NAME, dtype={"subject_id": str, "trial_id": str})
    manifest.to_csv(out_dir / MANIFEST_NAME, index=False)
    pd.DataFrame(skipped, columns=["subject_id", "trial_id", "reason"]).to_csv(out_dir / "skipped.csv", index=False)
    logger.info(f"Wrote {len(written)} IBI files to {out_dir} ({len(skipped)} trials skipped)")
    return written, skipped
