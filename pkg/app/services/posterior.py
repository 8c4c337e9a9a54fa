"""
Monte-Carlo dropout posterior over valence and the confidence-threshold rule.

A trial is assigned to a class zone only when at least a fraction `alpha` of
its posterior samples fall inside that zone; otherwise the model abstains.
"""
import logging
from dataclasses import dataclass
from pathlib import Path
from typing import Optional

import numpy as np
import pandas as pd

from ..core.config import ModelConfig, derive_seed
from ..core.errors import EmptyPosterior, InvalidAlpha, TooFewSamples
from ..models.domain import ClassZones, Decision, PreparedSeries, ValencePosterior
from .network import ModelParams, predict_passes

logger = logging.getLogger(__name__)

MASS_TOLERANCE = 1e-12


def pass_seeds(seed: int, n_passes: int):
    return [derive_seed(seed, "pass", i) for i in range(n_passes)]


def sample_posterior(x: PreparedSeries, params: ModelParams, config: ModelConfig, n_passes: int,
                     seed: int, chunk_size: Optional[int] = None) -> ValencePosterior:
    """
    Draw the Monte-Carlo dropout posterior for one prepared series.

    Args:
        x: Prepared series at the model's input length
        params: Trained parameters
        config: Model config the parameters belong to
        n_passes: Number of dropout-on forward passes
        seed: Pass i uses a seed derived from (seed, i), so results do not depend on chunk_size
        chunk_size: Passes per batched forward, `settings.posterior_chunk_size` when None

    Returns:
        ValencePosterior holding the n_passes outputs in pass order
    """
    if n_passes < 1:
        raise ValueError(f"n_passes must be >= 1, got {n_passes}")
    samples = predict_passes(x, params, config, pass_seeds(seed, n_passes), chunk_size)
    return ValencePosterior(samples)


def zone_masses(posterior: ValencePosterior, zones: ClassZones) -> np.ndarray:
    """Fraction of samples in each zone; boundary-exact samples count for the lower zone"""
    if posterior.n_passes == 0:
        raise EmptyPosterior("posterior has no samples")
    counts = np.bincount(zones.zone_index(posterior.samples), minlength=zones.n_zones)
    return counts / posterior.n_passes


def decide(masses: np.ndarray, zones: ClassZones, alpha: float, posterior_mean: float) -> Decision:
    """Classify-or-abstain from precomputed zone masses"""
    if not 0.5 <= alpha <= 1.0:
        raise InvalidAlpha(f"alpha {alpha} outside [0.5, 1]")
    best_mass = float(masses.max())
    if best_mass < alpha - MASS_TOLERANCE:
        return Decision(None, best_mass, alpha)
    tied = np.flatnonzero(np.abs(masses - best_mass) <= MASS_TOLERANCE)
    if tied.size == 1:
        zone = int(tied[0])
    else:
        # exact split: prefer the zone holding the posterior mean, else the nearest tied zone
        mean_zone = int(zones.zone_index([posterior_mean])[0])
        zone = int(tied[np.argmin(np.abs(tied - mean_zone))])
    return Decision(zones.zone_labels[zone], best_mass, alpha, zone)


def classify(posterior: ValencePosterior, zones: ClassZones, alpha: float) -> Decision:
    """
    Commit to the zone holding the most posterior mass if that mass reaches alpha, else abstain.

    Args:
        posterior: Monte-Carlo dropout samples
        zones: Valence zones; samples on a boundary count for the lower zone
        alpha: Required mass in [0.5, 1]

    Returns:
        Decision with the label (None when abstaining) and the winning zone's mass
    """
    if not 0.5 <= alpha <= 1.0:
        raise InvalidAlpha(f"alpha {alpha} outside [0.5, 1]")
    masses = zone_masses(posterior, zones)
    return decide(masses, zones, alpha, float(posterior.samples.mean()))


def posterior_variance(posterior: ValencePosterior) -> float:
    if posterior.n_passes < 2:
        raise TooFewSamples(f"variance needs at least 2 samples, got {posterior.n_passes}")
    return float(np.var(posterior.samples))


@dataclass(frozen=True)
class PosteriorSummary:
    mean: float
    median: float
    variance: float
    lower: float  # 2.5th percentile
    upper: float  # 97.5th percentile

    @classmethod
    def of(cls, posterior: ValencePosterior) -> "PosteriorSummary":
        s = posterior.samples
        if s.size == 0:
            raise EmptyPosterior("posterior has no samples")
        lower, upper = np.percentile(s, [2.5, 97.5])
        return cls(float(s.mean()), float(np.median(s)), float(np.var(s)), float(lower), float(upper))


def write_posterior_csv(posterior: ValencePosterior, path: Path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    pd.DataFrame({"pass_index": np.arange(posterior.n_passes), "y_hat": posterior.samples}).to_csv(path, index=False)
    return path
