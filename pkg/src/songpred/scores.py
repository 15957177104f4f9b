"""Engagement-count scoring: percentile ranks and the power transform.

Raw stream/like counts are mapped to percentile ranks within a population
(average-rank convention, minimum -> 0, maximum -> 100) and then pushed
through ``s = (p/100)**alpha * 100``. The default exponent is chosen so
that the 80th percentile lands exactly on a score of 50, which compresses
the upper tail and rewards only strong percentile standing.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from .ranking import average_ranks

#: Exponent solving (0.8)**alpha == 0.5, i.e. percentile 80 -> score 50.
DEFAULT_ALPHA = math.log(0.5) / math.log(0.8)


@dataclass(frozen=True)
class ScoreTransformConfig:
    alpha: float = DEFAULT_ALPHA

    def __post_init__(self):
        if not (self.alpha > 0):
            raise ValueError(f"alpha must be positive, got {self.alpha}")


@dataclass(frozen=True)
class LabelVector:
    """Per-song regression targets in natural units."""

    streams_score: float
    likes_score: float
    aesthetics: Optional[tuple[float, float, float, float, float]] = None

    def __post_init__(self):
        for name, v in (("streams_score", self.streams_score), ("likes_score", self.likes_score)):
            if not (0.0 <= v <= 100.0):
                raise ValueError(f"{name} must lie in [0, 100], got {v}")
        if self.aesthetics is not None:
            for v in self.aesthetics:
                if not (1.0 <= v <= 5.0):
                    raise ValueError(f"aesthetic value must lie in [1, 5], got {v}")


def percentile_ranks(counts: Sequence[int]) -> np.ndarray:
    """Percentile rank p in [0, 100] for each count within the population.

    p_i = 100 * (r_i - 1) / (n - 1) with r_i the average rank, so the
    minimum maps to 0, the maximum to 100 and ties share one value.
    """
    c = np.asarray(counts, dtype=np.float64)
    if c.ndim != 1 or c.shape[0] < 2:
        raise ValueError("percentile ranks need at least 2 counts")
    if np.any(c < 0):
        raise ValueError("counts must be non-negative")
    r = average_ranks(c)
    return 100.0 * (r - 1.0) / (c.shape[0] - 1)


def percentile_against(counts: Sequence[int], reference: Sequence[int]) -> np.ndarray:
    """Percentile rank of each count measured against a reference population.

    For a count c the rank is below(c) + (equal(c) + 1) / 2, which reduces
    exactly to :func:`percentile_ranks` when counts come from the reference
    itself. Out-of-range counts clamp to 0 or 100.
    """
    ref = np.sort(np.asarray(reference, dtype=np.float64))
    if ref.shape[0] < 2:
        raise ValueError("reference population needs at least 2 counts")
    c = np.asarray(counts, dtype=np.float64)
    below = np.searchsorted(ref, c, side="left")
    upto = np.searchsorted(ref, c, side="right")
    rank = below + (upto - below + 1) / 2.0
    p = 100.0 * (rank - 1.0) / (ref.shape[0] - 1)
    return np.clip(p, 0.0, 100.0)


def power_transform(p, cfg: ScoreTransformConfig = ScoreTransformConfig()):
    """Map percentile rank(s) p in [0, 100] to score s = (p/100)**alpha * 100."""
    arr = np.asarray(p, dtype=np.float64)
    if np.any(arr < 0.0) or np.any(arr > 100.0):
        raise ValueError("percentile rank outside [0, 100]")
    s = (arr / 100.0) ** cfg.alpha * 100.0
    return float(s) if np.isscalar(p) or arr.ndim == 0 else s


def build_labels(record, streams_p: float, likes_p: float,
                 cfg: ScoreTransformConfig = ScoreTransformConfig()) -> LabelVector:
    """Assemble a label vector from the record's percentiles and aesthetics."""
    return LabelVector(
        streams_score=power_transform(streams_p, cfg),
        likes_score=power_transform(likes_p, cfg),
        aesthetics=record.aesthetic_labels,
    )
