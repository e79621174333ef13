"""Batch diversity: discrepancy angles, their variance, and a running threshold."""

from __future__ import annotations

import bisect
import logging
import math
from collections import deque
from dataclasses import dataclass, field

import numpy as np

log = logging.getLogger(__name__)

_DEGENERATE = 1e-12


@dataclass(frozen=True)
class DiversityGate:
    score: float
    threshold: float
    is_high: bool
    in_cold_start: bool

    @property
    def branch(self) -> str:
        if self.in_cold_start:
            return "cold"
        return "high" if self.is_high else "low"


def discrepancy_angles(features: np.ndarray, mu_source: np.ndarray, mu_test: np.ndarray) -> np.ndarray:
    """Angle between ``mu_source - f`` and ``mu_source - mu_test`` for each row of ``features``.

    ``features`` is (N, C): one C-vector per sample (or per activation).
    Rows where either vector is numerically zero get angle 0.
    """
    f = np.asarray(features, dtype=np.float64)
    if f.ndim != 2 or f.shape[1] < 2:
        raise ValueError(f"need (N, C>=2) features, got shape {f.shape}")
    v_f = np.asarray(mu_source, dtype=np.float64)[None, :] - f
    v_t = np.asarray(mu_source, dtype=np.float64) - np.asarray(mu_test, dtype=np.float64)
    nf = np.linalg.norm(v_f, axis=1)
    nt = np.linalg.norm(v_t)
    bad = (nf < _DEGENERATE) | (nt < _DEGENERATE)
    if bad.any():
        log.debug("%d degenerate discrepancy angle(s) set to 0", int(bad.sum()))
    cos = np.clip((v_f @ v_t) / np.where(bad, 1.0, nf * max(nt, _DEGENERATE)), -1.0, 1.0)
    return np.where(bad, 0.0, np.arccos(cos))


def activation_vectors(f: np.ndarray) -> np.ndarray:
    """Every spatial activation of an (N, C, H, W) map as a row, (N*H*W, C)."""
    n, c, h, w = f.shape
    return np.asarray(f).transpose(0, 2, 3, 1).reshape(n * h * w, c)


def diversity_score(angles: np.ndarray) -> float:
    """Population variance of the angles."""
    a = np.asarray(angles, dtype=np.float64)
    if a.size == 0:
        raise ValueError("diversity score of an empty batch")
    return float(np.mean((a - a.mean()) ** 2))


def nearest_rank(sorted_values, lambda_pct: float):
    """Nearest-rank percentile: element ``ceil(lambda/100 * n)`` (1-based) of sorted data."""
    n = len(sorted_values)
    rank = max(1, math.ceil(lambda_pct / 100.0 * n))
    return sorted_values[rank - 1]


@dataclass
class DiversityCache:
    """Store of past diversity scores with a cold-start period.

    ``window=None`` keeps every score; an integer keeps only the most recent
    ``window`` scores for the percentile.
    """

    lambda_pct: float = 50.0
    t_init: int = 16
    window: int | None = None
    scores: list[float] = field(default_factory=list)
    _sorted: list[float] = field(default_factory=list, repr=False)
    _recent: deque = field(default_factory=deque, repr=False)

    def __post_init__(self):
        if not 0.0 < self.lambda_pct < 100.0:
            raise ValueError(f"lambda_pct must lie in (0, 100), got {self.lambda_pct}")
        if self.t_init < 0:
            raise ValueError(f"t_init must be >= 0, got {self.t_init}")
        if self.window is not None and self.window < 1:
            raise ValueError(f"window must be >= 1, got {self.window}")

    @property
    def t(self) -> int:
        return len(self.scores)

    def threshold(self) -> float:
        return float(nearest_rank(self._sorted, self.lambda_pct))

    def update(self, s: float, t: int | None = None) -> DiversityGate:
        if t is not None and t != self.t + 1:
            raise ValueError(f"cache expected step {self.t + 1}, got {t}")
        s = float(s)
        self.scores.append(s)
        bisect.insort(self._sorted, s)
        if self.window is not None:
            self._recent.append(s)
            if len(self._recent) > self.window:
                old = self._recent.popleft()
                del self._sorted[bisect.bisect_left(self._sorted, old)]
        q = self.threshold()
        if self.t <= self.t_init:
            return DiversityGate(s, q, True, True)
        return DiversityGate(s, q, s >= q, False)


def cache_update(cache: DiversityCache, s: float, t: int) -> DiversityGate:
    return cache.update(s, t)
