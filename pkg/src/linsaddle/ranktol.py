"""Numeric rank with an explicit, shareable tolerance.

A single RankTolerance value is meant to be threaded through every rank
decision of a classification run; mixing tolerances across the decision
tree is the main numerical failure mode and is forbidden by construction.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np


@dataclass(frozen=True)
class RankTolerance:
    """Singular values are counted if > absolute + relative * sigma_max.

    relative=None means the numpy-style default max(rows, cols) * eps.
    """

    absolute: float = 0.0
    relative: float | None = None

    def threshold(self, shape: tuple[int, int], sigma_max: float) -> float:
        rel = self.relative
        if rel is None:
            rel = max(shape) * np.finfo(float).eps
        return self.absolute + rel * sigma_max


def numeric_rank(M: np.ndarray, tol: RankTolerance = RankTolerance()) -> int:
    """Count singular values above the tolerance threshold."""
    M = np.asarray(M, dtype=float)
    if M.size == 0:
        return 0
    if not np.all(np.isfinite(M)):
        raise ValueError("numeric_rank requires finite entries")
    s = np.linalg.svd(M, compute_uv=False)
    if s.size == 0 or s[0] == 0.0:
        return 0
    return int(np.count_nonzero(s > tol.threshold(M.shape, float(s[0]))))
