"""Rank statistics over criterion scores.

Spearman correlation between two criteria within a layer, assembled into a
per-layer criteria-by-criteria matrix. A criterion's row of that matrix is
the feature vector later fed to clustering.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .criteria import CriterionId, ScoreVector


def average_ranks(values: np.ndarray) -> np.ndarray:
    """1-based ranks, ascending; tied values share the mean of their positions."""
    v = np.asarray(values, dtype=np.float64)
    if v.ndim != 1 or v.size == 0:
        raise ValueError("values must be a non-empty 1-D array")
    order = np.argsort(v, kind="stable")
    sv = v[order]
    ranks = np.empty(v.size, dtype=np.float64)
    i = 0
    while i < v.size:
        j = i
        while j + 1 < v.size and sv[j + 1] == sv[i]:
            j += 1
        # positions i..j (0-based) hold a tie block; mean 1-based rank
        ranks[order[i : j + 1]] = (i + j) / 2.0 + 1.0
        i = j + 1
    return ranks


def spearman(x: np.ndarray, y: np.ndarray) -> float:
    """Spearman rank correlation in [-1,1].

    Tie-free inputs use the exact 1 - 6*sum(d^2)/(n(n^2-1)) form; with ties,
    Pearson correlation of average ranks. Either vector constant -> 0.
    """
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if x.shape != y.shape or x.ndim != 1:
        raise ValueError("inputs must be 1-D arrays of equal length")
    n = x.size
    if n < 2:
        raise ValueError("need at least 2 observations")
    if np.all(x == x[0]) or np.all(y == y[0]):
        return 0.0
    rx = average_ranks(x)
    ry = average_ranks(y)
    if np.array_equal(rx, ry):
        return 1.0
    if np.unique(x).size == n and np.unique(y).size == n:
        d = rx - ry
        return float(1.0 - 6.0 * (d @ d) / (n * (n * n - 1.0)))
    rx = rx - rx.mean()
    ry = ry - ry.mean()
    denom = np.sqrt((rx @ rx) * (ry @ ry))
    if denom == 0.0:
        return 0.0
    return float(np.clip((rx @ ry) / denom, -1.0, 1.0))


@dataclass
class CorrelationMatrix:
    """Symmetric Spearman matrix for one layer, unit diagonal."""

    layer_index: int
    criteria: tuple[CriterionId, ...]
    matrix: np.ndarray

    def vector_for(self, criterion: CriterionId) -> np.ndarray:
        return self.matrix[self.criteria.index(criterion)]


def correlation_matrix(scores: list[ScoreVector]) -> CorrelationMatrix:
    """All-pairs Spearman over one layer's score vectors (raw scores; ranks
    are invariant to the min-max normalization)."""
    if not scores:
        raise ValueError("no score vectors")
    layer_index = scores[0].layer_index
    n = len(scores)
    mat = np.eye(n)
    for i in range(n):
        for j in range(i + 1, n):
            rho = spearman(scores[i].raw, scores[j].raw)
            mat[i, j] = mat[j, i] = rho
    return CorrelationMatrix(layer_index, tuple(s.criterion for s in scores), mat)


def correlation_matrices(scored: list[list[ScoreVector]]) -> list[CorrelationMatrix]:
    return [correlation_matrix(layer_scores) for layer_scores in scored]
