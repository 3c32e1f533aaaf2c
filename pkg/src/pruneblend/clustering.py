"""Group criteria by the similarity of their rank-correlation profiles.

Within a layer, each criterion is represented by its row of the Spearman
matrix; K-Means over those rows puts criteria that rank filters alike into
the same cluster. Clustering is per layer: two criteria can agree in one
layer and disagree in another.

K-Means is implemented here rather than delegated so results are exactly
reproducible from a seed and the objective can be traced per iteration.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .criteria import CriterionId
from .rankstats import CorrelationMatrix


@dataclass
class KMeansResult:
    labels: np.ndarray
    centroids: np.ndarray
    inertia: float
    n_iter: int


def _dist2(points: np.ndarray, centroids: np.ndarray) -> np.ndarray:
    return ((points[:, None, :] - centroids[None, :, :]) ** 2).sum(axis=2)


def _init_plus_plus(points: np.ndarray, k: int, rng: np.random.Generator) -> np.ndarray:
    n = points.shape[0]
    centroids = np.empty((k, points.shape[1]))
    centroids[0] = points[rng.integers(n)]
    for c in range(1, k):
        d2 = _dist2(points, centroids[:c]).min(axis=1)
        total = d2.sum()
        if total > 0:
            idx = rng.choice(n, p=d2 / total)
        else:
            idx = rng.integers(n)  # all points already covered; any pick works
        centroids[c] = points[idx]
    return centroids


def kmeans(
    points: np.ndarray,
    k: int,
    seed: int = 0,
    max_iter: int = 100,
    trace: list | None = None,
) -> KMeansResult:
    """Lloyd iterations from a k-means++ seeding.

    Ties in the nearest-centroid assignment resolve to the lowest centroid
    index, so coincident points always land in the same cluster. A cluster
    left empty by an assignment is reseeded with the point currently farthest
    from its own centroid (only from clusters that keep another member), so
    every returned cluster is non-empty. If ``trace`` is a list, the
    objective after each assignment is appended; the sequence never
    increases. Stops at an assignment fixpoint or after ``max_iter`` rounds.
    """
    pts = np.asarray(points, dtype=np.float64)
    if pts.ndim != 2 or pts.shape[0] == 0:
        raise ValueError("points must be a non-empty 2-D array")
    if not np.all(np.isfinite(pts)):
        raise ValueError("non-finite point")
    n = pts.shape[0]
    if not 1 <= k <= n:
        raise ValueError(f"k={k} outside [1, {n}]")
    rng = np.random.default_rng(seed)
    centroids = _init_plus_plus(pts, k, rng)
    labels = np.full(n, -1, dtype=np.int64)
    it = 0
    for it in range(1, max_iter + 1):
        d2 = _dist2(pts, centroids)
        new_labels = d2.argmin(axis=1)
        counts = np.bincount(new_labels, minlength=k)
        for ci in np.flatnonzero(counts == 0):
            # steal the worst-fit point from a cluster that can spare one
            cur = ((pts - centroids[new_labels]) ** 2).sum(axis=1)
            movable = counts[new_labels] >= 2
            cur[~movable] = -1.0
            p = int(cur.argmax())
            counts[new_labels[p]] -= 1
            new_labels[p] = ci
            counts[ci] = 1
            centroids[ci] = pts[p]
        if trace is not None:
            trace.append(float(((pts - centroids[new_labels]) ** 2).sum()))
        if np.array_equal(new_labels, labels):
            break
        labels = new_labels
        for ci in range(k):
            centroids[ci] = pts[labels == ci].mean(axis=0)
    inertia = float(((pts - centroids[labels]) ** 2).sum())
    return KMeansResult(labels=labels, centroids=centroids, inertia=inertia, n_iter=it)


@dataclass
class CriteriaClustering:
    """Partition of one layer's criteria into k non-empty groups."""

    layer_index: int
    criteria: tuple[CriterionId, ...]
    labels: np.ndarray
    k: int
    inertia: float = 0.0
    trace: list = field(default_factory=list)

    def clusters(self) -> tuple[tuple[CriterionId, ...], ...]:
        return tuple(
            tuple(c for c, lab in zip(self.criteria, self.labels) if lab == ci)
            for ci in range(self.k)
        )

    def cluster_of(self, criterion: CriterionId) -> int:
        return int(self.labels[self.criteria.index(criterion)])


def cluster_criteria(mat: CorrelationMatrix, k: int = 3, seed: int = 0) -> CriteriaClustering:
    """Cluster one layer's criteria over rows of its Spearman matrix."""
    trace: list = []
    res = kmeans(mat.matrix, k, seed=seed, trace=trace)
    return CriteriaClustering(
        layer_index=mat.layer_index,
        criteria=mat.criteria,
        labels=res.labels,
        k=k,
        inertia=res.inertia,
        trace=trace,
    )


def cluster_all(matrices: list[CorrelationMatrix], k: int = 3, seed: int = 0) -> list[CriteriaClustering]:
    """One clustering per layer; each layer gets its own stream off the seed."""
    out = []
    for li, mat in enumerate(matrices):
        layer_seed = int(np.random.SeedSequence([seed, li]).generate_state(1)[0])
        out.append(cluster_criteria(mat, k=k, seed=layer_seed))
    return out


def search_space_size(num_criteria: int, k: int, num_layers: int = 1) -> tuple[int, int]:
    """Candidate counts as exact integers: (clustered, exhaustive).

    Clustered: one representative per cluster, clusters taken as balanced at
    ceil(N/k) criteria each, independently per layer. Exhaustive: any k-of-N
    subset per layer. Returned values are exact big integers so reports never
    lose precision to floats.
    """
    if num_criteria < 1 or not 1 <= k <= num_criteria or num_layers < 1:
        raise ValueError("need 1 <= k <= num_criteria and num_layers >= 1")
    per_cluster = math.ceil(num_criteria / k)
    blended = per_cluster ** (k * num_layers)
    exhaustive = math.comb(num_criteria, k) ** num_layers
    return blended, exhaustive
