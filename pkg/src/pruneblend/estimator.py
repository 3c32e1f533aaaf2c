"""Estimator facade over the full pipeline."""

from __future__ import annotations

import os

import numpy as np
from sklearn.base import BaseEstimator
from sklearn.utils.validation import check_is_fitted

from .blend import blend_scores, make_mask
from .clustering import cluster_all
from .criteria import score_all
from .evolution import EAConfig, search
from .fitness import OracleEvaluator
from .rankstats import correlation_matrices
from .snapshot import NetworkSnapshot, PruneConfig, load_planted, load_snapshot
from .toynet import ToyEvaluator


class BlendedPruningSearch(BaseEstimator):
    """Learn per-layer blended pruning criteria for a network snapshot.

    fit() scores all criteria, correlates and clusters them per layer, then
    runs the evolutionary search for the best calibrated blend. predict()
    applies the learned blend to a snapshot with the same layer structure
    and returns its keep masks.

    Parameters
    ----------
    clusters : int, number of criteria clusters per layer.
    population_size, iterations, mutation_prob, crossover_prob, drop_ratio,
    resample_prob, finetune_epochs, topk, workers : search hyperparameters.
    keep_ratio : fraction of filters kept in every layer.
    evaluator : callable, or "oracle" (needs the planted sidecar / fit kwarg)
        or "toy" (snapshot must carry toy trainer metadata).
    available_only : bool, skip criteria whose evidence is absent instead of
        raising.
    seed : int, fixes the entire trajectory.

    Attributes
    ----------
    scores_ : per-layer list of ScoreVector lists.
    matrices_ : per-layer criteria correlation matrices.
    clusterings_ : per-layer criteria clusterings.
    search_result_ : full SearchResult with history and topk genes.
    best_gene_ : the winning gene.
    masks_ : dict of layer name to keep mask for the fitted snapshot.
    """

    def __init__(self, clusters=3, population_size=20, iterations=50,
                 mutation_prob=0.1, crossover_prob=0.8, drop_ratio=0.08,
                 resample_prob=0.2, finetune_epochs=3, topk=5, keep_ratio=0.5,
                 evaluator="oracle", available_only=False, workers=1, seed=0):
        self.clusters = clusters
        self.population_size = population_size
        self.iterations = iterations
        self.mutation_prob = mutation_prob
        self.crossover_prob = crossover_prob
        self.drop_ratio = drop_ratio
        self.resample_prob = resample_prob
        self.finetune_epochs = finetune_epochs
        self.topk = topk
        self.keep_ratio = keep_ratio
        self.evaluator = evaluator
        self.available_only = available_only
        self.workers = workers
        self.seed = seed

    def _resolve_snapshot(self, X):
        if isinstance(X, NetworkSnapshot):
            return X, None
        return load_snapshot(X), X  # path-like; remember where it lives

    def _resolve_evaluator(self, snapshot, snapshot_path, planted):
        if callable(self.evaluator):
            return self.evaluator
        if self.evaluator == "oracle":
            if planted is None:
                if snapshot_path is None:
                    raise ValueError(
                        "evaluator='oracle' needs planted=... or a snapshot "
                        "directory with a planted_importance.json sidecar"
                    )
                planted = load_planted(os.path.join(snapshot_path, "planted_importance.json"))
            return OracleEvaluator(planted)
        if self.evaluator == "toy":
            return ToyEvaluator.from_snapshot(snapshot, seed=self.seed)
        raise ValueError(f"unknown evaluator {self.evaluator!r}")

    def fit(self, X, y=None, planted=None):
        """Run the full pipeline on a NetworkSnapshot or snapshot directory."""
        snapshot, path = self._resolve_snapshot(X)
        evaluator = self._resolve_evaluator(snapshot, path, planted)
        self.scores_ = score_all(snapshot, available_only=self.available_only)
        self.matrices_ = correlation_matrices(self.scores_)
        self.clusterings_ = cluster_all(self.matrices_, k=self.clusters, seed=self.seed)
        config = EAConfig(
            population_size=self.population_size,
            iterations=self.iterations,
            mutation_prob=self.mutation_prob,
            crossover_prob=self.crossover_prob,
            drop_ratio=self.drop_ratio,
            finetune_epochs=self.finetune_epochs,
            resample_prob=self.resample_prob,
            topk=self.topk,
            seed=self.seed,
            workers=self.workers,
        )
        prune_config = PruneConfig(default_keep_ratio=self.keep_ratio)
        self.search_result_ = search(snapshot, self.clusterings_, self.scores_,
                                     config, evaluator, prune_config)
        self.best_gene_ = self.search_result_.best_gene
        self.masks_ = {
            rec.name: make_mask(blend_scores(gene, layer_scores), self.keep_ratio)
            for rec, layer_scores, gene in zip(snapshot.layers, self.scores_,
                                               self.best_gene_.layers)
        }
        return self

    def predict(self, X=None):
        """Masks for X under the learned blend; the fitted masks if X is None."""
        check_is_fitted(self, "best_gene_")
        if X is None:
            return {k: v.copy() for k, v in self.masks_.items()}
        snapshot, _ = self._resolve_snapshot(X)
        scored = score_all(snapshot, available_only=self.available_only)
        if len(scored) != len(self.best_gene_.layers):
            raise ValueError("snapshot layer count differs from the fitted one")
        masks = {}
        for rec, layer_scores, gene in zip(snapshot.layers, scored, self.best_gene_.layers):
            masks[rec.name] = make_mask(blend_scores(gene, layer_scores), self.keep_ratio)
        return masks

    def score(self, X=None, y=None):
        """Best fitness found by the search."""
        check_is_fitted(self, "search_result_")
        best = self.search_result_.best_gene.fitness
        return float(best) if best is not None else float("nan")
