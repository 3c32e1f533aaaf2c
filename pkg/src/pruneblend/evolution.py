"""Evolutionary search over blend genes.

A gene assigns every layer a calibration-factor vector and one selected
criterion per cluster. Each iteration crosses randomly paired parents,
mutates positions, replaces the worst fraction with fresh random genes, and
re-evaluates; the best gene is always carried over, so best-so-far fitness
never decreases. The whole trajectory, evaluation count included, is a
function of (seed, config, snapshot, evaluator).
"""

from __future__ import annotations

import itertools
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from .blend import LayerGene, mask_fingerprint, prune_plan
from .clustering import CriteriaClustering
from .criteria import CriterionId, ScoreVector
from .fitness import EvaluatorError, FitnessRequest
from .snapshot import NetworkSnapshot, PruneConfig


@dataclass
class Gene:
    id: int
    layers: list[LayerGene]
    fitness: float | None = None

    def validate(self) -> None:
        for li, lg in enumerate(self.layers):
            if lg.layer_index != li:
                raise ValueError("layer genes out of order")
            lg.validate()

    def to_dict(self) -> dict:
        return {
            "id": self.id,
            "fitness": self.fitness,
            "layers": [lg.to_dict() for lg in self.layers],
        }

    @classmethod
    def from_dict(cls, d: dict) -> "Gene":
        return cls(
            id=int(d["id"]),
            layers=[LayerGene.from_dict(ld) for ld in d["layers"]],
            fitness=None if d.get("fitness") is None else float(d["fitness"]),
        )


@dataclass
class EAConfig:
    population_size: int = 20
    iterations: int = 50
    mutation_prob: float = 0.1
    crossover_prob: float = 0.8
    drop_ratio: float = 0.08
    finetune_epochs: int = 3
    resample_prob: float = 0.2
    topk: int = 5
    seed: int = 0
    workers: int = 1
    drop_prob: float | None = None  # accepted alias; the ratio form is canonical

    def __post_init__(self):
        if self.drop_prob is not None:
            self.drop_ratio = self.drop_prob
        if self.population_size < 2:
            raise ValueError("population_size must be >= 2")
        if not 1 <= self.topk <= self.population_size:
            raise ValueError("topk must be in [1, population_size]")
        for name in ("mutation_prob", "crossover_prob", "resample_prob"):
            v = getattr(self, name)
            if not 0.0 <= v <= 1.0:
                raise ValueError(f"{name} must be in [0,1]")
        if not 0.0 <= self.drop_ratio < 1.0:
            raise ValueError("drop_ratio must be in [0,1)")
        if self.iterations < 0 or self.finetune_epochs < 0 or self.workers < 1:
            raise ValueError("iterations, finetune_epochs >= 0 and workers >= 1 required")


@dataclass
class SearchResult:
    best_gene: Gene
    topk_genes: list[Gene]
    fitness_history: list[tuple[float, float]]
    evaluations: int

    def to_dict(self) -> dict:
        return {
            "best_gene": self.best_gene.to_dict(),
            "topk_genes": [g.to_dict() for g in self.topk_genes],
            "fitness_history": [[b, m] for b, m in self.fitness_history],
            "evaluations": self.evaluations,
        }


def _rank_key(g: Gene):
    # higher fitness first; fitness ties go to the older (lower) id
    return (-g.fitness, g.id)


def _random_layer_gene(cl: CriteriaClustering, rng: np.random.Generator) -> LayerGene:
    factors = rng.random(cl.k)
    selections = tuple(
        cluster[rng.integers(len(cluster))] for cluster in cl.clusters()
    )
    return LayerGene(cl.layer_index, factors, selections)


def _random_gene(clusterings: list[CriteriaClustering], rng: np.random.Generator,
                 ids: itertools.count) -> Gene:
    return Gene(next(ids), [_random_layer_gene(cl, rng) for cl in clusterings])


def init_population(clusterings: list[CriteriaClustering], config: EAConfig,
                    rng: np.random.Generator, ids: itertools.count | None = None) -> list[Gene]:
    """Factors i.i.d. uniform on [0,1], selections uniform within clusters."""
    if ids is None:
        ids = itertools.count()
    return [_random_gene(clusterings, rng, ids) for _ in range(config.population_size)]


def _cross_pair(a: Gene, b: Gene, crossover_prob: float, resample_prob: float,
                clusterings: list[CriteriaClustering], rng: np.random.Generator,
                ids: itertools.count) -> Gene:
    layers = []
    for la, lb, cl in zip(a.layers, b.layers, clusterings):
        k = cl.k
        take_a = rng.random(k) < crossover_prob
        factors = np.where(take_a, la.factors, lb.factors)
        sels = [sa if t else sb for t, sa, sb in zip(take_a, la.selections, lb.selections)]
        redraw = rng.random(k) < resample_prob
        clusters = cl.clusters()
        for pos in np.flatnonzero(redraw):
            cluster = clusters[pos]
            sels[pos] = cluster[rng.integers(len(cluster))]
        layers.append(LayerGene(la.layer_index, factors.copy(), tuple(sels)))
    return Gene(next(ids), layers)


def crossover(parents: list[Gene], crossover_prob: float, resample_prob: float,
              clusterings: list[CriteriaClustering], rng: np.random.Generator,
              ids: itertools.count) -> list[Gene]:
    """Children from randomly matched disjoint parent pairs, two per pair.

    Each child position takes parent A with probability crossover_prob, and
    independently may redraw its selection inside the cluster so the search
    cannot lock onto one criterion. An odd parent out is cloned.
    """
    if len(parents) < 2:
        raise ValueError("need at least 2 parents")
    order = rng.permutation(len(parents))
    children: list[Gene] = []
    for i in range(0, len(parents) - 1, 2):
        a, b = parents[order[i]], parents[order[i + 1]]
        for _ in range(2):
            children.append(_cross_pair(a, b, crossover_prob, resample_prob,
                                        clusterings, rng, ids))
    if len(parents) % 2 == 1:
        last = parents[order[-1]]
        children.append(Gene(next(ids), [lg.copy() for lg in last.layers]))
    return children


def mutation(pop: list[Gene], mutation_prob: float,
             clusterings: list[CriteriaClustering], rng: np.random.Generator) -> list[Gene]:
    """Per position: redraw the factor with probability mutation_prob and,
    independently, redraw the selection within its cluster. Untouched genes
    pass through unchanged, fitness included."""
    out: list[Gene] = []
    for g in pop:
        changed = False
        layers = []
        for lg, cl in zip(g.layers, clusterings):
            k = cl.k
            flip_f = rng.random(k) < mutation_prob
            fresh = rng.random(k)
            factors = np.where(flip_f, fresh, lg.factors)
            flip_s = rng.random(k) < mutation_prob
            sels = list(lg.selections)
            clusters = cl.clusters()
            for pos in np.flatnonzero(flip_s):
                cluster = clusters[pos]
                sels[pos] = cluster[rng.integers(len(cluster))]
            if flip_f.any() or any(s != o for s, o in zip(sels, lg.selections)):
                changed = True
            layers.append(LayerGene(lg.layer_index, factors, tuple(sels)))
        if changed:
            out.append(Gene(g.id, layers))
        else:
            out.append(g)
    return out


def drop(pop: list[Gene], drop_ratio: float, clusterings: list[CriteriaClustering],
         rng: np.random.Generator, ids: itertools.count) -> list[Gene]:
    """Replace the floor(drop_ratio * N) lowest-fitness genes with fresh
    random ones; the single best gene always survives."""
    if any(g.fitness is None for g in pop):
        raise ValueError("drop requires a fully evaluated population")
    count = math.floor(drop_ratio * len(pop))
    if count == 0:
        return list(pop)
    ranked = sorted(pop, key=_rank_key)
    dropped = {g.id for g in ranked[len(pop) - count :]}
    return [g if g.id not in dropped else _random_gene(clusterings, rng, ids) for g in pop]


class _Evaluation:
    """Shared fitness cache keyed by mask fingerprint, plus the call count."""

    def __init__(self, snapshot: NetworkSnapshot, scored: list[list[ScoreVector]],
                 prune_config: PruneConfig, evaluator, finetune_epochs: int, workers: int):
        self.snapshot = snapshot
        self.scored = scored
        self.prune_config = prune_config
        self.evaluator = evaluator
        self.finetune_epochs = finetune_epochs
        self.workers = workers
        self.cache: dict[str, float] = {}
        self.calls = 0

    def masks_for(self, gene: Gene) -> dict[str, np.ndarray]:
        return prune_plan(self.snapshot, self.scored, gene.layers, self.prune_config).masks()

    def _call(self, gene_id: int, masks) -> float:
        req = FitnessRequest(gene_id, masks, self.finetune_epochs)
        try:
            resp = self.evaluator(req)
        except EvaluatorError:
            raise
        except Exception as e:
            raise EvaluatorError(str(e), gene_id) from e
        return resp.fitness

    def run(self, pop: list[Gene]) -> None:
        todo = [(g, self.masks_for(g)) for g in pop if g.fitness is None]
        keyed = [(g, masks, mask_fingerprint(masks)) for g, masks in todo]
        pending: dict[str, tuple[Gene, dict]] = {}
        for g, masks, fp in keyed:
            if fp not in self.cache and fp not in pending:
                pending[fp] = (g, masks)
        items = list(pending.items())
        self.calls += len(items)
        if self.workers == 1 or len(items) <= 1:
            for fp, (g, masks) in items:
                self.cache[fp] = self._call(g.id, masks)
        else:
            with ThreadPoolExecutor(max_workers=self.workers) as pool:
                futures = [pool.submit(self._call, g.id, masks) for _, (g, masks) in items]
                for (fp, _), fut in zip(items, futures):
                    self.cache[fp] = fut.result()
        for g, _, fp in keyed:
            g.fitness = self.cache[fp]


def _history_entry(pop: list[Gene]) -> tuple[float, float]:
    fits = [g.fitness for g in pop]
    return (max(fits), float(np.mean(fits)))


def search(snapshot: NetworkSnapshot, clusterings: list[CriteriaClustering],
           scored: list[list[ScoreVector]], config: EAConfig, evaluator,
           prune_config: PruneConfig | None = None) -> SearchResult:
    """Full evolutionary loop; see module docstring for the iteration shape."""
    if not (len(clusterings) == len(scored) == snapshot.num_layers):
        raise ValueError("snapshot, clusterings, and scores disagree on layer count")
    if prune_config is None:
        prune_config = PruneConfig()
    rng = np.random.default_rng(config.seed)
    ids = itertools.count()
    ev = _Evaluation(snapshot, scored, prune_config, evaluator,
                     config.finetune_epochs, config.workers)
    pop = init_population(clusterings, config, rng, ids)
    ev.run(pop)
    history = [_history_entry(pop)]
    for _ in range(config.iterations):
        elite = sorted(pop, key=_rank_key)[0]
        children = crossover(pop, config.crossover_prob, config.resample_prob,
                             clusterings, rng, ids)
        children = mutation(children, config.mutation_prob, clusterings, rng)
        ev.run(children)
        # generational replacement with the elite carried over
        worst = min(range(len(children)), key=lambda i: (children[i].fitness, -children[i].id))
        children[worst] = elite
        pop = drop(children, config.drop_ratio, clusterings, rng, ids)
        ev.run(pop)
        history.append(_history_entry(pop))
    ranked = sorted(pop, key=_rank_key)
    topk = ranked[: config.topk]
    return SearchResult(best_gene=topk[0], topk_genes=topk,
                        fitness_history=history, evaluations=ev.calls)


def finalize(topk: list[Gene], full_evaluator, snapshot: NetworkSnapshot,
             scored: list[list[ScoreVector]], prune_config: PruneConfig,
             finetune_epochs: int) -> tuple[Gene, dict[str, np.ndarray]]:
    """Re-evaluate the shortlist at full budget; ties go to the lower id."""
    if not topk:
        raise ValueError("empty topk")
    ev = _Evaluation(snapshot, scored, prune_config, full_evaluator,
                     finetune_epochs, workers=1)
    best: Gene | None = None
    best_masks = None
    for g in topk:
        masks = ev.masks_for(g)
        fitness = ev._call(g.id, masks)
        candidate = Gene(g.id, g.layers, fitness)
        if best is None or _rank_key(candidate) < _rank_key(best):
            best = candidate
            best_masks = masks
    return best, best_masks


def single_criterion_gene(clusterings: list[CriteriaClustering],
                          criterion: CriterionId, gene_id: int = -1) -> Gene:
    """Baseline gene: factor 1 on the cluster holding the criterion, 0 elsewhere."""
    layers = []
    for cl in clusterings:
        if criterion not in cl.criteria:
            raise ValueError(f"criterion {criterion.label} absent from layer {cl.layer_index}")
        home = cl.cluster_of(criterion)
        factors = np.zeros(cl.k)
        factors[home] = 1.0
        selections = tuple(
            criterion if ci == home else cluster[0]
            for ci, cluster in enumerate(cl.clusters())
        )
        layers.append(LayerGene(cl.layer_index, factors, selections))
    return Gene(gene_id, layers)
