"""Combine cluster-representative criteria into per-filter scores and masks.

A layer's gene picks one criterion per cluster and a calibration factor in
[0,1] for each pick; the blended score is the factor-weighted sum of the
picked criteria's normalized scores. Masks keep the top-scoring filters.
"""

from __future__ import annotations

import hashlib
import math
from dataclasses import dataclass

import numpy as np

from .criteria import CriterionId, ScoreVector
from .snapshot import NetworkSnapshot, PruneConfig


@dataclass
class LayerGene:
    """One layer's blend: a criterion per cluster plus its scaling factor."""

    layer_index: int
    factors: np.ndarray
    selections: tuple[CriterionId, ...]

    def validate(self) -> None:
        f = np.asarray(self.factors, dtype=np.float64)
        if f.ndim != 1 or f.size != len(self.selections):
            raise ValueError("factors and selections must have equal length")
        if not np.all((f >= 0.0) & (f <= 1.0)):
            raise ValueError("factors must lie in [0,1]")

    def copy(self) -> "LayerGene":
        return LayerGene(self.layer_index, np.array(self.factors, dtype=np.float64), self.selections)

    def to_dict(self) -> dict:
        return {
            "layer_index": self.layer_index,
            "factors": [float(x) for x in self.factors],
            "selections": [c.label for c in self.selections],
        }

    @classmethod
    def from_dict(cls, d: dict) -> "LayerGene":
        gene = cls(
            layer_index=int(d["layer_index"]),
            factors=np.asarray(d["factors"], dtype=np.float64),
            selections=tuple(CriterionId.from_label(s) for s in d["selections"]),
        )
        gene.validate()
        return gene


def blend_scores(gene: LayerGene, scores: list[ScoreVector]) -> np.ndarray:
    """Factor-weighted sum of the selected criteria's normalized scores."""
    gene.validate()
    by_crit = {s.criterion: s for s in scores}
    for s in scores:
        if s.layer_index != gene.layer_index:
            raise ValueError("gene and scores refer to different layers")
    out = np.zeros(scores[0].normalized.shape, dtype=np.float64)
    for f, c in zip(np.asarray(gene.factors, dtype=np.float64), gene.selections):
        if c not in by_crit:
            raise KeyError(f"no score vector for criterion {c.label}")
        out += f * by_crit[c].normalized
    return out


def make_mask(blended: np.ndarray, keep_ratio: float) -> np.ndarray:
    """Binary mask keeping the ceil(keep_ratio * n) highest scores.

    Ties keep the lower filter index, so masks are reproducible bit for bit.
    """
    blended = np.asarray(blended, dtype=np.float64)
    n = blended.size
    if n == 0:
        raise ValueError("empty score vector")
    if not 0.0 < keep_ratio <= 1.0:
        raise ValueError(f"keep_ratio must be in (0, 1], got {keep_ratio}")
    keep = math.ceil(keep_ratio * n)
    order = np.argsort(-blended, kind="stable")
    mask = np.zeros(n, dtype=np.uint8)
    mask[order[:keep]] = 1
    return mask


@dataclass
class LayerPlan:
    name: str
    blended: np.ndarray
    mask: np.ndarray
    keep_count: int

    def kept_indices(self) -> np.ndarray:
        return np.flatnonzero(self.mask)


@dataclass
class PrunePlan:
    layers: list[LayerPlan]

    def masks(self) -> dict[str, np.ndarray]:
        return {lp.name: lp.mask for lp in self.layers}

    def total_filters(self) -> int:
        return sum(lp.mask.size for lp in self.layers)

    def total_kept(self) -> int:
        return sum(int(lp.mask.sum()) for lp in self.layers)


def prune_plan(
    snapshot: NetworkSnapshot,
    scored: list[list[ScoreVector]],
    genes: list[LayerGene],
    config: PruneConfig,
) -> PrunePlan:
    if len(genes) != snapshot.num_layers:
        raise ValueError("one gene per layer required")
    layers = []
    for li, (rec, layer_scores, gene) in enumerate(zip(snapshot.layers, scored, genes)):
        if gene.layer_index != li:
            raise ValueError(f"gene order mismatch at layer {li}")
        blended = blend_scores(gene, layer_scores)
        ratio = config.ratio_for(rec.name)
        mask = make_mask(blended, ratio)
        layers.append(LayerPlan(rec.name, blended, mask, int(mask.sum())))
    return PrunePlan(layers)


def mask_fingerprint(named_masks: dict[str, np.ndarray]) -> str:
    """Stable digest of a set of named masks; the cache key for fitness."""
    h = hashlib.sha256()
    for name, mask in named_masks.items():
        h.update(name.encode("utf-8"))
        h.update(b"\x00")
        h.update(np.asarray(mask, dtype=np.uint8).tobytes())
        h.update(b"\x01")
    return h.hexdigest()
