"""The 12 filter-importance criteria.

Each criterion maps one layer's evidence to a per-filter score where larger
means more important, then min-max normalizes into [0,1]. Criteria fall in
four families: weight-norm (l1, l2, fpgm, fermat), batch-norm magnitude
(bn_gamma, bn_beta), activation statistics (apoz, entropy), and first-order
gradient products (the taylor family).
"""

from __future__ import annotations

from dataclasses import dataclass
from enum import IntEnum

import numpy as np

from .snapshot import LayerRecord, NetworkSnapshot


class CriterionId(IntEnum):
    """Stable criterion codes; serialized in reports and genes."""

    L1 = 0
    L2 = 1
    FPGM = 2
    FERMAT = 3
    BN_GAMMA = 4
    BN_BETA = 5
    APOZ = 6
    ENTROPY = 7
    TAYLOR_L1 = 8
    TAYLOR_L2 = 9
    TAYLOR_BN_GAMMA = 10
    TAYLOR_BN_BETA = 11

    @property
    def label(self) -> str:
        return self.name.lower()

    @classmethod
    def from_label(cls, label: str) -> "CriterionId":
        try:
            return cls[label.strip().upper()]
        except KeyError:
            raise ValueError(f"unknown criterion {label!r}") from None


ALL_CRITERIA = tuple(CriterionId)


class CriterionUnavailableError(Exception):
    """A criterion's required evidence is absent from the layer."""

    def __init__(self, criterion: CriterionId, layer: str, missing: str):
        self.criterion = criterion
        self.layer = layer
        super().__init__(f"criterion {criterion.label} unavailable in layer {layer!r}: {missing}")


@dataclass
class ScoreVector:
    """One criterion's per-filter scores for one layer."""

    layer_index: int
    criterion: CriterionId
    raw: np.ndarray
    normalized: np.ndarray


def normalize_minmax(raw: np.ndarray) -> np.ndarray:
    """Affine map onto [0,1]; a constant vector maps to all 0.5 (no information)."""
    raw = np.asarray(raw, dtype=np.float64)
    lo, hi = raw.min(), raw.max()
    if hi == lo:
        return np.full(raw.shape, 0.5)
    return (raw - lo) / (hi - lo)


def _score(layer_index: int, criterion: CriterionId, raw: np.ndarray) -> ScoreVector:
    raw = np.asarray(raw, dtype=np.float64)
    return ScoreVector(layer_index, criterion, raw, normalize_minmax(raw))


def _flat_filters(layer: LayerRecord) -> np.ndarray:
    return np.asarray(layer.weights, dtype=np.float64).reshape(layer.num_filters, -1)


def _require(layer: LayerRecord, criterion: CriterionId, attr: str):
    value = getattr(layer, attr)
    if value is None:
        raise CriterionUnavailableError(criterion, layer.name, f"missing {attr}")
    return value


def _require_pairable(layer: LayerRecord, criterion: CriterionId) -> None:
    if layer.num_filters < 2:
        raise CriterionUnavailableError(criterion, layer.name, "needs at least 2 filters")


def score_l1(layer: LayerRecord, layer_index: int = 0) -> ScoreVector:
    """Sum of absolute weights per filter."""
    flat = _flat_filters(layer)
    return _score(layer_index, CriterionId.L1, np.abs(flat).sum(axis=1))


def score_l2(layer: LayerRecord, layer_index: int = 0) -> ScoreVector:
    """Euclidean norm per filter."""
    flat = _flat_filters(layer)
    return _score(layer_index, CriterionId.L2, np.linalg.norm(flat, axis=1))


def weiszfeld(points: np.ndarray, tol: float = 1e-8, max_iter: int = 200) -> np.ndarray:
    """Approximate geometric median of row vectors.

    Iteratively re-weighted averaging from the centroid; a point closer than
    1e-12 to the current iterate is excluded from that step's update so the
    weights stay finite. Stops when the iterate moves less than ``tol`` or
    after ``max_iter`` steps.
    """
    pts = np.asarray(points, dtype=np.float64)
    if pts.ndim != 2 or pts.shape[0] < 1:
        raise ValueError("points must be a non-empty 2-D array")
    if not np.all(np.isfinite(pts)):
        raise ValueError("non-finite input point")
    if pts.shape[0] == 1:
        return pts[0].copy()
    y = pts.mean(axis=0)
    for _ in range(max_iter):
        dist = np.linalg.norm(pts - y, axis=1)
        keep = dist >= 1e-12
        if not keep.any():
            return y  # all points coincide with the iterate
        w = 1.0 / dist[keep]
        y_next = (pts[keep] * w[:, None]).sum(axis=0) / w.sum()
        if np.linalg.norm(y_next - y) <= tol:
            return y_next
        y = y_next
    return y


def score_fpgm(layer: LayerRecord, layer_index: int = 0) -> ScoreVector:
    """Sum of pairwise distances to the other filters; pack-center filters score low."""
    _require_pairable(layer, CriterionId.FPGM)
    flat = _flat_filters(layer)
    diffs = flat[:, None, :] - flat[None, :, :]
    dist = np.linalg.norm(diffs, axis=2)
    return _score(layer_index, CriterionId.FPGM, dist.sum(axis=1))


def score_fermat(layer: LayerRecord, layer_index: int = 0) -> ScoreVector:
    """Distance to the geometric median of the layer's filters."""
    _require_pairable(layer, CriterionId.FERMAT)
    flat = _flat_filters(layer)
    median = weiszfeld(flat, tol=1e-8, max_iter=200)
    return _score(layer_index, CriterionId.FERMAT, np.linalg.norm(flat - median, axis=1))


def score_bn_gamma(layer: LayerRecord, layer_index: int = 0) -> ScoreVector:
    gamma = _require(layer, CriterionId.BN_GAMMA, "bn_gamma")
    return _score(layer_index, CriterionId.BN_GAMMA, np.abs(np.asarray(gamma, dtype=np.float64)))


def score_bn_beta(layer: LayerRecord, layer_index: int = 0) -> ScoreVector:
    beta = _require(layer, CriterionId.BN_BETA, "bn_beta")
    return _score(layer_index, CriterionId.BN_BETA, np.abs(np.asarray(beta, dtype=np.float64)))


def score_apoz(layer: LayerRecord, layer_index: int = 0) -> ScoreVector:
    """Fraction of the calibration set on which the channel fires (1 - zero fraction)."""
    stats = _require(layer, CriterionId.APOZ, "activation_stats")
    return _score(layer_index, CriterionId.APOZ, 1.0 - np.asarray(stats.zero_fraction, dtype=np.float64))


def score_entropy(layer: LayerRecord, layer_index: int = 0) -> ScoreVector:
    """Shannon entropy (nats) of each channel's activation histogram."""
    stats = _require(layer, CriterionId.ENTROPY, "activation_stats")
    counts = np.asarray(stats.histograms, dtype=np.float64)
    q = counts / counts.sum(axis=1, keepdims=True)
    with np.errstate(divide="ignore", invalid="ignore"):
        terms = np.where(q > 0, q * np.log(q), 0.0)
    return _score(layer_index, CriterionId.ENTROPY, -terms.sum(axis=1))


def _taylor_product(layer: LayerRecord, criterion: CriterionId) -> np.ndarray:
    grad = _require(layer, criterion, "weight_grad")
    w = _flat_filters(layer)
    g = np.asarray(grad, dtype=np.float64).reshape(layer.num_filters, -1)
    return g * w


def score_taylor_l1(layer: LayerRecord, layer_index: int = 0) -> ScoreVector:
    """L1 norm of the elementwise gradient-weight product per filter."""
    prod = _taylor_product(layer, CriterionId.TAYLOR_L1)
    return _score(layer_index, CriterionId.TAYLOR_L1, np.abs(prod).sum(axis=1))


def score_taylor_l2(layer: LayerRecord, layer_index: int = 0) -> ScoreVector:
    prod = _taylor_product(layer, CriterionId.TAYLOR_L2)
    return _score(layer_index, CriterionId.TAYLOR_L2, np.linalg.norm(prod, axis=1))


def _taylor_bn(layer: LayerRecord, criterion: CriterionId, param_attr: str, grad_attr: str,
               layer_index: int) -> ScoreVector:
    param = _require(layer, criterion, param_attr)
    grad = _require(layer, criterion, grad_attr)
    term = np.asarray(param, dtype=np.float64) * np.asarray(grad, dtype=np.float64)
    return _score(layer_index, criterion, term**2)


def score_taylor_bn_gamma(layer: LayerRecord, layer_index: int = 0) -> ScoreVector:
    """Squared first-order term of the BN scale: (gamma * dL/dgamma)^2."""
    return _taylor_bn(layer, CriterionId.TAYLOR_BN_GAMMA, "bn_gamma", "bn_gamma_grad", layer_index)


def score_taylor_bn_beta(layer: LayerRecord, layer_index: int = 0) -> ScoreVector:
    return _taylor_bn(layer, CriterionId.TAYLOR_BN_BETA, "bn_beta", "bn_beta_grad", layer_index)


_SCORERS = {
    CriterionId.L1: score_l1,
    CriterionId.L2: score_l2,
    CriterionId.FPGM: score_fpgm,
    CriterionId.FERMAT: score_fermat,
    CriterionId.BN_GAMMA: score_bn_gamma,
    CriterionId.BN_BETA: score_bn_beta,
    CriterionId.APOZ: score_apoz,
    CriterionId.ENTROPY: score_entropy,
    CriterionId.TAYLOR_L1: score_taylor_l1,
    CriterionId.TAYLOR_L2: score_taylor_l2,
    CriterionId.TAYLOR_BN_GAMMA: score_taylor_bn_gamma,
    CriterionId.TAYLOR_BN_BETA: score_taylor_bn_beta,
}


def score_criterion(layer: LayerRecord, criterion: CriterionId, layer_index: int = 0) -> ScoreVector:
    return _SCORERS[criterion](layer, layer_index)


def criterion_available(layer: LayerRecord, criterion: CriterionId) -> bool:
    needs_pair = criterion in (CriterionId.FPGM, CriterionId.FERMAT)
    if needs_pair and layer.num_filters < 2:
        return False
    required = {
        CriterionId.BN_GAMMA: ("bn_gamma",),
        CriterionId.BN_BETA: ("bn_beta",),
        CriterionId.APOZ: ("activation_stats",),
        CriterionId.ENTROPY: ("activation_stats",),
        CriterionId.TAYLOR_L1: ("weight_grad",),
        CriterionId.TAYLOR_L2: ("weight_grad",),
        CriterionId.TAYLOR_BN_GAMMA: ("bn_gamma", "bn_gamma_grad"),
        CriterionId.TAYLOR_BN_BETA: ("bn_beta", "bn_beta_grad"),
    }.get(criterion, ())
    return all(getattr(layer, attr) is not None for attr in required)


def score_all(
    snapshot: NetworkSnapshot,
    available_only: bool = False,
    criteria: tuple[CriterionId, ...] = ALL_CRITERIA,
) -> list[list[ScoreVector]]:
    """Score every layer under every requested criterion.

    The resulting criteria set is global: a criterion available in one layer
    but not another is an error regardless of ``available_only``, because a
    per-layer criteria set would silently change the cluster structure.
    """
    criteria = tuple(criteria)
    availability = {
        c: [criterion_available(rec, c) for rec in snapshot.layers] for c in criteria
    }
    for c, flags in availability.items():
        if any(flags) and not all(flags):
            missing = snapshot.layers[flags.index(False)].name
            raise CriterionUnavailableError(
                c, missing, "criterion available in some layers but not all"
            )
    usable = []
    for c in criteria:
        if all(availability[c]):
            usable.append(c)
        elif not available_only:
            rec = snapshot.layers[0]
            raise CriterionUnavailableError(c, rec.name, "required evidence absent")
    return [
        [score_criterion(rec, c, layer_index=li) for c in usable]
        for li, rec in enumerate(snapshot.layers)
    ]
