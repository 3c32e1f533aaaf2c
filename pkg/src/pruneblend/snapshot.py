"""Network snapshot data model, on-disk format, and synthetic generation.

A snapshot is the framework-neutral capture of everything the scoring
criteria need: per-layer filter weights, batch-norm scale/shift, gradients,
and post-activation summary statistics. On disk it is a directory holding
``manifest.json`` plus a single ``tensors.bin`` blob of little-endian
float32 payloads at 8-byte-aligned offsets.
"""

from __future__ import annotations

import hashlib
import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

FORMAT_VERSION = 1
DEFAULT_HIST_BINS = 32
_ALIGN = 8

# Roles a layer may carry in the manifest "tensors" table.
TENSOR_ROLES = (
    "weights",
    "bn_gamma",
    "bn_beta",
    "weight_grad",
    "bn_gamma_grad",
    "bn_beta_grad",
)

# float32 represents integers exactly only up to 2**24; histogram counts
# ride in the blob as float32, so larger totals would silently corrupt.
_MAX_EXACT_COUNT = 2**24


class SnapshotError(Exception):
    """Raised for malformed snapshot files or invariant violations."""


@dataclass
class ActivationStats:
    """Post-activation summaries for one layer's channels.

    zero_fraction[i] is the fraction of non-positive post-activation values
    of channel i over the calibration set. histograms[i] holds ``bins``
    counts over the per-channel range hist_range[i] = (lo, hi); every
    channel's counts sum to ``sample_total``.
    """

    zero_fraction: np.ndarray          # (num_filters,) float32 in [0,1]
    histograms: np.ndarray             # (num_filters, bins) non-negative int64
    hist_range: np.ndarray             # (num_filters, 2) float32, lo <= hi
    sample_total: int

    @property
    def bins(self) -> int:
        return self.histograms.shape[1]


@dataclass
class LayerRecord:
    """One prunable layer: its filters and whatever evidence was captured."""

    name: str
    num_filters: int
    weights: np.ndarray                        # (num_filters, fan_in...)
    bn_gamma: np.ndarray | None = None         # (num_filters,)
    bn_beta: np.ndarray | None = None
    weight_grad: np.ndarray | None = None      # same shape as weights
    bn_gamma_grad: np.ndarray | None = None
    bn_beta_grad: np.ndarray | None = None
    activation_stats: ActivationStats | None = None

    def optional_tensors(self) -> dict[str, np.ndarray | None]:
        return {
            "bn_gamma": self.bn_gamma,
            "bn_beta": self.bn_beta,
            "weight_grad": self.weight_grad,
            "bn_gamma_grad": self.bn_gamma_grad,
            "bn_beta_grad": self.bn_beta_grad,
        }


@dataclass
class NetworkSnapshot:
    """Immutable-after-load capture of a network's prunable layers."""

    name: str
    layers: list[LayerRecord]
    meta: dict[str, str] = field(default_factory=dict)

    @property
    def num_layers(self) -> int:
        return len(self.layers)

    def layer_names(self) -> list[str]:
        return [rec.name for rec in self.layers]


@dataclass
class PruneConfig:
    """Fraction of filters kept per layer; overrides win over the default."""

    default_keep_ratio: float = 0.5
    overrides: dict[str, float] = field(default_factory=dict)

    def __post_init__(self):
        for name, ratio in [("default", self.default_keep_ratio), *self.overrides.items()]:
            if not (0.0 < ratio <= 1.0):
                raise ValueError(f"keep_ratio for {name!r} must be in (0, 1], got {ratio}")

    def ratio_for(self, layer_name: str) -> float:
        return self.overrides.get(layer_name, self.default_keep_ratio)

    def keep_count(self, layer_name: str, num_filters: int) -> int:
        return math.ceil(self.ratio_for(layer_name) * num_filters)


def _as_f32(arr, what: str) -> np.ndarray:
    out = np.ascontiguousarray(arr, dtype="<f4")
    if not np.all(np.isfinite(out)):
        raise SnapshotError(f"non-finite value in {what}")
    return out


def validate_snapshot(snap: NetworkSnapshot) -> None:
    """Check every structural invariant; raise SnapshotError naming the culprit."""
    if snap.num_layers < 1:
        raise SnapshotError("snapshot must contain at least one layer")
    names = snap.layer_names()
    if len(set(names)) != len(names):
        raise SnapshotError("layer names must be unique")
    for rec in snap.layers:
        loc = f"layer {rec.name!r}"
        if rec.num_filters < 1:
            raise SnapshotError(f"{loc}: num_filters must be positive")
        if rec.weights.ndim < 1 or rec.weights.shape[0] != rec.num_filters:
            raise SnapshotError(
                f"{loc}: weights leading dimension {rec.weights.shape} "
                f"!= num_filters {rec.num_filters}"
            )
        if not np.all(np.isfinite(rec.weights)):
            raise SnapshotError(f"{loc}: non-finite value in tensor 'weights'")
        for role, tensor in rec.optional_tensors().items():
            if tensor is None:
                continue
            if not np.all(np.isfinite(tensor)):
                raise SnapshotError(f"{loc}: non-finite value in tensor {role!r}")
            if role == "weight_grad":
                if tensor.shape != rec.weights.shape:
                    raise SnapshotError(
                        f"{loc}: weight_grad shape {tensor.shape} != weights {rec.weights.shape}"
                    )
            elif tensor.shape != (rec.num_filters,):
                raise SnapshotError(
                    f"{loc}: {role} shape {tensor.shape} != ({rec.num_filters},)"
                )
        stats = rec.activation_stats
        if stats is None:
            continue
        if stats.zero_fraction.shape != (rec.num_filters,):
            raise SnapshotError(f"{loc}: zero_fraction length != num_filters")
        if np.any(stats.zero_fraction < 0) or np.any(stats.zero_fraction > 1):
            raise SnapshotError(f"{loc}: zero_fraction outside [0, 1]")
        if not np.all(np.isfinite(stats.zero_fraction)):
            raise SnapshotError(f"{loc}: non-finite value in tensor 'zero_fraction'")
        if stats.histograms.shape[0] != rec.num_filters:
            raise SnapshotError(f"{loc}: histogram channel count != num_filters")
        if np.any(stats.histograms < 0):
            raise SnapshotError(f"{loc}: negative histogram count")
        if stats.sample_total < 1:
            raise SnapshotError(f"{loc}: sample_total must be positive")
        if stats.sample_total > _MAX_EXACT_COUNT:
            raise SnapshotError(f"{loc}: sample_total exceeds exact float32 range")
        totals = stats.histograms.sum(axis=1)
        if np.any(totals != stats.sample_total):
            bad = int(np.argmax(totals != stats.sample_total))
            raise SnapshotError(
                f"{loc}: channel {bad} histogram sums to {int(totals[bad])}, "
                f"expected sample_total {stats.sample_total}"
            )
        if stats.hist_range.shape != (rec.num_filters, 2):
            raise SnapshotError(f"{loc}: hist_range must be (num_filters, 2)")
        if not np.all(np.isfinite(stats.hist_range)):
            raise SnapshotError(f"{loc}: non-finite value in tensor 'hist_range'")
        if np.any(stats.hist_range[:, 0] > stats.hist_range[:, 1]):
            raise SnapshotError(f"{loc}: hist_min > hist_max for some channel")


class _BlobWriter:
    """Appends float32 payloads at 8-byte-aligned offsets."""

    def __init__(self):
        self.chunks: list[bytes] = []
        self.size = 0

    def append(self, arr: np.ndarray) -> int:
        pad = (-self.size) % _ALIGN
        if pad:
            self.chunks.append(b"\x00" * pad)
            self.size += pad
        offset = self.size
        payload = np.ascontiguousarray(arr, dtype="<f4").tobytes()
        self.chunks.append(payload)
        self.size += len(payload)
        return offset


def save_snapshot(snap: NetworkSnapshot, path) -> None:
    """Write the manifest + blob directory; validates first."""
    validate_snapshot(snap)
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    blob = _BlobWriter()
    layers_json = []
    for rec in snap.layers:
        tensors = {}
        for role in TENSOR_ROLES:
            tensor = rec.weights if role == "weights" else rec.optional_tensors()[role]
            if tensor is None:
                continue
            arr = _as_f32(tensor, f"layer {rec.name!r} tensor {role!r}")
            tensors[role] = {
                "shape": [int(d) for d in arr.shape],
                "offset": blob.append(arr),
                "len_bytes": arr.size * 4,
            }
        stats_json = None
        stats = rec.activation_stats
        if stats is not None:
            zf = _as_f32(stats.zero_fraction, f"layer {rec.name!r} zero_fraction")
            hist = np.ascontiguousarray(stats.histograms, dtype="<f4")
            rng_arr = _as_f32(stats.hist_range, f"layer {rec.name!r} hist_range")
            stats_json = {
                "bins": int(stats.bins),
                "sample_total": int(stats.sample_total),
                "zero_fraction_offset": blob.append(zf),
                "hist_offset": blob.append(hist),
                "range_offset": blob.append(rng_arr),
            }
        layers_json.append(
            {
                "name": rec.name,
                "num_filters": int(rec.num_filters),
                "tensors": tensors,
                "activation_stats": stats_json,
            }
        )
    manifest = {
        "version": FORMAT_VERSION,
        "name": snap.name,
        "meta": dict(snap.meta),
        "layers": layers_json,
    }
    (path / "tensors.bin").write_bytes(b"".join(blob.chunks))
    tmp = path / "manifest.json.tmp"
    tmp.write_text(json.dumps(manifest, indent=1, sort_keys=True), encoding="utf-8")
    tmp.replace(path / "manifest.json")


def _read_f32(blob: bytes, offset: int, count: int, what: str) -> np.ndarray:
    if offset % _ALIGN:
        raise SnapshotError(f"{what}: offset {offset} not 8-byte aligned")
    end = offset + count * 4
    if offset < 0 or end > len(blob):
        raise SnapshotError(
            f"{what}: payload [{offset}, {end}) exceeds blob of {len(blob)} bytes"
        )
    return np.frombuffer(blob, dtype="<f4", count=count, offset=offset).copy()


def load_snapshot(path) -> NetworkSnapshot:
    """Load and fully validate a snapshot directory."""
    path = Path(path)
    manifest_path = path / "manifest.json"
    if not manifest_path.is_file():
        raise SnapshotError(f"missing manifest: {manifest_path}")
    try:
        manifest = json.loads(manifest_path.read_text(encoding="utf-8"))
    except (json.JSONDecodeError, UnicodeDecodeError) as exc:
        raise SnapshotError(f"corrupt manifest {manifest_path}: {exc}") from exc
    if manifest.get("version") != FORMAT_VERSION:
        raise SnapshotError(f"unsupported snapshot version {manifest.get('version')!r}")
    blob_path = path / "tensors.bin"
    if not blob_path.is_file():
        raise SnapshotError(f"missing tensor blob: {blob_path}")
    blob = blob_path.read_bytes()

    layers = []
    for entry in manifest.get("layers", []):
        name = entry.get("name")
        loc = f"layer {name!r}"
        tensors = {}
        for role, spec in entry.get("tensors", {}).items():
            if role not in TENSOR_ROLES:
                raise SnapshotError(f"{loc}: unknown tensor role {role!r}")
            shape = tuple(int(d) for d in spec["shape"])
            count = int(np.prod(shape, dtype=np.int64)) if shape else 1
            if int(spec["len_bytes"]) != count * 4:
                raise SnapshotError(
                    f"{loc}: tensor {role!r} declares shape {shape} "
                    f"({count} floats) but {spec['len_bytes']} bytes"
                )
            flat = _read_f32(blob, int(spec["offset"]), count, f"{loc} tensor {role!r}")
            if not np.all(np.isfinite(flat)):
                raise SnapshotError(f"{loc}: non-finite value in tensor {role!r}")
            tensors[role] = flat.reshape(shape)
        if "weights" not in tensors:
            raise SnapshotError(f"{loc}: missing required tensor 'weights'")
        stats = None
        sj = entry.get("activation_stats")
        if sj is not None:
            bins = int(sj["bins"])
            nf = int(entry["num_filters"])
            zf = _read_f32(blob, int(sj["zero_fraction_offset"]), nf, f"{loc} zero_fraction")
            hist_f = _read_f32(blob, int(sj["hist_offset"]), nf * bins, f"{loc} histograms")
            hist = hist_f.reshape(nf, bins)
            if np.any(hist != np.round(hist)):
                raise SnapshotError(f"{loc}: non-integer histogram count")
            rng_arr = _read_f32(blob, int(sj["range_offset"]), nf * 2, f"{loc} hist_range")
            stats = ActivationStats(
                zero_fraction=zf,
                histograms=hist.astype(np.int64),
                hist_range=rng_arr.reshape(nf, 2),
                sample_total=int(sj["sample_total"]),
            )
        layers.append(
            LayerRecord(
                name=name,
                num_filters=int(entry["num_filters"]),
                weights=tensors["weights"],
                bn_gamma=tensors.get("bn_gamma"),
                bn_beta=tensors.get("bn_beta"),
                weight_grad=tensors.get("weight_grad"),
                bn_gamma_grad=tensors.get("bn_gamma_grad"),
                bn_beta_grad=tensors.get("bn_beta_grad"),
                activation_stats=stats,
            )
        )
    snap = NetworkSnapshot(name=manifest.get("name", ""), layers=layers, meta=manifest.get("meta", {}))
    validate_snapshot(snap)
    return snap


def snapshot_digest(path) -> str:
    """sha256 over manifest bytes then blob bytes; identifies a snapshot on the wire."""
    path = Path(path)
    h = hashlib.sha256()
    h.update((path / "manifest.json").read_bytes())
    h.update((path / "tensors.bin").read_bytes())
    return h.hexdigest()


@dataclass
class SynthSpec:
    """Dimensions for a synthetic snapshot with planted filter importance."""

    num_layers: int = 3
    filters_per_layer: tuple[int, ...] | int = 16
    fan_in: int = 8
    seed: int = 0
    hist_bins: int = DEFAULT_HIST_BINS
    sample_total: int = 4096

    def filters(self) -> list[int]:
        if isinstance(self.filters_per_layer, int):
            return [self.filters_per_layer] * self.num_layers
        counts = list(self.filters_per_layer)
        if len(counts) != self.num_layers:
            raise ValueError("filters_per_layer length must equal num_layers")
        return counts


def _noisy_monotone(truth: np.ndarray, rng: np.random.Generator, noise: float) -> np.ndarray:
    """Positive values increasing with truth on average, with lognormal jitter."""
    return (0.05 + truth) * np.exp(noise * rng.standard_normal(truth.shape))


# Jitter scale for the planted construction. Large enough that no single
# criterion ranks filters perfectly, small enough that every criterion
# stays positively rank-correlated with the planted importance.
_SYNTH_NOISE = 0.5


def synth_generate(spec: SynthSpec) -> tuple[NetworkSnapshot, dict[str, np.ndarray]]:
    """Build a fully-populated snapshot whose filter importance is known.

    Every captured quantity (weight magnitude, BN scale, gradients,
    activation liveliness, activation spread) grows with the planted
    importance but carries independent noise, so the 12 criteria agree
    imperfectly with the truth and with each other.
    """
    counts = spec.filters()
    if spec.num_layers < 1:
        raise ValueError("need at least one layer")
    if any(c < 2 for c in counts):
        raise ValueError("every layer needs at least 2 filters")
    if spec.fan_in < 1:
        raise ValueError("fan_in must be positive")
    rng = np.random.default_rng(spec.seed)
    layers = []
    planted: dict[str, np.ndarray] = {}
    for li, nf in enumerate(counts):
        name = f"layer{li}"
        # Distinct importances in [0,1]: one per bin of a uniform grid.
        truth = (np.arange(nf) + rng.uniform(0.1, 0.9, size=nf)) / nf
        truth = rng.permutation(truth)

        magnitude = _noisy_monotone(truth, rng, _SYNTH_NOISE)
        directions = rng.standard_normal((nf, spec.fan_in))
        directions /= np.linalg.norm(directions, axis=1, keepdims=True)
        weights = directions * magnitude[:, None]

        gamma_sign = rng.choice([-1.0, 1.0], size=nf)
        bn_gamma = gamma_sign * _noisy_monotone(truth, rng, _SYNTH_NOISE)
        bn_beta = rng.choice([-1.0, 1.0], size=nf) * _noisy_monotone(truth, rng, _SYNTH_NOISE)

        grad_scale = _noisy_monotone(truth, rng, _SYNTH_NOISE)
        grad_dirs = rng.standard_normal((nf, spec.fan_in))
        grad_dirs /= np.linalg.norm(grad_dirs, axis=1, keepdims=True)
        weight_grad = grad_dirs * grad_scale[:, None]

        bn_gamma_grad = rng.choice([-1.0, 1.0], size=nf) * _noisy_monotone(truth, rng, _SYNTH_NOISE)
        # The BN-Taylor score is (param * grad)^2, so correlate the grad with
        # truth relative to the param it multiplies.
        bn_gamma_grad /= np.maximum(np.abs(bn_gamma), 1e-3) ** 0.5
        bn_beta_grad = rng.choice([-1.0, 1.0], size=nf) * _noisy_monotone(truth, rng, _SYNTH_NOISE)
        bn_beta_grad /= np.maximum(np.abs(bn_beta), 1e-3) ** 0.5

        alive = np.clip(_noisy_monotone(truth, rng, _SYNTH_NOISE), 0.0, 1.05)
        zero_fraction = np.clip(1.0 - alive, 0.0, 1.0)

        # Histogram spread grows with importance: wider Gaussian over bins.
        bins = spec.hist_bins
        centers = np.arange(bins)
        sigma = 0.6 + (bins / 3.0) * np.clip(_noisy_monotone(truth, rng, _SYNTH_NOISE), 0.0, 1.2)
        hist = np.empty((nf, bins), dtype=np.int64)
        for i in range(nf):
            p = np.exp(-0.5 * ((centers - (bins - 1) / 2.0) / sigma[i]) ** 2)
            p /= p.sum()
            hist[i] = rng.multinomial(spec.sample_total, p)
        lo = rng.uniform(-1.0, 0.0, size=nf)
        hi = lo + rng.uniform(0.5, 2.0, size=nf)
        hist_range = np.stack([lo, hi], axis=1)

        layers.append(
            LayerRecord(
                name=name,
                num_filters=nf,
                weights=weights.astype(np.float32),
                bn_gamma=bn_gamma.astype(np.float32),
                bn_beta=bn_beta.astype(np.float32),
                weight_grad=weight_grad.astype(np.float32),
                bn_gamma_grad=bn_gamma_grad.astype(np.float32),
                bn_beta_grad=bn_beta_grad.astype(np.float32),
                activation_stats=ActivationStats(
                    zero_fraction=zero_fraction.astype(np.float32),
                    histograms=hist,
                    hist_range=hist_range.astype(np.float32),
                    sample_total=spec.sample_total,
                ),
            )
        )
        planted[name] = truth
    snap = NetworkSnapshot(
        name=f"synth-seed{spec.seed}",
        layers=layers,
        meta={"source": "synth", "seed": str(spec.seed)},
    )
    validate_snapshot(snap)
    return snap, planted


def save_planted(planted: dict[str, np.ndarray], path) -> None:
    """Sidecar JSON holding the planted per-layer importance vectors."""
    payload = {name: [float(v) for v in vec] for name, vec in planted.items()}
    Path(path).write_text(json.dumps(payload, indent=1), encoding="utf-8")


def load_planted(path) -> dict[str, np.ndarray]:
    raw = json.loads(Path(path).read_text(encoding="utf-8"))
    return {name: np.asarray(vec, dtype=np.float64) for name, vec in raw.items()}
