"""Snapshot export: capture a trained model's pruning evidence to disk.

Writes the engine's snapshot directory format directly (manifest.json plus
a tensors.bin blob of little-endian float32 payloads at 8-byte-aligned
offsets). The bridge never computes importance criteria itself; it only
gathers the raw evidence the engine scores: filter weights, batchnorm
scale/shift, loss gradients averaged over calibration batches, and
post-relu activation summaries.
"""

import hashlib
import json
import warnings
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch
from torch import nn
from torch.nn import functional as F

from .model import BridgeData, prunable_blocks

FORMAT_VERSION = 1
_ALIGN = 8


@dataclass
class ExportConfig:
    """What to capture and where to put it."""

    out: str
    model: str = "tinyconv"
    calibration_batches: int = 4
    bins: int = 8
    capture_gradients: bool = True
    capture_bn: bool = True
    capture_activations: bool = True
    batch_size: int = 32

    def __post_init__(self):
        if self.calibration_batches < 1:
            raise ValueError("calibration_batches must be >= 1")
        if self.bins < 1:
            raise ValueError("bins must be >= 1")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")


class _Blob:
    """float32 payloads at 8-byte-aligned offsets, one growing buffer."""

    def __init__(self):
        self.chunks: list[bytes] = []
        self.size = 0

    def put(self, arr: np.ndarray) -> dict:
        pad = (-self.size) % _ALIGN
        if pad:
            self.chunks.append(b"\x00" * pad)
            self.size += pad
        offset = self.size
        payload = np.ascontiguousarray(arr, dtype="<f4").tobytes()
        self.chunks.append(payload)
        self.size += len(payload)
        return {
            "shape": [int(d) for d in np.asarray(arr).shape],
            "offset": offset,
            "len_bytes": len(payload),
        }

    def put_flat(self, arr: np.ndarray) -> int:
        return self.put(arr)["offset"]


def _warn_unsupported(model: nn.Module) -> None:
    supported = (nn.Conv2d, nn.BatchNorm2d)
    for name, mod in model.named_modules():
        if list(mod.children()) or isinstance(mod, supported):
            continue
        if any(True for _ in mod.parameters(recurse=False)):
            warnings.warn(f"skipping unsupported layer {name!r} ({type(mod).__name__})")


def _calibration_batches(data: BridgeData, config: ExportConfig):
    batches = []
    for b in range(config.calibration_batches):
        sl = slice(b * config.batch_size, (b + 1) * config.batch_size)
        xb, yb = data.X_train[sl], data.y_train[sl]
        if len(xb) == 0:
            break
        batches.append((xb, yb))
    if not batches:
        raise ValueError("empty calibration set")
    return batches


def _average_gradients(model: nn.Module, batches) -> dict[int, np.ndarray]:
    """Mean task-loss gradient per parameter over the calibration batches."""
    model.eval()
    model.zero_grad(set_to_none=True)
    for xb, yb in batches:
        F.cross_entropy(model(xb), yb).backward()
    grads = {}
    with torch.no_grad():
        for p in model.parameters():
            if p.grad is not None:
                grads[id(p)] = (p.grad / len(batches)).numpy().astype(np.float32)
    model.zero_grad(set_to_none=True)
    return grads


def _collect_activations(model: nn.Module, blocks, batches) -> dict[str, np.ndarray]:
    """Post-relu values per block as (channels, samples) arrays.

    Each relu is attributed to the closest preceding conv block, which is
    the right reading for single-path conv-bn-relu stacks.
    """
    block_index = {}
    current = -1
    order = {name: i for i, (name, _, _) in enumerate(blocks)}
    relus = []
    for name, mod in model.named_modules():
        if isinstance(mod, nn.Conv2d) and name in order:
            current = order[name]
        elif isinstance(mod, nn.ReLU) and current >= 0:
            relus.append((current, mod))
            block_index[current] = blocks[current][0]
            current = -1

    collected: dict[str, list[np.ndarray]] = {name: [] for name, _, _ in blocks}
    hooks = []
    for bi, relu in relus:
        name = block_index[bi]

        def grab(_mod, _inp, out, name=name):
            a = out.detach().numpy()
            collected[name].append(a.transpose(1, 0, 2, 3).reshape(a.shape[1], -1))

        hooks.append(relu.register_forward_hook(grab))
    model.eval()
    with torch.no_grad():
        for xb, _ in batches:
            model(xb)
    for h in hooks:
        h.remove()
    return {
        name: np.concatenate(chunks, axis=1)
        for name, chunks in collected.items()
        if chunks
    }


def _activation_entry(values: np.ndarray, bins: int, blob: _Blob) -> dict:
    channels, total = values.shape
    zero_fraction = (values == 0.0).mean(axis=1).astype(np.float32)
    hists = np.zeros((channels, bins), dtype=np.float64)
    ranges = np.zeros((channels, 2), dtype=np.float64)
    for c in range(channels):
        lo, hi = float(values[c].min()), float(values[c].max())
        ranges[c] = (lo, hi)
        if hi > lo:
            hists[c], _ = np.histogram(values[c], bins=bins, range=(lo, hi))
        else:
            hists[c, 0] = total  # constant channel collapses into one bin
    return {
        "bins": bins,
        "sample_total": total,
        "zero_fraction_offset": blob.put_flat(zero_fraction),
        "hist_offset": blob.put_flat(hists),
        "range_offset": blob.put_flat(ranges),
    }


def export_snapshot(model: nn.Module, data: BridgeData, config: ExportConfig,
                    provenance: dict[str, str] | None = None) -> Path:
    """Write the snapshot directory; returns its path.

    One layer record per conv layer in topological order. Gradients are
    averaged over the calibration batches at the current weights; activation
    statistics are collected post-relu over the same batches.
    """
    blocks = prunable_blocks(model)
    if not blocks:
        raise ValueError("model has no conv layers to export")
    _warn_unsupported(model)
    batches = _calibration_batches(data, config)

    grads = _average_gradients(model, batches) if config.capture_gradients else {}
    acts = _collect_activations(model, blocks, batches) if config.capture_activations else {}

    blob = _Blob()
    layers = []
    for name, conv, bn in blocks:
        weights = conv.weight.detach().numpy().astype(np.float32)
        tensors = {"weights": blob.put(weights)}
        if config.capture_bn and bn is not None:
            tensors["bn_gamma"] = blob.put(bn.weight.detach().numpy().astype(np.float32))
            tensors["bn_beta"] = blob.put(bn.bias.detach().numpy().astype(np.float32))
        if config.capture_gradients:
            if id(conv.weight) in grads:
                tensors["weight_grad"] = blob.put(grads[id(conv.weight)])
            if config.capture_bn and bn is not None:
                if id(bn.weight) in grads:
                    tensors["bn_gamma_grad"] = blob.put(grads[id(bn.weight)])
                if id(bn.bias) in grads:
                    tensors["bn_beta_grad"] = blob.put(grads[id(bn.bias)])
        stats = None
        if name in acts:
            stats = _activation_entry(acts[name], config.bins, blob)
        layers.append(
            {
                "name": name,
                "num_filters": int(weights.shape[0]),
                "tensors": tensors,
                "activation_stats": stats,
            }
        )

    meta = {"source": "bridge-torch", "model": config.model}
    meta.update(provenance or {})
    manifest = {
        "version": FORMAT_VERSION,
        "name": config.model,
        "meta": meta,
        "layers": layers,
    }
    out = Path(config.out)
    out.mkdir(parents=True, exist_ok=True)
    (out / "tensors.bin").write_bytes(b"".join(blob.chunks))
    (out / "manifest.json").write_text(
        json.dumps(manifest, indent=1, sort_keys=True), encoding="utf-8"
    )
    return out


def snapshot_digest(path) -> str:
    """sha256 over manifest bytes then blob bytes, as spoken in the hello."""
    path = Path(path)
    h = hashlib.sha256()
    h.update((path / "manifest.json").read_bytes())
    h.update((path / "tensors.bin").read_bytes())
    return h.hexdigest()
