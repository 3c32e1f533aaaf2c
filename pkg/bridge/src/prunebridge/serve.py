"""Evaluator server: real prune-finetune-evaluate fitness over stdio.

Speaks the engine's line-delimited JSON protocol: answer the hello with a
ready (after checking the snapshot hash), then map each eval request to a
masked finetune of the model and reply with held-out accuracy. One request
at a time; run several processes for parallelism.
"""

import copy
import hashlib
import json
import sys

import numpy as np
import torch

from .model import FINETUNE_LR, BridgeData, accuracy, apply_unit_masks, prunable_blocks, train_model

PROTOCOL_VERSION = 1


def _mask_seed(masks: dict[str, np.ndarray], base_seed: int) -> np.random.SeedSequence:
    """Seed material from the mask content, so identical masks finetune
    identically regardless of request order or id."""
    h = hashlib.sha256()
    for name in sorted(masks):
        h.update(name.encode("utf-8"))
        h.update(b"\x00")
        h.update(np.asarray(masks[name], dtype=np.uint8).tobytes())
        h.update(b"\x01")
    return np.random.SeedSequence([base_seed, int(h.hexdigest()[:16], 16)])


def _parse_masks(payload, blocks) -> dict[str, np.ndarray]:
    if not isinstance(payload, dict):
        raise ValueError("masks must be an object")
    expected = {name: conv.out_channels for name, conv, _ in blocks}
    if set(payload) != set(expected):
        raise ValueError(
            f"mask layers {sorted(payload)} != model layers {sorted(expected)}"
        )
    masks = {}
    for name, bits in payload.items():
        arr = np.asarray(bits)
        if arr.shape != (expected[name],):
            raise ValueError(f"mask {name!r} has length {arr.shape}, expected {expected[name]}")
        if not np.isin(arr, (0, 1)).all():
            raise ValueError(f"mask {name!r} must be 0/1 valued")
        masks[name] = arr.astype(np.uint8)
    return masks


def evaluate_masks(model, data: BridgeData, masks: dict[str, np.ndarray],
                   finetune_epochs: int, lr: float = FINETUNE_LR,
                   base_seed: int = 0) -> float:
    """Mask, finetune the requested epochs, measure val accuracy, restore."""
    if finetune_epochs < 0:
        raise ValueError("finetune_epochs must be non-negative")
    state = copy.deepcopy(model.state_dict())
    try:
        apply_unit_masks(model, masks)
        if finetune_epochs:
            seed = int(_mask_seed(masks, base_seed).generate_state(1)[0])
            train_model(model, data, finetune_epochs, lr=lr, seed=seed, masks=masks)
        return accuracy(model, data.X_val, data.y_val)
    finally:
        model.load_state_dict(state)
        model.eval()


def serve_evaluator(model, data: BridgeData, expected_sha256: str = "",
                    lr: float = FINETUNE_LR, base_seed: int = 0,
                    instream=None, outstream=None) -> int:
    """Serve the protocol until bye or EOF; returns the process exit code.

    A hello carrying the wrong snapshot hash gets an error response and a
    nonzero exit: evaluating masks meant for a different snapshot would
    silently score the wrong network. Malformed eval requests get an error
    response and the loop continues.
    """
    fin = instream if instream is not None else sys.stdin
    fout = outstream if outstream is not None else sys.stdout

    def send(obj) -> None:
        fout.write(json.dumps(obj) + "\n")
        fout.flush()

    line = fin.readline()
    try:
        hello = json.loads(line)
    except (json.JSONDecodeError, TypeError):
        hello = None
    if not isinstance(hello, dict) or hello.get("type") != "hello":
        send({"type": "error", "id": None, "message": "expected hello"})
        return 1
    if hello.get("version") != PROTOCOL_VERSION:
        send({"type": "error", "id": None,
              "message": f"unsupported protocol version {hello.get('version')!r}"})
        return 1
    offered = hello.get("snapshot_sha256", "")
    if expected_sha256 and offered and offered != expected_sha256:
        send({"type": "error", "id": None, "message": "snapshot hash mismatch"})
        return 3
    send({"type": "ready", "version": PROTOCOL_VERSION})

    blocks = prunable_blocks(model)
    for line in fin:
        if not line.strip():
            continue
        try:
            msg = json.loads(line)
        except json.JSONDecodeError:
            send({"type": "error", "id": None, "message": "malformed request line"})
            continue
        if not isinstance(msg, dict):
            send({"type": "error", "id": None, "message": "request must be an object"})
            continue
        kind = msg.get("type")
        if kind == "bye":
            return 0
        req_id = msg.get("id")
        if kind != "eval":
            send({"type": "error", "id": req_id,
                  "message": f"unsupported request type {kind!r}"})
            continue
        try:
            masks = _parse_masks(msg.get("masks"), blocks)
            epochs = int(msg.get("finetune_epochs", 0))
            fitness = evaluate_masks(model, data, masks, epochs, lr=lr,
                                     base_seed=base_seed)
        except Exception as exc:
            send({"type": "error", "id": req_id, "message": str(exc)})
            continue
        send({"type": "result", "id": req_id, "fitness": fitness})
    return 0
