"""Bridge acceptance: round-trip into the engine, protocol conformance,
and real masked-finetune fitness on the torch testbed.

The engine is exercised only through its external interfaces: the snapshot
directory format, the snapshot digest, and the line-delimited evaluator
protocol.
"""

import io
import json
import subprocess
import sys
import time
import warnings

import numpy as np
import pytest

from prunebridge import (
    ExportConfig,
    TinyConvNet,
    accuracy,
    evaluate_masks,
    export_snapshot,
    make_data,
    prunable_blocks,
    serve_evaluator,
    snapshot_digest,
    train_model,
)
from prunebridge.cli import DEFAULT_TRAIN_EPOCHS

from pruneblend.criteria import CriterionUnavailableError, score_all
from pruneblend.fitness import ExternalEvaluator, FitnessRequest
from pruneblend.snapshot import load_snapshot
from pruneblend.snapshot import snapshot_digest as engine_digest

_T0 = time.perf_counter()
SECONDARY_BUDGET = 300.0


@pytest.fixture(scope="module")
def trained():
    data = make_data(0)
    model = TinyConvNet(0)
    train_model(model, data, DEFAULT_TRAIN_EPOCHS, seed=0)
    return model, data


def _export(trained, out, **overrides):
    model, data = trained
    config = ExportConfig(out=str(out), **overrides)
    provenance = {
        "model_seed": "0",
        "data_seed": "0",
        "train_epochs": str(DEFAULT_TRAIN_EPOCHS),
        "val_accuracy": repr(accuracy(model, data.X_val, data.y_val)),
    }
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", UserWarning)
        return export_snapshot(model, data, config, provenance)


@pytest.fixture(scope="module")
def snap_dir(trained, tmp_path_factory):
    return _export(trained, tmp_path_factory.mktemp("export") / "snap")


# -- round trip into the engine ----------------------------------------------


def test_roundtrip_validates_under_engine_loader(snap_dir):
    snap = load_snapshot(snap_dir)
    assert snap.layer_names() == ["conv1", "conv2"]
    assert [r.num_filters for r in snap.layers] == [8, 16]
    assert snap.layers[0].weights.shape == (8, 3, 3, 3)
    assert snap.layers[1].weights.shape == (16, 8, 3, 3)
    for rec in snap.layers:
        assert rec.bn_gamma is not None and rec.bn_beta is not None
        assert rec.weight_grad is not None and rec.weight_grad.shape == rec.weights.shape
        assert rec.bn_gamma_grad is not None and rec.bn_beta_grad is not None
        assert rec.activation_stats is not None
        assert rec.activation_stats.bins == 8
    assert snap.meta["source"] == "bridge-torch"


def test_engine_scores_all_criteria_finitely(snap_dir):
    snap = load_snapshot(snap_dir)
    scored = score_all(snap)
    assert len(scored) == snap.num_layers
    for layer_scores in scored:
        assert len(layer_scores) == 12
        for sv in layer_scores:
            assert np.all(np.isfinite(sv.raw)), sv.criterion.label
            assert np.all(np.isfinite(sv.normalized)), sv.criterion.label
            assert sv.normalized.min() >= 0.0 and sv.normalized.max() <= 1.0


def test_export_is_deterministic(trained, snap_dir, tmp_path):
    again = _export(trained, tmp_path / "snap2")
    assert (again / "tensors.bin").read_bytes() == (snap_dir / "tensors.bin").read_bytes()
    assert snapshot_digest(again) == snapshot_digest(snap_dir)


def test_bridge_digest_matches_engine_digest(snap_dir):
    assert snapshot_digest(snap_dir) == engine_digest(snap_dir)


def test_unsupported_layers_warn(trained, tmp_path):
    model, data = trained
    with pytest.warns(UserWarning, match="head"):
        export_snapshot(model, data, ExportConfig(out=str(tmp_path / "warned")))


def test_disabling_gradients_drops_taylor_criteria(trained, tmp_path):
    snap = load_snapshot(_export(trained, tmp_path / "nograd", capture_gradients=False))
    with pytest.raises(CriterionUnavailableError):
        score_all(snap)
    labels = [sv.criterion.label for sv in score_all(snap, available_only=True)[0]]
    assert labels == ["l1", "l2", "fpgm", "fermat", "bn_gamma", "bn_beta", "apoz", "entropy"]


def test_export_config_validation(trained, tmp_path):
    model, data = trained
    with pytest.raises(ValueError, match="calibration_batches"):
        ExportConfig(out=str(tmp_path), calibration_batches=0)
    with pytest.raises(ValueError, match="bins"):
        ExportConfig(out=str(tmp_path), bins=0)
    empty = make_data(0)
    empty.X_train = empty.X_train[:0]
    empty.y_train = empty.y_train[:0]
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", UserWarning)
        with pytest.raises(ValueError, match="empty calibration"):
            export_snapshot(model, empty, ExportConfig(out=str(tmp_path / "x")))


# -- evaluator over stdio ------------------------------------------------------


def _serve_command(snap_dir):
    return [sys.executable, "-m", "prunebridge", "serve", "--snapshot", str(snap_dir)]


def _half_masks(snap, seed):
    rng = np.random.default_rng([seed, 5150])
    masks = {}
    for rec in snap.layers:
        m = np.zeros(rec.num_filters, dtype=np.uint8)
        m[rng.choice(rec.num_filters, size=rec.num_filters // 2, replace=False)] = 1
        masks[rec.name] = m
    return masks


def test_serve_fitness_through_engine_client(snap_dir):
    """All-ones at zero epochs reproduces the recorded validation accuracy;
    a random half mask scores strictly below it, with and without finetune."""
    snap = load_snapshot(snap_dir)
    ones = {r.name: np.ones(r.num_filters, dtype=np.uint8) for r in snap.layers}
    half = _half_masks(snap, 0)
    with ExternalEvaluator(_serve_command(snap_dir),
                           snapshot_sha256=engine_digest(snap_dir),
                           timeout=240) as ev:
        f_ones = ev(FitnessRequest(1, ones, 0)).fitness
        f_half = ev(FitnessRequest(2, half, 0)).fitness
        f_half_ft = ev(FitnessRequest(3, half, 1)).fitness
    assert f_ones == float(snap.meta["val_accuracy"])
    assert 0.0 <= f_half < f_ones
    assert 0.0 <= f_half_ft < f_ones


def _check_transcript(sent, received):
    """The protocol grammar; unknown extra fields are tolerated by design."""
    assert len(sent) >= 2 and len(received) >= 1
    hello = json.loads(sent[0])
    assert hello["type"] == "hello" and hello["version"] == 1
    assert isinstance(hello["snapshot_sha256"], str)
    ready = json.loads(received[0])
    assert ready["type"] == "ready" and ready["version"] == 1
    evals = [json.loads(s) for s in sent[1:-1]]
    replies = [json.loads(r) for r in received[1:]]
    assert json.loads(sent[-1])["type"] == "bye"
    assert len(replies) == len(evals)
    for req, rep in zip(evals, replies):
        assert req["type"] == "eval"
        assert isinstance(req["id"], int)
        assert isinstance(req["finetune_epochs"], int) and req["finetune_epochs"] >= 0
        assert isinstance(req["masks"], dict)
        for bits in req["masks"].values():
            assert all(b in (0, 1) for b in bits)
        assert rep["type"] in ("result", "error")
        assert rep["id"] == req["id"]
        if rep["type"] == "result":
            assert isinstance(rep["fitness"], (int, float))
            assert np.isfinite(rep["fitness"])
        else:
            assert isinstance(rep["message"], str) and rep["message"]


def test_serve_transcript_passes_protocol_grammar(snap_dir):
    snap = load_snapshot(snap_dir)
    ones = {r.name: [1] * r.num_filters for r in snap.layers}
    bad = {"conv1": [1] * 8}  # missing conv2
    requests = [
        {"type": "eval", "id": 7, "finetune_epochs": 0, "masks": ones},
        {"type": "eval", "id": 8, "finetune_epochs": 0, "masks": bad},
        {"type": "eval", "id": 9, "finetune_epochs": 1,
         "masks": {k: [int(b) for b in v] for k, v in _half_masks(snap, 1).items()}},
    ]
    sent = [json.dumps({"type": "hello", "version": 1,
                        "snapshot_sha256": engine_digest(snap_dir)})]
    sent += [json.dumps(r) for r in requests]
    sent.append(json.dumps({"type": "bye"}))

    proc = subprocess.Popen(_serve_command(snap_dir), stdin=subprocess.PIPE,
                            stdout=subprocess.PIPE, text=True, bufsize=1)
    received = []
    try:
        proc.stdin.write(sent[0] + "\n")
        proc.stdin.flush()
        received.append(proc.stdout.readline())
        for line in sent[1:-1]:
            proc.stdin.write(line + "\n")
            proc.stdin.flush()
            received.append(proc.stdout.readline())
        proc.stdin.write(sent[-1] + "\n")
        proc.stdin.flush()
        assert proc.wait(timeout=240) == 0
    finally:
        proc.kill()

    _check_transcript(sent, received)
    replies = {json.loads(r)["id"]: json.loads(r) for r in received[1:]}
    assert replies[7]["type"] == "result"
    assert replies[8]["type"] == "error" and "conv2" in replies[8]["message"]
    assert replies[9]["type"] == "result"


def test_serve_rejects_wrong_snapshot_hash(snap_dir):
    proc = subprocess.Popen(_serve_command(snap_dir), stdin=subprocess.PIPE,
                            stdout=subprocess.PIPE, text=True, bufsize=1)
    try:
        proc.stdin.write(json.dumps({"type": "hello", "version": 1,
                                     "snapshot_sha256": "0" * 64}) + "\n")
        proc.stdin.flush()
        reply = json.loads(proc.stdout.readline())
        rc = proc.wait(timeout=240)
    finally:
        proc.kill()
    assert reply["type"] == "error"
    assert "mismatch" in reply["message"]
    assert rc != 0


def _serve_lines(trained, lines, expected_sha=""):
    model, data = trained
    out = io.StringIO()
    code = serve_evaluator(model, data, expected_sha,
                           instream=io.StringIO("".join(l + "\n" for l in lines)),
                           outstream=out)
    return code, [json.loads(l) for l in out.getvalue().splitlines()]


def test_serve_handshake_edge_cases(trained):
    code, replies = _serve_lines(trained, ["not json"])
    assert code != 0 and replies[0]["type"] == "error"

    code, replies = _serve_lines(trained, [json.dumps({"type": "hello", "version": 99})])
    assert code != 0 and "version" in replies[0]["message"]

    # empty client hash skips the check, per the engine's default handshake
    code, replies = _serve_lines(
        trained,
        [json.dumps({"type": "hello", "version": 1, "snapshot_sha256": ""}),
         json.dumps({"type": "bye"})],
        expected_sha="f" * 64,
    )
    assert code == 0 and replies[0]["type"] == "ready"


def test_serve_recovers_after_malformed_request(trained):
    model, _ = trained
    blocks = prunable_blocks(model)
    ones = {name: [1] * conv.out_channels for name, conv, _ in blocks}
    code, replies = _serve_lines(
        trained,
        [json.dumps({"type": "hello", "version": 1, "snapshot_sha256": ""}),
         "{broken",
         json.dumps({"type": "eval", "id": 2, "finetune_epochs": 0,
                     "masks": {"conv1": [2] * 8, "conv2": [1] * 16}}),
         json.dumps({"type": "eval", "id": 3, "finetune_epochs": 0, "masks": ones}),
         json.dumps({"type": "bye"})],
    )
    assert code == 0
    assert [r["type"] for r in replies] == ["ready", "error", "error", "result"]
    assert replies[2]["id"] == 2 and "0/1" in replies[2]["message"]
    assert replies[3]["id"] == 3


def test_masked_filters_stay_dead_through_finetune(trained):
    model, data = trained
    blocks = prunable_blocks(model)
    masks = {name: np.ones(conv.out_channels, dtype=np.uint8) for name, conv, _ in blocks}
    masks["conv1"][:4] = 0
    before = {k: v.clone() for k, v in model.state_dict().items()}
    fitness = evaluate_masks(model, data, masks, finetune_epochs=2)
    assert 0.0 <= fitness <= 1.0
    # the model is restored after evaluation
    for k, v in model.state_dict().items():
        assert bool((v == before[k]).all()), k


def test_secondary_suite_runtime_budget():
    elapsed = time.perf_counter() - _T0
    assert elapsed < SECONDARY_BUDGET, f"bridge suite took {elapsed:.1f}s"
    print(f"[PASS] secondary: bridge round-trip and protocol ({elapsed:.1f}s < {SECONDARY_BUDGET:.0f}s)")
