import numpy as np
import pytest

from pruneblend.criteria import ALL_CRITERIA, score_all
from pruneblend.fitness import FitnessRequest
from pruneblend.snapshot import validate_snapshot
from pruneblend.toynet import (
    CLASSES,
    HIDDEN,
    LAYER_NAMES,
    ToyDivergence,
    ToyEvaluator,
    make_dataset,
    toy_build,
    toy_evaluate,
    toy_pretrain,
)


@pytest.fixture(scope="module")
def trained():
    model, snapshot = toy_pretrain(toy_build(0), dataset_seed=0, epochs=30)
    return model, snapshot, make_dataset(0)


def masks_of(m1, m2):
    return {
        LAYER_NAMES[0]: np.asarray(m1, dtype=np.uint8),
        LAYER_NAMES[1]: np.asarray(m2, dtype=np.uint8),
    }


def all_ones():
    return masks_of(np.ones(HIDDEN), np.ones(HIDDEN))


def test_architecture_constants():
    model = toy_build(0)
    assert model.W1.shape == (HIDDEN, 16)
    assert model.W2.shape == (HIDDEN, HIDDEN)
    assert model.Wout.shape == (CLASSES, HIDDEN)
    assert (model.W1.shape[0], model.W2.shape[0]) == (32, 32)


def test_build_deterministic_per_seed():
    a, b = toy_build(7), toy_build(7)
    assert np.array_equal(a.W1, b.W1) and np.array_equal(a.Wout, b.Wout)
    c = toy_build(8)
    assert not np.array_equal(a.W1, c.W1)


def test_dataset_shapes_and_balance():
    ds = make_dataset(3)
    assert ds.X_train.shape == (2000, 16)
    assert ds.X_val.shape == (500, 16)
    counts = np.bincount(ds.y_train, minlength=CLASSES)
    assert counts.min() >= 400  # near-balanced 4 classes
    ds2 = make_dataset(3)
    assert np.array_equal(ds.X_train, ds2.X_train)


def test_untrained_accuracy_is_chance_level():
    ds = make_dataset(0)
    acc = toy_build(0).accuracy(ds.X_val, ds.y_val)
    assert 0.20 <= acc <= 0.30


def test_pretrain_reaches_val_accuracy(trained):
    model, _, ds = trained
    assert model.accuracy(ds.X_val, ds.y_val) >= 0.90


def test_pretrain_rejects_zero_epochs():
    with pytest.raises(ValueError):
        toy_pretrain(toy_build(0), 0, epochs=0)


def test_snapshot_validates_and_exposes_all_criteria(trained):
    _, snapshot, _ = trained
    validate_snapshot(snapshot)  # must not raise
    assert snapshot.layer_names() == list(LAYER_NAMES)
    scored = score_all(snapshot)
    assert [s.criterion for s in scored[0]] == list(ALL_CRITERIA)
    for layer_scores in scored:
        for s in layer_scores:
            assert np.all(np.isfinite(s.raw))


def test_snapshot_meta_records_provenance(trained):
    _, snapshot, _ = trained
    assert snapshot.meta["source"] == "toy"
    assert snapshot.meta["model_seed"] == "0"
    assert snapshot.meta["dataset_seed"] == "0"
    assert snapshot.meta["pretrain_epochs"] == "30"


def test_all_ones_zero_epochs_is_pretrained_accuracy(trained):
    model, _, ds = trained
    resp = toy_evaluate(FitnessRequest(1, all_ones(), 0), model, ds)
    assert resp.fitness == model.accuracy(ds.X_val, ds.y_val)


def test_evaluate_does_not_mutate_pretrained(trained):
    model, _, ds = trained
    w1 = model.W1.copy()
    toy_evaluate(FitnessRequest(2, masks_of(np.zeros(HIDDEN), np.zeros(HIDDEN)), 1), model, ds)
    assert np.array_equal(model.W1, w1)


def test_capacity_collapse(trained):
    model, _, ds = trained
    keep_one = np.zeros(HIDDEN)
    keep_one[0] = 1
    resp = toy_evaluate(FitnessRequest(3, masks_of(keep_one, keep_one), 2), model, ds)
    full = model.accuracy(ds.X_val, ds.y_val)
    assert resp.fitness <= full
    assert resp.fitness < 0.9  # one unit per layer cannot carry 4 classes


def test_masked_units_stay_dead_after_finetune(trained):
    model, _, ds = trained
    rng = np.random.default_rng(0)
    masks = masks_of(rng.integers(0, 2, HIDDEN) | 1 * (np.arange(HIDDEN) == 0),
                     rng.integers(0, 2, HIDDEN))
    import pruneblend.toynet as tn

    clone = model.clone()
    tn._zero_masked(clone, masks)
    tn._sgd_epochs(clone, ds.X_train[:256], ds.y_train[:256], 0.005, 2,
                   np.random.default_rng(1), unit_masks=masks)
    dead1 = np.asarray(masks[LAYER_NAMES[0]]) == 0
    dead2 = np.asarray(masks[LAYER_NAMES[1]]) == 0
    assert np.all(clone.W1[dead1] == 0.0)
    assert np.all(clone.g1[dead1] == 0.0)
    assert np.all(clone.W2[dead2] == 0.0)
    assert np.all(clone.Wout[:, dead2] == 0.0)


def test_evaluate_deterministic_and_order_free(trained):
    model, _, ds = trained
    rng = np.random.default_rng(5)
    ma = masks_of(rng.integers(0, 2, HIDDEN), rng.integers(0, 2, HIDDEN))
    mb = masks_of(rng.integers(0, 2, HIDDEN), rng.integers(0, 2, HIDDEN))
    fa1 = toy_evaluate(FitnessRequest(1, ma, 2), model, ds).fitness
    fb = toy_evaluate(FitnessRequest(2, mb, 2), model, ds).fitness
    fa2 = toy_evaluate(FitnessRequest(9, ma, 2), model, ds).fitness
    assert fa1 == fa2  # result depends on the mask, not request id or order
    assert 0.0 <= fb <= 1.0


def test_evaluate_validates_masks(trained):
    model, _, ds = trained
    with pytest.raises(ValueError, match="missing"):
        toy_evaluate(FitnessRequest(1, {LAYER_NAMES[0]: np.ones(HIDDEN)}, 0), model, ds)
    bad = {LAYER_NAMES[0]: np.ones(HIDDEN), LAYER_NAMES[1]: np.ones(3)}
    with pytest.raises(ValueError, match="length"):
        toy_evaluate(FitnessRequest(1, bad, 0), model, ds)


def test_divergence_reports_epoch(trained):
    model, _, ds = trained
    with np.errstate(all="ignore"), pytest.raises(ToyDivergence) as exc:
        toy_evaluate(FitnessRequest(1, all_ones(), 3), model, ds, lr=1e9)
    assert exc.value.epoch >= 0
    assert "epoch" in str(exc.value)


def test_evaluator_class_and_snapshot_rebuild(trained):
    model, snapshot, ds = trained
    direct = ToyEvaluator(model, ds)
    rebuilt = ToyEvaluator.from_snapshot(snapshot)
    req = FitnessRequest(4, all_ones(), 0)
    assert direct(req).fitness == rebuilt(req).fitness
    rng = np.random.default_rng(11)
    masks = masks_of(rng.integers(0, 2, HIDDEN), rng.integers(0, 2, HIDDEN))
    req2 = FitnessRequest(5, masks, 1)
    assert direct(req2).fitness == rebuilt(req2).fitness


def test_from_snapshot_rejects_foreign_snapshot(trained):
    _, snapshot, _ = trained
    import copy

    other = copy.deepcopy(snapshot)
    other.meta["source"] = "something-else"
    with pytest.raises(ValueError):
        ToyEvaluator.from_snapshot(other)
