"""Self-contained trainer used as a realistic fitness evaluator.

A small feedforward classifier in plain numpy: input dim 16, two hidden
blocks of 32 units (linear map, then per-unit scale gamma and shift beta,
then a rectifier), and a 4-class linear head. Hidden units stand in for
convolution filters: a unit's "filter" is its incoming weight row, so all
12 criteria have evidence to read. Mini-batch SGD with hand-written
gradients keeps the dependency surface at numpy alone.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .blend import mask_fingerprint
from .fitness import FitnessRequest, FitnessResponse
from .snapshot import (
    DEFAULT_HIST_BINS,
    ActivationStats,
    LayerRecord,
    NetworkSnapshot,
)

INPUT_DIM = 16
HIDDEN = 32
CLASSES = 4
LAYER_NAMES = ("hidden1", "hidden2")

PRETRAIN_LR = 0.05
PRETRAIN_EPOCHS = 30
FINETUNE_LR = 0.005
BATCH_SIZE = 32
CALIBRATION_SAMPLES = 256

# class means sit on orthogonal directions at this radius; sigma-1 noise
# makes the task solvable but not instantly recoverable after pruning
_MEAN_SCALE = 4.0


class ToyDivergence(Exception):
    """Training produced a non-finite loss."""

    def __init__(self, epoch: int):
        self.epoch = epoch
        super().__init__(f"non-finite loss at epoch {epoch}")


@dataclass
class ToyDataset:
    X_train: np.ndarray
    y_train: np.ndarray
    X_val: np.ndarray
    y_val: np.ndarray
    seed: int

    def calibration(self) -> tuple[np.ndarray, np.ndarray]:
        return self.X_train[:CALIBRATION_SAMPLES], self.y_train[:CALIBRATION_SAMPLES]


def make_dataset(dataset_seed: int = 0, train: int = 2000, val: int = 500) -> ToyDataset:
    """Gaussian blobs, 4 classes on orthogonal mean directions, unit noise."""
    rng = np.random.default_rng([dataset_seed, 0])
    total = train + val
    basis, _ = np.linalg.qr(rng.normal(size=(INPUT_DIM, INPUT_DIM)))
    means = _MEAN_SCALE * basis[:CLASSES]
    y = np.tile(np.arange(CLASSES), total // CLASSES + 1)[:total]
    y = y[rng.permutation(total)]
    X = means[y] + rng.normal(size=(total, INPUT_DIM))
    return ToyDataset(
        X_train=X[:train].astype(np.float64),
        y_train=y[:train].astype(np.int64),
        X_val=X[train:].astype(np.float64),
        y_val=y[train:].astype(np.int64),
        seed=dataset_seed,
    )


@dataclass
class ToyModel:
    W1: np.ndarray
    g1: np.ndarray
    b1: np.ndarray
    W2: np.ndarray
    g2: np.ndarray
    b2: np.ndarray
    Wout: np.ndarray
    bout: np.ndarray
    seed: int

    def clone(self) -> "ToyModel":
        return ToyModel(*(p.copy() for p in self._params()), seed=self.seed)

    def _params(self):
        return (self.W1, self.g1, self.b1, self.W2, self.g2, self.b2, self.Wout, self.bout)

    def forward(self, X: np.ndarray, full: bool = False):
        z1 = X @ self.W1.T
        a1 = self.g1 * z1 + self.b1
        h1 = np.maximum(a1, 0.0)
        z2 = h1 @ self.W2.T
        a2 = self.g2 * z2 + self.b2
        h2 = np.maximum(a2, 0.0)
        logits = h2 @ self.Wout.T + self.bout
        if full:
            return logits, (z1, a1, h1, z2, a2, h2)
        return logits

    def loss_and_grads(self, X: np.ndarray, y: np.ndarray):
        n = X.shape[0]
        logits, (z1, a1, h1, z2, a2, h2) = self.forward(X, full=True)
        shifted = logits - logits.max(axis=1, keepdims=True)
        logp = shifted - np.log(np.exp(shifted).sum(axis=1, keepdims=True))
        loss = -logp[np.arange(n), y].mean()
        dlogits = np.exp(logp)
        dlogits[np.arange(n), y] -= 1.0
        dlogits /= n
        dWout = dlogits.T @ h2
        dbout = dlogits.sum(axis=0)
        dh2 = dlogits @ self.Wout
        da2 = dh2 * (a2 > 0)
        dg2 = (da2 * z2).sum(axis=0)
        db2 = da2.sum(axis=0)
        dz2 = da2 * self.g2
        dW2 = dz2.T @ h1
        dh1 = dz2 @ self.W2
        da1 = dh1 * (a1 > 0)
        dg1 = (da1 * z1).sum(axis=0)
        db1 = da1.sum(axis=0)
        dz1 = da1 * self.g1
        dW1 = dz1.T @ X
        return loss, (dW1, dg1, db1, dW2, dg2, db2, dWout, dbout)

    def accuracy(self, X: np.ndarray, y: np.ndarray) -> float:
        return float((self.forward(X).argmax(axis=1) == y).mean())


def toy_build(seed: int = 0) -> ToyModel:
    rng = np.random.default_rng([seed, 1])
    return ToyModel(
        W1=rng.normal(0.0, np.sqrt(2.0 / INPUT_DIM), size=(HIDDEN, INPUT_DIM)),
        g1=np.ones(HIDDEN),
        b1=np.zeros(HIDDEN),
        W2=rng.normal(0.0, np.sqrt(2.0 / HIDDEN), size=(HIDDEN, HIDDEN)),
        g2=np.ones(HIDDEN),
        b2=np.zeros(HIDDEN),
        Wout=rng.normal(0.0, np.sqrt(1.0 / HIDDEN), size=(CLASSES, HIDDEN)),
        bout=np.zeros(CLASSES),
        seed=seed,
    )


def _sgd_epochs(model: ToyModel, X, y, lr: float, epochs: int, rng: np.random.Generator,
                unit_masks: dict[str, np.ndarray] | None = None) -> None:
    n = X.shape[0]
    for epoch in range(epochs):
        order = rng.permutation(n)
        for start in range(0, n, BATCH_SIZE):
            idx = order[start : start + BATCH_SIZE]
            loss, grads = model.loss_and_grads(X[idx], y[idx])
            if not np.isfinite(loss):
                raise ToyDivergence(epoch)
            for p, g in zip(model._params(), grads):
                p -= lr * g
            if unit_masks is not None:
                _zero_masked(model, unit_masks)


def _zero_masked(model: ToyModel, masks: dict[str, np.ndarray]) -> None:
    """Zero a masked unit's incoming row, scale/shift, and outgoing columns.

    Applied after every update, pruned units stay exactly dead: function
    value equals physical removal.
    """
    m1 = np.asarray(masks[LAYER_NAMES[0]], dtype=np.float64)
    m2 = np.asarray(masks[LAYER_NAMES[1]], dtype=np.float64)
    model.W1 *= m1[:, None]
    model.g1 *= m1
    model.b1 *= m1
    model.W2 *= m2[:, None] * m1[None, :]
    model.g2 *= m2
    model.b2 *= m2
    model.Wout *= m2[None, :]


def export_snapshot(model: ToyModel, dataset: ToyDataset, epochs: int) -> NetworkSnapshot:
    """Capture weights, scale/shift pairs, calibration-batch gradients, and
    activation statistics for both hidden layers."""
    Xc, yc = dataset.calibration()
    _, grads = model.loss_and_grads(Xc, yc)
    dW1, dg1, db1, dW2, dg2, db2, _, _ = grads
    _, (_, _, h1, _, _, h2) = model.forward(Xc, full=True)
    layers = []
    per_layer = [
        (LAYER_NAMES[0], model.W1, model.g1, model.b1, dW1, dg1, db1, h1),
        (LAYER_NAMES[1], model.W2, model.g2, model.b2, dW2, dg2, db2, h2),
    ]
    for name, W, g, b, dW, dg, db, h in per_layer:
        layers.append(
            LayerRecord(
                name=name,
                num_filters=HIDDEN,
                weights=W.astype(np.float32),
                bn_gamma=g.astype(np.float32),
                bn_beta=b.astype(np.float32),
                weight_grad=dW.astype(np.float32),
                bn_gamma_grad=dg.astype(np.float32),
                bn_beta_grad=db.astype(np.float32),
                activation_stats=_activation_stats(h),
            )
        )
    meta = {
        "source": "toy",
        "model_seed": str(model.seed),
        "dataset_seed": str(dataset.seed),
        "pretrain_epochs": str(epochs),
    }
    return NetworkSnapshot(name="toy", layers=layers, meta=meta)


def _activation_stats(h: np.ndarray, bins: int = DEFAULT_HIST_BINS) -> ActivationStats:
    n, units = h.shape
    zero_fraction = (h == 0.0).mean(axis=0)
    hists = np.zeros((units, bins), dtype=np.int64)
    ranges = np.zeros((units, 2), dtype=np.float64)
    for i in range(units):
        lo, hi = float(h[:, i].min()), float(h[:, i].max())
        ranges[i] = (lo, hi)
        if hi > lo:
            hists[i], _ = np.histogram(h[:, i], bins=bins, range=(lo, hi))
        else:
            hists[i, 0] = n  # constant activation collapses into one bin
    return ActivationStats(
        zero_fraction=zero_fraction.astype(np.float32),
        histograms=hists,
        hist_range=ranges.astype(np.float32),
        sample_total=n,
    )


def toy_pretrain(model: ToyModel, dataset_seed: int = 0,
                 epochs: int = PRETRAIN_EPOCHS) -> tuple[ToyModel, NetworkSnapshot]:
    if epochs < 1:
        raise ValueError("epochs must be >= 1")
    dataset = make_dataset(dataset_seed)
    rng = np.random.default_rng([dataset_seed, 2])
    _sgd_epochs(model, dataset.X_train, dataset.y_train, PRETRAIN_LR, epochs, rng)
    return model, export_snapshot(model, dataset, epochs)


def _finetune_rng(base_seed: int, masks: dict[str, np.ndarray]) -> np.random.Generator:
    # seeded from the mask content so a request's result does not depend on
    # evaluation order, only on what is being evaluated
    fp = int(mask_fingerprint(masks)[:16], 16)
    return np.random.default_rng([base_seed, fp])


def toy_evaluate(req: FitnessRequest, pretrained: ToyModel, dataset: ToyDataset,
                 lr: float = FINETUNE_LR, base_seed: int = 0) -> FitnessResponse:
    """Mask, finetune the requested epochs, report validation accuracy."""
    for name in LAYER_NAMES:
        if name not in req.masks:
            raise ValueError(f"mask for layer {name!r} missing")
        if np.asarray(req.masks[name]).shape != (HIDDEN,):
            raise ValueError(f"mask for layer {name!r} must have length {HIDDEN}")
    model = pretrained.clone()
    _zero_masked(model, req.masks)
    if req.finetune_epochs > 0:
        rng = _finetune_rng(base_seed, req.masks)
        _sgd_epochs(model, dataset.X_train, dataset.y_train, lr,
                    req.finetune_epochs, rng, unit_masks=req.masks)
    acc = model.accuracy(dataset.X_val, dataset.y_val)
    return FitnessResponse(req.request_id, acc, {"kind": "toy"})


class ToyEvaluator:
    """Evaluator over a pretrained toy model; pure given seeds."""

    def __init__(self, pretrained: ToyModel, dataset: ToyDataset,
                 lr: float = FINETUNE_LR, seed: int = 0):
        self.pretrained = pretrained
        self.dataset = dataset
        self.lr = lr
        self.seed = seed

    def __call__(self, req: FitnessRequest) -> FitnessResponse:
        return toy_evaluate(req, self.pretrained, self.dataset, self.lr, self.seed)

    @classmethod
    def from_snapshot(cls, snapshot: NetworkSnapshot, lr: float = FINETUNE_LR,
                      seed: int = 0) -> "ToyEvaluator":
        """Rebuild the trained model from the seeds recorded in snapshot meta."""
        if snapshot.meta.get("source") != "toy":
            raise ValueError("snapshot was not exported by the toy trainer")
        model_seed = int(snapshot.meta["model_seed"])
        dataset_seed = int(snapshot.meta["dataset_seed"])
        epochs = int(snapshot.meta["pretrain_epochs"])
        model, _ = toy_pretrain(toy_build(model_seed), dataset_seed, epochs)
        return cls(model, make_dataset(dataset_seed), lr=lr, seed=seed)
