"""Tiny convolutional testbed: two conv-bn-relu blocks over synthetic images.

Small enough to train on CPU in a few seconds, yet shaped like the real
thing, so the exporter and the evaluator server get an honest end-to-end
target. All randomness is seeded; rebuilding with the same seeds and epoch
count reproduces the trained weights exactly.
"""

from dataclasses import dataclass

import numpy as np
import torch
from torch import nn
from torch.nn import functional as F

NUM_CLASSES = 3
IMAGE_SIZE = 12
CONV_CHANNELS = (8, 16)
TRAIN_PER_CLASS = 128
VAL_PER_CLASS = 64
BATCH_SIZE = 32
TRAIN_LR = 0.05
FINETUNE_LR = 0.005
_NOISE = 0.9


@dataclass
class BridgeData:
    """Fixed synthetic image classification splits."""

    X_train: torch.Tensor
    y_train: torch.Tensor
    X_val: torch.Tensor
    y_val: torch.Tensor
    seed: int


def make_data(seed: int = 0) -> BridgeData:
    """Class templates plus Gaussian pixel noise; deterministic given seed."""
    rng = np.random.default_rng([seed, 91])
    templates = rng.normal(size=(NUM_CLASSES, 3, IMAGE_SIZE, IMAGE_SIZE))

    def split(per_class: int, salt: int):
        srng = np.random.default_rng([seed, salt])
        y = np.repeat(np.arange(NUM_CLASSES), per_class)
        X = templates[y] + _NOISE * srng.normal(size=(len(y), 3, IMAGE_SIZE, IMAGE_SIZE))
        return (
            torch.from_numpy(X.astype(np.float32)),
            torch.from_numpy(y.astype(np.int64)),
        )

    X_train, y_train = split(TRAIN_PER_CLASS, 1)
    X_val, y_val = split(VAL_PER_CLASS, 2)
    return BridgeData(X_train, y_train, X_val, y_val, seed)


class TinyConvNet(nn.Module):
    """conv-bn-relu, pool, conv-bn-relu, global average pool, linear head."""

    def __init__(self, seed: int = 0):
        super().__init__()
        torch.manual_seed(seed)
        c1, c2 = CONV_CHANNELS
        self.conv1 = nn.Conv2d(3, c1, 3, padding=1, bias=False)
        self.bn1 = nn.BatchNorm2d(c1)
        self.act1 = nn.ReLU()
        self.pool = nn.MaxPool2d(2)
        self.conv2 = nn.Conv2d(c1, c2, 3, padding=1, bias=False)
        self.bn2 = nn.BatchNorm2d(c2)
        self.act2 = nn.ReLU()
        self.head = nn.Linear(c2, NUM_CLASSES)
        self.seed = seed

    def forward(self, x):
        x = self.act1(self.bn1(self.conv1(x)))
        x = self.pool(x)
        x = self.act2(self.bn2(self.conv2(x)))
        x = x.mean(dim=(2, 3))
        return self.head(x)


def prunable_blocks(model: nn.Module) -> list[tuple[str, nn.Conv2d, nn.BatchNorm2d | None]]:
    """Conv layers in module order, each with its directly following batchnorm.

    Only single-path CNNs are handled; shortcut co-pruning constraints are
    out of scope, masks are applied per conv layer independently.
    """
    blocks: list[tuple[str, nn.Conv2d, nn.BatchNorm2d | None]] = []
    pending: tuple[str, nn.Conv2d] | None = None
    for name, mod in model.named_modules():
        if isinstance(mod, nn.Conv2d):
            if pending is not None:
                blocks.append((pending[0], pending[1], None))
            pending = (name, mod)
        elif isinstance(mod, nn.BatchNorm2d) and pending is not None:
            blocks.append((pending[0], pending[1], mod))
            pending = None
    if pending is not None:
        blocks.append((pending[0], pending[1], None))
    return blocks


def apply_unit_masks(model: nn.Module, masks: dict[str, np.ndarray]) -> None:
    """Zero masked filters in place: conv rows plus the attached bn scale/shift."""
    with torch.no_grad():
        for name, conv, bn in prunable_blocks(model):
            m = torch.from_numpy(np.asarray(masks[name], dtype=np.float32))
            conv.weight.mul_(m.view(-1, 1, 1, 1))
            if bn is not None:
                bn.weight.mul_(m)
                bn.bias.mul_(m)


def train_model(model: TinyConvNet, data: BridgeData, epochs: int,
                lr: float = TRAIN_LR, seed: int = 0,
                masks: dict[str, np.ndarray] | None = None) -> None:
    """Plain SGD with momentum; batch order drawn from a seeded stream.

    With masks given, masked filters are re-zeroed after every step so they
    stay dead throughout finetuning.
    """
    if epochs < 0:
        raise ValueError("epochs must be non-negative")
    opt = torch.optim.SGD(model.parameters(), lr=lr, momentum=0.9)
    n = len(data.X_train)
    model.train()
    for epoch in range(epochs):
        order = np.random.default_rng([seed, epoch]).permutation(n)
        for start in range(0, n, BATCH_SIZE):
            idx = torch.from_numpy(order[start : start + BATCH_SIZE])
            opt.zero_grad()
            loss = F.cross_entropy(model(data.X_train[idx]), data.y_train[idx])
            loss.backward()
            opt.step()
            if masks is not None:
                apply_unit_masks(model, masks)
    model.eval()


def accuracy(model: nn.Module, X: torch.Tensor, y: torch.Tensor) -> float:
    model.eval()
    with torch.no_grad():
        pred = model(X).argmax(dim=1)
    return float((pred == y).float().mean())
