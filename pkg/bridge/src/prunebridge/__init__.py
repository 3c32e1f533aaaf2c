"""prunebridge: torch-side glue for the pruning engine.

Exports trained convolutional models to the engine's snapshot format and
serves its external-evaluator protocol with real prune-finetune-evaluate
fitness. Single source of truth for all scoring formulas stays with the
engine; this package only gathers raw evidence and runs the model.
"""

from .export import ExportConfig, export_snapshot, snapshot_digest
from .model import (
    BridgeData,
    TinyConvNet,
    accuracy,
    apply_unit_masks,
    make_data,
    prunable_blocks,
    train_model,
)
from .serve import evaluate_masks, serve_evaluator

__version__ = "0.1.0"

__all__ = [
    "BridgeData",
    "ExportConfig",
    "TinyConvNet",
    "accuracy",
    "apply_unit_masks",
    "evaluate_masks",
    "export_snapshot",
    "make_data",
    "prunable_blocks",
    "serve_evaluator",
    "snapshot_digest",
    "train_model",
    "__version__",
]
