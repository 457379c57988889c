"""Compact transformer tracker with stream-masked attention and correlative masked modeling."""
from .attention import StreamMask, verify_equivalences
from .config import RunConfig, load_preset
from .heads import Box, giou, iou
from .model import TrackerModel, load_checkpoint, save_checkpoint
from .tracker import evaluate_sequence, evaluate_suite, success_auc
from .training import train_stage1, train_stage2

__version__ = "0.1.0"

__all__ = [
    "Box",
    "CompactTracker",
    "RunConfig",
    "StreamMask",
    "TrackerModel",
    "evaluate_sequence",
    "evaluate_suite",
    "giou",
    "iou",
    "load_checkpoint",
    "load_preset",
    "save_checkpoint",
    "success_auc",
    "train_stage1",
    "train_stage2",
    "verify_equivalences",
]


def __getattr__(name):
    # keeps scikit-learn off the import path of the CLI
    if name == "CompactTracker":
        from .estimator import CompactTracker

        return CompactTracker
    raise AttributeError(name)
