"""Transferable adversarial patches for semantic segmentation.

Sensitive-region placement, a two-stage ViT -> ViT+CNN attack objective with
auxiliary terms, EOT patch application, training and mIoU evaluation.
"""

from .applicator import PatchState, apply_patch, load_patch, save_patch
from .config import EotParams, LossConfig, PlacementConfig, TrainSchedule
from .evaluation import ConfusionMatrix, evaluate_patch, miou, run_ablations
from .models import SurrogateHandle, make_toy_cnn, make_toy_vit
from .placement import sensitivity_scan
from .trainer import train

__version__ = "0.1.0"

__all__ = [
    "ConfusionMatrix",
    "EotParams",
    "LossConfig",
    "PatchState",
    "PlacementConfig",
    "SurrogateHandle",
    "TrainSchedule",
    "apply_patch",
    "evaluate_patch",
    "load_patch",
    "make_toy_cnn",
    "make_toy_vit",
    "miou",
    "run_ablations",
    "save_patch",
    "sensitivity_scan",
    "train",
]
