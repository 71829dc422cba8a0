"""Numpy segmentation models, FGSM attacks and a phantom-data experiment pipeline."""
from .attack import AttackConfig, attack_batch, epsilon_sweep, fgsm
from .data import Dataset, PhantomConfig, generate_phantoms, rle_decode, rle_encode, split_by_scan
from .losses import LossKind, bce_loss, dice_loss, focal_loss, hybrid_loss
from .metrics import EvalRow, attack_success, binarize, diff_map, dsc
from .models import Model, ModelConfig, build_model, load_checkpoint, parameter_count, save_checkpoint
from .training import TrainConfig, train

__version__ = "0.1.0"

__all__ = [
    "AttackConfig", "attack_batch", "epsilon_sweep", "fgsm",
    "Dataset", "PhantomConfig", "generate_phantoms", "rle_decode", "rle_encode", "split_by_scan",
    "LossKind", "bce_loss", "dice_loss", "focal_loss", "hybrid_loss",
    "EvalRow", "attack_success", "binarize", "diff_map", "dsc",
    "Model", "ModelConfig", "build_model", "load_checkpoint", "parameter_count", "save_checkpoint",
    "TrainConfig", "train",
]
