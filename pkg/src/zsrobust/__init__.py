"""Zero-shot adversarial robustness for small image-text dual encoders, built on numpy."""

from .attacks import PIXEL, AdversarialBatch, AttackConfig, pgd_attack
from .config import EvalConfig, TrainConfig, load_config
from .data import Dataset, SynthSpec, gen_synthetic, load_dataset, save_dataset
from .evaluation import evaluate, interpolation_sweep, pseudo_label, zero_shot_classify
from .losses import coadv_loss, contrastive_image_text, imgcoadv_loss
from .models import ArchConfig, Model, TextBank, VisionEncoder, build_text_bank, load_checkpoint, save_checkpoint
from .tensor import Tensor
from .training import run_training

__all__ = [
    "PIXEL", "AdversarialBatch", "AttackConfig", "pgd_attack",
    "EvalConfig", "TrainConfig", "load_config",
    "Dataset", "SynthSpec", "gen_synthetic", "load_dataset", "save_dataset",
    "evaluate", "interpolation_sweep", "pseudo_label", "zero_shot_classify",
    "coadv_loss", "contrastive_image_text", "imgcoadv_loss",
    "ArchConfig", "Model", "TextBank", "VisionEncoder", "build_text_bank", "load_checkpoint", "save_checkpoint",
    "Tensor", "run_training",
]
