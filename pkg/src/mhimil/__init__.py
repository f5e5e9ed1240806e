"""Multi-instance regression with Masked Hard Instance Mining and attention explainability metrics."""

__version__ = "0.1.0"

from .dataio import Bag, Instance, SynthConfig, generate_synthetic, load_dataset, save_dataset
from .mhim import AttentionRecord, MaskPlan, MhimConfig, apply_plan, donor_attention, sample_mask
from .milmodel import ModelConfig, ModelParams, encode_bag, init_params
from .pipeline import TrainConfig, kfold_split, train_phase1, train_phase2

__all__ = [
    "AttentionRecord",
    "Bag",
    "Instance",
    "MaskPlan",
    "MhimConfig",
    "ModelConfig",
    "ModelParams",
    "SynthConfig",
    "TrainConfig",
    "apply_plan",
    "donor_attention",
    "encode_bag",
    "generate_synthetic",
    "init_params",
    "kfold_split",
    "load_dataset",
    "sample_mask",
    "save_dataset",
    "train_phase1",
    "train_phase2",
]
