"""Differentially private training of two-tower binary classifiers with a sensitive feature group.

Hybrid training runs a label-DP phase (randomized response with a debiased
loss) on a truncated model that sees only non-sensitive features, then a
DP-SGD phase on the full model. Both baselines, an RDP accountant and a
sweep harness are included.
"""

from .data import Dataset, FeatureSchema, FieldSpec, SyntheticSpec, generate_synthetic, load_delimited
from .metrics import auc, relative_auc_loss
from .model import ModelConfig, ModelParams, init_params
from .privacy import PrivacyBudget, calibrate_sigma, group_privacy, split_budget
from .train import TrainConfig, TrainReport

__all__ = [
    "Dataset", "FeatureSchema", "FieldSpec", "SyntheticSpec", "generate_synthetic",
    "load_delimited", "auc", "relative_auc_loss", "ModelConfig", "ModelParams", "init_params",
    "PrivacyBudget", "calibrate_sigma", "group_privacy", "split_budget", "TrainConfig",
    "TrainReport",
]
