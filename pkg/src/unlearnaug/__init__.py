"""Desk-scale machine-unlearning experiments with data augmentation."""

from .augment import SCENARIOS, AugmentPolicy, apply_policy
from .config import ExperimentConfig, preset
from .datasets import Dataset, ForgetPartition, load_cifar, make_synthetic, split_forget
from .evaluation import GapRecord, MetricsRecord, average_gap, core_accuracies, metric_gap, mia_score
from .models import ArchSpec, Model, build_model, predict
from .runner import RunManifest, run_experiment
from .unlearn import TrainConfig, compute_saliency_mask, fine_tune, random_label, retrain, salun, train

__version__ = "0.1.0"

__all__ = [
    "SCENARIOS", "AugmentPolicy", "apply_policy", "ExperimentConfig", "preset", "Dataset", "ForgetPartition",
    "load_cifar", "make_synthetic", "split_forget", "GapRecord", "MetricsRecord", "average_gap",
    "core_accuracies", "metric_gap", "mia_score", "ArchSpec", "Model", "build_model", "predict",
    "RunManifest", "run_experiment", "TrainConfig", "compute_saliency_mask", "fine_tune", "random_label",
    "retrain", "salun", "train",
]
