"""Universal natural-backdoor trigger generation from clean training data."""

from .attack import attack_success_rate, transparency_sweep, uap_baseline
from .data import DatasetSpec, LabeledData, load_dataset
from .distill import DistillConfig, kd_loss, soft_labels
from .smaml import LambdaScheduler, OptimizerSchedule, generate_natural_trigger
from .training import TrainConfig, evaluate_accuracy, predict_logits, train_classifier
from .trigger import Trigger, apply_trigger, load_trigger, mask_norm, save_trigger
from .zoo import ModelSpec

__version__ = "0.1.0"
