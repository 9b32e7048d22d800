"""Multi-target domain adaptation through multi-teacher distillation into a compact student."""
from .data import DomainDataset, DomainShiftSpec, generate_shifted_domain, synthesize_digits
from .metrics import MetricsReport, equal_weight_accuracy, weighted_accuracy
from .schedule import BetaSchedule
from .trainer import TrainConfig, run_training

__version__ = "0.1.0"

__all__ = [
    "BetaSchedule",
    "DomainDataset",
    "DomainShiftSpec",
    "MetricsReport",
    "TrainConfig",
    "equal_weight_accuracy",
    "generate_shifted_domain",
    "run_training",
    "synthesize_digits",
    "weighted_accuracy",
]
