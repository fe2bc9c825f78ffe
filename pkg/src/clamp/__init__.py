"""Cross-domain continual learning with adversarial alignment, meta-weighted replay and pseudo labels."""
from .config import ABLATION_ROWS, AblationFlags, DataConfig, ExperimentConfig, ModelConfig, TrainerConfig
from .evaluation import AccuracyMatrix, average_accuracy, prediction_entropy, welch_t
from .trainer import Learner, run_ablation_suite, run_experiment

__all__ = [
    "ABLATION_ROWS", "AblationFlags", "DataConfig", "ExperimentConfig", "ModelConfig",
    "TrainerConfig", "AccuracyMatrix", "average_accuracy", "prediction_entropy", "welch_t",
    "Learner", "run_ablation_suite", "run_experiment",
]
