from .detector import ToyDetector
from .evaluator import ApResult, evaluate_ap
from .profiler import profile
from .synthetic import SyntheticSpec, generate_shapes_dataset
from .train import LoadSpec, TrainConfig, evaluate_model, train_phase

__all__ = [
    "ApResult",
    "LoadSpec",
    "SyntheticSpec",
    "ToyDetector",
    "TrainConfig",
    "evaluate_ap",
    "evaluate_model",
    "generate_shapes_dataset",
    "profile",
    "train_phase",
]
