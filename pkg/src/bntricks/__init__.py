"""Class-incremental replay learning with decoupled batch-norm statistics, on numpy."""

from .autodiff import ContractError, DimensionError, DomainError, LabelError, Tensor, no_grad
from .config import ExperimentConfig, fingerprint, load_config, parse_config, serialize_config
from .evaluation import acc_metric, bwt_metric, ema_drift_probe, evaluate_task
from .model import MlpModel
from .normalization import INFERENCE, TRAIN, TRAIN_FROZEN, BatchNormState, NormMode, bn_forward
from .replay import Batch, ReplayBuffer, balance, herding_select, reservoir_offer
from .scenario import ConfigError, StreamConfig, TaskStream, make_gaussian_stream
from .strategies import Learner, Method, StrategyConfig
from .harness import compare_methods, run_experiment

__version__ = "0.1.0"

__all__ = [
    "Batch", "BatchNormState", "ConfigError", "ContractError", "DimensionError", "DomainError",
    "ExperimentConfig", "INFERENCE", "LabelError", "Learner", "Method", "MlpModel", "NormMode",
    "ReplayBuffer", "StrategyConfig", "StreamConfig", "TRAIN", "TRAIN_FROZEN", "TaskStream", "Tensor",
    "acc_metric", "balance", "bn_forward", "bwt_metric", "compare_methods", "ema_drift_probe",
    "evaluate_task", "fingerprint", "herding_select", "load_config", "make_gaussian_stream",
    "no_grad", "parse_config", "reservoir_offer", "run_experiment", "serialize_config",
]
