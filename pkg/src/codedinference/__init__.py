"""Learned erasure codes for failure- and straggler-resilient inference.

Given a frozen differentiable base function F, this package learns a neural
encoder (k data inputs -> r parity inputs) and decoder (k + r raw outputs,
missing ones zero-filled -> k reconstructions) so that when up to r of the
distributed outputs go missing, approximate reconstructions stand in for
them. It also ships the evaluation metrics (recovery and overall accuracy
over all unavailability scenarios) and a coded-inference simulator that
quantifies end-to-end accuracy under worker unavailability.
"""

from .geometry import CodeConfig, ErasurePattern, availability_mask, enumerate_scenarios
from .coding import (ConvEncoder, Decoder, MLPEncoder, TrainedCode, build_encoder,
                     decode, init_parameters)
from .models import (BaseModel, build_base_mlp, build_logistic_regression,
                     build_resnet18, load_base_model, save_base_model,
                     train_base, wrap_function)
from .training import (TrainConfig, loss_kl_base, loss_mse_base,
                       loss_xent_label, train)
from .data import Dataset, epoch_groups, load_cifar10, load_idx, sample_groups, synthesize
from .evaluation import (EvalReport, error_rank_histogram, evaluate,
                         overall_accuracy, recovery_accuracy, stratified_recovery)
from .simulator import SimConfig, SimResult, expected_accuracy, simulate
from .estimator import ErasureCodeEstimator
from .exceptions import (CompatibilityError, ConfigurationError, ContractError,
                         DataFormatError, NonFiniteLossError)

__version__ = "0.1.0"

__all__ = [
    "CodeConfig", "ErasurePattern", "availability_mask", "enumerate_scenarios",
    "MLPEncoder", "ConvEncoder", "Decoder", "TrainedCode", "build_encoder",
    "decode", "init_parameters",
    "BaseModel", "build_base_mlp", "build_logistic_regression",
    "build_resnet18", "wrap_function", "train_base", "save_base_model",
    "load_base_model",
    "TrainConfig", "train", "loss_mse_base", "loss_kl_base", "loss_xent_label",
    "Dataset", "load_idx", "load_cifar10", "synthesize", "sample_groups",
    "epoch_groups",
    "EvalReport", "evaluate", "recovery_accuracy", "overall_accuracy",
    "stratified_recovery", "error_rank_histogram",
    "SimConfig", "SimResult", "simulate", "expected_accuracy",
    "ErasureCodeEstimator",
    "ConfigurationError", "ContractError", "DataFormatError",
    "CompatibilityError", "NonFiniteLossError",
]
