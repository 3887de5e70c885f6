"""Causal multimodal information-bottleneck laboratory (float64, CPU)."""
from .numeric import DTYPE, NonFiniteError, RngStream, finite_diff_grad, grad, softmax_rows
from .synthetic import BiasSpec, generate, ood_shift
from .train import TrainConfig, ablate, evaluate, sweep, train
from .verify import verify_all

__all__ = [
    "DTYPE", "NonFiniteError", "RngStream", "finite_diff_grad", "grad", "softmax_rows",
    "BiasSpec", "generate", "ood_shift", "TrainConfig", "ablate", "evaluate", "sweep", "train",
    "verify_all",
]
__version__ = "0.1.0"
