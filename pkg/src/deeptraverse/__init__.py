"""DeepTraverse: a CPU-scale vision backbone built on recursive
parameter-shared exploration blocks with channel recalibration, together
with the tensor kernels, reverse-mode autodiff, cost accounting, data
pipeline, and training loop needed to run and verify it."""

from .autograd import GradCheckReport, Node, Tape, grad_check
from .config import ModelConfig, RunConfig, StageConfig, TrainSettings, dt_tiny, tiny_smoke
from .kernels import BatchNormParams, ConvParams
from .network import Model, build_model, forward, forward_array, predict

__all__ = [
    "BatchNormParams",
    "ConvParams",
    "GradCheckReport",
    "Model",
    "ModelConfig",
    "Node",
    "RunConfig",
    "StageConfig",
    "Tape",
    "TrainSettings",
    "build_model",
    "dt_tiny",
    "forward",
    "forward_array",
    "grad_check",
    "predict",
    "tiny_smoke",
]

__version__ = "0.1.0"
