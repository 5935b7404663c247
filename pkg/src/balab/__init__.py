"""Desk-scale lab for bottleneck adapters on a tiny frozen vision-language model."""

from .adapters import Adapter, AdapterSpec, count_params
from .config import AblationGrid, LabConfig, load_config
from .model import ModelConfig, MultimodalModel
from .tasks import TaskSpec, make_dataset
from .tensor import Graph, Tensor, backward, no_grad
from .train import SampleConfig, TrainConfig, evaluate, generate, train

__all__ = [
    "AblationGrid",
    "Adapter",
    "AdapterSpec",
    "Graph",
    "LabConfig",
    "ModelConfig",
    "MultimodalModel",
    "SampleConfig",
    "Tensor",
    "TaskSpec",
    "TrainConfig",
    "backward",
    "count_params",
    "evaluate",
    "generate",
    "load_config",
    "make_dataset",
    "no_grad",
    "train",
]

__version__ = "0.1.0"
