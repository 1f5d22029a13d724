"""Stateful behavior-sequence user embeddings.

A decayed linear-attention sequence model whose per-user retention state makes
incremental embedding updates cost the same per period regardless of history
length, while matching full recomputation exactly. Includes the training
objectives (future-window behavior prediction, same-user contrastive), a
synthetic persona-log generator, a persistent per-user state store, and an
evaluation/benchmark harness.
"""

__version__ = "0.1.0"

from .tensor import Tensor, no_grad, grad_check
from .model import ModelConfig, Parameters, init_parameters, save_params, load_params
from .data import BehaviorVocab, PersonaSpec, Dataset, generate_dataset
from .trainer import TrainConfig, train
from .state_store import UserState, UpdateStrategy, StateStore
from .evaluation import SimulationSchedule, mrr, auc

__all__ = [
    "Tensor", "no_grad", "grad_check",
    "ModelConfig", "Parameters", "init_parameters", "save_params", "load_params",
    "BehaviorVocab", "PersonaSpec", "Dataset", "generate_dataset",
    "TrainConfig", "train",
    "UserState", "UpdateStrategy", "StateStore",
    "SimulationSchedule", "mrr", "auc",
    "__version__",
]
