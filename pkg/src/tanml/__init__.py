"""Task-adaptive meta-learning with kernel-regression adaptation, plus MAML-family baselines."""

from .kernels import DegenerateInput, DescriptorBank, KernelSpec, TaskDescriptor
from .metalearners import (ALGORITHMS, MAML, TANML, GeneralizedMetaSGD, MetaSGD, MetaState,
                           NumericalDivergence, make_learner, meta_train, outer_step)
from .predictors import Dataset, InvalidArgument, LayerLayout, LinearModel, MLPModel, make_model

__all__ = [
    "ALGORITHMS", "MAML", "TANML", "GeneralizedMetaSGD", "MetaSGD", "MetaState", "NumericalDivergence",
    "make_learner", "meta_train", "outer_step", "DegenerateInput", "DescriptorBank", "KernelSpec",
    "TaskDescriptor", "Dataset", "InvalidArgument", "LayerLayout", "LinearModel", "MLPModel", "make_model",
]
