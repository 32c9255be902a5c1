"""Adversarial attacks and a cluster-separation detector on a small numpy MLP."""

from ._accel import backend
from .datasets import DataError, Dataset
from .tensor import MlpModel, init_mlp

__version__ = "0.1.0"
