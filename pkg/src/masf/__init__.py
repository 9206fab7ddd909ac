"""Magnification generalization with MASF on a small autodiff engine."""

from .data import DomainDataset, SampleSet, SyntheticSpec, generate_synthetic, load_mdt, save_mdt
from .losses import LossWeights
from .network import Model, ModelConfig, init, load_checkpoint, save_checkpoint
from .tensor import GradMode, Tape, Tensor, grad
from .trainer import TrainConfig, TrainReport, deepall_train, train

__version__ = "0.1.0"
