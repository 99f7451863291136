"""Autoencoders whose hidden states are tensor trains evolved by a rank-adaptive Euler scheme."""
from __future__ import annotations

__version__ = "0.1.0"

from .autoencoder import LayerParams, NetworkParams, RegWeights, SmoothedRelu, evaluate
from .dynamics import StepFailure, TruncationBudget, integrate
from .training import TrainConfig, TrainedModel, gradient_check, sweep, test, train
from .tt import TtTensor, tt_from_dense, tt_round, tt_to_dense

__all__ = [
    "LayerParams", "NetworkParams", "RegWeights", "SmoothedRelu", "StepFailure", "TrainConfig", "TrainedModel",
    "TruncationBudget", "TtTensor", "evaluate", "gradient_check", "integrate", "sweep", "test", "train",
    "tt_from_dense", "tt_round", "tt_to_dense",
]
