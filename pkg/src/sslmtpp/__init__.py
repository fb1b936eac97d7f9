"""Semi-supervised learning for marked temporal point processes.

A supervised recurrent marker/time model whose per-step embedding is fused
with the states of a sequence autoencoder trained on marker-free event times.
"""

from .data import (
    GapScaler,
    GeneratorConfig,
    MarkedSequence,
    ProtocolSplit,
    SequencePool,
    generate_synthetic,
    load_pool,
    make_protocol_splits,
    save_pool,
)
from .estimator import SSLMTPPClassifier
from .metrics import EvalReport, evaluate
from .model import ModelConfig, SSLMTPPNet
from .training import TrainConfig, load_checkpoint, save_checkpoint, train

__all__ = [
    "EvalReport",
    "GapScaler",
    "GeneratorConfig",
    "MarkedSequence",
    "ModelConfig",
    "ProtocolSplit",
    "SSLMTPPClassifier",
    "SSLMTPPNet",
    "SequencePool",
    "TrainConfig",
    "evaluate",
    "generate_synthetic",
    "load_checkpoint",
    "load_pool",
    "make_protocol_splits",
    "save_checkpoint",
    "save_pool",
    "train",
]

__version__ = "0.1.0"
