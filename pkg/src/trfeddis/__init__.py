"""Federated learning with disentangled client heads and evidential fusion.

Pure numpy: a small reverse-mode tensor engine, a dual-head client model,
Dirichlet evidence with Dempster-Shafer fusion, and a round-based
federation simulator with FedAvg, FedBN and SingleSet baselines.
"""
from .config import ExperimentConfig, load_config
from .evidential import Opinion, ds_fuse, predict, to_evidence, to_opinion
from .federation import Strategy, VARIANTS, aggregate, local_train, run_experiment, run_round
from .losses import total_loss
from .metrics import evaluate, ood_separation
from .model import Model, ModelConfig, PartitionTag, forward, init_model

__version__ = "0.1.0"

__all__ = [
    "ExperimentConfig",
    "Model",
    "ModelConfig",
    "Opinion",
    "PartitionTag",
    "Strategy",
    "VARIANTS",
    "aggregate",
    "ds_fuse",
    "evaluate",
    "forward",
    "init_model",
    "load_config",
    "local_train",
    "ood_separation",
    "predict",
    "run_experiment",
    "run_round",
    "to_evidence",
    "to_opinion",
    "total_loss",
]
