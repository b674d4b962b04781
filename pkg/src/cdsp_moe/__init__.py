"""Mixture of experts carved from one shared backbone, with a topology pruned by gradient conflict."""
from .baselines import StandardMoE, load_balance_loss
from .conflict import LaggedGradStore, conflict_matrix, conflict_score, topology_penalty
from .model import CDSPMoE, ModelConfig
from .trainer import TrainConfig, evaluate, run_training, train_step

__version__ = "0.1.0"

__all__ = ["CDSPMoE", "ModelConfig", "StandardMoE", "load_balance_loss", "LaggedGradStore", "conflict_matrix",
           "conflict_score", "topology_penalty", "TrainConfig", "evaluate", "run_training", "train_step"]
