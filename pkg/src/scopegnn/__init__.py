"""Graph neural networks with Bayesian inference of the message-passing scope."""

from .distributions import MaskSample, StickBreakingPrior, VariationalPosterior
from .graph import Graph, load_graph
from .model import ModelParams, forward_model, init_params, predict
from .training import TrainConfig, TrainHistory, train

__all__ = [
    "Graph",
    "MaskSample",
    "ModelParams",
    "StickBreakingPrior",
    "TrainConfig",
    "TrainHistory",
    "VariationalPosterior",
    "forward_model",
    "init_params",
    "load_graph",
    "predict",
    "train",
]
