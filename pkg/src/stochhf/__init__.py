"""Stochastic Hessian-free optimization for feed-forward networks."""

from .net import LossSpec, Network, forward, gnvp, gradient, loss, rop_forward
from .shf import OptimizerState, ShfConfig, shf_step, train_epochs

__all__ = [
    "LossSpec", "Network", "forward", "gnvp", "gradient", "loss", "rop_forward",
    "OptimizerState", "ShfConfig", "shf_step", "train_epochs",
]
