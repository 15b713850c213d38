"""First-order baselines: SGD, momentum SGD, Nesterov's accelerated gradient
and dropout SGD with its learning-rate / momentum schedules.

Momentum methods use the convention

    v_k = p_k v_{k-1} - (1 - p_k) lr_k grad,    theta_k = theta_{k-1} + v_k
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field

import numpy as np

from . import net as nn
from .data import batch_iter

METHODS = ("sgd", "momentum", "nag")


@dataclass
class FirstOrderState:
    velocity: np.ndarray
    lr: float = 0.1
    momentum: float = 0.0
    epoch: int = 0
    max_norm: float | None = None


def sgd_step(theta, lr, grad):
    return theta - lr * grad


def momentum_step(theta, state, grad):
    """Momentum update; ``state.velocity`` is replaced by the new velocity.

    Max-norm clipping is applied by the caller via :func:`max_norm_clip`
    since it needs the layer structure.
    """
    p = state.momentum
    state.velocity = p * state.velocity - (1.0 - p) * state.lr * grad
    return theta + state.velocity


def nag_step(theta, state, grad_at):
    """Nesterov step: the gradient is taken at ``theta + p * velocity``."""
    p = state.momentum
    g = grad_at(theta + p * state.velocity)
    state.velocity = p * state.velocity - (1.0 - p) * state.lr * g
    return theta + state.velocity


def max_norm_clip(net, cap):
    """Rescale any hidden unit's incoming weight vector whose L2 norm exceeds
    ``cap`` back onto the ball; other rows are left untouched."""
    for W in net.weights[:-1]:
        norms = np.sqrt((W * W).sum(axis=1))
        over = norms > cap
        if np.any(over):
            W[over] *= (cap / norms[over])[:, None]
    net.touch()
    return net


def lr_schedule(epoch, lr0, decay):
    if not lr0 > 0 or not 0 < decay <= 1:
        raise ValueError("need lr0 > 0 and decay in (0, 1]")
    return lr0 * decay ** epoch


def momentum_schedule(epoch, total_epochs, p0=0.5, p_final=0.99):
    """Linear ramp from ``p0`` at epoch 0 to ``p_final`` at ``total_epochs``,
    constant afterwards."""
    if not 0 <= p0 <= p_final < 1:
        raise ValueError("need 0 <= p0 <= p_final < 1")
    if total_epochs <= 0:
        return p_final
    frac = min(max(epoch / total_epochs, 0.0), 1.0)
    return p0 + (p_final - p0) * frac


@dataclass
class FirstOrderConfig:
    lr_decay: float                           # required: no paper value
    method: str = "momentum"
    lr0: float = 10.0
    p0: float = 0.5
    p_final: float = 0.99
    momentum_epochs: int = 500
    batch_size: int = 100
    max_norm: float | None = None
    dropout: list = field(default_factory=list)   # per activation layer, 0 = inputs
    weight_decay: float = 0.0

    def __post_init__(self):
        if self.method not in METHODS:
            raise ValueError(f"method must be one of {METHODS}")
        lr_schedule(0, self.lr0, self.lr_decay)
        if self.method == "sgd" and (self.p0 or self.p_final):
            raise ValueError("plain SGD takes no momentum")

    def drop_probs(self):
        return {i: float(p) for i, p in enumerate(self.dropout) if p}


@dataclass
class FirstOrderEpoch:
    epoch: int
    lr: float
    momentum: float
    steps: int
    wall_seconds: float


def _epoch_rng(seed, epoch):
    return np.random.default_rng([seed, 1, epoch])


def train_first_order(net, data, cfg, loss_spec, epochs, seed, on_epoch=None):
    """Minibatch training with the configured first-order method.

    Epochs are numbered from 1; the schedules are evaluated at ``epoch - 1``
    so the first epoch runs at ``lr0`` and ``p0``.
    """
    loss_spec.check(net)
    state = FirstOrderState(np.zeros(net.n_params), max_norm=cfg.max_norm)
    drop_rng = np.random.default_rng([seed, 2])
    probs = cfg.drop_probs()
    history = []
    for epoch in range(1, epochs + 1):
        t0 = time.perf_counter()
        state.epoch = epoch
        state.lr = lr_schedule(epoch - 1, cfg.lr0, cfg.lr_decay)
        state.momentum = 0.0 if cfg.method == "sgd" else momentum_schedule(
            epoch - 1, cfg.momentum_epochs, cfg.p0, cfg.p_final)
        steps = 0
        for X, T in batch_iter(data, cfg.batch_size, _epoch_rng(seed, epoch)):
            masks = nn.sample_dropout(drop_rng, net.layer_sizes, X.shape[0], probs) if probs else None

            def grad_at(theta):
                net.set_params(theta)
                g, _ = nn.gradient(net, nn.forward(net, X, masks), T, loss_spec, cfg.weight_decay)
                return g

            theta = net.params.copy()
            if cfg.method == "nag":
                new = nag_step(theta, state, grad_at)
            else:
                new = momentum_step(theta, state, grad_at(theta))
            net.set_params(new)
            if cfg.max_norm is not None:
                max_norm_clip(net, cfg.max_norm)
            steps += 1
        rec = FirstOrderEpoch(epoch, state.lr, state.momentum, steps, time.perf_counter() - t0)
        history.append(rec)
        if on_epoch is not None:
            on_epoch(net, rec, state)
    return net, history
