"""Stochastic Hessian-free optimization.

One call to :func:`shf_step` performs a full iteration: dropout sampling,
delta-momentum initialization of CG, preconditioned CG on the damped
Gauss-Newton system built from the curvature sub-batch, backtracking over
the CG iterates, the reduction ratio and damping update, an Armijo
linesearch, and the parameter update. :func:`train_epochs` drives it over
shuffled gradient batches with the per-epoch schedules.
"""

from __future__ import annotations

import dataclasses
import math
import time
from dataclasses import dataclass

import numpy as np

from . import net as nn
from .cg import CgConfig, CurvatureBreakdownError, cg_run
from .data import batch_iter, curvature_slice

DAMPING_MODES = ("soft", "martens")

SOFT_DOWN, SOFT_UP = 99.0 / 100.0, 100.0 / 99.0
MARTENS_DOWN, MARTENS_UP = 2.0 / 3.0, 3.0 / 2.0

GAMMA_GROWTH, GAMMA_CAP = 1.01, 0.99
ARMIJO_C, BACKTRACK_FACTOR = 0.01, 0.8


class NonFiniteObjectiveError(ArithmeticError):
    def __init__(self, msg, report=None):
        super().__init__(msg)
        self.report = report


@dataclass
class ShfConfig:
    decay_c: float                    # beta_e = c * beta_{e-1}; no default on purpose
    grad_batch: int = 1000
    curv_batch: int = 100
    cg_iters: int = 3
    lambda0: float = 1.0
    gamma1: float = 0.5
    gamma_shutoff_epoch: int | None = None
    omega: int = 60
    xi: float = 0.75
    weight_decay: float = 0.0
    damping_mode: str = "soft"
    cg_termination: str = "fixed"
    cg_epsilon: float = 5e-4
    dropout_input: float = 0.0
    dropout_hidden: float = 0.0

    def __post_init__(self):
        if not 0.0 < self.decay_c <= 1.0:
            raise ValueError("decay_c must lie in (0, 1]")
        if self.curv_batch < 1 or self.grad_batch % self.curv_batch:
            raise ValueError("grad_batch must be a positive multiple of curv_batch")
        if self.cg_iters < 1:
            raise ValueError("cg_iters must be >= 1")
        if not self.lambda0 > 0:
            raise ValueError("lambda0 must be > 0")
        if self.damping_mode not in DAMPING_MODES:
            raise ValueError(f"damping_mode must be one of {DAMPING_MODES}")
        if self.omega < 0:
            raise ValueError("omega must be >= 0")

    @property
    def h(self):
        return self.grad_batch // self.curv_batch

    @property
    def uses_dropout(self):
        return self.dropout_input > 0 or self.dropout_hidden > 0


@dataclass
class OptimizerState:
    damping: float
    gamma: float
    beta: float
    delta_prev: np.ndarray
    epoch: int = 1
    iteration: int = 0
    gamma_shutoff_epoch: int | None = None

    @classmethod
    def initial(cls, cfg, n_params):
        gamma = cfg.gamma1
        if cfg.gamma_shutoff_epoch is not None and cfg.gamma_shutoff_epoch <= 1:
            gamma = 0.0
        return cls(cfg.lambda0, gamma, 1.0, np.zeros(n_params), 1, 0, cfg.gamma_shutoff_epoch)


@dataclass
class StepReport:
    f_before: float
    f_after: float
    rho: float
    alpha: float
    linesearch_steps: int
    cg_index: int                  # 1-based index of the chosen CG iterate
    cg_iters: int
    damping: float
    gamma: float
    beta: float
    rejected: bool = False
    breakdown: bool = False


def gamma_update(state):
    """Advance the CG-decay schedule for the epoch held in ``state.epoch``."""
    if state.gamma_shutoff_epoch is not None and state.epoch >= state.gamma_shutoff_epoch:
        gamma = 0.0
    else:
        gamma = min(GAMMA_GROWTH * state.gamma, GAMMA_CAP)
    return dataclasses.replace(state, gamma=gamma)


def beta_update(state, c):
    return dataclasses.replace(state, beta=c * state.beta)


def next_epoch(state, cfg):
    state = dataclasses.replace(state, epoch=state.epoch + 1)
    return beta_update(gamma_update(state), cfg.decay_c)


def lambda_update(damping, rho, mode="soft"):
    if mode == "soft":
        down, up = SOFT_DOWN, SOFT_UP
    elif mode == "martens":
        down, up = MARTENS_DOWN, MARTENS_UP
    else:
        raise ValueError(f"unknown damping mode {mode!r}")
    if rho > 0.75:
        return damping * down
    if rho < 0.25:
        return damping * up
    return damping


def cg_backtrack(iterates, f_eval):
    """Pick the CG iterate with the lowest objective.

    Starts from the last iterate and scans the earlier ones from last to
    first, switching whenever one is strictly better. Returns
    ``(index, delta, f)`` with a 0-based index.
    """
    best = len(iterates) - 1
    f_best = f_eval(iterates[best])
    for j in range(len(iterates) - 2, -1, -1):
        fj = f_eval(iterates[j])
        if fj < f_best:
            best, f_best = j, fj
    return best, iterates[best], f_best


def linesearch(f_eval, f0, slope, delta, omega, f_first=None):
    """Backtracking Armijo search over ``alpha = 0.8^j``, ``j = 0..omega``.

    ``f_eval(x)`` evaluates the objective at ``theta + x``. Returns
    ``(alpha, steps, f_alpha)``; ``alpha`` is 0 when no trial satisfies
    ``f <= f0 + 0.01 * alpha * slope``.
    """
    alpha = 1.0
    f_alpha = f_eval(delta) if f_first is None else f_first
    j = 0
    while f_alpha > f0 + ARMIJO_C * alpha * slope:
        if j >= omega:
            return 0.0, j, f0
        alpha *= BACKTRACK_FACTOR
        j += 1
        f_alpha = f_eval(alpha * delta)
    return alpha, j, f_alpha


def _finite_or_inf(f):
    return f if math.isfinite(f) else math.inf


def shf_step(net, state, X, T, curv_index, cfg, loss_spec, rng=None):
    """One stochastic Hessian-free iteration on gradient batch ``(X, T)``.

    ``curv_index`` selects the curvature sub-batch rows of the gradient
    batch (a slice or index array), so dropout masks are shared between the
    two. The network is updated in place; returns ``(net, state, report)``.
    """
    loss_spec.check(net)
    wd = cfg.weight_decay
    masks = None
    if cfg.uses_dropout:
        masks = nn.dropout_sample(rng, net.layer_sizes, X.shape[0], cfg.dropout_input, cfg.dropout_hidden)

    delta0 = state.gamma * state.delta_prev

    cache_g = nn.forward(net, X, masks)
    f0 = nn.loss(cache_g, T, loss_spec, wd)
    if not math.isfinite(f0):
        raise NonFiniteObjectiveError(f"objective is {f0} at iteration {state.iteration}")
    grad, sq = nn.gradient(net, cache_g, T, loss_spec, wd)
    precon = nn.precon_build(sq, state.damping, cfg.xi)

    Xc, Tc = X[curv_index], T[curv_index]
    cache_c = nn.forward(net, Xc, None if masks is None else masks.subset(curv_index))
    damping = state.damping

    def apply_damped(v):
        return nn.gnvp(net, cache_c, v, loss_spec, damping, wd)

    cg_cfg = CgConfig(cfg.cg_iters, cfg.cg_termination, cfg.cg_epsilon)
    try:
        res = cg_run(apply_damped, grad, delta0, precon, cg_cfg)
    except CurvatureBreakdownError:
        new_state = dataclasses.replace(state, damping=state.damping * SOFT_UP, iteration=state.iteration + 1)
        report = StepReport(f0, f0, 0.0, 0.0, 0, 0, 0, new_state.damping, state.gamma, state.beta,
                            rejected=True, breakdown=True)
        return net, new_state, report

    trial = net.copy()

    def f_eval(d):
        trial.set_params(net.params + d)
        return _finite_or_inf(nn.loss(nn.forward(trial, X, masks), T, loss_spec, wd))

    idx, delta, f1 = cg_backtrack(res.iterates, f_eval)

    Bd = nn.gnvp(net, cache_c, delta, loss_spec, 0.0, wd)
    slope = float(grad @ delta)
    denom = 0.5 * float(delta @ Bd) + slope
    rho = (f1 - f0) / denom if denom != 0.0 else 0.0
    if not math.isfinite(rho):
        rho = -math.inf
    new_damping = lambda_update(state.damping, rho, cfg.damping_mode)

    alpha, steps, f_alpha = linesearch(f_eval, f0, slope, delta, cfg.omega, f_first=f1)
    rejected = alpha == 0.0
    if not rejected:
        net.step(delta, state.beta * alpha)
        f_after = f_alpha if state.beta == 1.0 else nn.loss(nn.forward(net, X, masks), T, loss_spec, wd)
    else:
        f_after = f0

    new_state = dataclasses.replace(
        state, damping=new_damping, delta_prev=res.iterates[-1].copy(), iteration=state.iteration + 1)
    report = StepReport(f0, f_after, rho if math.isfinite(rho) else float("-inf"), alpha, steps,
                        idx + 1, res.n_iters, new_damping, state.gamma, state.beta, rejected=rejected)
    return net, new_state, report


def curvature_subset(grad_batch, epoch, h):
    """Rows of ``grad_batch = (X, T)`` used for curvature at ``epoch``."""
    X, T = grad_batch
    if X.shape[0] % h:
        raise ValueError(f"gradient batch of {X.shape[0]} rows cannot be split into {h} blocks")
    sl = curvature_slice(X.shape[0], X.shape[0] // h, epoch)
    return X[sl], T[sl]


@dataclass
class EpochSummary:
    epoch: int
    mean_rho: float
    mean_alpha: float
    rejected_steps: int
    steps: int
    damping: float
    gamma: float
    beta: float
    wall_seconds: float


def _epoch_rng(seed, epoch):
    return np.random.default_rng([seed, 1, epoch])


def train_epochs(net, data, cfg, loss_spec, epochs, seed, on_epoch=None):
    """Run ``epochs`` passes of SHF over ``data``; returns ``(net, summaries)``.

    Gradient batches are reshuffled each epoch from ``(seed, epoch)``; the
    curvature block inside each gradient batch cycles every ``h`` epochs.
    ``on_epoch(net, summary, state)`` is called after each epoch.
    """
    state = OptimizerState.initial(cfg, net.n_params)
    drop_rng = np.random.default_rng([seed, 2])
    summaries = []
    for epoch in range(1, epochs + 1):
        if epoch > 1:
            state = next_epoch(state, cfg)
        t0 = time.perf_counter()
        curv = curvature_slice(cfg.grad_batch, cfg.curv_batch, epoch)
        reports = []
        for X, T in batch_iter(data, cfg.grad_batch, _epoch_rng(seed, epoch)):
            net, state, rep = shf_step(net, state, X, T, curv, cfg, loss_spec, drop_rng)
            reports.append(rep)
        summary = EpochSummary(
            epoch=epoch,
            mean_rho=float(np.mean([r.rho for r in reports])),
            mean_alpha=float(np.mean([r.alpha for r in reports])),
            rejected_steps=sum(r.rejected for r in reports),
            steps=len(reports),
            damping=state.damping,
            gamma=state.gamma,
            beta=state.beta,
            wall_seconds=time.perf_counter() - t0,
        )
        summaries.append(summary)
        if on_epoch is not None:
            on_epoch(net, summary, state)
    return net, summaries
