"""Finite-difference and explicit-assembly oracles for the derivative code."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import net as nn

FD_STEP = 1e-5
TOLERANCE = 1e-6

# hidden pre-activations closer than this to a ReLU kink are resampled
RELU_MARGIN = 1e-3


def rel_error(a, b):
    """Max-abs difference scaled by the larger of the two max-abs magnitudes."""
    a, b = np.asarray(a, dtype=np.float64), np.asarray(b, dtype=np.float64)
    scale = max(np.abs(a).max(initial=0.0), np.abs(b).max(initial=0.0))
    diff = np.abs(a - b).max(initial=0.0)
    return 0.0 if scale == 0.0 else diff / scale


def random_targets(rng, spec, m):
    if spec.kind == "softmax-cross-entropy":
        return np.eye(spec.k)[rng.integers(0, spec.k, size=m)]
    if spec.kind == "binary-cross-entropy":
        return rng.uniform(0.0, 1.0, size=(m, spec.k))
    return rng.normal(size=(m, spec.k))


@dataclass
class Problem:
    net: nn.Network
    X: np.ndarray
    T: np.ndarray
    spec: nn.LossSpec
    masks: nn.DropoutMasks | None = None


def random_problem(rng, sizes, hidden="tanh", loss_kind="softmax-cross-entropy", m=4, dropout=False):
    """Random dense net, inputs and targets; ReLU nets are resampled until no
    pre-activation lies within ``RELU_MARGIN`` of the kink."""
    out = nn.LOSS_KINDS[loss_kind]
    transfers = [hidden] * (len(sizes) - 2) + [out]
    spec = nn.LossSpec(loss_kind, sizes[-1])
    for _ in range(1000):
        net = nn.Network(sizes, transfers, rng.normal(scale=0.5, size=_count(sizes)))
        X = rng.normal(size=(m, sizes[0]))
        masks = nn.dropout_sample(rng, sizes, m, 0.2, 0.5) if dropout else None
        cache = nn.forward(net, X, masks)
        if hidden != "relu" or all(np.abs(z).min() > RELU_MARGIN for z in cache.pre[:-1]):
            return Problem(net, X, random_targets(rng, spec, m), spec, masks)
    raise RuntimeError("could not draw a ReLU problem away from kinks")


def _count(sizes):
    return sum(a * b + b for a, b in zip(sizes[:-1], sizes[1:]))


def fd_gradient(prob, weight_decay=0.0, eps=FD_STEP):
    net = prob.net.copy()
    theta = prob.net.params.copy()
    g = np.empty_like(theta)
    for i in range(theta.size):
        old = theta[i]
        theta[i] = old + eps
        net.set_params(theta)
        fp = nn.loss(nn.forward(net, prob.X, prob.masks), prob.T, prob.spec, weight_decay)
        theta[i] = old - eps
        net.set_params(theta)
        fm = nn.loss(nn.forward(net, prob.X, prob.masks), prob.T, prob.spec, weight_decay)
        theta[i] = old
        g[i] = (fp - fm) / (2 * eps)
    return g


def fd_directional(prob, v, eps=FD_STEP):
    """Central difference of the network logits along v, shape (k, batch)."""
    net = prob.net.copy()
    net.set_params(prob.net.params + eps * v)
    fp = nn.forward(net, prob.X, prob.masks).logits
    net.set_params(prob.net.params - eps * v)
    fm = nn.forward(net, prob.X, prob.masks).logits
    return (fp - fm) / (2 * eps)


def jacobian_by_rop(prob, cache):
    """Logit Jacobian assembled one column per parameter, shape (k, m, n)."""
    n = prob.net.n_params
    cols = [nn.rop_forward(prob.net, cache, e) for e in np.eye(n)]
    return np.stack(cols, axis=-1)


def assemble_gauss_newton(prob, cache, J=None, weight_decay=0.0):
    """Explicit mean-over-batch J^T L'' J (+ weight decay on weights)."""
    if J is None:
        J = jacobian_by_rop(prob, cache)
    k, m, n = J.shape
    B = np.zeros((n, n))
    P = cache.output
    for j in range(m):
        Jj = J[:, j, :]
        if prob.spec.kind == "softmax-cross-entropy":
            H = np.diag(P[:, j]) - np.outer(P[:, j], P[:, j])
        elif prob.spec.kind == "binary-cross-entropy":
            H = np.diag(P[:, j] * (1 - P[:, j]))
        else:
            H = np.eye(k)
        B += Jj.T @ H @ Jj
    B /= m
    if weight_decay:
        B[np.diag_indices(n)] += weight_decay * prob.net.weight_mask()
    return B


@dataclass
class CheckReport:
    gradient: float
    rop: float
    gnvp: float

    def passed(self, tol=TOLERANCE):
        return max(self.gradient, self.rop, self.gnvp) < tol

    def lines(self):
        return [f"gradient  max_rel_err={self.gradient:.3e}",
                f"rop       max_rel_err={self.rop:.3e}",
                f"gnvp      max_rel_err={self.gnvp:.3e}"]


def check_problem(prob, rng, weight_decay=0.0, gradient_fn=None):
    """Run the three oracle comparisons on one problem."""
    gradient_fn = gradient_fn or nn.gradient
    cache = nn.forward(prob.net, prob.X, prob.masks)
    g, _ = gradient_fn(prob.net, cache, prob.T, prob.spec, weight_decay)
    e_grad = rel_error(g, fd_gradient(prob, weight_decay))

    v = rng.normal(size=prob.net.n_params)
    e_rop = rel_error(nn.rop_forward(prob.net, cache, v), fd_directional(prob, v))

    B = assemble_gauss_newton(prob, cache, weight_decay=weight_decay)
    e_gn = 0.0
    for i, e in enumerate(np.eye(prob.net.n_params)):
        col = nn.gnvp(prob.net, cache, e, prob.spec, 0.0, weight_decay)
        e_gn = max(e_gn, rel_error(col, B[:, i]))
    return CheckReport(e_grad, e_rop, e_gn)


def corrupted_gradient(net, cache, T, spec, weight_decay=0.0):
    """Deliberately wrong backprop, used to prove the checker can fail."""
    g, sq = nn.gradient(net, cache, T, spec, weight_decay)
    g = g.copy()
    g[0] += 1e-3 + 0.01 * abs(g[0])
    return g, sq


def run_gradcheck(seed, sizes, weight_decay=1e-3, corrupt=False):
    """Check every (hidden transfer, loss) combination on ``sizes``."""
    rng = np.random.default_rng(seed)
    results = []
    for hidden in nn.HIDDEN_TRANSFERS:
        for kind in nn.LOSS_KINDS:
            prob = random_problem(rng, sizes, hidden, kind)
            rep = check_problem(prob, rng, weight_decay, corrupted_gradient if corrupt else None)
            results.append((hidden, kind, rep))
    return results
