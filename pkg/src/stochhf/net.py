"""Dense feed-forward networks: forward pass, backprop, R-operator and
Gauss-Newton products, losses, dropout and sparse initialization.

Conventions
-----------
Inputs and targets are passed row-major, one example per row, as datasets
store them. Everything inside a :class:`ForwardCache` is column-major: the
activations of layer ``i`` have shape ``(n_i, batch)``.

The flat parameter vector is layer-major with the weights of a layer
(row-major, shape ``(n_out, n_in)``) followed by its biases::

    [W_0, b_0, W_1, b_1, ..., W_{L-1}, b_{L-1}]

Every vector ``v`` handed to :func:`rop_forward` or :func:`gnvp` uses this
ordering.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass, field

import numpy as np

HIDDEN_TRANSFERS = ("logistic", "tanh", "relu", "linear")
OUTPUT_TRANSFERS = ("softmax", "logistic", "linear")

LOSS_KINDS = {
    # loss kind -> matching output transfer
    "softmax-cross-entropy": "softmax",
    "binary-cross-entropy": "logistic",
    "squared-error": "linear",
}

_tokens = itertools.count(1)


class DimensionError(ValueError):
    """Array shapes disagree with the network or loss."""


class InputError(ValueError):
    """Input or target values are invalid (non-finite, out of range)."""


class StaleCacheError(RuntimeError):
    """A ForwardCache was used after the network parameters changed."""


class PreconditionerError(ValueError):
    pass


def logistic(z):
    return np.exp(-np.logaddexp(0.0, -z))


def _transfer(name, z):
    if name == "logistic":
        return logistic(z)
    if name == "tanh":
        return np.tanh(z)
    if name == "relu":
        return np.maximum(z, 0.0)
    if name == "linear":
        return z
    if name == "softmax":
        e = np.exp(z - z.max(axis=0, keepdims=True))
        return e / e.sum(axis=0, keepdims=True)
    raise ValueError(f"unknown transfer {name!r}")


def _transfer_deriv(name, z, a):
    # a = transfer(z), passed in so it is not recomputed
    if name == "logistic":
        return a * (1.0 - a)
    if name == "tanh":
        return 1.0 - a * a
    if name == "relu":
        return (z > 0.0).astype(np.float64)
    if name == "linear":
        return np.ones_like(z)
    raise ValueError(f"no elementwise derivative for transfer {name!r}")


class Network:
    """Multilayer perceptron with a single flat float64 parameter vector.

    ``weights[i]`` and ``biases[i]`` are views into ``params``. Mutate the
    parameters through :meth:`set_params` or :meth:`step` so that forward
    caches computed earlier are invalidated.
    """

    def __init__(self, layer_sizes, transfers, params=None):
        sizes = tuple(int(n) for n in layer_sizes)
        if len(sizes) < 2 or any(n <= 0 for n in sizes):
            raise DimensionError(f"layer sizes must be >= 2 positive ints, got {layer_sizes}")
        transfers = tuple(transfers)
        if len(transfers) != len(sizes) - 1:
            raise DimensionError(
                f"need {len(sizes) - 1} transfers for {len(sizes)} layer sizes, got {len(transfers)}")
        for t in transfers[:-1]:
            if t not in HIDDEN_TRANSFERS:
                raise ValueError(f"hidden transfer must be one of {HIDDEN_TRANSFERS}, got {t!r}")
        if transfers[-1] not in OUTPUT_TRANSFERS:
            raise ValueError(f"output transfer must be one of {OUTPUT_TRANSFERS}, got {transfers[-1]!r}")
        self.layer_sizes = sizes
        self.transfers = transfers

        self._slices = []
        off = 0
        for n_in, n_out in zip(sizes[:-1], sizes[1:]):
            w = slice(off, off + n_out * n_in)
            off += n_out * n_in
            b = slice(off, off + n_out)
            off += n_out
            self._slices.append((w, b, (n_out, n_in)))
        self.n_params = off

        if params is None:
            self.params = np.zeros(off)
        else:
            params = np.asarray(params, dtype=np.float64)
            if params.shape != (off,):
                raise DimensionError(f"expected {off} parameters, got shape {params.shape}")
            if not np.all(np.isfinite(params)):
                raise InputError("parameters must be finite")
            self.params = params.copy()
        self.weights, self.biases = self.unflatten(self.params)
        self.token = next(_tokens)

    @classmethod
    def from_layers(cls, weights, biases, transfers):
        weights = [np.atleast_2d(np.asarray(W, dtype=np.float64)) for W in weights]
        sizes = [weights[0].shape[1]] + [W.shape[0] for W in weights]
        net = cls(sizes, transfers)
        for i, (W, b) in enumerate(zip(weights, biases)):
            if W.shape != net.weights[i].shape:
                raise DimensionError(f"weight {i} has shape {W.shape}, expected {net.weights[i].shape}")
            net.weights[i][...] = W
            net.biases[i][...] = np.asarray(b, dtype=np.float64)
        if not np.all(np.isfinite(net.params)):
            raise InputError("parameters must be finite")
        return net

    @property
    def n_layers(self):
        """Number of weight layers."""
        return len(self._slices)

    def unflatten(self, v):
        """Split a flat vector into per-layer (weight, bias) views."""
        Ws, bs = [], []
        for w, b, shape in self._slices:
            Ws.append(v[w].reshape(shape))
            bs.append(v[b])
        return Ws, bs

    def weight_mask(self):
        """Boolean vector, True on weight coordinates and False on biases."""
        mask = np.zeros(self.n_params, dtype=bool)
        for w, _, _ in self._slices:
            mask[w] = True
        return mask

    def copy(self):
        return Network(self.layer_sizes, self.transfers, self.params)

    def set_params(self, theta):
        theta = np.asarray(theta, dtype=np.float64)
        if theta.shape != self.params.shape:
            raise DimensionError(f"expected {self.n_params} parameters, got shape {theta.shape}")
        self.params[...] = theta
        self.token = next(_tokens)

    def step(self, delta, scale=1.0):
        """In-place ``params += scale * delta``."""
        self.params += scale * delta
        self.token = next(_tokens)

    def touch(self):
        """Invalidate caches after editing ``weights``/``biases`` views directly."""
        self.token = next(_tokens)


@dataclass(frozen=True)
class LossSpec:
    kind: str
    k: int

    def __post_init__(self):
        if self.kind not in LOSS_KINDS:
            raise ValueError(f"loss kind must be one of {sorted(LOSS_KINDS)}, got {self.kind!r}")

    @property
    def output_transfer(self):
        return LOSS_KINDS[self.kind]

    def check(self, net):
        if net.layer_sizes[-1] != self.k:
            raise DimensionError(f"loss expects {self.k} outputs, network has {net.layer_sizes[-1]}")
        if net.transfers[-1] != self.output_transfer:
            raise ValueError(
                f"{self.kind} needs a {self.output_transfer} output layer, network has {net.transfers[-1]}")


@dataclass
class DropoutMasks:
    """Binary masks keyed by activation index.

    Index 0 is the input layer and index ``L-1`` the last hidden layer
    (the one feeding the output weights). Each mask has shape
    ``(n_i, batch)`` and multiplies the activations column by column.
    """

    masks: dict
    drop_probs: dict

    @property
    def batch_size(self):
        for m in self.masks.values():
            return m.shape[1]
        return None

    def subset(self, cols):
        """Masks restricted to a subset of batch columns (a curvature sub-batch)."""
        return DropoutMasks({i: m[:, cols] for i, m in self.masks.items()}, dict(self.drop_probs))


def sample_dropout(rng, layer_sizes, batch_size, drop_probs):
    """Sample Bernoulli keep-masks; ``drop_probs`` maps activation index -> p."""
    masks = {}
    for i in sorted(drop_probs):
        p = float(drop_probs[i])
        if not 0.0 <= p < 1.0:
            raise ValueError(f"dropout probability must be in [0, 1), got {p}")
        if not 0 <= i < len(layer_sizes) - 1:
            raise DimensionError(f"cannot drop activation layer {i}")
        masks[i] = (rng.random((layer_sizes[i], batch_size)) >= p).astype(np.float64)
    return DropoutMasks(masks, {i: float(p) for i, p in drop_probs.items()})


def dropout_sample(rng, layer_sizes, batch_size, p_input=0.0, p_hidden=0.5):
    """Masks for the inputs and the last hidden layer."""
    last_hidden = len(layer_sizes) - 2
    probs = {0: p_input}
    if last_hidden > 0:
        probs[last_hidden] = p_hidden
    return sample_dropout(rng, layer_sizes, batch_size, probs)


@dataclass
class ForwardCache:
    """Activations of one batch, valid for the parameter token it records."""

    net: Network
    token: int
    inputs: list          # masked input to each weight layer, (n_i, m)
    pre: list             # pre-activations z_i, (n_{i+1}, m)
    derivs: list          # transfer derivative at each hidden z_i
    output: np.ndarray    # output transfer applied to the last z, (k, m)
    masks: DropoutMasks | None = None
    batch_size: int = field(init=False)

    def __post_init__(self):
        self.batch_size = self.inputs[0].shape[1]

    @property
    def logits(self):
        return self.pre[-1]

    def check(self, net):
        if net is not self.net or net.token != self.token:
            raise StaleCacheError("forward cache does not match the current network parameters")


def forward(net, X, masks=None):
    """Run a batch (rows = examples) through the network and cache everything."""
    X = np.asarray(X, dtype=np.float64)
    if X.ndim != 2 or X.shape[1] != net.layer_sizes[0]:
        raise DimensionError(f"input must have shape (batch, {net.layer_sizes[0]}), got {X.shape}")
    if not np.all(np.isfinite(X)):
        raise InputError("inputs must be finite")
    m = X.shape[0]
    mask_of = {} if masks is None else masks.masks
    for i, mk in mask_of.items():
        if mk.shape != (net.layer_sizes[i], m):
            raise DimensionError(f"mask {i} has shape {mk.shape}, expected {(net.layer_sizes[i], m)}")

    inputs, pre, derivs = [], [], []
    a = X.T
    last = net.n_layers - 1
    for i in range(net.n_layers):
        if i in mask_of:
            a = a * mask_of[i]
        inputs.append(a)
        z = net.weights[i] @ a + net.biases[i][:, None]
        pre.append(z)
        if i < last:
            a = _transfer(net.transfers[i], z)
            derivs.append(_transfer_deriv(net.transfers[i], z, a))
    out = _transfer(net.transfers[last], pre[-1])
    return ForwardCache(net, net.token, inputs, pre, derivs, out, masks)


def _check_targets(cache, T, spec):
    T = np.asarray(T, dtype=np.float64)
    if T.shape != (cache.batch_size, spec.k):
        raise DimensionError(f"targets must have shape {(cache.batch_size, spec.k)}, got {T.shape}")
    if not np.all(np.isfinite(T)):
        raise InputError("targets must be finite")
    if spec.kind == "softmax-cross-entropy":
        if np.any(T < 0) or not np.allclose(T.sum(axis=1), 1.0):
            raise InputError("softmax cross-entropy targets must be non-negative rows summing to 1")
    elif spec.kind == "binary-cross-entropy":
        if np.any(T < 0) or np.any(T > 1):
            raise InputError("binary cross-entropy targets must lie in [0, 1]")
    return T.T


def example_losses(cache, T, spec):
    """Per-example data loss, shape (batch,)."""
    Tc = _check_targets(cache, T, spec)
    z = cache.logits
    if spec.kind == "softmax-cross-entropy":
        zmax = z.max(axis=0, keepdims=True)
        lse = zmax + np.log(np.exp(z - zmax).sum(axis=0, keepdims=True))
        return -(Tc * (z - lse)).sum(axis=0)
    if spec.kind == "binary-cross-entropy":
        return (np.logaddexp(0.0, z) - Tc * z).sum(axis=0)
    return 0.5 * ((z - Tc) ** 2).sum(axis=0)


def weight_penalty(net, weight_decay):
    if weight_decay == 0.0:
        return 0.0
    return 0.5 * weight_decay * sum(float(np.vdot(W, W)) for W in net.weights)


def loss(cache, T, spec, weight_decay=0.0):
    """Mean loss over the batch plus ``0.5 * wd * ||W||^2`` (biases excluded)."""
    cache.check(cache.net)
    return float(example_losses(cache, T, spec).mean()) + weight_penalty(cache.net, weight_decay)


def output_residual(cache, T, spec):
    """dL/dz for each example (columns), not divided by the batch size."""
    Tc = _check_targets(cache, T, spec)
    if spec.kind == "squared-error":
        return cache.logits - Tc
    return cache.output - Tc


def apply_output_hessian(cache, spec, U):
    """Per-example L'' (Hessian of the loss w.r.t. the logits) times U."""
    if spec.kind == "softmax-cross-entropy":
        P = cache.output
        PU = P * U
        return PU - P * PU.sum(axis=0, keepdims=True)
    if spec.kind == "binary-cross-entropy":
        P = cache.output
        return P * (1.0 - P) * U
    return U


def _backprop(net, cache, delta):
    """J^T applied to output-space columns ``delta``; returns the summed
    gradient and the per-example squared-gradient sum."""
    grad = np.empty(net.n_params)
    sq = np.empty(net.n_params)
    gW, gb = net.unflatten(grad)
    sW, sb = net.unflatten(sq)
    mask_of = {} if cache.masks is None else cache.masks.masks
    for i in range(net.n_layers - 1, -1, -1):
        a = cache.inputs[i]
        gW[i][...] = delta @ a.T
        gb[i][...] = delta.sum(axis=1)
        d2 = delta * delta
        sW[i][...] = d2 @ (a * a).T
        sb[i][...] = d2.sum(axis=1)
        if i > 0:
            delta = (net.weights[i].T @ delta) * cache.derivs[i - 1]
            if i in mask_of:
                delta = delta * mask_of[i]
    return grad, sq


def _backprop_sum(net, cache, delta):
    grad = np.empty(net.n_params)
    gW, gb = net.unflatten(grad)
    mask_of = {} if cache.masks is None else cache.masks.masks
    for i in range(net.n_layers - 1, -1, -1):
        gW[i][...] = delta @ cache.inputs[i].T
        gb[i][...] = delta.sum(axis=1)
        if i > 0:
            delta = (net.weights[i].T @ delta) * cache.derivs[i - 1]
            if i in mask_of:
                delta = delta * mask_of[i]
    return grad


def gradient(net, cache, T, spec, weight_decay=0.0):
    """Gradient of :func:`loss` and the sum over examples of the squared
    per-example gradients (the statistic the diagonal preconditioner needs).

    The per-example gradients are those of each example's own loss, without
    weight decay.
    """
    cache.check(net)
    spec.check(net)
    delta = output_residual(cache, T, spec)
    grad, sq = _backprop(net, cache, delta)
    grad /= cache.batch_size
    if weight_decay:
        wm = net.weight_mask()
        grad[wm] += weight_decay * net.params[wm]
    return grad, sq


def rop_forward(net, cache, v):
    """Directional derivative of the logits along ``v`` (J v), shape (k, batch)."""
    cache.check(net)
    v = np.asarray(v, dtype=np.float64)
    if v.shape != (net.n_params,):
        raise DimensionError(f"direction must have length {net.n_params}, got shape {v.shape}")
    VW, vb = net.unflatten(v)
    mask_of = {} if cache.masks is None else cache.masks.masks
    Ra = None  # R{input} = 0
    for i in range(net.n_layers):
        Rz = VW[i] @ cache.inputs[i] + vb[i][:, None]
        if Ra is not None:
            Rz += net.weights[i] @ Ra
        if i < net.n_layers - 1:
            Ra = cache.derivs[i] * Rz
            if i + 1 in mask_of:
                Ra = Ra * mask_of[i + 1]
    return Rz


def gnvp(net, cache, v, spec, damping=0.0, weight_decay=0.0):
    """Damped Gauss-Newton vector product ``(B + damping I) v``.

    ``B`` is the mean over the cached batch of ``J^T L'' J`` plus
    ``weight_decay`` on the weight coordinates.
    """
    if damping < 0:
        raise ValueError("damping must be non-negative")
    spec.check(net)
    Jv = rop_forward(net, cache, v)
    out = _backprop_sum(net, cache, apply_output_hessian(cache, spec, Jv))
    out /= cache.batch_size
    if damping:
        out += damping * v
    if weight_decay:
        wm = net.weight_mask()
        out[wm] += weight_decay * v[wm]
    return out


def precon_build(grad_sq_sum, damping, xi=0.75):
    """Diagonal preconditioner ``(diag(sum_j g_j * g_j) + damping)^xi`` as a vector."""
    s = np.asarray(grad_sq_sum, dtype=np.float64)
    if np.any(s < 0) or not np.all(np.isfinite(s)):
        raise PreconditionerError("squared-gradient sums must be finite and non-negative")
    base = s + damping
    if xi == 0:
        return np.ones_like(base)
    if np.any(base <= 0):
        raise PreconditionerError(
            "preconditioner diagonal has non-positive entries; use damping > 0")
    return base ** xi


def scale_for_dropout(net, drop_probs):
    """Copy of ``net`` with the weights leaving each dropped layer scaled by
    its keep probability."""
    out = net.copy()
    for i, p in drop_probs.items():
        if p:
            out.weights[i][...] *= 1.0 - p
    out.touch()
    return out


def inference_net(net, p_hidden, p_input=0.0):
    """Mean network for one trained with input and last-hidden-layer dropout."""
    probs = {0: p_input}
    if net.n_layers > 1:
        probs[net.n_layers - 1] = p_hidden
    return scale_for_dropout(net, probs)


def sparse_init(rng, layer_sizes, transfers, fan_in_limit=15, bias_value=0.1, scale=1.0):
    """Each unit gets ``min(fan_in_limit, n_in)`` nonzero N(0, scale^2)
    incoming weights; all other weights are zero and all biases equal
    ``bias_value``."""
    net = Network(layer_sizes, transfers)
    for W, b in zip(net.weights, net.biases):
        n_out, n_in = W.shape
        k = min(int(fan_in_limit), n_in)
        for j in range(n_out):
            idx = rng.permutation(n_in)[:k]
            W[j, idx] = scale * rng.standard_normal(k)
        b[...] = bias_value
    net.touch()
    return net


def predict(net, X, batch=4096):
    """Output-transfer values for rows of X, returned row-major (batch, k)."""
    X = np.asarray(X, dtype=np.float64)
    outs = [forward(net, X[s:s + batch]).output.T for s in range(0, X.shape[0], batch)]
    return np.concatenate(outs, axis=0)
