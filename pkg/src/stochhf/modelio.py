"""Flat binary model files.

Layout (all little-endian)::

    8 bytes   magic  b"SHFNET01"
    uint32    number of layer sizes  (L + 1)
    uint32    layer sizes n_0 .. n_L
    float64   parameters in the canonical flat order (see ``stochhf.net``)

Transfer functions are not stored; they live in the resolved run config.
"""

import struct

import numpy as np

from .net import Network

MAGIC = b"SHFNET01"


class ModelFormatError(ValueError):
    pass


def save_model(path, net):
    with open(path, "wb") as f:
        f.write(MAGIC)
        f.write(struct.pack("<I", len(net.layer_sizes)))
        f.write(struct.pack(f"<{len(net.layer_sizes)}I", *net.layer_sizes))
        f.write(net.params.astype("<f8").tobytes())


def load_model(path, transfers):
    with open(path, "rb") as f:
        raw = f.read()
    if raw[:8] != MAGIC:
        raise ModelFormatError(f"{path}: not a model file")
    try:
        (count,) = struct.unpack_from("<I", raw, 8)
        sizes = struct.unpack_from(f"<{count}I", raw, 12)
    except struct.error as exc:
        raise ModelFormatError(f"{path}: truncated header") from exc
    offset = 12 + 4 * count
    params = np.frombuffer(raw[offset:], dtype="<f8").astype(np.float64)
    net = Network(sizes, transfers)
    if params.shape[0] != net.n_params:
        raise ModelFormatError(f"{path}: expected {net.n_params} parameters, found {params.shape[0]}")
    net.set_params(params)
    return net
