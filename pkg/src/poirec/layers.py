"""Small shared building blocks for the encoders and the score network."""

from __future__ import annotations

import numpy as np

from . import tensor as T
from .tensor import Tensor


def init_normal(rng, shape, std):
    return Tensor(rng.normal(0.0, std, size=shape), requires_grad=True)


def ffn_params(rng, d_in, d_hidden, d_out):
    """One hidden layer with a smooth nonlinearity and an output projection."""
    return {
        "w1": init_normal(rng, (d_in, d_hidden), 1.0 / np.sqrt(d_in)),
        "b1": Tensor(np.zeros(d_hidden), requires_grad=True),
        "w2": init_normal(rng, (d_hidden, d_out), 1.0 / np.sqrt(d_hidden)),
        "b2": Tensor(np.zeros(d_out), requires_grad=True),
    }


def ffn(x, params, prefix, dropout_rate=0.0, drop_rng=None):
    """Apply the feed-forward block row-wise to an (n, d_in) tensor."""
    h = T.gelu(T.broadcast_add(T.matmul(x, params[f"{prefix}.w1"]), params[f"{prefix}.b1"]))
    if drop_rng is not None and dropout_rate > 0.0:
        h = T.dropout(h, dropout_rate, drop_rng)
    return T.broadcast_add(T.matmul(h, params[f"{prefix}.w2"]), params[f"{prefix}.b2"])
