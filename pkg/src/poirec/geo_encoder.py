"""Distance-weighted graph convolution over the POI proximity graph, plus the
target-attention prototype that seeds the preference sampler."""

from __future__ import annotations

import numpy as np

from . import tensor as T
from .layers import ffn, ffn_params, init_normal
from .tensor import Tensor


def init_geo_params(rng, d, n_layers):
    std = 1.0 / np.sqrt(d)
    params = {}
    for k in range(n_layers):
        params[f"geo.conv{k}"] = init_normal(rng, (d, d), std)
    for w in ("wq", "wk", "wv"):
        params[f"geo.proto.{w}"] = init_normal(rng, (d, d), std)
    for name, p in ffn_params(rng, d, d, d).items():
        params[f"geo.proto.ffn.{name}"] = p
    return params


def gcn_layer(norm_adj, h, weight):
    """One convolution: degree-normalized weighted aggregation, no self term."""
    return T.spmm(norm_adj, T.matmul(h, weight))


def geo_embeddings(norm_adj, poi_emb, params, n_layers):
    """Mean of the layer outputs h^(0)..h^(L), starting from the base embeddings."""
    h = poi_emb
    total = poi_emb
    for k in range(n_layers):
        h = gcn_layer(norm_adj, h, params[f"geo.conv{k}"])
        total = T.add(total, h)
    return T.scale(total, 1.0 / (n_layers + 1))


def init_prototype(x_u, hist_geo, params, dropout_rate=0.0, drop_rng=None):
    """Target attention with the user encoding as the single query.

    ``hist_geo`` holds the geo embeddings of the visited POIs (duplicates
    kept).  The attended value, doubled through the residual, passes through
    the feed-forward block; returns a d-vector.
    """
    if hist_geo.shape[0] == 0:
        raise ValueError("init_prototype: empty visit history")
    d = hist_geo.shape[1]
    q = T.matmul(T.reshape(x_u, (1, d)), params["geo.proto.wq"])
    k = T.matmul(hist_geo, params["geo.proto.wk"])
    v = T.matmul(hist_geo, params["geo.proto.wv"])
    weights = T.softmax_lastdim(T.scale(T.matmul(q, T.transpose(k)), 1.0 / np.sqrt(d)))
    attended = T.matmul(weights, v)
    out = ffn(T.add(attended, attended), params, "geo.proto.ffn", dropout_rate, drop_rng)
    return T.reshape(out, (d,))


def prototype_weights(x_u, hist_geo, params):
    """Attention distribution over the visited POIs (diagnostics/tests)."""
    d = hist_geo.shape[1]
    q = T.matmul(T.reshape(x_u, (1, d)), params["geo.proto.wq"])
    k = T.matmul(hist_geo, params["geo.proto.wk"])
    w = T.softmax_lastdim(T.scale(T.matmul(q, T.transpose(k)), 1.0 / np.sqrt(d)))
    return T.reshape(w, (hist_geo.shape[0],))
