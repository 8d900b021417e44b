"""Interval-aware attention encoder over per-user transition graphs.

Message passing collects each node's incoming and outgoing neighbors with
edge-wise attention logits built from node affinity plus spatial/temporal
interval embeddings; a single softmax per node spans all of its incident
logits.  A self-attention readout over the updated node representations,
averaged over nodes, yields the user encoding.
"""

from __future__ import annotations

import numpy as np

from . import tensor as T
from .layers import ffn, ffn_params, init_normal
from .tensor import Tensor

VARIANTS = ("full", "disen-stub", "gcn", "att", "mean")


def init_seq_params(rng, d, spatial_bins, temporal_bins, n_layers):
    std = 1.0 / np.sqrt(d)
    params = {
        "seq.spatial_table": init_normal(rng, (spatial_bins, d), std),
        "seq.temporal_table": init_normal(rng, (temporal_bins, d), std),
        "seq.read.wq": init_normal(rng, (d, d), std),
        "seq.read.wk": init_normal(rng, (d, d), std),
        "seq.read.wv": init_normal(rng, (d, d), std),
    }
    for k in range(n_layers):
        params[f"seq.layer{k}.phi_in"] = init_normal(rng, (d,), std)
        params[f"seq.layer{k}.phi_out"] = init_normal(rng, (d,), std)
    for name, p in ffn_params(rng, d, d, d).items():
        params[f"seq.read.ffn.{name}"] = p
    return params


def edge_interval_indices(graph, intervals):
    """Interval-matrix entries for each edge, at its creating visit positions."""
    s_idx = intervals.spatial[graph.pos_from, graph.pos_to]
    t_idx = intervals.temporal[graph.pos_from, graph.pos_to]
    return s_idx.astype(np.int64), t_idx.astype(np.int64)


def embed_intervals(params, s_idx, t_idx):
    """Look up per-edge interval embeddings; indices must be pre-clipped."""
    for idx, table in ((s_idx, "seq.spatial_table"), (t_idx, "seq.temporal_table")):
        bins = params[table].shape[0]
        if len(idx) and (idx.min() < 0 or idx.max() >= bins):
            raise IndexError(f"interval index outside [0, {bins}) for {table}; "
                             "upstream clipping is broken")
    return (T.row_gather(params["seq.spatial_table"], s_idx),
            T.row_gather(params["seq.temporal_table"], t_idx))


def message_layer(node_reps, edge_src, edge_dst, interval_sum, phi_in, phi_out):
    """One round of bidirectional attention message passing with residual update.

    ``interval_sum`` is the (n_edges, d) sum of spatial and temporal interval
    embeddings, or None for the interval-agnostic variant.  Isolated nodes
    receive a zero message and keep their representation.
    """
    n = node_reps.shape[0]
    if len(edge_src) == 0:
        return node_reps
    h_src = T.row_gather(node_reps, edge_src)
    h_dst = T.row_gather(node_reps, edge_dst)
    pair = T.multiply(h_src, h_dst)
    if interval_sum is not None:
        pair = T.add(pair, interval_sum)
    in_logits = T.matmul(pair, phi_in)    # received by edge_dst
    out_logits = T.matmul(pair, phi_out)  # received by edge_src
    logits = T.concat([in_logits, out_logits], axis=0)
    owners = np.concatenate([edge_dst, edge_src])
    weights = T.segment_softmax(logits, owners, n)
    values = T.concat([h_src, h_dst], axis=0)  # in-messages carry the source rep
    messages = T.segment_sum(T.scale_rows(values, weights), owners, n)
    return T.add(node_reps, messages)


def readout_user(node_reps, params, dropout_rate=0.0, drop_rng=None):
    """Self-attention readout; the mean over output rows is the user encoding."""
    d = node_reps.shape[1]
    q = T.matmul(node_reps, params["seq.read.wq"])
    k = T.matmul(node_reps, params["seq.read.wk"])
    v = T.matmul(node_reps, params["seq.read.wv"])
    attn = T.softmax_lastdim(T.scale(T.matmul(q, T.transpose(k)), 1.0 / np.sqrt(d)))
    ctx = T.matmul(attn, v)
    if drop_rng is not None and dropout_rate > 0.0:
        ctx = T.dropout(ctx, dropout_rate, drop_rng)
    out = ffn(T.add(v, ctx), params, "seq.read.ffn", dropout_rate, drop_rng)
    return T.mean_rows(out)


def encode_user(graph, s_idx, t_idx, poi_emb, params, n_layers,
                variant="full", dropout_rate=0.0, drop_rng=None):
    """Encode one transition graph into a d-vector.

    Variants: "full" uses interval-aware attention message passing, "gcn"
    drops the interval terms from the logits, "att" skips message passing
    and applies the readout to the raw node embeddings, "mean" averages the
    node embeddings directly.
    """
    if variant not in VARIANTS:
        raise ValueError(f"unknown sequence-encoder variant {variant!r}")
    if variant == "disen-stub":
        raise NotImplementedError(
            "the disentangled-encoder variant is a placeholder; no such encoder ships here")
    h = T.row_gather(poi_emb, graph.node_pois)
    if variant == "mean":
        return T.mean_rows(h)
    if variant != "att":
        if variant == "full" and graph.n_edges:
            s_emb, t_emb = embed_intervals(params, s_idx, t_idx)
            interval_sum = T.add(s_emb, t_emb)
        else:
            interval_sum = None
        for layer in range(n_layers):
            h = message_layer(h, graph.edge_src, graph.edge_dst, interval_sum,
                              params[f"seq.layer{layer}.phi_in"],
                              params[f"seq.layer{layer}.phi_out"])
    return readout_user(h, params, dropout_rate, drop_rng)
