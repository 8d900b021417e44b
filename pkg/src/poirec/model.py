"""The full recommender: parameter assembly, prediction, losses, training loop,
ablation wiring, and checkpoint persistence."""

from __future__ import annotations

import json
import logging

import numpy as np

from . import diffusion as df
from . import geo_encoder as ge
from . import seq_encoder as se
from . import tensor as T
from .config import TrainConfig
from .diffusion import NoiseSchedule, SamplerConfig
from .ingest import (DataError, build_geo_graph, build_transition_graph,
                     interval_matrices, truncate_sequence, TRAIN, VALID, TEST)
from .layers import init_normal
from .optim import AdamState, adam_step, zero_grads
from .seeding import derived_rng
from .tensor import NonFiniteError, Tensor

log = logging.getLogger(__name__)

CHECKPOINT_VERSION = 1


def apply_ablation(config):
    """Validate the ablation axes; contradictory combinations are rejected.

    Returns the config unchanged.  At most one of the removal flags may be
    active, and removing the graph encoders pins the sequence-encoder variant.
    """
    flags = [name for name in ("wo_graph", "wo_location", "wo_sampling", "wo_condition")
             if getattr(config, name)]
    if len(flags) > 1:
        raise ValueError(f"contradictory ablation flags: {flags}")
    if config.wo_graph and config.seqenc_variant != "full":
        raise ValueError("wo_graph replaces the sequence encoder with a mean; "
                         "leave seqenc_variant at 'full'")
    return config


class Sample:
    """One next-visit prediction instance (cached per dataset/config)."""

    __slots__ = ("user_idx", "target_pos", "target_poi", "graph",
                 "s_idx", "t_idx", "hist_pois")

    def __init__(self, user_idx, target_pos, target_poi, graph, s_idx, t_idx, hist_pois):
        self.user_idx = user_idx
        self.target_pos = target_pos
        self.target_poi = target_poi
        self.graph = graph
        self.s_idx = s_idx
        self.t_idx = t_idx
        self.hist_pois = hist_pois


def build_samples(dataset, config, split):
    """Sliding next-item samples: each visit in ``split`` with at least one
    predecessor becomes a target, with its truncated strict prefix as history."""
    samples = []
    for user_idx, hist in enumerate(dataset.histories):
        positions = np.nonzero(hist.splits == split)[0]
        for pos in positions:
            if pos < 1:
                continue
            pois, ts = truncate_sequence(hist.poi_indices[:pos], hist.timestamps[:pos],
                                         config.max_seq_len)
            graph = build_transition_graph(pois)
            ivals = interval_matrices(dataset.poi_latlon[pois], ts,
                                      config.spatial_bins, config.temporal_bins)
            s_idx, t_idx = se.edge_interval_indices(graph, ivals)
            samples.append(Sample(user_idx, int(pos), int(hist.poi_indices[pos]),
                                  graph, s_idx, t_idx, pois))
    return samples


# -- prediction head and losses (module-level contract surface) ---------------------


def predict_logits(x_u, v_0, poi_emb, geo_emb, seq_weight):
    """Mixed similarity logits over the full catalog for one user."""
    seq_term = T.matmul(poi_emb, x_u)
    if geo_emb is None or v_0 is None or seq_weight >= 1.0:
        return T.scale(seq_term, seq_weight) if seq_weight < 1.0 else seq_term
    geo_term = T.matmul(geo_emb, v_0)
    return T.add(T.scale(seq_term, seq_weight), T.scale(geo_term, 1.0 - seq_weight))


def predict_scores(x_u, v_0, poi_emb, geo_emb, seq_weight):
    """Full-catalog probability vector (softmax over the mixed logits)."""
    return T.softmax_lastdim(predict_logits(x_u, v_0, poi_emb, geo_emb, seq_weight))


def ce_loss(logits, targets, l2_reg, params):
    """Mean negative log-likelihood (log-sum-exp form) plus L2 over parameters."""
    if isinstance(targets, (int, np.integer)):
        targets = [int(targets)]
        logits = T.reshape(logits, (1, logits.shape[-1]))
    loss = T.cross_entropy_rows(logits, targets)
    if l2_reg > 0.0 and params:
        reg = None
        for name in sorted(params):
            term = T.l2_norm_squared(params[name])
            reg = term if reg is None else T.add(reg, term)
        loss = T.add(loss, T.scale(reg, l2_reg))
    return loss


def total_loss(ce, fisher, weight):
    """Cross-entropy plus the weighted score-matching term."""
    if fisher is None or weight == 0.0:
        return ce
    return T.add(ce, T.scale(fisher, weight))


class _PreparedNoise:
    """Feeds pre-drawn per-trajectory noise to the sampler, step by step."""

    def __init__(self, stacked):
        self._stacked = stacked
        self._i = 0

    def standard_normal(self, shape):
        out = self._stacked[self._i]
        self._i += 1
        assert out.shape == tuple(shape)
        return out


class Model:
    """Trainable model bound to a dataset; parameters live in a flat dict."""

    def __init__(self, dataset, config, params=None):
        apply_ablation(config.validate())
        self.dataset = dataset
        self.config = config
        self.schedule = NoiseSchedule(config.beta_min, config.beta_max, config.horizon)
        self.sampler_cfg = SamplerConfig(config.step_size, config.stochastic_sampler,
                                         config.backprop_through_sampler,
                                         config.noise_last_step)
        self.sampler_cfg.n_steps(config.horizon)  # validate divisibility early
        self.uses_geo = not config.wo_location
        self.uses_sampler = self.uses_geo and not config.wo_sampling
        self.uses_geo_conv = self.uses_geo and not config.wo_graph and config.geo_layers > 0
        self.seq_variant = "mean" if config.wo_graph else config.seqenc_variant
        self.norm_adj = None
        if self.uses_geo_conv:
            self.geo_graph = build_geo_graph(dataset.poi_latlon, config.threshold_km)
            self.norm_adj = self.geo_graph.normalized_adjacency()
        self.params = params if params is not None else self._init_params()
        self.adam = AdamState(self.params, learning_rate=config.learning_rate)
        self.epoch = 0
        self.best_metric = None
        self.best_epoch = None
        self.training_log = []
        self._eval_sample_cache = {}

    def _init_params(self):
        cfg = self.config
        d = cfg.embed_dim
        rng = derived_rng(cfg.seed, "init")
        params = {"poi_emb": init_normal(rng, (self.dataset.n_pois, d), 1.0 / np.sqrt(d))}
        if self.seq_variant in ("full", "gcn", "att"):
            seq = se.init_seq_params(rng, d, cfg.spatial_bins, cfg.temporal_bins,
                                     cfg.seq_layers)
            if self.seq_variant != "full":
                seq.pop("seq.spatial_table")
                seq.pop("seq.temporal_table")
            if self.seq_variant == "att":
                for k in range(cfg.seq_layers):
                    seq.pop(f"seq.layer{k}.phi_in")
                    seq.pop(f"seq.layer{k}.phi_out")
            params.update(seq)
        if self.uses_geo:
            geo = ge.init_geo_params(rng, d, cfg.geo_layers if self.uses_geo_conv else 0)
            params.update(geo)
        if self.uses_sampler:
            params.update(df.init_score_params(rng, d, cfg.score_hidden,
                                               conditioned=not cfg.wo_condition,
                                               time_feature=cfg.score_time_feature))
        return params

    # -- forward pieces ---------------------------------------------------------

    def geo_embeddings(self, params=None):
        """Location embeddings, recomputed from the current POI embeddings."""
        if not self.uses_geo:
            return None
        params = params or self.params
        if not self.uses_geo_conv:
            return params["poi_emb"]
        return ge.geo_embeddings(self.norm_adj, params["poi_emb"], params,
                                 self.config.geo_layers)

    def encode_users(self, samples, params, dropout_rate=0.0, drop_rng=None):
        """Per-sample user encodings; returns the list and the (B, d) stack."""
        xs = []
        for s in samples:
            x = se.encode_user(s.graph, s.s_idx, s.t_idx, params["poi_emb"], params,
                               self.config.seq_layers, self.seq_variant,
                               dropout_rate, drop_rng)
            xs.append(x)
        stacked = T.concat([T.reshape(x, (1, self.config.embed_dim)) for x in xs], axis=0)
        return xs, stacked

    def prototypes(self, samples, xs, e_geo, params, dropout_rate=0.0, drop_rng=None):
        rows = []
        for s, x in zip(samples, xs):
            hist_geo = T.row_gather(e_geo, s.hist_pois)
            v = ge.init_prototype(x, hist_geo, params, dropout_rate, drop_rng)
            rows.append(T.reshape(v, (1, self.config.embed_dim)))
        return T.concat(rows, axis=0)

    def _trajectory_noise(self, samples, tag, epoch):
        cfg = self.sampler_cfg
        n_steps = cfg.n_steps(self.config.horizon)
        if not cfg.stochastic:
            return np.random.default_rng(0)  # never consulted
        d = self.config.embed_dim
        draws = np.empty((n_steps, len(samples), d))
        for col, s in enumerate(samples):
            rng = derived_rng(self.config.seed, tag, epoch, s.user_idx, s.target_pos)
            draws[:, col, :] = rng.standard_normal((n_steps, d))
        return _PreparedNoise(draws)

    def sample_preferences(self, samples, x_stack, prototypes, params, tag, epoch,
                           dropout_rate=0.0, drop_rng=None, checkpoints=None):
        """Run the reverse sampler for a batch; falls back to the prototype
        when sampling is ablated away."""
        if not self.uses_sampler:
            return (prototypes, None) if checkpoints is not None else prototypes
        cond = None if self.config.wo_condition else x_stack

        def score_fn(v, t):
            return df.score_net(v, cond, params,
                                t=t if self.config.score_time_feature else None,
                                dropout_rate=dropout_rate, drop_rng=drop_rng)

        noise = self._trajectory_noise(samples, tag, epoch)
        return df.reverse_sample(prototypes, score_fn, self.schedule, self.sampler_cfg,
                                 noise, checkpoints=checkpoints)

    def batch_logits(self, x_stack, v_stack, e_geo, params):
        cfg = self.config
        seq_logits = T.matmul(x_stack, T.transpose(params["poi_emb"]))
        if not self.uses_geo:
            return seq_logits
        geo_logits = T.matmul(v_stack, T.transpose(e_geo))
        return T.add(T.scale(seq_logits, cfg.seq_weight),
                     T.scale(geo_logits, 1.0 - cfg.seq_weight))

    def forward_batch(self, samples, params, train_mode, epoch, batch_idx,
                      noise_tag="traj"):
        """Losses for one batch: (total, ce, fisher) as tape tensors."""
        cfg = self.config
        drop_rng = None
        if train_mode and cfg.dropout > 0.0:
            drop_rng = derived_rng(cfg.seed, "dropout", epoch, batch_idx)
        rate = cfg.dropout if train_mode else 0.0
        e_geo = self.geo_embeddings(params)
        xs, x_stack = self.encode_users(samples, params, rate, drop_rng)
        v0 = None
        if self.uses_geo:
            vhat = self.prototypes(samples, xs, e_geo, params, rate, drop_rng)
            v0 = self.sample_preferences(samples, x_stack, vhat, params,
                                         noise_tag, epoch, rate, drop_rng)
        logits = self.batch_logits(x_stack, v0, e_geo, params)
        targets = [s.target_poi for s in samples]
        ce = ce_loss(logits, targets, cfg.l2_reg, params)
        fisher = None
        if self.uses_sampler and cfg.score_loss_weight > 0.0:
            frng = derived_rng(cfg.seed, "fisher", epoch, batch_idx)
            # the denoising target and conditioning enter as data here: the
            # score-matching term trains the score network, while encoders and
            # embeddings receive their gradient through the prediction loss
            # (letting this term pull on the embeddings collapses them)
            target_geo = T.row_gather(e_geo, targets).detach()
            cond = None if cfg.wo_condition else x_stack.detach()
            fisher = df.fisher_loss(target_geo, cond, params,
                                    self.schedule, frng, t_floor=cfg.t_floor,
                                    time_feature=cfg.score_time_feature,
                                    dropout_rate=rate, drop_rng=drop_rng)
        return total_loss(ce, fisher, cfg.score_loss_weight), ce, fisher

    # -- evaluation-mode scoring --------------------------------------------------

    def _detached_params(self):
        return {k: Tensor(v.data) for k, v in self.params.items()}

    def eval_scores(self, samples, split_tag="eval", batch_size=64):
        """Full-catalog logits for evaluation samples; no tape, no dropout."""
        params = self._detached_params()
        e_geo = self.geo_embeddings(params)
        out = np.empty((len(samples), self.dataset.n_pois))
        for start in range(0, len(samples), batch_size):
            chunk = samples[start:start + batch_size]
            xs, x_stack = self.encode_users(chunk, params)
            v0 = None
            if self.uses_geo:
                vhat = self.prototypes(chunk, xs, e_geo, params)
                v0 = self.sample_preferences(chunk, x_stack, vhat, params,
                                             split_tag, 0)
            out[start:start + len(chunk)] = self.batch_logits(
                x_stack, v0, e_geo, params).data
        return out

    def eval_samples(self, split):
        if split not in self._eval_sample_cache:
            self._eval_sample_cache[split] = build_samples(self.dataset, self.config, split)
        return self._eval_sample_cache[split]

    # -- training -------------------------------------------------------------------

    def fit(self, progress=None):
        """Train with early stopping on validation Recall@10; keeps the best
        snapshot and restores it before returning the training log."""
        from .metrics import evaluate  # local import; metrics stays model-agnostic

        cfg = self.config
        train = build_samples(self.dataset, cfg, TRAIN)
        if not train:
            raise DataError("fit: no training samples")
        have_valid = bool(self.eval_samples(VALID))
        best_snapshot = None
        for epoch in range(1, cfg.max_epochs + 1):
            self.epoch = epoch
            order = derived_rng(cfg.seed, "shuffle", epoch).permutation(len(train))
            sums = {"total": 0.0, "ce": 0.0, "fisher": 0.0}
            for batch_idx, start in enumerate(range(0, len(order), cfg.batch_size)):
                batch = [train[i] for i in order[start:start + cfg.batch_size]]
                zero_grads(self.params)
                try:
                    total, ce, fisher = self.forward_batch(batch, self.params, True,
                                                           epoch, batch_idx)
                    if not np.isfinite(total.data):
                        raise NonFiniteError("non-finite loss")
                    T.backward(total)
                    adam_step(self.params, self.adam)
                except NonFiniteError as e:
                    users = sorted({self.dataset.user_ids[s.user_idx] for s in batch})
                    raise NonFiniteError(
                        f"aborting epoch {epoch}, batch {batch_idx} "
                        f"(users {users}): {e}") from e
                sums["total"] += total.item() * len(batch)
                sums["ce"] += ce.item() * len(batch)
                sums["fisher"] += (fisher.item() if fisher is not None else 0.0) * len(batch)
            entry = {"epoch": epoch,
                     "train_total": sums["total"] / len(train),
                     "train_ce": sums["ce"] / len(train),
                     "train_fisher": sums["fisher"] / len(train)}
            if have_valid:
                report = evaluate(self, self.dataset, VALID)
                metric = report.recall[10]
                entry["valid_recall10"] = metric
                if self.best_metric is None or metric > self.best_metric:
                    self.best_metric = metric
                    self.best_epoch = epoch
                    best_snapshot = {k: v.data.copy() for k, v in self.params.items()}
                elif epoch - self.best_epoch >= cfg.patience:
                    self.training_log.append(entry)
                    log.info("early stop at epoch %d (best %.4f at epoch %d)",
                             epoch, self.best_metric, self.best_epoch)
                    break
            self.training_log.append(entry)
            if progress is not None:
                progress(entry)
        if best_snapshot is not None:
            for k, v in best_snapshot.items():
                self.params[k].data[...] = v
        return self.training_log


# -- checkpointing ------------------------------------------------------------------


def _poi_fingerprint(dataset):
    import hashlib

    return hashlib.sha256("\n".join(dataset.poi_ids).encode("utf-8")).hexdigest()[:16]


def save_checkpoint(model, path):
    """Versioned container: a JSON manifest plus named float64 parameter blobs."""
    manifest = {
        "format_version": CHECKPOINT_VERSION,
        "config": model.config.to_dict(),
        "epoch": model.epoch,
        "best_epoch": model.best_epoch,
        "best_metric": model.best_metric,
        "n_pois": model.dataset.n_pois,
        "n_users": model.dataset.n_users,
        "embed_dim": model.config.embed_dim,
        "poi_fingerprint": _poi_fingerprint(model.dataset),
    }
    blobs = {"manifest": np.frombuffer(json.dumps(manifest, sort_keys=True).encode(), dtype=np.uint8)}
    for name, p in model.params.items():
        blobs[f"param:{name}"] = p.data
    adam = model.adam.state_dict()
    blobs["adam:step"] = np.array(adam["step_count"], dtype=np.int64)
    for name, arr in adam["first_moment"].items():
        blobs[f"adam_m:{name}"] = arr
    for name, arr in adam["second_moment"].items():
        blobs[f"adam_v:{name}"] = arr
    with open(path, "wb") as fh:
        np.savez(fh, **blobs)


def load_checkpoint(path, dataset):
    """Rebuild a Model from a checkpoint; refuses mismatched catalog or width."""
    with np.load(path) as archive:
        manifest = json.loads(bytes(archive["manifest"]).decode("utf-8"))
        if manifest["format_version"] != CHECKPOINT_VERSION:
            raise DataError(f"unsupported checkpoint version {manifest['format_version']}")
        if manifest["n_pois"] != dataset.n_pois:
            raise DataError(f"checkpoint has {manifest['n_pois']} POIs, "
                            f"dataset has {dataset.n_pois}")
        config = TrainConfig.from_dict(manifest["config"])
        if manifest["embed_dim"] != config.embed_dim:
            raise DataError("checkpoint manifest disagrees with its own config on embed_dim")
        if manifest["poi_fingerprint"] != _poi_fingerprint(dataset):
            log.warning("checkpoint POI fingerprint differs from the dataset's; "
                        "indices may not line up")
        model = Model(dataset, config)
        for name in model.params:
            key = f"param:{name}"
            if key not in archive:
                raise DataError(f"checkpoint is missing parameter {name!r}")
            if archive[key].shape != model.params[name].data.shape:
                raise DataError(f"checkpoint parameter {name!r} has shape "
                                f"{archive[key].shape}, expected {model.params[name].data.shape}")
            model.params[name].data[...] = archive[key]
        model.adam.load_state_dict({
            "step_count": int(archive["adam:step"]),
            "first_moment": {n: archive[f"adam_m:{n}"] for n in model.params},
            "second_moment": {n: archive[f"adam_v:{n}"] for n in model.params},
        })
        model.epoch = manifest["epoch"]
        model.best_epoch = manifest["best_epoch"]
        model.best_metric = manifest["best_metric"]
    return model
