"""Ranking metrics, the evaluation protocol, sampling traces, and mobility groups."""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field

import numpy as np

from .ingest import DataError, SPLIT_NAMES, haversine_matrix, haversine_pairs

REPORT_SCHEMA_VERSION = 1
DEFAULT_KS = (2, 5, 10)
TRACE_FRACTIONS = (0.0, 1 / 3, 2 / 3, 1.0)


def rank_of_target(scores, target):
    """1-based rank of ``target`` under descending score, ties broken by
    ascending POI index (deterministic)."""
    scores = np.asarray(scores)
    if not 0 <= target < scores.shape[-1]:
        raise DataError(f"target {target} outside catalog of {scores.shape[-1]}")
    s_t = scores[target]
    higher = int((scores > s_t).sum())
    tied_before = int(((scores == s_t) & (np.arange(scores.shape[-1]) < target)).sum())
    return 1 + higher + tied_before


def ranking_from_scores(scores):
    """Full descending ranking with ascending-index tie-break."""
    scores = np.asarray(scores)
    return np.lexsort((np.arange(scores.shape[-1]), -scores))


def recall_at_k(ranked_list, target, k):
    """1 if the target appears in the first k entries, else 0."""
    ranked = np.asarray(ranked_list)
    if target not in ranked:
        raise DataError(f"target {target} absent from the ranked catalog")
    rank = int(np.nonzero(ranked == target)[0][0]) + 1
    return 1 if rank <= k else 0


def ndcg_at_k(ranked_list, target, k):
    """Single-relevant-item NDCG: 1/log2(rank+1) inside the cutoff, else 0."""
    ranked = np.asarray(ranked_list)
    if target not in ranked:
        raise DataError(f"target {target} absent from the ranked catalog")
    rank = int(np.nonzero(ranked == target)[0][0]) + 1
    return 1.0 / np.log2(rank + 1) if rank <= k else 0.0


@dataclass
class MetricsReport:
    recall: dict
    ndcg: dict
    n_samples: int
    seed: int
    config_fingerprint: str
    split: str = ""
    per_group: dict = field(default_factory=dict)

    def to_dict(self):
        d = {
            "schema_version": REPORT_SCHEMA_VERSION,
            "split": self.split,
            "n_samples": self.n_samples,
            "seed": self.seed,
            "config_fingerprint": self.config_fingerprint,
            "recall": {str(k): v for k, v in self.recall.items()},
            "ndcg": {str(k): v for k, v in self.ndcg.items()},
        }
        if self.per_group:
            d["per_group"] = self.per_group
        return d

    def save(self, path):
        with open(path, "w", encoding="utf-8") as fh:
            json.dump(self.to_dict(), fh, indent=2, sort_keys=True)
            fh.write("\n")


def metrics_from_ranks(ranks, ks=DEFAULT_KS):
    ranks = np.asarray(ranks)
    recall = {k: float((ranks <= k).mean()) for k in ks}
    ndcg = {k: float(np.where(ranks <= k, 1.0 / np.log2(ranks + 1), 0.0).mean()) for k in ks}
    return recall, ndcg


def evaluate(model, dataset, split, ks=DEFAULT_KS, groups=None):
    """Score every sample of a split against the full catalog and average."""
    samples = model.eval_samples(split)
    if not samples:
        raise DataError(f"evaluate: split {SPLIT_NAMES.get(split, split)!r} is empty")
    scores = model.eval_scores(samples, split_tag=f"eval-{split}")
    ranks = np.array([rank_of_target(scores[i], s.target_poi)
                      for i, s in enumerate(samples)])
    recall, ndcg = metrics_from_ranks(ranks, ks)
    report = MetricsReport(recall, ndcg, len(samples), model.config.seed,
                           model.config.fingerprint(),
                           split=SPLIT_NAMES.get(split, str(split)))
    if groups is not None:
        labels = np.array([groups.get(s.user_idx, "unknown") for s in samples])
        for label in sorted(set(labels)):
            mask = labels == label
            g_recall, g_ndcg = metrics_from_ranks(ranks[mask], ks)
            report.per_group[label] = {
                "n_samples": int(mask.sum()),
                "recall": {str(k): v for k, v in g_recall.items()},
                "ndcg": {str(k): v for k, v in g_ndcg.items()},
            }
    return report


# -- baselines -------------------------------------------------------------------


def popularity_scores(dataset):
    """Static score vector: train-split visit counts per POI."""
    counts = np.zeros(dataset.n_pois)
    for hist in dataset.histories:
        train_pois = hist.poi_indices[hist.splits == 0]
        np.add.at(counts, train_pois, 1.0)
    return counts


def evaluate_static_scorer(scores, samples, ks=DEFAULT_KS):
    """Metrics for a fixed score vector applied to every sample."""
    ranks = np.array([rank_of_target(scores, s.target_poi) for s in samples])
    return metrics_from_ranks(ranks, ks)


# -- sampling trace ----------------------------------------------------------------


@dataclass
class SamplingTrace:
    user_id: str
    target_poi: str
    target_latlon: tuple
    fractions: tuple
    # per fraction: array of (top_k,) POI indices, plus distance-to-target rows
    top_pois: dict
    distances_km: dict

    def mean_distance(self, fraction):
        return float(np.mean(self.distances_km[fraction]))

    def rows(self, dataset):
        for frac in self.fractions:
            for rank, (poi, dist) in enumerate(zip(self.top_pois[frac],
                                                   self.distances_km[frac]), start=1):
                lat, lon = dataset.poi_latlon[poi]
                yield {
                    "checkpoint_pct": round(frac * 100.0, 1),
                    "rank": rank,
                    "poi_id": dataset.poi_ids[poi],
                    "latitude": float(lat),
                    "longitude": float(lon),
                    "distance_to_target_km": float(dist),
                }

    def write_csv(self, dataset, path):
        fields = ["checkpoint_pct", "rank", "poi_id", "latitude", "longitude",
                  "distance_to_target_km"]
        with open(path, "w", encoding="utf-8", newline="") as fh:
            writer = csv.DictWriter(fh, fieldnames=fields, lineterminator="\n")
            writer.writeheader()
            for row in self.rows(dataset):
                writer.writerow(row)
        manifest = {
            "schema_version": REPORT_SCHEMA_VERSION,
            "user_id": self.user_id,
            "target_poi": self.target_poi,
            "fractions": list(self.fractions),
            "top_k": len(self.top_pois[self.fractions[0]]),
        }
        with open(str(path) + ".json", "w", encoding="utf-8") as fh:
            json.dump(manifest, fh, indent=2, sort_keys=True)
            fh.write("\n")


def trace_sample_for_user(model, dataset, user_id):
    """The user's first test-split visit (valid as fallback) as a trace target."""
    from .model import build_samples

    if user_id not in dataset.user_ids:
        raise DataError(f"unknown user {user_id!r}")
    user_idx = dataset.user_ids.index(user_id)
    for split in (2, 1):
        for s in build_samples(dataset, model.config, split):
            if s.user_idx == user_idx:
                return s
    raise DataError(f"user {user_id!r} has no valid/test visit with history")


def sampling_trace(model, dataset, sample, top_k=100, fractions=TRACE_FRACTIONS):
    """Rank POIs by the geographic term at sampler checkpoints.

    At each checkpoint the catalog is ordered by inner product with the
    current preference state; the top ``top_k`` (capped by the catalog size)
    are recorded with their distance to the target POI.
    """
    if not model.uses_geo:
        raise DataError("sampling_trace needs the geographic pathway; "
                        "this model was trained without it")
    params = model._detached_params()
    e_geo = model.geo_embeddings(params)
    xs, x_stack = model.encode_users([sample], params)
    vhat = model.prototypes([sample], xs, e_geo, params)
    result = model.sample_preferences([sample], x_stack, vhat, params, "trace", 0,
                                      checkpoints=fractions)
    _, trace = result
    if trace is None:  # sampling ablated away: every checkpoint is the prototype
        trace = {f: vhat.data.copy() for f in fractions}
    k = min(top_k, dataset.n_pois)
    target_ll = dataset.poi_latlon[sample.target_poi]
    top_pois, distances = {}, {}
    for frac in fractions:
        state = trace[frac][0]
        scores = e_geo.data @ state
        order = np.lexsort((np.arange(dataset.n_pois), -scores))[:k]
        top_pois[frac] = order
        distances[frac] = haversine_matrix(dataset.poi_latlon[order],
                                           target_ll[None, :])[:, 0]
    return SamplingTrace(dataset.user_ids[sample.user_idx],
                         dataset.poi_ids[sample.target_poi],
                         (float(target_ll[0]), float(target_ll[1])),
                         tuple(fractions), top_pois, distances)


# -- mobility groups ----------------------------------------------------------------


def mobility_group_labels(boundaries):
    labels = [f"<{boundaries[0]}km"]
    for lo, hi in zip(boundaries[:-1], boundaries[1:]):
        labels.append(f"{lo}-{hi}km")
    labels.append(f">={boundaries[-1]}km")
    return labels


def group_users_by_mobility(dataset, boundaries=(5.0, 10.0, 15.0)):
    """Bucket users by mean successive-visit distance (left-closed intervals).

    Single-visit users have no successive pair and land in a "singleton"
    bucket.  Returns {user_idx: label}.
    """
    boundaries = sorted(boundaries)
    labels = mobility_group_labels(boundaries)
    groups = {}
    for user_idx, hist in enumerate(dataset.histories):
        if len(hist) < 2:
            groups[user_idx] = "singleton"
            continue
        pts = dataset.poi_latlon[hist.poi_indices]
        mean_d = float(haversine_pairs(pts[:-1], pts[1:]).mean())
        slot = int(np.searchsorted(np.asarray(boundaries), mean_d, side="right"))
        groups[user_idx] = labels[slot]
    return groups
