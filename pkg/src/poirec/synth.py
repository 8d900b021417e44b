"""Synthetic check-in corpus with planted geographic clusters.

The map holds well-separated POI clusters (far beyond the proximity-graph
threshold, so the geo graph splits into per-cluster components).  Two user
populations mix:

* commuters stay in a home cluster, cycling through personal favorites with
  occasional visits to the home frontier;
* explorers walk clusters in one shared rotation (cluster k is followed by
  k+1), spending a fixed stay in each.  Inside a stay they follow a shared
  "core tour" order, and the gaps between visits grow in a fixed crescendo,
  so a fully escalated gap pattern means the stay is over and the next visit
  opens a cluster the user has never been to.

Each cluster's POIs split into a small, heavily revisited core (tours and
favorites draw from it) and a sparse frontier visited only through
exploration: the arrival visit of every stay and one mid-stay visit are
random frontier picks.  Frontier POIs therefore carry too little traffic for
co-visitation alone to place them, and ranking them requires the geographic
pathway.  The planted signal: an explorer's next cluster is implied by visit
order and gap structure, not by where the user has been; their final visit
lands on the frontier of a cluster absent from their own history, where a
sampled, user-conditioned spatial preference can help and a static
aggregate of visited locations cannot.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .ingest import CheckinRecord

KM_PER_DEG = 6371.0 * math.pi / 180.0


@dataclass
class SynthConfig:
    n_users: int = 200
    n_pois: int = 300
    n_clusters: int = 5
    commuter_fraction: float = 0.3
    visits_per_user: int = 16
    stay_length: int = 5
    frontier_per_cluster: int = 25   # sparsely visited POIs, reachable only via geography
    frontier_stay_slots: tuple = (0, 2)  # which visits of a stay explore the frontier
    commuter_frontier_prob: float = 0.1
    cluster_radius_km: float = 0.35
    ring_radius_km: float = 40.0
    n_favorites: int = 6
    favorite_stick_prob: float = 0.85
    tour_follow_prob: float = 0.92
    crescendo_hours: tuple = (2.0, 4.0, 8.0, 16.0)
    commuter_gap_hours: float = 6.0
    hop_gap_hours: float = 120.0
    base_lat: float = 40.0
    base_lon: float = -74.0
    seed: int = 0


def _cluster_centers(cfg):
    centers = []
    for k in range(cfg.n_clusters):
        angle = 2.0 * math.pi * k / cfg.n_clusters
        dlat = cfg.ring_radius_km * math.sin(angle) / KM_PER_DEG
        dlon = cfg.ring_radius_km * math.cos(angle) / (
            KM_PER_DEG * math.cos(math.radians(cfg.base_lat)))
        centers.append((cfg.base_lat + dlat, cfg.base_lon + dlon))
    return centers


def _place_pois(cfg, rng):
    centers = _cluster_centers(cfg)
    per = cfg.n_pois // cfg.n_clusters
    latlon = np.empty((cfg.n_pois, 2))
    cluster_of = np.empty(cfg.n_pois, dtype=np.int64)
    for k, (clat, clon) in enumerate(centers):
        r = cfg.cluster_radius_km * np.sqrt(rng.random(per))
        theta = rng.uniform(0, 2 * math.pi, per)
        rows = slice(k * per, (k + 1) * per)
        latlon[rows, 0] = clat + r * np.sin(theta) / KM_PER_DEG
        latlon[rows, 1] = clon + r * np.cos(theta) / (
            KM_PER_DEG * math.cos(math.radians(clat)))
        cluster_of[rows] = k
    return latlon, cluster_of


def _jitter_gap(rng, hours):
    return max(600, int(rng.normal(hours * 3600.0, hours * 360.0)))


def generate_checkins(cfg=None, **overrides):
    """Build the synthetic corpus; returns (records, poi_latlon, cluster_of)."""
    if cfg is None:
        cfg = SynthConfig(**overrides)
    if cfg.stay_length != len(cfg.crescendo_hours) + 1:
        raise ValueError("crescendo_hours must hold stay_length - 1 gaps")
    rng = np.random.default_rng(cfg.seed)
    latlon, cluster_of = _place_pois(cfg, rng)
    per = cfg.n_pois // cfg.n_clusters
    if cfg.frontier_per_cluster >= per:
        raise ValueError("frontier_per_cluster must leave room for core POIs")
    cluster_pois = [np.arange(k * per, (k + 1) * per) for k in range(cfg.n_clusters)]
    core, frontier = [], []
    for pois in cluster_pois:
        shuffled = rng.permutation(pois)
        frontier.append(shuffled[:cfg.frontier_per_cluster])
        core.append(shuffled[cfg.frontier_per_cluster:])
    # one shared core-tour order per cluster: successive tour entries are
    # globally frequent transitions, so core targets are learnable across users
    tours = [rng.permutation(c) for c in core]

    records = []
    n_commuters = int(round(cfg.n_users * cfg.commuter_fraction))
    for u in range(cfg.n_users):
        user_id = f"u{u:04d}"
        t = int(rng.integers(1_500_000_000, 1_500_000_000 + 7 * 86400))
        pois, gaps = [], []
        if u < n_commuters:
            home = int(rng.integers(cfg.n_clusters))
            n_favs = min(cfg.n_favorites, len(core[home]))
            favs = rng.choice(core[home], size=n_favs, replace=False)
            pos = 0
            for _ in range(cfg.visits_per_user):
                if rng.random() < cfg.commuter_frontier_prob:
                    poi = rng.choice(frontier[home])
                elif rng.random() < cfg.favorite_stick_prob:
                    poi = favs[pos % n_favs]
                    pos += 1
                else:
                    poi = rng.choice(favs)
                pois.append(int(poi))
                gaps.append(_jitter_gap(rng, cfg.commuter_gap_hours))
        else:
            start_cluster = int(rng.integers(cfg.n_clusters))
            offset = 0
            for visit in range(cfg.visits_per_user):
                episode, in_stay = divmod(visit, cfg.stay_length)
                cluster = (start_cluster + episode) % cfg.n_clusters
                if in_stay == 0:
                    offset = int(rng.integers(len(tours[cluster])))  # entry unpredictable
                if in_stay in cfg.frontier_stay_slots:
                    poi = rng.choice(frontier[cluster])
                elif rng.random() < cfg.tour_follow_prob:
                    poi = tours[cluster][(offset + in_stay) % len(tours[cluster])]
                else:
                    poi = rng.choice(tours[cluster])
                pois.append(int(poi))
                if visit == 0:
                    gaps.append(_jitter_gap(rng, cfg.commuter_gap_hours))
                elif in_stay == 0:
                    gaps.append(_jitter_gap(rng, cfg.hop_gap_hours))
                else:
                    gaps.append(_jitter_gap(rng, cfg.crescendo_hours[in_stay - 1]))
        for poi, gap in zip(pois, gaps):
            t += gap
            records.append(CheckinRecord(user_id, f"p{poi:04d}",
                                         float(latlon[poi, 0]), float(latlon[poi, 1]), t))
    records.sort(key=lambda r: (r.user_id, r.timestamp))
    return records, latlon, cluster_of
