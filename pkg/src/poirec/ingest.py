"""Check-in log ingestion: parsing, filtering, splitting, and graph construction.

The canonical interchange format is a UTF-8, LF-terminated TSV with columns
(user_id, poi_id, latitude, longitude, epoch_seconds).  Raw Gowalla and
Foursquare dumps are normalized into it by the format adapters here.
"""

from __future__ import annotations

import json
import logging
import math
import os
from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp

log = logging.getLogger(__name__)

EARTH_RADIUS_KM = 6371.0

TRAIN, VALID, TEST = 0, 1, 2
SPLIT_NAMES = {TRAIN: "train", VALID: "valid", TEST: "test"}
SPLIT_CODES = {v: k for k, v in SPLIT_NAMES.items()}

_MONTHS = {m: i + 1 for i, m in enumerate(
    ["Jan", "Feb", "Mar", "Apr", "May", "Jun", "Jul", "Aug", "Sep", "Oct", "Nov", "Dec"])}


class DataError(ValueError):
    """Raised for unusable input data (bad files, vanished datasets, ...)."""


@dataclass(frozen=True)
class CheckinRecord:
    user_id: str
    poi_id: str
    latitude: float
    longitude: float
    timestamp: int  # epoch seconds, UTC


@dataclass
class UserHistory:
    """One user's visits, chronologically sorted, with per-visit split labels."""

    poi_indices: np.ndarray  # int64 (n,)
    timestamps: np.ndarray   # int64 (n,)
    splits: np.ndarray       # int8 (n,), TRAIN/VALID/TEST

    def __len__(self):
        return len(self.poi_indices)


@dataclass
class CheckinDataset:
    user_ids: list
    poi_ids: list
    poi_latlon: np.ndarray  # (|L|, 2) degrees
    histories: list  # list[UserHistory], aligned with user_ids

    @property
    def n_users(self):
        return len(self.user_ids)

    @property
    def n_pois(self):
        return len(self.poi_ids)

    @property
    def n_visits(self):
        return sum(len(h) for h in self.histories)


@dataclass
class GeoGraph:
    """Undirected POI proximity graph; each stored edge has src < dst."""

    n_nodes: int
    src: np.ndarray
    dst: np.ndarray
    dist_km: np.ndarray
    threshold_km: float
    _norm_adj: sp.csr_matrix = field(default=None, repr=False, compare=False)

    @property
    def weights(self):
        return np.exp(-self.dist_km)

    @property
    def n_edges(self):
        return len(self.src)

    def normalized_adjacency(self):
        """Symmetric degree-normalized weighted adjacency, w_ij / sqrt(|N_i||N_j|)."""
        if self._norm_adj is None:
            rows = np.concatenate([self.src, self.dst])
            cols = np.concatenate([self.dst, self.src])
            w = np.concatenate([self.weights, self.weights])
            deg = np.bincount(rows, minlength=self.n_nodes).astype(np.float64)
            norm = np.zeros_like(deg)
            nz = deg > 0
            norm[nz] = 1.0 / np.sqrt(deg[nz])
            vals = w * norm[rows] * norm[cols]
            self._norm_adj = sp.csr_matrix((vals, (rows, cols)),
                                           shape=(self.n_nodes, self.n_nodes))
        return self._norm_adj


@dataclass
class TransitionGraph:
    """Directed graph over the distinct POIs of one visit sequence.

    Edges are deduplicated successive-visit pairs; ``pos_from``/``pos_to``
    record the sequence positions of the first visit pair that created each
    edge, which is where its interval indices are looked up.
    """

    node_pois: np.ndarray   # int64, distinct POI indices in first-visit order
    node_of_pos: np.ndarray  # int64 (n,), node index of each sequence position
    edge_src: np.ndarray    # node indices
    edge_dst: np.ndarray
    pos_from: np.ndarray    # sequence positions of the creating visit pair
    pos_to: np.ndarray

    @property
    def n_nodes(self):
        return len(self.node_pois)

    @property
    def n_edges(self):
        return len(self.edge_src)


@dataclass
class IntervalMatrices:
    """Discretized pairwise spatial/temporal gaps, clipped to [0, bins-1]."""

    spatial: np.ndarray   # int64 (n, n)
    temporal: np.ndarray  # int64 (n, n)


# -- distance -------------------------------------------------------------------


def _check_coords(lat, lon):
    if not (-90.0 <= lat <= 90.0 and -180.0 <= lon <= 180.0):
        raise DataError(f"coordinates out of range: ({lat}, {lon})")


def haversine(p, q):
    """Great-circle distance in km between two (lat, lon) pairs in degrees."""
    _check_coords(*p)
    _check_coords(*q)
    lat1, lon1, lat2, lon2 = map(math.radians, (p[0], p[1], q[0], q[1]))
    s = (math.sin((lat2 - lat1) / 2.0) ** 2
         + math.cos(lat1) * math.cos(lat2) * math.sin((lon2 - lon1) / 2.0) ** 2)
    return 2.0 * EARTH_RADIUS_KM * math.asin(min(1.0, math.sqrt(s)))


def haversine_matrix(a, b):
    """Pairwise distances (km) between rows of two (n, 2) lat/lon arrays."""
    a = np.radians(np.asarray(a, dtype=np.float64))
    b = np.radians(np.asarray(b, dtype=np.float64))
    dlat = a[:, None, 0] - b[None, :, 0]
    dlon = a[:, None, 1] - b[None, :, 1]
    s = (np.sin(dlat / 2.0) ** 2
         + np.cos(a[:, None, 0]) * np.cos(b[None, :, 0]) * np.sin(dlon / 2.0) ** 2)
    return 2.0 * EARTH_RADIUS_KM * np.arcsin(np.minimum(1.0, np.sqrt(s)))


def haversine_pairs(a, b):
    """Row-wise distances (km) between two aligned (n, 2) lat/lon arrays."""
    a = np.radians(np.asarray(a, dtype=np.float64))
    b = np.radians(np.asarray(b, dtype=np.float64))
    s = (np.sin((b[:, 0] - a[:, 0]) / 2.0) ** 2
         + np.cos(a[:, 0]) * np.cos(b[:, 0]) * np.sin((b[:, 1] - a[:, 1]) / 2.0) ** 2)
    return 2.0 * EARTH_RADIUS_KM * np.arcsin(np.minimum(1.0, np.sqrt(s)))


# -- parsing ---------------------------------------------------------------------


def _parse_canonical(parts):
    user, poi, lat, lon, ts = parts
    return CheckinRecord(user, poi, float(lat), float(lon), int(ts))


def _parse_gowalla(parts):
    # user \t 2010-10-19T23:55:27Z \t lat \t lon \t location_id
    user, when, lat, lon, poi = parts
    if not when.endswith("Z") or when[10] != "T":
        raise ValueError("bad timestamp")
    date, clock = when[:10].split("-"), when[11:19].split(":")
    y, mo, d = map(int, date)
    h, mi, se = map(int, clock)
    ts = _epoch_utc(y, mo, d, h, mi, se)
    return CheckinRecord(user, poi, float(lat), float(lon), ts)


def _parse_foursquare(parts):
    # user, venue, cat_id, cat_name, lat, lon, tz_offset_min, "Tue Apr 03 18:00:06 +0000 2012"
    user, poi = parts[0], parts[1]
    lat, lon = float(parts[4]), float(parts[5])
    tokens = parts[7].split()
    if len(tokens) != 6 or tokens[4] != "+0000":
        raise ValueError("bad timestamp")
    mo = _MONTHS[tokens[1]]
    d = int(tokens[2])
    h, mi, se = map(int, tokens[3].split(":"))
    y = int(tokens[5])
    ts = _epoch_utc(y, mo, d, h, mi, se)
    return CheckinRecord(user, poi, lat, lon, ts)


def _epoch_utc(y, mo, d, h, mi, se):
    days = (np.datetime64(f"{y:04d}-{mo:02d}-{d:02d}") - np.datetime64("1970-01-01")).astype(int)
    return int(days) * 86400 + h * 3600 + mi * 60 + se


_PARSERS = {
    "canonical_tsv": (5, _parse_canonical),
    "gowalla": (5, _parse_gowalla),
    "foursquare": (8, _parse_foursquare),
}


def parse_checkins(path, fmt="canonical_tsv", max_malformed_fraction=0.1):
    """Parse a check-in log into records sorted by (user, timestamp).

    Malformed lines are skipped and counted; more than ``max_malformed_fraction``
    of bad lines is a hard error.
    """
    if fmt not in _PARSERS:
        raise DataError(f"unknown format {fmt!r}; expected one of {sorted(_PARSERS)}")
    n_cols, parse = _PARSERS[fmt]
    records, bad, total = [], 0, 0
    with open(path, encoding="utf-8", errors="replace") as fh:
        for line in fh:
            line = line.rstrip("\n").rstrip("\r")
            if not line:
                continue
            total += 1
            parts = line.split("\t")
            try:
                if len(parts) != n_cols:
                    raise ValueError(f"expected {n_cols} columns, got {len(parts)}")
                rec = parse(parts)
                _check_coords(rec.latitude, rec.longitude)
                records.append(rec)
            except (ValueError, KeyError, IndexError, DataError):
                bad += 1
    if bad:
        log.warning("parse_checkins: skipped %d of %d malformed lines in %s", bad, total, path)
    if total and bad / total > max_malformed_fraction:
        raise DataError(f"{bad}/{total} malformed lines in {path} exceeds "
                        f"{max_malformed_fraction:.0%} tolerance")
    records.sort(key=lambda r: (r.user_id, r.timestamp))
    return records


# -- filtering and splitting -------------------------------------------------------


def five_core_filter(records, min_count=5):
    """Iteratively drop users and POIs with fewer than ``min_count`` visits.

    Repeats simultaneous removal until the surviving set satisfies both
    constraints at once (the usual k-core fixed point).
    """
    if not records:
        raise DataError("five_core_filter: no records")
    current = list(records)
    while True:
        users, pois = {}, {}
        for r in current:
            users[r.user_id] = users.get(r.user_id, 0) + 1
            pois[r.poi_id] = pois.get(r.poi_id, 0) + 1
        kept = [r for r in current
                if users[r.user_id] >= min_count and pois[r.poi_id] >= min_count]
        if not kept:
            raise DataError("five_core_filter: dataset vanished at the fixed point")
        if len(kept) == len(current):
            return kept
        current = kept


def build_dataset(records):
    """Index users/POIs and assemble per-user chronological histories."""
    if not records:
        raise DataError("build_dataset: no records")
    user_ids, poi_ids = [], []
    user_index, poi_index = {}, {}
    coords = []
    for r in records:
        if r.user_id not in user_index:
            user_index[r.user_id] = len(user_ids)
            user_ids.append(r.user_id)
        if r.poi_id not in poi_index:
            poi_index[r.poi_id] = len(poi_ids)
            poi_ids.append(r.poi_id)
            coords.append((r.latitude, r.longitude))
        elif coords[poi_index[r.poi_id]] != (r.latitude, r.longitude):
            raise DataError(f"POI {r.poi_id!r} appears with conflicting coordinates")

    per_user = [[] for _ in user_ids]
    for r in records:
        per_user[user_index[r.user_id]].append((poi_index[r.poi_id], r.timestamp))
    histories = []
    for visits in per_user:
        visits.sort(key=lambda v: v[1])
        pois = np.array([v[0] for v in visits], dtype=np.int64)
        ts = np.array([v[1] for v in visits], dtype=np.int64)
        histories.append(UserHistory(pois, ts, np.zeros(len(visits), dtype=np.int8)))
    return CheckinDataset(user_ids, poi_ids, np.array(coords, dtype=np.float64), histories)


def chrono_split(dataset, ratios=(0.8, 0.1, 0.1)):
    """Label each user's visits train/valid/test by the ceiling-prefix rule.

    The first ceil(r_train * n) visits are train, the next ceil(r_valid * n)
    valid, the remainder test.  Users too short to populate valid/test simply
    leave those splits empty.
    """
    if abs(sum(ratios) - 1.0) > 1e-9 or any(r < 0 for r in ratios):
        raise ValueError(f"chrono_split: bad ratios {ratios}")
    for h in dataset.histories:
        n = len(h)
        n_train = min(n, math.ceil(ratios[0] * n))
        n_valid = min(n - n_train, math.ceil(ratios[1] * n))
        h.splits[:n_train] = TRAIN
        h.splits[n_train:n_train + n_valid] = VALID
        h.splits[n_train + n_valid:] = TEST
    return dataset


# -- graphs ------------------------------------------------------------------------


def build_geo_graph(poi_latlon, threshold_km=1.0):
    """All POI pairs within ``threshold_km``, weighted exp(-distance); no self-loops."""
    latlon = np.asarray(poi_latlon, dtype=np.float64)
    n = len(latlon)
    src_parts, dst_parts, dist_parts = [], [], []
    chunk = max(1, int(4_000_000 // max(n, 1)))
    for start in range(0, n, chunk):
        stop = min(n, start + chunk)
        block = haversine_matrix(latlon[start:stop], latlon)
        rows, cols = np.nonzero(block <= threshold_km)
        keep = (rows + start) < cols  # upper triangle: src < dst, no self-loops
        rows, cols = rows[keep], cols[keep]
        src_parts.append(rows + start)
        dst_parts.append(cols)
        dist_parts.append(block[rows, cols])
    src = np.concatenate(src_parts) if src_parts else np.empty(0, dtype=np.int64)
    dst = np.concatenate(dst_parts) if dst_parts else np.empty(0, dtype=np.int64)
    dist = np.concatenate(dist_parts) if dist_parts else np.empty(0, dtype=np.float64)
    return GeoGraph(n, src.astype(np.int64), dst.astype(np.int64), dist, threshold_km)


def truncate_sequence(poi_indices, timestamps, max_len=100):
    """Keep the latest ``max_len`` visits of a sequence."""
    if len(poi_indices) > max_len:
        return poi_indices[-max_len:], timestamps[-max_len:]
    return poi_indices, timestamps


def build_transition_graph(poi_indices):
    """Directed graph of deduplicated successive-visit edges for one sequence."""
    seq = np.asarray(poi_indices, dtype=np.int64)
    if len(seq) == 0:
        raise DataError("build_transition_graph: empty sequence")
    node_index = {}
    node_pois = []
    node_of_pos = np.empty(len(seq), dtype=np.int64)
    for pos, poi in enumerate(seq):
        poi = int(poi)
        if poi not in node_index:
            node_index[poi] = len(node_pois)
            node_pois.append(poi)
        node_of_pos[pos] = node_index[poi]
    seen = {}
    for pos in range(len(seq) - 1):
        key = (node_of_pos[pos], node_of_pos[pos + 1])
        if key not in seen:
            seen[key] = (pos, pos + 1)
    edges = list(seen.items())
    return TransitionGraph(
        node_pois=np.array(node_pois, dtype=np.int64),
        node_of_pos=node_of_pos,
        edge_src=np.array([e[0][0] for e in edges], dtype=np.int64),
        edge_dst=np.array([e[0][1] for e in edges], dtype=np.int64),
        pos_from=np.array([e[1][0] for e in edges], dtype=np.int64),
        pos_to=np.array([e[1][1] for e in edges], dtype=np.int64),
    )


def interval_matrices(seq_latlon, timestamps, spatial_bins=256, temporal_bins=256):
    """Pairwise gaps normalized by the minimum nonzero successive gap.

    Spatial entries are floor(distance / s_min), temporal entries
    floor(|t_j - t_i| / t_min); both clipped into [0, bins-1].  When every
    successive gap is zero the normalizer falls back to 1, making all
    discretized intervals 0.
    """
    latlon = np.asarray(seq_latlon, dtype=np.float64)
    ts = np.asarray(timestamps, dtype=np.int64)
    n = len(ts)
    dist = haversine_matrix(latlon, latlon)
    np.fill_diagonal(dist, 0.0)

    succ_d = dist[np.arange(n - 1), np.arange(1, n)] if n > 1 else np.empty(0)
    nz = succ_d[succ_d > 0]
    s_min = float(nz.min()) if len(nz) else 1.0
    spatial = np.clip(np.floor(dist / s_min).astype(np.int64), 0, spatial_bins - 1)

    tgap = np.abs(ts[None, :] - ts[:, None])
    succ_t = tgap[np.arange(n - 1), np.arange(1, n)] if n > 1 else np.empty(0, dtype=np.int64)
    nzt = succ_t[succ_t > 0]
    t_min = int(nzt.min()) if len(nzt) else 1
    temporal = np.clip(tgap // t_min, 0, temporal_bins - 1)

    return IntervalMatrices(spatial, temporal.astype(np.int64))


# -- persistence ---------------------------------------------------------------------


def save_dataset(dataset, out_dir, manifest_extra=None):
    """Write the POI/visit/split tables plus a JSON manifest to a directory."""
    os.makedirs(out_dir, exist_ok=True)
    with open(os.path.join(out_dir, "pois.tsv"), "w", encoding="utf-8", newline="\n") as fh:
        for pid, (lat, lon) in zip(dataset.poi_ids, dataset.poi_latlon):
            fh.write(f"{pid}\t{float(lat)!r}\t{float(lon)!r}\n")
    with open(os.path.join(out_dir, "visits.tsv"), "w", encoding="utf-8", newline="\n") as fh:
        for uid, h in zip(dataset.user_ids, dataset.histories):
            for poi, ts in zip(h.poi_indices, h.timestamps):
                fh.write(f"{uid}\t{dataset.poi_ids[poi]}\t{ts}\n")
    with open(os.path.join(out_dir, "splits.tsv"), "w", encoding="utf-8", newline="\n") as fh:
        for uid, h in zip(dataset.user_ids, dataset.histories):
            for pos, code in enumerate(h.splits):
                fh.write(f"{uid}\t{pos}\t{SPLIT_NAMES[int(code)]}\n")
    manifest = {
        "format_version": 1,
        "n_users": dataset.n_users,
        "n_pois": dataset.n_pois,
        "n_interactions": dataset.n_visits,
        "avg_visit": dataset.n_visits / dataset.n_users if dataset.n_users else 0.0,
    }
    if manifest_extra:
        manifest.update(manifest_extra)
    with open(os.path.join(out_dir, "manifest.json"), "w", encoding="utf-8") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True)
        fh.write("\n")
    return manifest


def load_dataset(data_dir):
    """Load a dataset directory written by ``save_dataset``."""
    manifest_path = os.path.join(data_dir, "manifest.json")
    if not os.path.exists(manifest_path):
        raise DataError(f"no manifest.json in {data_dir}")
    with open(manifest_path, encoding="utf-8") as fh:
        manifest = json.load(fh)
    coords = {}
    poi_order = []
    with open(os.path.join(data_dir, "pois.tsv"), encoding="utf-8") as fh:
        for line in fh:
            pid, lat, lon = line.rstrip("\n").split("\t")
            coords[pid] = (float(lat), float(lon))
            poi_order.append(pid)
    records = []
    with open(os.path.join(data_dir, "visits.tsv"), encoding="utf-8") as fh:
        for line in fh:
            uid, pid, ts = line.rstrip("\n").split("\t")
            lat, lon = coords[pid]
            records.append(CheckinRecord(uid, pid, lat, lon, int(ts)))
    dataset = build_dataset(records)
    if dataset.poi_ids != poi_order:
        # visit order determines indexing; re-align to the stored POI table
        remap = {pid: i for i, pid in enumerate(dataset.poi_ids)}
        order = [remap[pid] for pid in poi_order]
        inv = np.empty(len(order), dtype=np.int64)
        inv[np.array(order)] = np.arange(len(order))
        dataset.poi_ids = poi_order
        dataset.poi_latlon = np.array([coords[p] for p in poi_order])
        for h in dataset.histories:
            h.poi_indices = inv[h.poi_indices]
    user_pos = {uid: i for i, uid in enumerate(dataset.user_ids)}
    with open(os.path.join(data_dir, "splits.tsv"), encoding="utf-8") as fh:
        for line in fh:
            uid, pos, name = line.rstrip("\n").split("\t")
            dataset.histories[user_pos[uid]].splits[int(pos)] = SPLIT_CODES[name]
    return dataset, manifest


def preprocess(input_path, fmt, out_dir, threshold_km=1.0, min_core=5):
    """Full ingestion pipeline: parse, k-core filter, split, persist."""
    records = parse_checkins(input_path, fmt)
    if not records:
        raise DataError(f"no usable records in {input_path}")
    filtered = five_core_filter(records, min_core)
    dataset = chrono_split(build_dataset(filtered))
    manifest = save_dataset(dataset, out_dir, {
        "source_format": fmt,
        "threshold_km": threshold_km,
        "min_core": min_core,
    })
    return dataset, manifest
