import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from poirec import metrics as M
from poirec.config import TrainConfig
from poirec.ingest import (TEST, VALID, CheckinRecord, DataError, build_dataset,
                           chrono_split)
from poirec.metrics import (MetricsReport, evaluate, group_users_by_mobility,
                            ndcg_at_k, rank_of_target, ranking_from_scores,
                            recall_at_k, sampling_trace, trace_sample_for_user)


def km_offset(km):
    return math.degrees(km / 6371.0)


# -- point metrics ---------------------------------------------------------------


def test_recall_examples():
    ranked = [7, 3, 5, 1, 0]
    assert recall_at_k(ranked, 7, 2) == 1
    assert recall_at_k(ranked, 5, 2) == 0
    assert recall_at_k(ranked, 3, 2) == 1  # rank exactly K is inside the cutoff


def test_ndcg_examples():
    ranked = [7, 3, 5, 1, 0]
    assert ndcg_at_k(ranked, 7, 5) == 1.0
    assert abs(ndcg_at_k(ranked, 3, 5) - 1.0 / math.log2(3)) < 1e-12
    assert abs(ndcg_at_k(ranked, 3, 5) - 0.6309) < 1e-4
    assert ndcg_at_k(ranked, 1, 2) == 0.0


def test_metrics_reject_missing_target():
    with pytest.raises(DataError):
        recall_at_k([0, 1, 2], 5, 2)
    with pytest.raises(DataError):
        ndcg_at_k([0, 1, 2], 5, 2)


def test_rank_ties_broken_by_ascending_index():
    scores = np.array([1.0, 2.0, 2.0, 0.5])
    assert rank_of_target(scores, 1) == 1
    assert rank_of_target(scores, 2) == 2
    assert np.array_equal(ranking_from_scores(scores), [1, 2, 0, 3])


def test_rank_of_target_matches_full_ranking():
    rng = np.random.default_rng(0)
    for _ in range(30):
        scores = rng.integers(0, 5, size=20).astype(float)  # plenty of ties
        ranked = ranking_from_scores(scores)
        for target in range(20):
            assert ranked[rank_of_target(scores, target) - 1] == target


@settings(max_examples=40, deadline=None)
@given(st.lists(st.integers(1, 50), min_size=1, max_size=100))
def test_recall_monotone_and_ndcg_bounded(ranks):
    ranks = np.asarray(ranks)
    recall, ndcg = M.metrics_from_ranks(ranks, ks=(2, 5, 10))
    assert recall[2] <= recall[5] <= recall[10]
    for k in (2, 5, 10):
        assert 0.0 <= ndcg[k] <= recall[k] <= 1.0


def test_random_scorer_matches_expectation():
    rng = np.random.default_rng(1)
    n_pois, n_samples = 50, 4000
    ranks = []
    for _ in range(n_samples):
        scores = rng.random(n_pois)
        ranks.append(rank_of_target(scores, int(rng.integers(n_pois))))
    recall, _ = M.metrics_from_ranks(np.asarray(ranks), ks=(2, 5, 10))
    for k in (2, 5, 10):
        expect = k / n_pois
        sigma = math.sqrt(expect * (1 - expect) / n_samples)
        assert abs(recall[k] - expect) < 3 * sigma


# -- evaluate protocol --------------------------------------------------------------


class _StubSample:
    def __init__(self, user_idx, target):
        self.user_idx = user_idx
        self.target_poi = target


class _StubModel:
    def __init__(self, samples, scores):
        self._samples = samples
        self._scores = scores
        self.config = TrainConfig()

    def eval_samples(self, split):
        return self._samples

    def eval_scores(self, samples, split_tag="eval"):
        return self._scores


def test_evaluate_oracle_model_scores_one():
    samples = [_StubSample(0, t) for t in (3, 1, 4)]
    scores = np.zeros((3, 6))
    for i, s in enumerate(samples):
        scores[i, s.target_poi] = 1.0
    report = evaluate(_StubModel(samples, scores), None, VALID)
    assert all(v == 1.0 for v in report.recall.values())
    assert all(v == 1.0 for v in report.ndcg.values())


def test_evaluate_rejects_empty_split():
    with pytest.raises(DataError):
        evaluate(_StubModel([], np.zeros((0, 4))), None, VALID)


def test_evaluate_deterministic_and_grouped():
    rng = np.random.default_rng(2)
    samples = [_StubSample(i % 2, int(rng.integers(8))) for i in range(10)]
    scores = rng.random((10, 8))
    model = _StubModel(samples, scores)
    a = evaluate(model, None, VALID)
    b = evaluate(model, None, VALID)
    assert a.recall == b.recall and a.ndcg == b.ndcg
    grouped = evaluate(model, None, VALID, groups={0: "g0", 1: "g1"})
    assert set(grouped.per_group) == {"g0", "g1"}
    assert sum(g["n_samples"] for g in grouped.per_group.values()) == 10


def test_report_roundtrip(tmp_path):
    report = MetricsReport({2: 0.5, 5: 0.75, 10: 1.0}, {2: 0.4, 5: 0.5, 10: 0.6},
                           12, 7, "abc123", split="test")
    path = tmp_path / "report.json"
    report.save(path)
    import json

    loaded = json.loads(path.read_text())
    assert loaded["schema_version"] == M.REPORT_SCHEMA_VERSION
    assert loaded["recall"]["10"] == 1.0
    assert loaded["seed"] == 7


# -- mobility groups ------------------------------------------------------------------


def user_records(uid, kms, t0=0):
    # place successive visits at given cumulative km offsets along a meridian
    recs = []
    for i, km in enumerate(kms):
        recs.append(CheckinRecord(uid, f"{uid}_p{i}", km_offset(km), 0.0, t0 + i * 60))
    return recs


def test_mobility_groups():
    records = []
    records += [CheckinRecord("stay", "p_stay", 10.0, 10.0, t) for t in range(0, 300, 60)]
    records += user_records("near", [0, 2, 6])       # hops 2 km, 4 km -> mean 3
    records += user_records("edge", [0, 5])          # exactly 5 -> second bucket
    records += user_records("far", [0, 20, 40])      # mean 20 -> >=15
    records += [CheckinRecord("single", "p_one", 0.0, 0.0, 0)]
    ds = chrono_split(build_dataset(records))
    groups = group_users_by_mobility(ds, boundaries=(5.0, 10.0, 15.0))
    by_id = {ds.user_ids[i]: g for i, g in groups.items()}
    assert by_id["stay"] == "<5.0km"
    assert by_id["near"] == "<5.0km"
    assert by_id["edge"] == "5.0-10.0km"
    assert by_id["far"] == ">=15.0km"
    assert by_id["single"] == "singleton"


# -- sampling trace ------------------------------------------------------------------


@pytest.fixture(scope="module")
def tiny_trained():
    from poirec.config import TrainConfig
    from poirec.model import Model
    from poirec.synth import SynthConfig, generate_checkins

    records, _, _ = generate_checkins(SynthConfig(
        seed=3, n_users=12, n_pois=40, n_clusters=4, visits_low=15, visits_high=18))
    ds = chrono_split(build_dataset(records))
    cfg = TrainConfig(embed_dim=8, spatial_bins=16, temporal_bins=16,
                      score_hidden=(8,), step_size=0.25, batch_size=8,
                      max_epochs=1, dropout=0.0, seed=3)
    model = Model(ds, cfg)
    model.fit()
    return model, ds


def test_trace_shape_and_checkpoint_zero(tiny_trained, tmp_path):
    model, ds = tiny_trained
    uid = next(ds.user_ids[s.user_idx]
               for s in model.eval_samples(TEST))
    sample = trace_sample_for_user(model, ds, uid)
    trace = sampling_trace(model, ds, sample, top_k=10)
    assert set(trace.fractions) == {0.0, 1 / 3, 2 / 3, 1.0}
    for frac in trace.fractions:
        assert len(trace.top_pois[frac]) == 10
        assert len(trace.distances_km[frac]) == 10

    # checkpoint 0% must reproduce the prototype-induced ranking bit for bit
    params = model._detached_params()
    e_geo = model.geo_embeddings(params)
    xs, x_stack = model.encode_users([sample], params)
    vhat = model.prototypes([sample], xs, e_geo, params)
    expected = ranking_from_scores(e_geo.data @ vhat.data[0])[:10]
    assert np.array_equal(trace.top_pois[0.0], expected)

    out = tmp_path / "trace.csv"
    trace.write_csv(ds, out)
    lines = out.read_text().strip().split("\n")
    assert len(lines) == 1 + 4 * 10
    assert (tmp_path / "trace.csv.json").exists()


def test_trace_unknown_user(tiny_trained):
    model, ds = tiny_trained
    with pytest.raises(DataError):
        trace_sample_for_user(model, ds, "nobody")
