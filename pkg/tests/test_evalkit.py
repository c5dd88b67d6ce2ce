import csv

import pytest
from evaloracle import brute_recall, iou_by_endpoints, random_instance
from hypothesis import given, settings
from hypothesis import strategies as st

from xmlr import evalkit as ek
from xmlr.numkit import Rng

# ---------------------------------------------------------------- temporal IoU


def test_iou_examples():
    assert ek.temporal_iou((2.0, 7.0), (2.0, 7.0)) == 1.0
    assert ek.temporal_iou((0.0, 1.0), (2.0, 3.0)) == 0.0
    assert ek.temporal_iou((0.0, 10.0), (5.0, 15.0)) == pytest.approx(5 / 15)


def test_iou_degenerate_and_reversed():
    assert ek.temporal_iou((3.0, 3.0), (3.0, 3.0)) == 1.0
    assert ek.temporal_iou((3.0, 3.0), (4.0, 4.0)) == 0.0
    with pytest.raises(ValueError):
        ek.temporal_iou((5.0, 1.0), (0.0, 2.0))


span = st.tuples(st.floats(0, 100), st.floats(0, 100)).map(sorted).map(tuple)


@given(span, span)
def test_iou_symmetric_bounded_matches_endpoint_oracle(a, b):
    v = ek.temporal_iou(a, b)
    assert v == ek.temporal_iou(b, a)
    assert 0.0 <= v <= 1.0
    assert v == pytest.approx(iou_by_endpoints(a, b), abs=1e-12)
    assert ek.temporal_iou(a, a) == 1.0


# ---------------------------------------------------------------- recall

def test_exact_hit_all_thresholds():
    res = ek.recall_at_k({0: [("v1", 3.0, 6.0, 1.0)]}, {0: ("v1", 3.0, 6.0)}, ks=[1], iou_thresholds=[0.1, 0.5, 0.7, 1.0])
    assert all(v == 1.0 for v in res.metrics.values())


def test_iou_06_counts_at_05_not_07():
    # [0,6] vs [0,10] -> IoU 0.6
    res = ek.recall_at_k({0: [("v", 0.0, 6.0)]}, {0: ("v", 0.0, 10.0)}, ks=[1], iou_thresholds=[0.5, 0.7])
    assert res.metrics == {"R@1,IoU=0.5": 1.0, "R@1,IoU=0.7": 0.0}


def test_task_semantics():
    preds = {0: [("wrong", 0.0, 10.0), ("v", 50.0, 60.0)]}
    gts = {0: ("v", 0.0, 10.0)}
    assert ek.recall_at_k(preds, gts, [1, 2], [0.5], "vcmr").metrics == {"R@1,IoU=0.5": 0.0, "R@2,IoU=0.5": 0.0}
    assert ek.recall_at_k(preds, gts, [1], [0.5], "svmr").metrics == {"R@1,IoU=0.5": 1.0}
    assert ek.recall_at_k(preds, gts, [1, 2], task="vr").metrics == {"R@1": 0.0, "R@2": 1.0}


def test_vr_counts_distinct_videos():
    preds = {0: [("a", 0, 1), ("a", 1, 2), ("b", 0, 1)]}
    assert ek.recall_at_k(preds, {0: ("b", 0, 1)}, [2], task="vr").metrics["R@2"] == 1.0


def test_skipped_and_missing():
    res = ek.recall_at_k({0: [("v", 0.0, 1.0)]}, {0: ("v", 0.0, 1.0), 1: None, 2: ("v", 0.0, 1.0)}, [1], [0.5])
    assert res.n_queries == 2 and res.n_skipped == 1 and res.metrics["R@1,IoU=0.5"] == 0.5


def test_recall_rejects_bad_args():
    with pytest.raises(ValueError):
        ek.recall_at_k({}, {}, ks=[0])
    with pytest.raises(ValueError):
        ek.recall_at_k({}, {}, task="moments")


def test_json_shape():
    import json
    res = ek.recall_at_k({0: [("v", 0.0, 1.0)]}, {0: ("v", 0.0, 1.0)}, [1], [0.5])
    assert json.loads(res.to_json()) == {"task": "vcmr", "metrics": {"R@1,IoU=0.5": 1.0}, "n_queries": 1, "n_skipped": 0}


@pytest.mark.parametrize("seed", range(40))
@pytest.mark.parametrize("task", ["vcmr", "svmr", "vr"])
def test_recall_matches_brute_force(seed, task):
    preds, gts = random_instance(seed)
    ks, ious = [1, 2, 5, 10], [0.3, 0.5, 0.7]
    res = ek.recall_at_k(preds, gts, ks, ious, task)
    for k in ks:
        for t in ([None] if task == "vr" else ious):
            want = brute_recall(preds, gts, k, 0.0 if t is None else t, task)
            assert res.metrics[ek.metric_key(k, t)] == pytest.approx(want, abs=1e-12)


@settings(max_examples=60)
@given(st.integers(0, 2**32), st.sampled_from(["vcmr", "svmr"]))
def test_recall_monotone(seed, task):
    preds, gts = random_instance(seed)
    ks, ious = [1, 2, 3, 5, 10, 100], [0.1, 0.3, 0.5, 0.7, 0.9]
    m = ek.recall_at_k(preds, gts, ks, ious, task).metrics
    for t in ious:
        vals = [m[ek.metric_key(k, t)] for k in ks]
        assert vals == sorted(vals) and all(0 <= v <= 1 for v in vals)
    for k in ks:
        vals = [m[ek.metric_key(k, t)] for t in ious]
        assert vals == sorted(vals, reverse=True)


def test_query_order_irrelevant():
    preds, gts = random_instance(7)
    rev = dict(reversed(list(gts.items())))
    assert ek.recall_at_k(preds, gts).metrics == ek.recall_at_k(preds, rev).metrics


def test_predictions_in_seconds_end_exclusive():
    from xmlr.scorer import MomentPrediction
    p = MomentPrediction("v", 2, 4, 0.5)
    assert ek.predictions_in_seconds([p], 1.5) == [("v", 3.0, 7.5, 0.5)]
    assert ek.predictions_in_seconds([p], {"v": 2.0}) == [("v", 4.0, 10.0, 0.5)]


# ---------------------------------------------------------------- frequency baseline

def test_frequency_point_mass():
    fb = ek.frequency_baseline([(1.0, 3.0, 10.0), (2.0, 6.0, 20.0)] * 5)
    assert fb.predict_spans(40.0, 1) == [(pytest.approx(4.0), pytest.approx(12.0))]


def test_frequency_tie_break_by_cell_index():
    truths = [(0.9, 1.0, 1.0), (0.0, 0.1, 1.0), (0.5, 0.6, 1.0)]
    fb = ek.frequency_baseline(truths, n_bins=10)
    assert [c[0] for c in fb.cells] == [0.0, 0.5, 0.9]


def test_frequency_skew_near_start():
    r = Rng(0)
    truths = []
    for u in r.uniform(500):
        st_ = float(u) ** 4 * 0.8  # mass piles up near the start
        truths.append((st_ * 60, (st_ + 0.1) * 60, 60.0))
    fb = ek.frequency_baseline(truths)
    assert fb.counts[0] > len(truths) / 2
    starts = [s for s, _ in fb.predict_spans(100.0, 3)]
    # the most frequent cells are the earliest ones, in order
    assert starts == sorted(starts) and starts[0] < 5.0 and starts[-1] < 15.0


def test_frequency_vr_random_videos():
    fb = ek.frequency_baseline([(0.0, 1.0, 2.0), (0.0, 1.0, 2.0), (1.0, 2.0, 2.0)])
    vids = [(f"v{i}", 10.0) for i in range(6)]
    out = fb.predict_vcmr(vids, 4, Rng(1))
    assert len(out) == 4 and len({o[0] for o in out}) == 4
    assert out == fb.predict_vcmr(vids, 4, Rng(1))
    with pytest.raises(ValueError):
        ek.frequency_baseline([])


# ---------------------------------------------------------------- benchmark

def test_linear_r2():
    import numpy as np
    assert ek.linear_r2(np.array([1.0, 2, 3]), np.array([2.0, 4, 6])) == pytest.approx(1.0)
    assert ek.linear_r2(np.array([1.0, 2, 3]), np.array([1.0, 3, 1])) == pytest.approx(0.0)


def test_small_bench(tmp_path):
    rep = ek.bench_retrieval([20, 40, 80], n_queries=5, d=16, clips=8, dims=(8, 8, 8), query_len=4, repeats=1)
    for engine in ek.ENGINES:
        rows = rep.engine_rows(engine)
        assert [r.corpus_size for r in rows] == [20, 40, 80]
        assert all(r.feat_time_s >= 0 and r.feat_size_bytes > 0 and r.retrieval_time_s > 0 for r in rows)
    late = rep.engine_rows("late_fusion")
    assert late[1].feat_size_bytes > late[0].feat_size_bytes
    rep.write_csv(tmp_path / "b.csv")
    rows = list(csv.DictReader(open(tmp_path / "b.csv")))
    assert len(rows) == 6 and rows[0]["n_queries"] == "5"
    assert rep.speedup(80) > 0
    with pytest.raises(ValueError):
        ek.bench_retrieval([10], engines=["gpu"])
