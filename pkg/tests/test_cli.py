import csv
import io
import json
import os
from contextlib import redirect_stdout

import numpy as np
import pytest

from xmlr import encoder as enc
from xmlr import featstore, scorer
from xmlr.cli import main
from xmlr.encstore import encoded_store_nbytes, read_encoded_store
from xmlr.numkit import Rng

SMALL = ["--videos", "12", "--clips", "10", "--dims", "8,6,8", "--queries", "15", "--query-len", "4",
         "--max-moment", "6"]


def run(*argv):
    buf = io.StringIO()
    with redirect_stdout(buf):
        code = main([str(a) for a in argv])
    return code, buf.getvalue()


@pytest.fixture(scope="module")
def pipeline(tmp_path_factory):
    """Synthesised corpus, initial checkpoint and encoded store shared by the CLI tests."""
    d = tmp_path_factory.mktemp("pipe")
    assert run("synth", "--out-dir", d, "--seed", 3, *SMALL)[0] == 0
    assert run("train", "--store", d / "features.xmlf", "--queries", d / "queries.jsonl", "--out", d / "init.npz",
               "--epochs", 0, "--d", 16, "--max-len", 10)[0] == 0
    code, out = run("encode", "--store", d / "features.xmlf", "--checkpoint", d / "init.npz", "--out", d / "enc.bin")
    assert code == 0
    return d, out


def retrieve(d, out_name, *extra):
    code, _ = run("retrieve", "--encoded", d / "enc.bin", "--checkpoint", d / "init.npz",
                  "--queries", d / "queries.jsonl", "--out", d / out_name, *extra)
    assert code == 0
    return [json.loads(line) for line in open(d / out_name)]


def assert_same_predictions(a, b):
    assert len(a) == len(b)
    for ra, rb in zip(a, b):
        assert ra["query_id"] == rb["query_id"]
        assert [p[:3] for p in ra["predictions"]] == [p[:3] for p in rb["predictions"]]
        np.testing.assert_allclose([p[3] for p in ra["predictions"]], [p[3] for p in rb["predictions"]],
                                   rtol=1e-9, atol=0)


# ---------------------------------------------------------------- synth

def test_synth_defaults(tmp_path):
    code, out = run("synth", "--out-dir", tmp_path)
    assert code == 0 and "seed=0" in out
    m = featstore.read_store(tmp_path / "features.xmlf")
    assert len(m) == 200 and all(v.n_clips == 20 for v in m.videos)
    assert (m.d_v, m.d_s) == (64, 64)
    truth = [json.loads(line) for line in open(tmp_path / "truth.jsonl")]
    assert len(truth) == 1000 and set(truth[0]) == {"query_id", "video_id", "ts", "clip_span"}


def test_synth_byte_identical(tmp_path):
    for sub in ("a", "b"):
        assert run("synth", "--out-dir", tmp_path / sub, "--seed", 9, *SMALL)[0] == 0
    for name in ("features.xmlf", "queries.jsonl", "truth.jsonl"):
        assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()


def test_synth_rejects_moment_longer_than_video(tmp_path, capsys):
    with pytest.raises(SystemExit) as exc:
        main(["synth", "--out-dir", str(tmp_path), "--clips", "10", "--max-moment", "14"])
    assert exc.value.code == 2


def test_unknown_flag_rejected(tmp_path):
    with pytest.raises(SystemExit) as exc:
        main(["synth", "--out-dir", str(tmp_path), "--bogus"])
    assert exc.value.code == 2


# ---------------------------------------------------------------- encode

def test_encode_reports_and_size_formula(pipeline):
    d, out = pipeline
    videos = read_encoded_store(d / "enc.bin")
    size = os.path.getsize(d / "enc.bin")
    assert f"feat_size_bytes={size}" in out and "d=16" in out
    assert size == encoded_store_nbytes([v.n_clips for v in videos], [len(v.video_id.encode()) for v in videos], 16)
    # tensor payload is exactly 4 * l * d * 8 bytes per video
    assert size - encoded_store_nbytes([0] * len(videos), [len(v.video_id.encode()) for v in videos], 16) \
        == sum(4 * v.n_clips * 16 * 8 for v in videos)


def test_encode_missing_checkpoint(pipeline, capsys):
    d, _ = pipeline
    assert main(["encode", "--store", str(d / "features.xmlf"), "--checkpoint", str(d / "nope.npz"),
                 "--out", str(d / "x.bin")]) == 1
    assert "nope.npz" in capsys.readouterr().err


def test_encode_dim_mismatch(pipeline, tmp_path):
    d, _ = pipeline
    assert run("synth", "--out-dir", tmp_path, *SMALL, "--dims", "5,5,5")[0] == 0
    assert run("encode", "--store", tmp_path / "features.xmlf", "--checkpoint", d / "init.npz",
               "--out", tmp_path / "x.bin")[0] == 1


# ---------------------------------------------------------------- retrieve

def test_encoded_retrieve_equals_on_the_fly(pipeline):
    d, _ = pipeline
    recs = retrieve(d, "p.jsonl")
    params = enc.load_checkpoint(d / "init.npz")
    m = featstore.read_store(d / "features.xmlf")
    corpus = scorer.EncodedCorpus(enc.encode_corpus(m.videos, params))
    queries = featstore.read_queries_jsonl(d / "queries.jsonl")
    kernels = (params["k_st"], params["k_ed"])
    want = [scorer.prediction_record(q.query_id, scorer.retrieve_corpus(corpus, enc.encode_query(q.tokens, params),
                                                                        kernels, scorer.RetrievalConfig()),
                                     {v.video_id: v.clip_duration for v in m.videos})
            for q in queries]
    assert_same_predictions(recs, want)


def test_unlimited_shortlist_equals_exhaustive(pipeline):
    d, _ = pipeline
    assert_same_predictions(retrieve(d, "big.jsonl", "--top-videos", 10**9), retrieve(d, "ex.jsonl", "--exhaustive"))


def test_retrieve_deterministic_and_thread_count_irrelevant(pipeline, monkeypatch):
    d, _ = pipeline
    retrieve(d, "t1.jsonl", "--threads", 1)
    monkeypatch.setenv("XMLR_THREADS", "3")
    retrieve(d, "t3.jsonl", "--threads", 1)
    assert (d / "t1.jsonl").read_bytes() == (d / "t3.jsonl").read_bytes()


@pytest.mark.parametrize("gen", ["sliding_window", "tag"])
def test_retrieve_generators(pipeline, gen):
    d, _ = pipeline
    recs = retrieve(d, f"{gen}.jsonl", "--generator", gen, "--topk", 5)
    assert all(0 < len(r["predictions"]) <= 5 for r in recs)
    for r in recs:
        scores = [p[3] for p in r["predictions"]]
        assert scores == sorted(scores, reverse=True)


def test_retrieve_svmr_mode_stays_in_gt_video(pipeline):
    d, _ = pipeline
    truth = {t["query_id"]: t["video_id"] for t in map(json.loads, open(d / "truth.jsonl"))}
    for r in retrieve(d, "svmr.jsonl", "--mode", "svmr"):
        assert {p[0] for p in r["predictions"]} == {truth[r["query_id"]]}


def test_retrieve_bad_config(pipeline):
    d, _ = pipeline
    with pytest.raises(SystemExit) as exc:
        main(["retrieve", "--encoded", str(d / "enc.bin"), "--checkpoint", str(d / "init.npz"),
              "--queries", str(d / "queries.jsonl"), "--out", str(d / "x.jsonl"), "--lmin", "9", "--lmax", "3"])
    assert exc.value.code == 2


# ---------------------------------------------------------------- train / eval / bench / demo

def test_train_zero_epochs_is_init(pipeline):
    d, _ = pipeline
    params = enc.load_checkpoint(d / "init.npz")
    fresh = enc.ModelParams.init(Rng(0), 8, 6, 8, d=16, max_len=10)
    assert all(np.array_equal(params[n], fresh[n]) for n in fresh)


def test_train_steps_and_log(pipeline):
    d, _ = pipeline
    code, out = run("train", "--store", d / "features.xmlf", "--queries", d / "queries.jsonl",
                    "--out", d / "t.npz", "--init", d / "init.npz", "--steps", 3, "--batch-size", 4,
                    "--log", d / "log.csv")
    assert code == 0 and "steps=3" in out
    rows = list(csv.reader(open(d / "log.csv")))
    assert rows[0] == ["step", "L_vr", "L_svmr", "total"] and len(rows) == 4


def test_eval_perfect_predictions(pipeline):
    d, _ = pipeline
    with open(d / "perfect.jsonl", "w") as fh:
        for t in map(json.loads, open(d / "truth.jsonl")):
            fh.write(json.dumps({"query_id": t["query_id"], "predictions_s": [[t["video_id"], *t["ts"], 1.0]]}) + "\n")
    for task in ("vcmr", "svmr", "vr"):
        code, out = run("eval", "--predictions", d / "perfect.jsonl", "--truth", d / "truth.jsonl", "--task", task)
        res = json.loads(out)
        assert code == 0 and res["n_queries"] == 15 and all(v == 1.0 for v in res["metrics"].values())


def test_eval_real_predictions_in_range(pipeline):
    d, _ = pipeline
    retrieve(d, "ev.jsonl")
    res = json.loads(run("eval", "--predictions", d / "ev.jsonl", "--truth", d / "truth.jsonl")[1])
    assert set(res["metrics"]) == {f"R@{k},IoU={t}" for k in (1, 5, 10, 100) for t in (0.5, 0.7)}
    assert all(0 <= v <= 1 for v in res["metrics"].values())


def test_bench_csv_rows(tmp_path):
    code, _ = run("bench", "--sizes", "10,20,30", "--queries", 3, "--d", 8, "--clips", 6, "--dims", 6,
                  "--repeats", 1, "--out", tmp_path / "b.csv")
    rows = list(csv.DictReader(open(tmp_path / "b.csv")))
    assert code == 0 and len(rows) == 6
    for engine in ("late_fusion", "early_fusion"):
        assert [r["corpus_size"] for r in rows if r["engine"] == engine] == ["10", "20", "30"]


def test_convse_demo_prints_kernels():
    code, out = run("convse-demo", "--signals", 40, "--epochs", 20)
    assert code == 0 and "k_st = [" in out and "k_ed = [" in out and "mean top-1 IoU" in out
