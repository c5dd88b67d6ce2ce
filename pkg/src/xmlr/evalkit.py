"""Evaluation: temporal IoU, R@K, the frequency baseline and the retrieval benchmark."""
from __future__ import annotations

import csv
import json
import math
import statistics
import tempfile
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Mapping, Optional, Sequence

import numpy as np

from .numkit import Rng

TASKS = ("vcmr", "svmr", "vr")
DEFAULT_KS = (1, 5, 10, 100)
DEFAULT_IOUS = (0.5, 0.7)


def temporal_iou(a: tuple[float, float], b: tuple[float, float]) -> float:
    """Intersection over union of two closed intervals on the real line."""
    (a0, a1), (b0, b1) = a, b
    if a0 > a1 or b0 > b1:
        raise ValueError(f"reversed interval in {a} / {b}")
    inter = max(0.0, min(a1, b1) - max(a0, b0))
    union = (a1 - a0) + (b1 - b0) - inter
    if union <= 0:
        return 1.0 if (a0, a1) == (b0, b1) else 0.0
    return inter / union


@dataclass
class EvalResult:
    task: str
    metrics: dict[str, float]
    n_queries: int
    n_skipped: int = 0

    def to_json(self) -> str:
        return json.dumps({"task": self.task, "metrics": self.metrics, "n_queries": self.n_queries,
                           "n_skipped": self.n_skipped}, sort_keys=False)


def metric_key(k: int, iou: Optional[float]) -> str:
    return f"R@{k}" if iou is None else f"R@{k},IoU={iou:g}"


def _unique_videos(preds):
    seen, out = set(), []
    for p in preds:
        if p[0] not in seen:
            seen.add(p[0])
            out.append(p)
    return out


def recall_at_k(predictions: Mapping[int, Sequence[tuple]], gts: Mapping[int, Optional[tuple]],
                ks: Iterable[int] = DEFAULT_KS, iou_thresholds: Iterable[float] = DEFAULT_IOUS,
                task: str = "vcmr") -> EvalResult:
    """Average recall over queries that have ground truth.

    ``predictions[qid]`` is a ranked list of ``(video_id, st_s, ed_s, ...)``;
    ``gts[qid]`` is ``(video_id, st_s, ed_s)`` or ``None``. A query without
    predictions counts as a miss; one without ground truth is skipped.
    """
    if task not in TASKS:
        raise ValueError(f"task must be one of {TASKS}")
    ks = [ks] if isinstance(ks, int) else list(ks)
    if any(k < 1 for k in ks):
        raise ValueError("K must be >= 1")
    ious = [None] if task == "vr" else ([iou_thresholds] if isinstance(iou_thresholds, float)
                                         else list(iou_thresholds))
    hits = {(k, t): 0 for k in ks for t in ious}
    n = skipped = 0
    for qid, gt in gts.items():
        if gt is None or gt[0] is None and task != "svmr":
            skipped += 1
            continue
        n += 1
        preds = predictions.get(qid, [])
        if task == "vr":
            preds = _unique_videos(preds)
        for k in ks:
            top = preds[:k]
            for t in ious:
                if task == "vr":
                    ok = any(p[0] == gt[0] for p in top)
                elif task == "svmr":
                    ok = any(temporal_iou((p[1], p[2]), (gt[1], gt[2])) >= t for p in top)
                else:
                    ok = any(p[0] == gt[0] and temporal_iou((p[1], p[2]), (gt[1], gt[2])) >= t for p in top)
                hits[(k, t)] += ok
    metrics = {metric_key(k, t): (hits[(k, t)] / n if n else 0.0) for k in ks for t in ious}
    return EvalResult(task, metrics, n, skipped)


def predictions_in_seconds(preds, clip_duration) -> list[tuple[str, float, float, float]]:
    """MomentPredictions -> (video_id, st_s, ed_s, score); ``clip_duration`` is a float or per-video dict."""
    def dur(vid):
        return clip_duration[vid] if isinstance(clip_duration, Mapping) else clip_duration
    return [(p.video_id, p.t_st * dur(p.video_id), (p.t_ed + 1) * dur(p.video_id), p.score) for p in preds]


# ---------------------------------------------------------------- frequency baseline

@dataclass
class FrequencyPredictor:
    """Most frequent normalised (start, end) cells, mapped back onto a video's length."""
    n_bins: int
    cells: list[tuple[float, float]]  # mean normalised (st, ed) per cell, most frequent first
    counts: list[int]

    def predict_spans(self, duration: float, k: int) -> list[tuple[float, float]]:
        return [(st * duration, ed * duration) for st, ed in self.cells[:k]]

    def predict_vcmr(self, videos: Sequence[tuple[str, float]], k: int, rng: Rng) -> list[tuple[str, float, float, float]]:
        """Rank r pairs the r-th most frequent cell with the r-th video of a random permutation."""
        perm = rng.permutation(len(videos))
        out = []
        for r in range(min(k, len(self.cells) * len(videos))):
            vid, dur = videos[perm[r % len(videos)]]
            st, ed = self.cells[r % len(self.cells)]
            out.append((vid, st * dur, ed * dur, float(self.counts[r % len(self.cells)])))
        return out


def frequency_baseline(train_truths: Sequence[tuple[float, float, float]], n_bins: int = 20) -> FrequencyPredictor:
    """``train_truths`` are (st_s, ed_s, video_duration_s). Ties rank by cell index (start bin major)."""
    if not train_truths:
        raise ValueError("frequency baseline needs training moments")
    counts: dict[int, int] = {}
    sums: dict[int, list[float]] = {}
    for st, ed, dur in train_truths:
        ns, ne = min(max(st / dur, 0.0), 1.0), min(max(ed / dur, 0.0), 1.0)
        cell = min(int(ns * n_bins), n_bins - 1) * n_bins + min(int(ne * n_bins), n_bins - 1)
        counts[cell] = counts.get(cell, 0) + 1
        acc = sums.setdefault(cell, [0.0, 0.0])
        acc[0] += ns
        acc[1] += ne
    ranked = sorted(counts, key=lambda c: (-counts[c], c))
    cells = [(sums[c][0] / counts[c], sums[c][1] / counts[c]) for c in ranked]
    return FrequencyPredictor(n_bins, cells, [counts[c] for c in ranked])


# ---------------------------------------------------------------- benchmark

@dataclass
class BenchRow:
    engine: str
    corpus_size: int
    feat_time_s: float
    feat_size_bytes: int
    retrieval_time_s: float


@dataclass
class BenchReport:
    rows: list[BenchRow] = field(default_factory=list)
    n_queries: int = 0

    def engine_rows(self, engine: str) -> list[BenchRow]:
        return [r for r in self.rows if r.engine == engine]

    def r_squared(self, engine: str) -> float:
        rows = self.engine_rows(engine)
        x = np.array([r.corpus_size for r in rows], dtype=np.float64)
        y = np.array([r.retrieval_time_s for r in rows])
        return linear_r2(x, y)

    def speedup(self, corpus_size: int) -> float:
        late = next(r for r in self.rows if r.engine == "late_fusion" and r.corpus_size == corpus_size)
        early = next(r for r in self.rows if r.engine == "early_fusion" and r.corpus_size == corpus_size)
        return early.retrieval_time_s / late.retrieval_time_s

    def write_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["engine", "corpus_size", "n_queries", "feat_time_s", "feat_size_bytes", "retrieval_time_s"])
            for r in self.rows:
                w.writerow([r.engine, r.corpus_size, self.n_queries, f"{r.feat_time_s:.6f}", r.feat_size_bytes,
                            f"{r.retrieval_time_s:.6f}"])


def linear_r2(x: np.ndarray, y: np.ndarray) -> float:
    slope, intercept = np.polyfit(x, y, 1)
    resid = y - (slope * x + intercept)
    ss_tot = float(((y - y.mean()) ** 2).sum())
    return 1.0 - float((resid ** 2).sum()) / ss_tot if ss_tot > 0 else 1.0


def _median_time(fn, repeats: int) -> float:
    times = []
    for _ in range(repeats):
        t0 = time.perf_counter()
        fn()
        times.append(time.perf_counter() - t0)
    return statistics.median(times)


ENGINES = ("late_fusion", "early_fusion")


def bench_retrieval(corpus_sizes: Sequence[int], n_queries: int = 100, engines: Iterable[str] = ENGINES, *,
                    d: int = 128, clips: int = 20, dims: tuple[int, int, int] = (64, 64, 64), query_len: int = 15,
                    repeats: int = 3, seed: int = 0, workdir=None, params=None, log=None) -> BenchReport:
    """Time context encoding, store size and query-time retrieval for each engine and corpus size.

    Feature generation and store loading are excluded from every timing.
    """
    from . import encoder as enc
    from .encstore import read_encoded_store, write_encoded_store
    from .featstore import synth_corpus
    from .scorer import EarlyFusionModel, EncodedCorpus, RetrievalConfig, early_fusion_baseline, retrieve_batch

    engines = list(engines)
    unknown = set(engines) - set(ENGINES)
    if unknown:
        raise ValueError(f"unknown engines {sorted(unknown)}")
    cfg = RetrievalConfig()
    report = BenchReport(n_queries=n_queries)
    rng = Rng(seed)
    if params is None:
        params = enc.ModelParams.init(rng, *dims, d=d, max_len=max(clips, query_len))
    ef_model = EarlyFusionModel(rng, dims[0] + dims[1], dims[2], d=d)
    tmp = tempfile.TemporaryDirectory(dir=workdir)
    try:
        for size in corpus_sizes:
            manifest, queries, _ = synth_corpus(Rng(seed + size), size, clips, dims, n_queries,
                                                max_moment_len=min(14, clips), query_len=query_len)
            tokens = [q.tokens for q in queries]
            if "late_fusion" in engines:
                t0 = time.perf_counter()
                encoded = enc.encode_corpus(manifest.videos, params)
                feat_time = time.perf_counter() - t0
                store = Path(tmp.name) / f"enc_{size}.bin"
                nbytes = write_encoded_store(store, encoded)
                del encoded
                corpus = EncodedCorpus(read_encoded_store(store))
                kernels = (params["k_st"], params["k_ed"])

                def late():
                    eqs = [enc.encode_query(t, params) for t in tokens]
                    retrieve_batch(corpus, eqs, kernels, cfg)

                rt = _median_time(late, repeats)
                report.rows.append(BenchRow("late_fusion", size, feat_time, nbytes, rt))
                del corpus
                store.unlink()
                if log:
                    log(f"late_fusion size={size} feat={feat_time:.3f}s retrieval={rt:.3f}s")
            if "early_fusion" in engines:
                t0 = time.perf_counter()
                prepared = ef_model.prepare(manifest.videos)
                feat_time = time.perf_counter() - t0
                nbytes = sum(p.nbytes for _, p in prepared["groups"])

                def early():
                    for t in tokens:
                        early_fusion_baseline(prepared, t, ef_model, cfg)

                rt = _median_time(early, repeats)
                report.rows.append(BenchRow("early_fusion", size, feat_time, nbytes, rt))
                del prepared
                if log:
                    log(f"early_fusion size={size} feat={feat_time:.3f}s retrieval={rt:.3f}s")
            del manifest, queries
    finally:
        tmp.cleanup()
    return report
