"""Late-fusion scoring, span extraction and corpus retrieval.

Ranking is fully deterministic. Moments are ordered by score descending,
then video id, start clip and end clip ascending.
"""
from __future__ import annotations

import json
import math
import warnings
from dataclasses import dataclass
from functools import lru_cache
from typing import Optional, Sequence

import numpy as np

from . import momentgen
from .encoder import EncodedQuery, EncodedVideo
from .numkit import conv1d_same, softmax

NORM_EPS = 1e-12
LOG_SPACE_ABOVE = 700.0


class ShortVideoWarning(UserWarning):
    """Video shorter than the minimum moment length; no spans produced."""


@dataclass(frozen=True)
class RetrievalConfig:
    alpha: float = 20.0
    top_videos: int = 100
    L_min: int = 2
    L_max: int = 16
    top_k_moments: int = 100

    def __post_init__(self):
        if self.alpha < 0:
            raise ValueError("alpha must be non-negative")
        if min(self.top_videos, self.L_min, self.L_max, self.top_k_moments) < 1:
            raise ValueError("top_videos, L_min, L_max and top_k_moments must be positive")
        if self.L_min > self.L_max:
            raise ValueError(f"L_min ({self.L_min}) > L_max ({self.L_max})")


@dataclass
class SimilaritySignal:
    scores: np.ndarray
    s_st: np.ndarray
    s_ed: np.ndarray
    p_st: np.ndarray
    p_ed: np.ndarray


@dataclass(frozen=True)
class MomentPrediction:
    video_id: str
    t_st: int
    t_ed: int
    score: float

    def sort_key(self):
        return (-self.score, self.video_id, self.t_st, self.t_ed)


def query_clip_scores(ev: EncodedVideo, eq: EncodedQuery) -> np.ndarray:
    return 0.5 * (ev.H_v1 @ eq.q_v + ev.H_s1 @ eq.q_s)


def convse_probs(scores: np.ndarray, k_st: np.ndarray, k_ed: np.ndarray) -> SimilaritySignal:
    """Start/end edge responses of the score curve and their softmax over clips."""
    scores = np.asarray(scores, dtype=np.float64)
    if scores.shape[-1] < 1:
        raise ValueError("empty score curve")
    s_st = conv1d_same(scores, k_st, allow_short=True)
    s_ed = conv1d_same(scores, k_ed, allow_short=True)
    return SimilaritySignal(scores, s_st, s_ed, softmax(s_st, axis=-1), softmax(s_ed, axis=-1))


def _cos_max(h: np.ndarray, q: np.ndarray) -> float:
    qn = q / max(np.linalg.norm(q), NORM_EPS)
    hn = h / np.maximum(np.linalg.norm(h, axis=-1, keepdims=True), NORM_EPS)
    return float((hn @ qn).max())


def vr_score(ev: EncodedVideo, eq: EncodedQuery) -> float:
    """Mean over modalities of the best clip-query cosine."""
    return 0.5 * (_cos_max(ev.H_v0, eq.q_v) + _cos_max(ev.H_s0, eq.q_s))


@lru_cache(maxsize=256)
def span_candidates(l: int, L_min: int, L_max: int) -> tuple[np.ndarray, np.ndarray]:
    """All (start, end) pairs with length in [L_min, L_max], ordered by (start, end)."""
    st, ed = [], []
    for s in range(l):
        for e in range(s + L_min - 1, min(s + L_max, l)):
            st.append(s)
            ed.append(e)
    st_a, ed_a = np.array(st, dtype=np.int64), np.array(ed, dtype=np.int64)
    st_a.flags.writeable = False
    ed_a.flags.writeable = False
    return st_a, ed_a


def _top_order(scores: np.ndarray, keys: Sequence[np.ndarray], k: Optional[int]) -> np.ndarray:
    """Indices of the best ``k`` scores; ties broken by ``keys`` ascending (most significant first)."""
    n = scores.shape[0]
    idx = np.arange(n)
    if k is not None and k < n:
        kth = np.partition(scores, n - k)[n - k]
        idx = np.flatnonzero(scores >= kth)
    order = np.lexsort(tuple(key[idx] for key in reversed(keys)) + (-scores[idx],))
    idx = idx[order]
    return idx if k is None else idx[:k]


def top_spans(sig, cfg: RetrievalConfig, k: Optional[int] = -1) -> list[tuple[int, int, float]]:
    """Best spans by ``p_st[st] * p_ed[ed]`` under the length prior.

    ``sig`` is a :class:`SimilaritySignal` or a ``(p_st, p_ed)`` pair. ``k``
    defaults to ``cfg.top_k_moments``; ``None`` returns every valid span.
    """
    p_st, p_ed = (sig.p_st, sig.p_ed) if isinstance(sig, SimilaritySignal) else sig
    l = len(p_st)
    if k == -1:
        k = cfg.top_k_moments
    if l < cfg.L_min:
        warnings.warn(f"video has {l} clips < L_min={cfg.L_min}; no spans", ShortVideoWarning)
        return []
    st, ed = span_candidates(l, cfg.L_min, cfg.L_max)
    scores = p_st[st] * p_ed[ed]
    order = _top_order(scores, (st, ed), k)
    return [(int(st[i]), int(ed[i]), float(scores[i])) for i in order]


def top1_span_dp(p_st: np.ndarray, p_ed: np.ndarray, L_min: int, L_max: int):
    """Linear-time best span: sliding-window argmax of p_st for each end position."""
    from collections import deque

    l = len(p_st)
    best = None
    window: deque[int] = deque()
    for ed in range(L_min - 1, l):
        new = ed - L_min + 1
        while window and p_st[window[-1]] < p_st[new]:
            window.pop()
        window.append(new)
        while window[0] < ed - L_max + 1:
            window.popleft()
        st = window[0]
        score = float(p_st[st] * p_ed[ed])
        if best is None or score > best[2]:
            best = (st, ed, score)
    return best


def vcmr_aggregate(s_svmr: float, s_vr: float, alpha: float) -> float:
    """Moment score times ``exp(alpha * s_vr)``; switches to log space for large exponents."""
    if s_svmr < 0:
        raise ValueError("s_svmr must be non-negative")
    x = alpha * s_vr
    if x <= LOG_SPACE_ABOVE:
        return s_svmr * math.exp(x)
    if s_svmr == 0:
        return 0.0
    try:
        return math.exp(math.log(s_svmr) + x)
    except OverflowError:
        return math.inf


def _aggregate_vec(s_svmr: np.ndarray, s_vr: np.ndarray, alpha: float) -> np.ndarray:
    x = alpha * np.asarray(s_vr, dtype=np.float64)
    if np.all(x <= LOG_SPACE_ABOVE):
        return s_svmr * np.exp(x)
    with np.errstate(divide="ignore", over="ignore"):
        logspace = np.where(s_svmr > 0, np.exp(np.log(np.where(s_svmr > 0, s_svmr, 1.0)) + x), 0.0)
    return np.where(x <= LOG_SPACE_ABOVE, s_svmr * np.exp(np.minimum(x, LOG_SPACE_ABOVE)), logspace)


def _sigmoid(x):
    return 0.5 * (1.0 + np.tanh(0.5 * x))


def video_moments(scores: np.ndarray, kernels, cfg: RetrievalConfig, generator: str = "convse",
                  k: Optional[int] = -1) -> list[tuple[int, int, float]]:
    """Single-video moments from a query-clip score curve with the chosen generator.

    The hand-crafted generators rank on sigmoid(score) so moment scores stay
    in (0, 1) and can be aggregated with the video score.
    """
    if k == -1:
        k = cfg.top_k_moments
    if len(scores) < cfg.L_min:
        warnings.warn(f"video has {len(scores)} clips < L_min={cfg.L_min}; no spans", ShortVideoWarning)
        return []
    if generator == "convse":
        return top_spans(convse_probs(scores, *kernels), cfg, k)
    probs = _sigmoid(np.asarray(scores, dtype=np.float64))
    if generator == "sliding_window":
        props = momentgen.rank_proposals_avg(probs, momentgen.sliding_window_proposals(len(scores)))
    elif generator == "tag":
        props = momentgen.tag_group(probs, min_len=cfg.L_min)
    else:
        raise ValueError(f"unknown generator {generator!r}; expected one of {momentgen.GENERATORS}")
    props = [p for p in props if cfg.L_min <= p.length <= cfg.L_max]
    if k is not None:
        props = props[:k]
    return [(p.t_st, p.t_ed, p.score) for p in props]


class EncodedCorpus:
    """Encoded videos stacked by length for vectorised late-fusion retrieval."""

    def __init__(self, videos: Sequence[EncodedVideo]):
        if not videos:
            raise ValueError("empty corpus")
        self.ids = [v.video_id for v in videos]
        self.clip_durations = np.array([v.clip_duration for v in videos])
        order = sorted(range(len(videos)), key=lambda i: self.ids[i])
        self.id_rank = np.empty(len(videos), dtype=np.int64)
        self.id_rank[order] = np.arange(len(videos))
        self.groups = []
        self.group_of = np.zeros(len(videos), dtype=np.int64)
        self.pos_in_group = np.zeros(len(videos), dtype=np.int64)
        by_len: dict[int, list[int]] = {}
        for i, v in enumerate(videos):
            by_len.setdefault(v.n_clips, []).append(i)
        for g, (l, members) in enumerate(sorted(by_len.items())):
            members = np.array(members)
            hv0 = np.stack([videos[i].H_v0 for i in members])
            hs0 = np.stack([videos[i].H_s0 for i in members])
            self.groups.append(dict(
                l=l, members=members,
                hv0n=hv0 / np.maximum(np.linalg.norm(hv0, axis=-1, keepdims=True), NORM_EPS),
                hs0n=hs0 / np.maximum(np.linalg.norm(hs0, axis=-1, keepdims=True), NORM_EPS),
                hv1=np.stack([videos[i].H_v1 for i in members]),
                hs1=np.stack([videos[i].H_s1 for i in members]),
            ))
            self.group_of[members] = g
            self.pos_in_group[members] = np.arange(len(members))
        self._videos = list(videos)

    def __len__(self) -> int:
        return len(self.ids)

    def video(self, i: int) -> EncodedVideo:
        return self._videos[i]

    def vr_scores(self, q_v: np.ndarray, q_s: np.ndarray) -> np.ndarray:
        """VR scores for a batch of queries: ``q_v``, ``q_s`` are (Q, d); returns (n_videos, Q)."""
        qv = q_v / np.maximum(np.linalg.norm(q_v, axis=-1, keepdims=True), NORM_EPS)
        qs = q_s / np.maximum(np.linalg.norm(q_s, axis=-1, keepdims=True), NORM_EPS)
        out = np.empty((len(self), qv.shape[0]))
        for grp in self.groups:
            n, l, d = grp["hv0n"].shape
            cv = (grp["hv0n"].reshape(n * l, d) @ qv.T).reshape(n, l, -1).max(axis=1)
            cs = (grp["hs0n"].reshape(n * l, d) @ qs.T).reshape(n, l, -1).max(axis=1)
            out[grp["members"]] = 0.5 * (cv + cs)
        return out

    def clip_scores(self, members: np.ndarray, eq: EncodedQuery):
        """Query-clip score curves for ``members``, grouped by length: yields (indices, (n, l) scores)."""
        gids = self.group_of[members]
        for g in np.unique(gids):
            sel = members[gids == g]
            grp = self.groups[g]
            pos = self.pos_in_group[sel]
            yield sel, 0.5 * (grp["hv1"][pos] @ eq.q_v + grp["hs1"][pos] @ eq.q_s)


def _as_corpus(corpus) -> EncodedCorpus:
    return corpus if isinstance(corpus, EncodedCorpus) else EncodedCorpus(corpus)


def shortlist(vr: np.ndarray, id_rank: np.ndarray, top_videos: int) -> np.ndarray:
    return _top_order(vr, (id_rank,), min(top_videos, len(vr)))


def _rank_moments(corpus: EncodedCorpus, vids, sts, eds, scores, k) -> list[MomentPrediction]:
    order = _top_order(scores, (corpus.id_rank[vids], sts, eds), k)
    return [MomentPrediction(corpus.ids[vids[i]], int(sts[i]), int(eds[i]), float(scores[i])) for i in order]


def _moments_for_query(corpus: EncodedCorpus, eq: EncodedQuery, vr: np.ndarray, kernels,
                       cfg: RetrievalConfig, generator: str) -> list[MomentPrediction]:
    short = shortlist(vr, corpus.id_rank, cfg.top_videos)
    vids, sts, eds, scores = [], [], [], []
    for sel, curves in corpus.clip_scores(short, eq):
        l = curves.shape[1]
        if generator == "convse":
            if l < cfg.L_min:
                warnings.warn(f"videos with {l} clips < L_min={cfg.L_min}; skipped", ShortVideoWarning)
                continue
            sig = convse_probs(curves, *kernels)
            st, ed = span_candidates(l, cfg.L_min, cfg.L_max)
            agg = _aggregate_vec(sig.p_st[:, st] * sig.p_ed[:, ed], vr[sel][:, None], cfg.alpha)
            vids.append(np.repeat(sel, len(st)))
            sts.append(np.tile(st, len(sel)))
            eds.append(np.tile(ed, len(sel)))
            scores.append(agg.reshape(-1))
        else:
            for row, v in zip(curves, sel):
                spans = video_moments(row, kernels, cfg, generator)
                if not spans:
                    continue
                s = np.array(spans, dtype=np.float64)
                vids.append(np.full(len(spans), v))
                sts.append(s[:, 0].astype(np.int64))
                eds.append(s[:, 1].astype(np.int64))
                scores.append(_aggregate_vec(s[:, 2], np.full(len(spans), vr[v]), cfg.alpha))
    if not vids:
        return []
    return _rank_moments(corpus, np.concatenate(vids), np.concatenate(sts), np.concatenate(eds),
                         np.concatenate(scores), cfg.top_k_moments)


def retrieve_batch(corpus, queries: Sequence[EncodedQuery], kernels, cfg: RetrievalConfig,
                   generator: str = "convse", query_chunk: int = 128) -> list[list[MomentPrediction]]:
    """Late-fusion VCMR for many queries; VR scores are computed in one matmul per chunk."""
    corpus = _as_corpus(corpus)
    results = []
    for s in range(0, len(queries), query_chunk):
        chunk = queries[s:s + query_chunk]
        vr = corpus.vr_scores(np.stack([q.q_v for q in chunk]), np.stack([q.q_s for q in chunk]))
        for j, eq in enumerate(chunk):
            results.append(_moments_for_query(corpus, eq, vr[:, j], kernels, cfg, generator))
    return results


def retrieve_corpus(corpus, eq: EncodedQuery, kernels, cfg: RetrievalConfig,
                    generator: str = "convse") -> list[MomentPrediction]:
    """Shortlist ``cfg.top_videos`` videos by VR score, then rank their moments by the aggregated score."""
    return retrieve_batch(corpus, [eq], kernels, cfg, generator)[0]


def retrieve_exhaustive(corpus: Sequence[EncodedVideo], eq: EncodedQuery, kernels,
                        cfg: RetrievalConfig, generator: str = "convse") -> list[MomentPrediction]:
    """Reference mode: every video, every valid span, scalar aggregation, one global sort."""
    preds = []
    for ev in corpus:
        s_vr = vr_score(ev, eq)
        for st, ed, s in video_moments(query_clip_scores(ev, eq), kernels, cfg, generator, k=None):
            preds.append(MomentPrediction(ev.video_id, st, ed, vcmr_aggregate(s, s_vr, cfg.alpha)))
    preds.sort(key=MomentPrediction.sort_key)
    return preds[:cfg.top_k_moments]


# ---------------------------------------------------------------- early fusion baseline

class EarlyFusionModel:
    """Per-pair recurrent scorer over fused clip and pooled-query features.

    Stand-in for query-dependent context encoders: nothing about a video can
    be cached except its input projection, so every (query, video) pair runs
    ``l`` recurrent steps of width ``d``.
    """

    def __init__(self, rng, d_clip: int, d_q: int, d: int = 128):
        from .numkit import rng_gaussian

        def gauss(*shape, std):
            return rng_gaussian(rng, int(np.prod(shape))).reshape(shape) * std

        self.d = d
        self.w_clip = gauss(d_clip, d, std=1 / math.sqrt(d_clip))
        self.w_q = gauss(d_q, d, std=1 / math.sqrt(d_q))
        self.b = np.zeros(d)
        self.u = gauss(d, d, std=1 / math.sqrt(d))
        self.v_st = gauss(d, std=1 / math.sqrt(d))
        self.v_ed = gauss(d, std=1 / math.sqrt(d))

    def prepare(self, videos) -> dict:
        """Query-independent part: stacked clip projections grouped by length."""
        groups: dict[int, list[int]] = {}
        for i, v in enumerate(videos):
            groups.setdefault(v.n_clips, []).append(i)
        ids = [v.video_id for v in videos]
        order = sorted(range(len(ids)), key=lambda i: ids[i])
        id_rank = np.empty(len(ids), dtype=np.int64)
        id_rank[order] = np.arange(len(ids))
        out = []
        for l, members in sorted(groups.items()):
            feats = np.stack([np.hstack([videos[i].video_feats, videos[i].sub_feats]) for i in members])
            out.append((np.array(members), feats @ self.w_clip))
        return dict(ids=ids, id_rank=id_rank, groups=out)

    def start_end_probs(self, clip_proj: np.ndarray, pooled_q: np.ndarray):
        x = np.tanh(clip_proj + pooled_q @ self.w_q + self.b)
        n, l, d = x.shape
        h = np.zeros((n, d))
        hs = np.empty((n, l, d))
        for t in range(l):
            h = np.tanh(x[:, t] + h @ self.u)
            hs[:, t] = h
        return softmax(hs @ self.v_st, axis=-1), softmax(hs @ self.v_ed, axis=-1)


def early_fusion_baseline(prepared: dict, query_tokens: np.ndarray, model: EarlyFusionModel,
                          cfg: RetrievalConfig) -> list[MomentPrediction]:
    """Score every (query, video) pair jointly; global top-k by p_st * p_ed."""
    pooled = np.asarray(query_tokens, dtype=np.float64).mean(axis=0)
    ids, id_rank = prepared["ids"], prepared["id_rank"]
    vids, sts, eds, scores = [], [], [], []
    for members, proj in prepared["groups"]:
        l = proj.shape[1]
        if l < cfg.L_min:
            continue
        p_st, p_ed = model.start_end_probs(proj, pooled)
        st, ed = span_candidates(l, cfg.L_min, cfg.L_max)
        sc = p_st[:, st] * p_ed[:, ed]
        vids.append(np.repeat(members, len(st)))
        sts.append(np.tile(st, len(members)))
        eds.append(np.tile(ed, len(members)))
        scores.append(sc.reshape(-1))
    if not vids:
        return []
    vids, sts, eds, scores = map(np.concatenate, (vids, sts, eds, scores))
    order = _top_order(scores, (id_rank[vids], sts, eds), cfg.top_k_moments)
    return [MomentPrediction(ids[vids[i]], int(sts[i]), int(eds[i]), float(scores[i])) for i in order]


# ---------------------------------------------------------------- prediction files

def prediction_record(query_id: int, preds: Sequence[MomentPrediction], clip_duration) -> dict:
    """JSONL row; ``clip_duration`` is a float or a mapping video_id -> seconds."""
    dur = (lambda vid: clip_duration[vid]) if isinstance(clip_duration, dict) else (lambda vid: clip_duration)
    return {
        "query_id": int(query_id),
        "predictions": [[p.video_id, p.t_st, p.t_ed, p.score] for p in preds],
        "predictions_s": [[p.video_id, p.t_st * dur(p.video_id), (p.t_ed + 1) * dur(p.video_id), p.score]
                          for p in preds],
    }


def write_predictions(path, records: Sequence[dict]) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for rec in records:
            fh.write(json.dumps(rec, separators=(",", ":")) + "\n")


def read_predictions(path) -> dict[int, list[MomentPrediction]]:
    out = {}
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            if line.strip():
                rec = json.loads(line)
                out[int(rec["query_id"])] = [MomentPrediction(str(v), int(s), int(e), float(sc))
                                             for v, s, e, sc in rec["predictions"]]
    return out
