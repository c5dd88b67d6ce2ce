"""Losses, hand-derived gradients, Adam and the training loops.

Backpropagation is written out for the fixed architecture in
:mod:`xmlr.encoder`; :func:`finite_difference_check` is the authority on
whether it is right.
"""
from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np

from . import encoder as enc
from . import scorer
from .evalkit import temporal_iou
from .featstore import ClipContext, CorpusManifest, QueryRecord
from .numkit import Rng, conv1d_same, conv1d_same_backward, rng_gaussian, softmax

PROB_FLOOR = 1e-12
COS_EPS = 1e-12


@dataclass
class TrainConfig:
    margin_delta: float = 0.1
    lambda_svmr: float = 0.01
    lr: float = 1e-3
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8
    epochs: int = 10
    seed: int = 0
    batch_size: int = 32
    max_steps: Optional[int] = None
    svmr_loss: str = "ce"  # "ce" over ConvSE probabilities, or "bce" per clip

    def __post_init__(self):
        if self.margin_delta <= 0:
            raise ValueError("margin_delta must be positive")
        if self.lambda_svmr < 0:
            raise ValueError("lambda_svmr must be non-negative")
        if self.svmr_loss not in ("ce", "bce"):
            raise ValueError(f"svmr_loss must be 'ce' or 'bce', got {self.svmr_loss!r}")


@dataclass
class GradientTape:
    grads: dict[str, np.ndarray]
    l_vr: float = 0.0
    l_svmr: float = 0.0

    def __getitem__(self, name):
        return self.grads[name]


# ---------------------------------------------------------------- losses

def vr_hinge_loss(s_pos, s_neg_video, s_neg_query, delta: float) -> float:
    """Two-sided hinge; array inputs are averaged over the batch."""
    if delta <= 0:
        raise ValueError("delta must be positive")
    s_pos, s_nv, s_nq = (np.asarray(x, dtype=np.float64) for x in (s_pos, s_neg_video, s_neg_query))
    per = np.maximum(0.0, delta + s_nv - s_pos) + np.maximum(0.0, delta + s_nq - s_pos)
    return float(per.mean())


def svmr_ce_loss(p_st: np.ndarray, p_ed: np.ndarray, t_st: int, t_ed: int) -> float:
    l = len(p_st)
    if not (0 <= t_st < l and 0 <= t_ed < len(p_ed)):
        raise IndexError(f"span ({t_st}, {t_ed}) outside 0..{l - 1}")
    return -(math.log(max(p_st[t_st], PROB_FLOOR)) + math.log(max(p_ed[t_ed], PROB_FLOOR)))


def clip_labels(l: int, span: tuple[int, int]) -> np.ndarray:
    st, ed = span
    if not 0 <= st <= ed < l:
        raise ValueError(f"span {span} invalid for {l} clips")
    y = np.zeros(l)
    y[st:ed + 1] = 1.0
    return y


def bce_clip_loss(scores: np.ndarray, gt_span: tuple[int, int]) -> float:
    """Mean sigmoid binary cross-entropy against in-span clip labels."""
    scores = np.asarray(scores, dtype=np.float64)
    y = clip_labels(len(scores), gt_span)
    # log(1 + e^x) - y x, stable for large |x|
    return float((np.logaddexp(0.0, scores) - y * scores).mean())


# ---------------------------------------------------------------- backward blocks

def _flat(a):
    return a.reshape(-1, a.shape[-1])


def _t(a):
    return np.swapaxes(a, -1, -2)


def layer_norm_bwd(dy, g, cache):
    xhat, inv = cache
    dg = (_flat(dy) * _flat(xhat)).sum(axis=0)
    db = _flat(dy).sum(axis=0)
    dxh = dy * g
    dr = inv * (dxh - dxh.mean(axis=-1, keepdims=True) - xhat * (dxh * xhat).mean(axis=-1, keepdims=True))
    return dr, dg, db


def attention_bwd(dy, cache, p):
    """Returns (param grads, d_x, d_ctx) for :func:`encoder.attention_fwd`."""
    d = cache["x"].shape[-1]
    dr, dg, db = layer_norm_bwd(dy, p["ln_g"], cache["ln"])
    grads = {"ln_g": dg, "ln_b": db, "bo": _flat(dr).sum(axis=0),
             "wo": _flat(cache["mixed"]).T @ _flat(dr)}
    dmixed = dr @ p["wo"].T
    attn = cache["attn"]
    dattn = dmixed @ _t(cache["v"])
    dv = _t(attn) @ dmixed
    ds = attn * (dattn - (dattn * attn).sum(axis=-1, keepdims=True)) / math.sqrt(d)
    dq = ds @ cache["k"]
    dk = _t(ds) @ cache["q"]
    grads["wq"] = _flat(cache["x"]).T @ _flat(dq)
    grads["wk"] = _flat(cache["ctx"]).T @ _flat(dk)
    grads["wv"] = _flat(cache["ctx"]).T @ _flat(dv)
    dx = dr + dq @ p["wq"].T
    dctx = dk @ p["wk"].T + dv @ p["wv"].T
    return grads, dx, dctx


def self_encoder_bwd(dy, cache, p):
    grads, dx, dctx = attention_bwd(dy, cache, p)
    return grads, dx + dctx


def cross_encoder_bwd(dy, cache, p_cross, p_inner):
    c1, c2 = cache
    g_inner, dz = self_encoder_bwd(dy, c2, p_inner)
    g_cross, dx, dctx = attention_bwd(dz, c1, p_cross)
    return g_cross, g_inner, dx, dctx


def project_bwd(dout, cache):
    raw, z = cache
    dz = dout * (z > 0)
    dpos = dout.reshape(-1, *dout.shape[-2:]).sum(axis=0)
    return _flat(raw).T @ _flat(dz), _flat(dz).sum(axis=0), dpos


def modular_bwd(dq, h, w, attn):
    dattn = (h * dq[..., None, :]).sum(axis=-1)
    ds = attn * (dattn - (attn * dattn).sum(axis=-1, keepdims=True))
    dh = attn[..., None] * dq[..., None, :] + ds[..., None] * w
    dw = _flat(ds[..., None] * h).sum(axis=0)
    return dh, dw


def _acc(grads, prefix, block_grads):
    for k, g in block_grads.items():
        grads[f"{prefix}.{k}"] += g


def _add_pos(grads, dpos):
    grads["pos_enc"][:dpos.shape[0]] += dpos


def context_bwd(grads, params: enc.ModelParams, cache, d_hv0, d_hs0, d_hv1, d_hs1):
    g_c, g_i, dx, dctx = cross_encoder_bwd(d_hs1, cache["cross_s"], params.block("cross_s"),
                                           params.block("cross_s.inner"))
    _acc(grads, "cross_s", g_c)
    _acc(grads, "cross_s.inner", g_i)
    d_hs0 = d_hs0 + dx
    d_hv0 = d_hv0 + dctx
    g_c, g_i, dx, dctx = cross_encoder_bwd(d_hv1, cache["cross_v"], params.block("cross_v"),
                                           params.block("cross_v.inner"))
    _acc(grads, "cross_v", g_c)
    _acc(grads, "cross_v.inner", g_i)
    d_hv0 = d_hv0 + dx
    d_hs0 = d_hs0 + dctx
    for m, dh in (("v", d_hv0), ("s", d_hs0)):
        g, de = self_encoder_bwd(dh, cache[f"self_{m}"], params.block(f"self_{m}"))
        _acc(grads, f"self_{m}", g)
        dw, db, dpos = project_bwd(de, cache[f"proj_{m}"])
        grads[f"proj_{m}.w"] += dw
        grads[f"proj_{m}.b"] += db
        _add_pos(grads, dpos)


def query_bwd(grads, params: enc.ModelParams, out, cache, d_qv, d_qs):
    hq, _, _, a_v, a_s = out
    dh_v, dw_v = modular_bwd(d_qv, hq, params["w_v"], a_v)
    dh_s, dw_s = modular_bwd(d_qs, hq, params["w_s"], a_s)
    grads["w_v"] += dw_v
    grads["w_s"] += dw_s
    g, de = self_encoder_bwd(dh_v + dh_s, cache["self_q"], params.block("self_q"))
    _acc(grads, "self_q", g)
    dw, db, dpos = project_bwd(de, cache["proj_q"])
    grads["proj_q.w"] += dw
    grads["proj_q.b"] += db
    _add_pos(grads, dpos)


def _cos_fwd_bwd(h, q):
    """Best clip cosine, its row index, and gradient factors w.r.t. that row and q."""
    nh = np.linalg.norm(h, axis=-1)
    nq = np.linalg.norm(q)
    dh_ = np.maximum(nh, COS_EPS)
    dq_ = max(nq, COS_EPS)
    cos = (h @ q) / (dh_ * dq_)
    r = int(np.argmax(cos))
    c = cos[r]
    g_h = q / (dh_[r] * dq_)
    if nh[r] > COS_EPS:
        g_h = g_h - c * h[r] / (dh_[r] ** 2)
    g_q = h[r] / (dh_[r] * dq_)
    if nq > COS_EPS:
        g_q = g_q - c * q / (dq_ ** 2)
    return float(c), r, g_h, g_q


# ---------------------------------------------------------------- batches and combined loss

@dataclass
class Example:
    query: int       # index into Batch.queries
    video: int       # ground-truth video, index into Batch.videos
    neg_video: int
    neg_query: int
    span: tuple[int, int]


@dataclass
class Batch:
    videos: list[ClipContext]
    queries: list[np.ndarray]
    examples: list[Example]


def _group_by_shape(arrays):
    groups: dict[tuple, list[int]] = {}
    for i, a in enumerate(arrays):
        groups.setdefault(a.shape, []).append(i)
    return list(groups.values())


def combined_loss(batch: Batch, params: enc.ModelParams, cfg: TrainConfig) -> tuple[float, GradientTape]:
    """Total loss ``L_vr + lambda * L_svmr`` and exact gradients for every parameter."""
    if not batch.examples:
        raise ValueError("empty batch")
    n = len(batch.examples)
    grads = params.zeros_like()

    # forward: contexts and queries, stacked by shape
    v_out, v_cache = [None] * len(batch.videos), []
    v_groups = _group_by_shape([v.video_feats for v in batch.videos])
    for members in v_groups:
        vf = np.stack([batch.videos[i].video_feats for i in members])
        sf = np.stack([batch.videos[i].sub_feats for i in members])
        outs, cache = enc.context_fwd(vf, sf, params)
        v_cache.append(cache)
        for j, i in enumerate(members):
            v_out[i] = tuple(o[j] for o in outs)
    q_out, q_cache = [None] * len(batch.queries), []
    q_groups = _group_by_shape(batch.queries)
    for members in q_groups:
        outs, cache = enc.query_fwd(np.stack([batch.queries[i] for i in members]), params)
        q_cache.append((outs, cache))
        for j, i in enumerate(members):
            q_out[i] = tuple(o[j] for o in outs)

    dv = [[np.zeros_like(h) for h in out] for out in v_out]  # dHv0, dHs0, dHv1, dHs1
    dq = [[np.zeros_like(out[1]), np.zeros_like(out[2])] for out in q_out]  # dq_v, dq_s

    def vr(qi, vi, weight):
        _, q_v, q_s, _, _ = q_out[qi]
        hv0, hs0 = v_out[vi][0], v_out[vi][1]
        cv, rv, ghv, gqv = _cos_fwd_bwd(hv0, q_v)
        cs, rs, ghs, gqs = _cos_fwd_bwd(hs0, q_s)
        if weight:
            w = 0.5 * weight
            dv[vi][0][rv] += w * ghv
            dv[vi][1][rs] += w * ghs
            dq[qi][0] += w * gqv
            dq[qi][1] += w * gqs
        return 0.5 * (cv + cs)

    l_vr = 0.0
    l_svmr = 0.0
    k_st, k_ed = params["k_st"], params["k_ed"]
    for ex in batch.examples:
        s_pos = vr(ex.query, ex.video, 0.0)
        s_nv = vr(ex.query, ex.neg_video, 0.0)
        s_nq = vr(ex.neg_query, ex.video, 0.0)
        m1 = cfg.margin_delta + s_nv - s_pos
        m2 = cfg.margin_delta + s_nq - s_pos
        l_vr += max(m1, 0.0) + max(m2, 0.0)
        # second pass only to deposit gradients for active hinge terms
        if m1 > 0:
            vr(ex.query, ex.neg_video, 1.0 / n)
            vr(ex.query, ex.video, -1.0 / n)
        if m2 > 0:
            vr(ex.neg_query, ex.video, 1.0 / n)
            vr(ex.query, ex.video, -1.0 / n)

        _, q_v, q_s, _, _ = q_out[ex.query]
        _, _, hv1, hs1 = v_out[ex.video]
        scores = 0.5 * (hv1 @ q_v + hs1 @ q_s)
        coef = cfg.lambda_svmr / n
        if cfg.svmr_loss == "ce":
            st, ed = ex.span
            s_st = conv1d_same(scores, k_st, allow_short=True)
            s_ed = conv1d_same(scores, k_ed, allow_short=True)
            p_st, p_ed = softmax(s_st), softmax(s_ed)
            l_svmr += svmr_ce_loss(p_st, p_ed, st, ed)
            g_st = p_st.copy()
            g_ed = p_ed.copy()
            if p_st[st] >= PROB_FLOOR:
                g_st[st] -= 1.0
            else:
                g_st[:] = 0.0
            if p_ed[ed] >= PROB_FLOOR:
                g_ed[ed] -= 1.0
            else:
                g_ed[:] = 0.0
            d_sc1, d_kst = conv1d_same_backward(scores, k_st, coef * g_st)
            d_sc2, d_ked = conv1d_same_backward(scores, k_ed, coef * g_ed)
            grads["k_st"] += d_kst
            grads["k_ed"] += d_ked
            d_scores = d_sc1 + d_sc2
        else:
            l_svmr += bce_clip_loss(scores, ex.span)
            sig = 0.5 * (1.0 + np.tanh(0.5 * scores))
            d_scores = coef * (sig - clip_labels(len(scores), ex.span)) / len(scores)
        dv[ex.video][2] += 0.5 * np.outer(d_scores, q_v)
        dv[ex.video][3] += 0.5 * np.outer(d_scores, q_s)
        dq[ex.query][0] += 0.5 * hv1.T @ d_scores
        dq[ex.query][1] += 0.5 * hs1.T @ d_scores

    l_vr /= n
    l_svmr /= n
    total = l_vr + cfg.lambda_svmr * l_svmr

    # backward through encoders, group by group
    for members, cache in zip(v_groups, v_cache):
        stacked = [np.stack([dv[i][t] for i in members]) for t in range(4)]
        context_bwd(grads, params, cache, *stacked)
    for members, (outs, cache) in zip(q_groups, q_cache):
        context = np.stack([dq[i][0] for i in members]), np.stack([dq[i][1] for i in members])
        query_bwd(grads, params, outs, cache, *context)
    return total, GradientTape(grads, l_vr, l_svmr)


def loss_only(batch: Batch, params: enc.ModelParams, cfg: TrainConfig) -> float:
    return combined_loss(batch, params, cfg)[0]


def finite_difference_check(batch: Batch, params: enc.ModelParams, cfg: TrainConfig,
                            h: float = 1e-5, names: Optional[Sequence[str]] = None,
                            floor: float = 1e-6) -> dict[str, float]:
    """Per-tensor relative error of analytic vs central-difference gradients.

    Error is ``max|analytic - numeric| / max(max|analytic|, max|numeric|, floor)``;
    the floor keeps tensors whose true gradient is zero from dividing noise by noise.
    """
    _, tape = combined_loss(batch, params, cfg)
    errors = {}
    for name in names or list(params):
        arr = params[name]
        numeric = np.zeros_like(arr)
        flat = arr.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + h
            up = combined_loss(batch, params, cfg)[0]
            flat[i] = orig - h
            down = combined_loss(batch, params, cfg)[0]
            flat[i] = orig
            numeric.reshape(-1)[i] = (up - down) / (2 * h)
        analytic = tape.grads[name]
        scale = max(np.abs(analytic).max(), np.abs(numeric).max(), floor)
        errors[name] = float(np.abs(analytic - numeric).max() / scale)
    return errors


# ---------------------------------------------------------------- sampling and optimisation

def _other_index(rng: Rng, idx: np.ndarray, n: int) -> np.ndarray:
    r = rng.integers(0, n - 1, len(idx))
    return r + (r >= idx)


def sample_negatives(rng: Rng, batch_indices, n_corpus: int) -> tuple[np.ndarray, np.ndarray]:
    """For each index i draw j != i and z != i uniformly from range(n_corpus)."""
    if n_corpus < 2:
        raise ValueError("negative sampling needs at least 2 items")
    idx = np.asarray(batch_indices, dtype=np.int64)
    return _other_index(rng, idx, n_corpus), _other_index(rng, idx, n_corpus)


@dataclass
class AdamState:
    m: dict[str, np.ndarray]
    v: dict[str, np.ndarray]
    t: int = 0

    @classmethod
    def zeros(cls, params) -> "AdamState":
        return cls({k: np.zeros_like(a) for k, a in params.items()},
                   {k: np.zeros_like(a) for k, a in params.items()})


def adam_step(params, grads, state: AdamState, cfg: TrainConfig):
    """One bias-corrected Adam update, in place on ``params``; returns (params, state)."""
    g = grads.grads if isinstance(grads, GradientTape) else grads
    state.t += 1
    b1, b2 = cfg.adam_beta1, cfg.adam_beta2
    c1 = 1.0 - b1 ** state.t
    c2 = 1.0 - b2 ** state.t
    for name in list(params):
        gr = g[name]
        state.m[name] = b1 * state.m[name] + (1 - b1) * gr
        state.v[name] = b2 * state.v[name] + (1 - b2) * gr * gr
        step = cfg.lr * (state.m[name] / c1) / (np.sqrt(state.v[name] / c2) + cfg.adam_eps)
        params[name] = params[name] - step
    return params, state


# ---------------------------------------------------------------- training loop

@dataclass
class TrainData:
    """Queries with resolved ground truth against a manifest."""
    manifest: CorpusManifest
    tokens: list[np.ndarray]
    gt_video: np.ndarray
    gt_span: np.ndarray

    @classmethod
    def from_records(cls, manifest: CorpusManifest, queries: Sequence[QueryRecord]) -> "TrainData":
        toks, vids, spans = [], [], []
        for q in queries:
            if q.gt_video_id is None or q.gt_clip_span is None:
                continue
            toks.append(q.tokens)
            vids.append(manifest.index_of(q.gt_video_id))
            spans.append(q.gt_clip_span)
        if not toks:
            raise ValueError("no queries with ground truth to train on")
        return cls(manifest, toks, np.array(vids, dtype=np.int64), np.array(spans, dtype=np.int64).reshape(-1, 2))

    def __len__(self):
        return len(self.tokens)


def make_batch(data: TrainData, query_idx: np.ndarray, rng: Rng) -> Batch:
    """Positive pairs plus one negative video and one negative query each."""
    neg_v, _ = sample_negatives(rng, data.gt_video[query_idx], len(data.manifest))
    _, neg_q = sample_negatives(rng, query_idx, len(data))
    v_slots: dict[int, int] = {}
    q_slots: dict[int, int] = {}

    def slot(table, key):
        return table.setdefault(int(key), len(table))

    examples = []
    for qi, nv, nq in zip(query_idx, neg_v, neg_q):
        examples.append(Example(slot(q_slots, qi), slot(v_slots, data.gt_video[qi]), slot(v_slots, nv),
                                slot(q_slots, nq), tuple(int(x) for x in data.gt_span[qi])))
    videos = [data.manifest.videos[k] for k in v_slots]
    queries = [data.tokens[k] for k in q_slots]
    return Batch(videos, queries, examples)


@dataclass
class TrainLog:
    rows: list[tuple[int, float, float, float]] = field(default_factory=list)

    def write_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["step", "L_vr", "L_svmr", "total"])
            for step, a, b, c in self.rows:
                w.writerow([step, repr(a), repr(b), repr(c)])


def train(data: TrainData, params: enc.ModelParams, cfg: TrainConfig,
          callback: Optional[Callable[[int, float], None]] = None) -> tuple[enc.ModelParams, TrainLog]:
    """Adam over shuffled mini-batches; stops after ``epochs`` or ``max_steps``."""
    rng = Rng(cfg.seed)
    state = AdamState.zeros(params)
    log = TrainLog()
    step = 0
    for _ in range(cfg.epochs):
        order = rng.permutation(len(data))
        for s in range(0, len(order), cfg.batch_size):
            if cfg.max_steps is not None and step >= cfg.max_steps:
                return params, log
            batch = make_batch(data, order[s:s + cfg.batch_size], rng)
            total, tape = combined_loss(batch, params, cfg)
            adam_step(params, tape, state, cfg)
            step += 1
            log.rows.append((step, tape.l_vr, tape.l_svmr, total))
            if callback:
                callback(step, total)
    return params, log


# ---------------------------------------------------------------- ConvSE demonstration

DEMO_CONFIG = TrainConfig(lr=0.05, epochs=300)


@dataclass
class ConvSEDemo:
    k_st: np.ndarray
    k_ed: np.ndarray
    final_loss: float
    signals: np.ndarray
    spans: np.ndarray
    losses: list[float]


def box_signals(rng: Rng, n_signals: int, l: int, noise: float, min_len: int = 2, max_len: int = 16):
    """Low-high-low curves: 1 inside a random span, 0 outside, plus Gaussian noise."""
    max_len = min(max_len, l)
    lengths = rng.integers(min_len, max_len + 1, n_signals)
    starts = np.floor(rng.uniform(n_signals) * (l - lengths + 1)).astype(np.int64)
    idx = np.arange(l)
    clean = ((idx >= starts[:, None]) & (idx <= (starts + lengths - 1)[:, None])).astype(np.float64)
    signals = clean + noise * rng_gaussian(rng, n_signals * l).reshape(n_signals, l)
    return signals, np.stack([starts, starts + lengths - 1], axis=1)


def convse_ce_batch(signals, spans, k_st, k_ed):
    """Mean start/end CE over a batch of curves and its gradients w.r.t. both kernels."""
    n = len(signals)
    rows = np.arange(n)
    s_st = conv1d_same(signals, k_st)
    s_ed = conv1d_same(signals, k_ed)
    p_st, p_ed = softmax(s_st, axis=-1), softmax(s_ed, axis=-1)
    loss = -(np.log(np.maximum(p_st[rows, spans[:, 0]], PROB_FLOOR))
             + np.log(np.maximum(p_ed[rows, spans[:, 1]], PROB_FLOOR))).mean()
    g_st, g_ed = p_st.copy(), p_ed.copy()
    g_st[rows, spans[:, 0]] -= 1.0
    g_ed[rows, spans[:, 1]] -= 1.0
    _, d_kst = conv1d_same_backward(signals, k_st, g_st / n)
    _, d_ked = conv1d_same_backward(signals, k_ed, g_ed / n)
    return float(loss), d_kst, d_ked


def train_convse_demo(rng: Rng, n_signals: int = 500, l: int = 30, noise: float = 0.1,
                      cfg: Optional[TrainConfig] = None, kernel_size: int = 5,
                      min_len: int = 2, max_len: int = 16) -> ConvSEDemo:
    """Learn only the two edge filters on synthetic box curves (full-batch Adam)."""
    cfg = cfg or DEMO_CONFIG
    signals, spans = box_signals(rng, n_signals, l, noise, min_len, max_len)
    kernels = {"k_st": rng_gaussian(rng, kernel_size) * enc.INIT_STD,
               "k_ed": rng_gaussian(rng, kernel_size) * enc.INIT_STD}
    state = AdamState.zeros(kernels)
    losses = []
    for _ in range(cfg.epochs):
        loss, d_kst, d_ked = convse_ce_batch(signals, spans, kernels["k_st"], kernels["k_ed"])
        losses.append(loss)
        adam_step(kernels, {"k_st": d_kst, "k_ed": d_ked}, state, cfg)
    final, _, _ = convse_ce_batch(signals, spans, kernels["k_st"], kernels["k_ed"])
    return ConvSEDemo(kernels["k_st"], kernels["k_ed"], final, signals, spans, losses)


def demo_top1_ious(demo: ConvSEDemo, cfg: Optional["scorer.RetrievalConfig"] = None) -> np.ndarray:
    """IoU between each signal's top-1 ConvSE span and its planted span (clip index units, end exclusive)."""
    cfg = cfg or scorer.RetrievalConfig()
    out = []
    for sig, (a, b) in zip(demo.signals, demo.spans):
        top = scorer.top_spans(scorer.convse_probs(sig, demo.k_st, demo.k_ed), cfg, 1)
        pred = (float(top[0][0]), float(top[0][1]) + 1) if top else (0.0, 0.0)
        out.append(temporal_iou(pred, (float(a), float(b) + 1)))
    return np.array(out)


def edge_template(kernel_size: int, rising: bool = True) -> np.ndarray:
    """Ideal step detector for an edge at the output position.

    With cross-correlation, output ``i`` sees the curve at ``i - half .. i + half``.
    A start at ``i`` puts the edge between taps ``half - 1`` and ``half``, so the
    rising template is -1 before that point and +1 from it on; the falling
    template is its time reversal (edge between ``half`` and ``half + 1``).
    """
    half = (kernel_size - 1) / 2
    j = np.arange(kernel_size)
    return np.sign(j - (half - 0.5)) if rising else np.sign((half + 0.5) - j)


def template_correlation(kernel: np.ndarray, template: np.ndarray) -> float:
    """Pearson correlation; NaN when either side is constant (e.g. k=1)."""
    if len(kernel) < 2:
        return float("nan")
    a = kernel - kernel.mean()
    b = template - template.mean()
    den = np.linalg.norm(a) * np.linalg.norm(b)
    return float(a @ b / den) if den > 0 else float("nan")
