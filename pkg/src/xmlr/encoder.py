"""XML backbone forward pass.

Inputs are projected (linear + ReLU) into a hidden size ``d`` and a learned
positional table is added. Queries go through one Self-Encoder and are then
pooled into a video-facing and a subtitle-facing vector. Videos and
subtitles each go through a Self-Encoder and then a Cross-Encoder that
attends to the other modality.

All blocks accept arrays shaped ``(..., n, d)`` so equal-length videos can
be encoded as one stacked batch. The ``*_fwd`` functions also return the
intermediate values that :mod:`xmlr.trainkit` needs for backpropagation.
"""
from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Optional

import numpy as np

from .numkit import Rng, rng_gaussian, softmax

LN_EPS = 1e-5
INIT_STD = 0.02
CKPT_MAGIC = b"XMLP"
CKPT_VERSION = 1

_ATTN_KEYS = ("wq", "wk", "wv", "wo", "bo", "ln_g", "ln_b")
SELF_BLOCKS = ("self_q", "self_v", "self_s", "cross_v.inner", "cross_s.inner")
CROSS_BLOCKS = ("cross_v", "cross_s")


class CheckpointError(Exception):
    pass


class ModelParams:
    """Named float64 tensors for the whole model.

    Iteration order of :attr:`tensors` is fixed at construction and is the
    order used for initialisation, checkpoints and optimizer state.
    """

    def __init__(self, tensors: dict[str, np.ndarray]):
        self.tensors = tensors

    @classmethod
    def init(cls, rng: Rng, d_v: int, d_s: int, d_q: int, d: int = 128,
             kernel_size: int = 5, max_len: int = 256) -> "ModelParams":
        if kernel_size % 2 == 0:
            raise ValueError("kernel_size must be odd")
        t: dict[str, np.ndarray] = {}

        def gauss(*shape):
            return rng_gaussian(rng, int(np.prod(shape))).reshape(shape) * INIT_STD

        for name, raw in (("proj_v", d_v), ("proj_s", d_s), ("proj_q", d_q)):
            t[f"{name}.w"] = gauss(raw, d)
            t[f"{name}.b"] = np.zeros(d)
        t["pos_enc"] = gauss(max_len, d)
        for block in SELF_BLOCKS[:3] + ("cross_v", "cross_v.inner", "cross_s", "cross_s.inner"):
            for key in ("wq", "wk", "wv", "wo"):
                t[f"{block}.{key}"] = gauss(d, d)
            t[f"{block}.bo"] = np.zeros(d)
            t[f"{block}.ln_g"] = np.ones(d)
            t[f"{block}.ln_b"] = np.zeros(d)
        t["w_v"] = gauss(d)
        t["w_s"] = gauss(d)
        t["k_st"] = gauss(kernel_size)
        t["k_ed"] = gauss(kernel_size)
        return cls(t)

    def __getitem__(self, name: str) -> np.ndarray:
        return self.tensors[name]

    def __setitem__(self, name: str, value: np.ndarray) -> None:
        self.tensors[name] = value

    def __iter__(self):
        return iter(self.tensors)

    def items(self):
        return self.tensors.items()

    @property
    def d(self) -> int:
        return self.tensors["pos_enc"].shape[1]

    @property
    def max_len(self) -> int:
        return self.tensors["pos_enc"].shape[0]

    @property
    def kernel_size(self) -> int:
        return self.tensors["k_st"].shape[0]

    @property
    def raw_dims(self) -> tuple[int, int, int]:
        return tuple(self.tensors[f"proj_{m}.w"].shape[0] for m in "vsq")

    def block(self, prefix: str) -> dict[str, np.ndarray]:
        return {k: self.tensors[f"{prefix}.{k}"] for k in _ATTN_KEYS}

    def copy(self) -> "ModelParams":
        return ModelParams({k: v.copy() for k, v in self.tensors.items()})

    def zeros_like(self) -> dict[str, np.ndarray]:
        return {k: np.zeros_like(v) for k, v in self.tensors.items()}

    def n_params(self) -> int:
        return sum(v.size for v in self.tensors.values())


def save_checkpoint(params: ModelParams, path) -> None:
    """``XMLP`` | u32 version | u32 d | u32 k | tensor table until EOF."""
    with open(path, "wb") as fh:
        fh.write(CKPT_MAGIC + struct.pack("<III", CKPT_VERSION, params.d, params.kernel_size))
        for name, arr in params.items():
            raw = name.encode("utf-8")
            fh.write(struct.pack("<H", len(raw)) + raw)
            fh.write(struct.pack("<B", arr.ndim) + struct.pack(f"<{arr.ndim}I", *arr.shape))
            fh.write(np.ascontiguousarray(arr, dtype="<f8").tobytes())


def load_checkpoint(path) -> ModelParams:
    path = Path(path)
    buf = path.read_bytes()
    if buf[:4] != CKPT_MAGIC:
        raise CheckpointError(f"{path}: bad magic")
    version, d, k = struct.unpack_from("<III", buf, 4)
    if version != CKPT_VERSION:
        raise CheckpointError(f"{path}: unsupported version {version}")
    off = 16
    tensors = {}
    try:
        while off < len(buf):
            (n,) = struct.unpack_from("<H", buf, off)
            name = buf[off + 2:off + 2 + n].decode("utf-8")
            off += 2 + n
            rank = buf[off]
            shape = struct.unpack_from(f"<{rank}I", buf, off + 1)
            off += 1 + 4 * rank
            count = int(np.prod(shape)) if rank else 1
            if off + 8 * count > len(buf):
                raise CheckpointError(f"{path}: truncated tensor {name}")
            tensors[name] = np.frombuffer(buf, dtype="<f8", count=count, offset=off).reshape(shape).copy()
            off += 8 * count
    except struct.error as exc:
        raise CheckpointError(f"{path}: truncated ({exc})") from None
    params = ModelParams(tensors)
    if params.d != d or params.kernel_size != k:
        raise CheckpointError(f"{path}: header d={d}, k={k} disagrees with tensors")
    return params


@dataclass
class EncodedVideo:
    video_id: str
    H_v0: np.ndarray
    H_s0: np.ndarray
    H_v1: np.ndarray
    H_s1: np.ndarray
    clip_duration: float = 1.5

    @property
    def n_clips(self) -> int:
        return self.H_v0.shape[0]


@dataclass
class EncodedQuery:
    H_q: np.ndarray
    q_v: np.ndarray
    q_s: np.ndarray
    attn_v: np.ndarray
    attn_s: np.ndarray


# ---------------------------------------------------------------- blocks

def _t(x):
    return np.swapaxes(x, -1, -2)


def project_fwd(raw, w, b, pos_enc):
    n = raw.shape[-2]
    if n > pos_enc.shape[0]:
        raise ValueError(f"sequence length {n} exceeds positional table max_len={pos_enc.shape[0]}")
    if raw.shape[-1] != w.shape[0]:
        raise ValueError(f"raw feature dim {raw.shape[-1]} != projection input dim {w.shape[0]}")
    z = raw @ w + b
    out = np.maximum(z, 0.0) + pos_enc[:n]
    return out, (raw, z)


def project_inputs(raw: np.ndarray, proj: tuple[np.ndarray, np.ndarray], pos_enc: np.ndarray) -> np.ndarray:
    """Row-wise linear + ReLU, then the positional row for each position."""
    return project_fwd(np.asarray(raw, dtype=np.float64), proj[0], proj[1], pos_enc)[0]


def layer_norm_fwd(r, g, b):
    mu = r.mean(axis=-1, keepdims=True)
    xc = r - mu
    inv = 1.0 / np.sqrt((xc * xc).mean(axis=-1, keepdims=True) + LN_EPS)
    xhat = xc * inv
    return g * xhat + b, (xhat, inv)


def attention_fwd(x, ctx, p):
    """Single-head attention from ``x`` over ``ctx``, linear, residual, layer norm."""
    if x.shape[-2] == 0 or ctx.shape[-2] == 0:
        raise ValueError("attention over an empty sequence")
    d = x.shape[-1]
    if d != p["wq"].shape[0]:
        raise ValueError(f"hidden size {d} != parameter size {p['wq'].shape[0]}")
    q = x @ p["wq"]
    k = ctx @ p["wk"]
    v = ctx @ p["wv"]
    attn = softmax(q @ _t(k) / np.sqrt(d), axis=-1)
    mixed = attn @ v
    r = x + mixed @ p["wo"] + p["bo"]
    y, ln = layer_norm_fwd(r, p["ln_g"], p["ln_b"])
    return y, dict(x=x, ctx=ctx, q=q, k=k, v=v, attn=attn, mixed=mixed, ln=ln)


def self_encoder_fwd(x, p):
    return attention_fwd(x, x, p)


def cross_encoder_fwd(x, ctx, p_cross, p_inner):
    z, c1 = attention_fwd(x, ctx, p_cross)
    y, c2 = self_encoder_fwd(z, p_inner)
    return y, (c1, c2)


def self_encoder(x: np.ndarray, params: dict[str, np.ndarray]) -> np.ndarray:
    """Self-attention, linear, residual add, layer norm. ``params`` is one block (see ``ModelParams.block``)."""
    return self_encoder_fwd(np.asarray(x, dtype=np.float64), params)[0]


def cross_encoder(x_self: np.ndarray, x_cross: np.ndarray, params: dict[str, np.ndarray],
                  inner: dict[str, np.ndarray]) -> np.ndarray:
    return cross_encoder_fwd(np.asarray(x_self, dtype=np.float64), np.asarray(x_cross, dtype=np.float64),
                             params, inner)[0]


def modular_fwd(h, w):
    attn = softmax(h @ w, axis=-1)
    return (attn[..., None] * h).sum(axis=-2), attn


def modular_query(h_q: np.ndarray, w_v: np.ndarray, w_s: np.ndarray) -> EncodedQuery:
    """Pool query rows into one vector per modality with softmax(h_r . w_m) weights."""
    q_v, a_v = modular_fwd(h_q, w_v)
    q_s, a_s = modular_fwd(h_q, w_s)
    return EncodedQuery(h_q, q_v, q_s, a_v, a_s)


# ---------------------------------------------------------------- compositions

def context_fwd(video_feats, sub_feats, params: ModelParams):
    """Encode one video or a stack of equal-length videos; returns the four outputs and a cache."""
    pe = params["pos_enc"]
    ev, cpv = project_fwd(video_feats, params["proj_v.w"], params["proj_v.b"], pe)
    es, cps = project_fwd(sub_feats, params["proj_s.w"], params["proj_s.b"], pe)
    hv0, csv = self_encoder_fwd(ev, params.block("self_v"))
    hs0, css = self_encoder_fwd(es, params.block("self_s"))
    hv1, ccv = cross_encoder_fwd(hv0, hs0, params.block("cross_v"), params.block("cross_v.inner"))
    hs1, ccs = cross_encoder_fwd(hs0, hv0, params.block("cross_s"), params.block("cross_s.inner"))
    cache = dict(proj_v=cpv, proj_s=cps, self_v=csv, self_s=css, cross_v=ccv, cross_s=ccs)
    return (hv0, hs0, hv1, hs1), cache


def query_fwd(tokens, params: ModelParams):
    eq, cp = project_fwd(tokens, params["proj_q.w"], params["proj_q.b"], params["pos_enc"])
    hq, cs = self_encoder_fwd(eq, params.block("self_q"))
    q_v, a_v = modular_fwd(hq, params["w_v"])
    q_s, a_s = modular_fwd(hq, params["w_s"])
    return (hq, q_v, q_s, a_v, a_s), dict(proj_q=cp, self_q=cs)


def encode_context(ctx, params: ModelParams) -> EncodedVideo:
    (hv0, hs0, hv1, hs1), _ = context_fwd(ctx.video_feats, ctx.sub_feats, params)
    return EncodedVideo(ctx.video_id, hv0, hs0, hv1, hs1, ctx.clip_duration)


def encode_query(tokens: np.ndarray, params: ModelParams) -> EncodedQuery:
    (hq, q_v, q_s, a_v, a_s), _ = query_fwd(np.asarray(tokens, dtype=np.float64), params)
    return EncodedQuery(hq, q_v, q_s, a_v, a_s)


def encode_corpus(videos, params: ModelParams, chunk: int = 512) -> list[EncodedVideo]:
    """Encode many contexts, stacking equal-length videos into batches of ``chunk``."""
    out: list[Optional[EncodedVideo]] = [None] * len(videos)
    groups: dict[int, list[int]] = {}
    for i, v in enumerate(videos):
        groups.setdefault(v.n_clips, []).append(i)
    for _, idx in sorted(groups.items()):
        for s in range(0, len(idx), chunk):
            part = idx[s:s + chunk]
            vf = np.stack([videos[i].video_feats for i in part])
            sf = np.stack([videos[i].sub_feats for i in part])
            (hv0, hs0, hv1, hs1), _ = context_fwd(vf, sf, params)
            for j, i in enumerate(part):
                v = videos[i]
                out[i] = EncodedVideo(v.video_id, hv0[j], hs0[j], hv1[j], hs1[j], v.clip_duration)
    return out
