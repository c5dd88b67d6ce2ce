"""Corpus features: binary store, JSONL ingestion, synthetic corpora, TEF.

Binary store layout (little endian)::

    "XMLF" | u32 version | u32 n_videos | u32 d_v | u32 d_s | u8 tef | 3 reserved
    per video: u16 id_len | id utf-8 | u32 l | f32 clip_duration
               | l*d_v f32 video feats | l*d_s f32 subtitle feats

Feature payloads are float32 on disk and float64 in memory.
"""
from __future__ import annotations

import enum
import json
import math
import struct
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from .numkit import Rng, rng_gaussian

MAGIC = b"XMLF"
VERSION = 1
DEFAULT_CLIP_DURATION = 1.5
_HEADER = struct.Struct("<4sIIIIB3x")
_SPAN_EPS = 1e-6


class StoreError(Exception):
    """Base class for feature-store failures."""


class BadMagicError(StoreError):
    pass


class UnsupportedVersionError(StoreError):
    pass


class TruncatedStoreError(StoreError):
    pass


class DimMismatchError(StoreError):
    pass


class IngestError(ValueError):
    def __init__(self, path, line_no: int, msg: str):
        super().__init__(f"{path} line {line_no}: {msg}")
        self.path = str(path)
        self.line_no = line_no


class QueryType(str, enum.Enum):
    VIDEO_ONLY = "video_only"
    SUB_ONLY = "sub_only"
    VIDEO_SUB = "video_sub"
    UNKNOWN = "unknown"

    @classmethod
    def from_tag(cls, tag: Optional[str]) -> "QueryType":
        return {None: cls.UNKNOWN, "v": cls.VIDEO_ONLY, "t": cls.SUB_ONLY, "vt": cls.VIDEO_SUB}[tag]

    @property
    def tag(self) -> Optional[str]:
        return {"video_only": "v", "sub_only": "t", "video_sub": "vt"}.get(self.value)


@dataclass
class ClipContext:
    video_id: str
    video_feats: np.ndarray
    sub_feats: np.ndarray
    clip_duration: float = DEFAULT_CLIP_DURATION

    def __post_init__(self):
        self.video_feats = np.asarray(self.video_feats, dtype=np.float64)
        self.sub_feats = np.asarray(self.sub_feats, dtype=np.float64)
        if self.video_feats.ndim != 2 or self.sub_feats.ndim != 2:
            raise ValueError(f"{self.video_id}: feature matrices must be 2-D")
        if self.video_feats.shape[0] != self.sub_feats.shape[0]:
            raise ValueError(
                f"{self.video_id}: video has {self.video_feats.shape[0]} clips, subtitles {self.sub_feats.shape[0]}")
        if self.video_feats.shape[0] < 1:
            raise ValueError(f"{self.video_id}: needs at least one clip")
        if not self.clip_duration > 0:
            raise ValueError(f"{self.video_id}: clip_duration must be positive")

    @property
    def n_clips(self) -> int:
        return self.video_feats.shape[0]


@dataclass
class QueryRecord:
    query_id: int
    tokens: np.ndarray
    gt_video_id: Optional[str] = None
    gt_span_s: Optional[tuple[float, float]] = None
    query_type: QueryType = QueryType.UNKNOWN
    gt_clip_span: Optional[tuple[int, int]] = None

    def __post_init__(self):
        self.tokens = np.asarray(self.tokens, dtype=np.float64)
        if self.tokens.ndim != 2 or self.tokens.shape[0] < 1:
            raise ValueError(f"query {self.query_id}: tokens must be a non-empty matrix")
        if self.gt_span_s is not None:
            st, ed = self.gt_span_s
            if not 0 <= st < ed:
                raise ValueError(f"query {self.query_id}: bad span {self.gt_span_s}")


@dataclass
class CorpusManifest:
    videos: list[ClipContext]
    d_v: int
    d_s: int
    d_q: int = 0
    tef_enabled: bool = False
    _index: dict = field(default=None, init=False, repr=False, compare=False)

    def __post_init__(self):
        seen = set()
        for v in self.videos:
            if v.video_id in seen:
                raise ValueError(f"duplicate video_id {v.video_id!r}")
            seen.add(v.video_id)
            if v.video_feats.shape[1] != self.d_v or v.sub_feats.shape[1] != self.d_s:
                raise DimMismatchError(
                    f"{v.video_id}: dims ({v.video_feats.shape[1]}, {v.sub_feats.shape[1]}) "
                    f"!= manifest ({self.d_v}, {self.d_s})")

    def __len__(self) -> int:
        return len(self.videos)

    def index_of(self, video_id: str) -> int:
        if self._index is None:
            self._index = {v.video_id: i for i, v in enumerate(self.videos)}
        return self._index[video_id]


@dataclass
class PlantedTruth:
    """Per query: index of the ground-truth video and its inclusive clip span."""
    video_index: np.ndarray
    spans: np.ndarray  # (n_queries, 2) int

    def __len__(self) -> int:
        return len(self.video_index)


def span_to_clips(span_s: tuple[float, float], clip_duration: float, n_clips: int) -> tuple[int, int]:
    """Seconds -> inclusive clip indices; the end is nudged left so exact boundaries do not spill over."""
    st_s, ed_s = span_s
    st = min(max(int(math.floor(st_s / clip_duration)), 0), n_clips - 1)
    ed = int(math.floor((ed_s - _SPAN_EPS) / clip_duration))
    ed = min(max(ed, st), n_clips - 1)
    return st, ed


def clips_to_span(st: int, ed: int, clip_duration: float) -> tuple[float, float]:
    return st * clip_duration, (ed + 1) * clip_duration


# ---------------------------------------------------------------- binary store

def store_nbytes(manifest: CorpusManifest) -> int:
    total = _HEADER.size
    for v in manifest.videos:
        total += 2 + len(v.video_id.encode("utf-8")) + 4 + 4
        total += 4 * v.n_clips * (manifest.d_v + manifest.d_s)
    return total


def write_store(manifest: CorpusManifest, path) -> None:
    path = Path(path)
    try:
        with open(path, "wb") as fh:
            fh.write(_HEADER.pack(MAGIC, VERSION, len(manifest.videos), manifest.d_v, manifest.d_s,
                                  int(manifest.tef_enabled)))
            for v in manifest.videos:
                vid = v.video_id.encode("utf-8")
                fh.write(struct.pack("<H", len(vid)))
                fh.write(vid)
                fh.write(struct.pack("<If", v.n_clips, v.clip_duration))
                fh.write(np.ascontiguousarray(v.video_feats, dtype="<f4").tobytes())
                fh.write(np.ascontiguousarray(v.sub_feats, dtype="<f4").tobytes())
    except OSError as exc:
        raise OSError(f"cannot write feature store {path}: {exc}") from exc


def read_store(path) -> CorpusManifest:
    path = Path(path)
    buf = path.read_bytes()
    if len(buf) < 4 or buf[:4] != MAGIC:
        raise BadMagicError(f"{path}: bad magic")
    if len(buf) < _HEADER.size:
        raise TruncatedStoreError(f"{path}: truncated header")
    _, version, n_videos, d_v, d_s, tef = _HEADER.unpack_from(buf, 0)
    if version > VERSION or version == 0:
        raise UnsupportedVersionError(f"{path}: unsupported version {version}")
    off = _HEADER.size
    videos = []

    def need(n):
        if off + n > len(buf):
            raise TruncatedStoreError(f"{path}: truncated payload at byte {off}")

    for _ in range(n_videos):
        need(2)
        (id_len,) = struct.unpack_from("<H", buf, off)
        off += 2
        need(id_len + 8)
        vid = buf[off:off + id_len].decode("utf-8")
        off += id_len
        n_clips, dur = struct.unpack_from("<If", buf, off)
        off += 8
        nv, ns = n_clips * d_v, n_clips * d_s
        need(4 * (nv + ns))
        vf = np.frombuffer(buf, dtype="<f4", count=nv, offset=off).reshape(n_clips, d_v)
        off += 4 * nv
        sf = np.frombuffer(buf, dtype="<f4", count=ns, offset=off).reshape(n_clips, d_s)
        off += 4 * ns
        videos.append(ClipContext(vid, vf.astype(np.float64), sf.astype(np.float64), float(dur)))
    if off != len(buf):
        raise DimMismatchError(f"{path}: {len(buf) - off} bytes left over; payload does not match header dims")
    return CorpusManifest(videos, d_v, d_s, tef_enabled=bool(tef))


# ---------------------------------------------------------------- JSONL ingest

def write_feature_file(path, matrix: np.ndarray) -> None:
    """Raw feature file: u32 rows | u32 cols | f32 LE row-major payload."""
    matrix = np.asarray(matrix)
    with open(path, "wb") as fh:
        fh.write(struct.pack("<II", *matrix.shape))
        fh.write(np.ascontiguousarray(matrix, dtype="<f4").tobytes())


def read_feature_file(path) -> np.ndarray:
    buf = Path(path).read_bytes()
    if len(buf) < 8:
        raise TruncatedStoreError(f"{path}: missing shape header")
    rows, cols = struct.unpack_from("<II", buf, 0)
    if len(buf) != 8 + 4 * rows * cols:
        raise TruncatedStoreError(f"{path}: expected {rows}x{cols} floats, file has {len(buf) - 8} bytes")
    return np.frombuffer(buf, dtype="<f4", offset=8).reshape(rows, cols).astype(np.float64)


def _jsonl(path):
    with open(path, encoding="utf-8") as fh:
        for line_no, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                yield line_no, json.loads(line)
            except json.JSONDecodeError as exc:
                raise IngestError(path, line_no, f"malformed JSON ({exc.msg})") from None


def _require(rec: dict, key: str, path, line_no: int):
    if key not in rec:
        raise IngestError(path, line_no, f"missing required field {key!r}")
    return rec[key]


def read_queries_jsonl(query_file, videos: Optional[dict] = None) -> list[QueryRecord]:
    """Read query descriptors; ``videos`` (id -> ClipContext) enables id checks and clip spans."""
    query_file = Path(query_file)
    queries = []
    d_q = 0
    for line_no, rec in _jsonl(query_file):
        qid = int(_require(rec, "query_id", query_file, line_no))
        tokens = read_feature_file(query_file.parent / _require(rec, "tokens_path", query_file, line_no))
        if d_q and tokens.shape[1] != d_q:
            raise IngestError(query_file, line_no, f"token dim {tokens.shape[1]} != {d_q}")
        d_q = tokens.shape[1]
        vid = rec.get("video_id")
        if vid is not None and videos is not None and vid not in videos:
            raise IngestError(query_file, line_no, f"unknown video_id {vid!r}")
        ts = rec.get("ts")
        clip_span = None
        if ts is not None:
            ts = (float(ts[0]), float(ts[1]))
            if vid is not None and videos is not None:
                v = videos[vid]
                clip_span = span_to_clips(ts, v.clip_duration, v.n_clips)
        try:
            qtype = QueryType.from_tag(rec.get("type"))
            queries.append(QueryRecord(qid, tokens, vid, ts, qtype, clip_span))
        except (KeyError, ValueError) as exc:
            raise IngestError(query_file, line_no, f"invalid query record: {exc}") from None
    return queries


def write_queries_jsonl(query_file, queries: Sequence[QueryRecord], tokens_dir: str = "tokens") -> None:
    """Write query descriptors plus one raw token file per query under ``tokens_dir``."""
    query_file = Path(query_file)
    (query_file.parent / tokens_dir).mkdir(parents=True, exist_ok=True)
    with open(query_file, "w", encoding="utf-8") as fh:
        for q in queries:
            rel = f"{tokens_dir}/q{q.query_id}.f32"
            write_feature_file(query_file.parent / rel, q.tokens)
            rec = {"query_id": q.query_id, "tokens_path": rel}
            if q.gt_video_id is not None:
                rec["video_id"] = q.gt_video_id
            if q.gt_span_s is not None:
                rec["ts"] = list(q.gt_span_s)
            if q.query_type.tag is not None:
                rec["type"] = q.query_type.tag
            fh.write(json.dumps(rec) + "\n")


def ingest_jsonl(corpus_file, query_file) -> tuple[CorpusManifest, list[QueryRecord]]:
    """Load a corpus and its queries from JSONL descriptors.

    Feature paths are resolved relative to the JSONL file that names them.
    Ground-truth spans in seconds are also converted to inclusive clip indices.
    """
    corpus_file, query_file = Path(corpus_file), Path(query_file)
    videos = []
    for line_no, rec in _jsonl(corpus_file):
        vid = _require(rec, "video_id", corpus_file, line_no)
        dur = float(rec.get("clip_duration", DEFAULT_CLIP_DURATION))
        vf = read_feature_file(corpus_file.parent / _require(rec, "video_feats_path", corpus_file, line_no))
        sf = read_feature_file(corpus_file.parent / _require(rec, "sub_feats_path", corpus_file, line_no))
        try:
            videos.append(ClipContext(str(vid), vf, sf, dur))
        except ValueError as exc:
            raise IngestError(corpus_file, line_no, str(exc)) from None
    if videos:
        d_v, d_s = videos[0].video_feats.shape[1], videos[0].sub_feats.shape[1]
    else:
        d_v = d_s = 0
    queries = read_queries_jsonl(query_file, {v.video_id: v for v in videos})
    d_q = queries[0].tokens.shape[1] if queries else 0
    try:
        manifest = CorpusManifest(videos, d_v, d_s, d_q)
    except (ValueError, StoreError) as exc:
        raise IngestError(corpus_file, 0, str(exc)) from None
    return manifest, queries


# ---------------------------------------------------------------- synthetic corpus

def synth_corpus(rng: Rng, n_videos: int = 200, clips_per_video: int = 20,
                 dims: tuple[int, int, int] = (64, 64, 64), n_queries: int = 1000,
                 max_moment_len: int = 14, signal_strength: float = 5.0, *,
                 query_len: int = 15, min_moment_len: int = 2,
                 clip_duration: float = DEFAULT_CLIP_DURATION):
    """Gaussian background corpus with one planted moment per query.

    Each query gets a random unit direction in the leading ``min(dims)``
    coordinates. The direction, times ``signal_strength``, is added to every
    query token and to the clips of its span (video features, subtitle
    features or both depending on the sampled query type).
    """
    d_v, d_s, d_q = dims
    if not 1 <= min_moment_len <= max_moment_len <= clips_per_video:
        raise ValueError(f"need 1 <= min_moment_len ({min_moment_len}) <= max_moment_len "
                         f"({max_moment_len}) <= clips_per_video ({clips_per_video})")
    if n_videos < 1 or min(dims) < 1 or query_len < 1 or n_queries < 0:
        raise ValueError("n_videos, dims and query_len must be positive")
    if signal_strength < 0:
        raise ValueError("signal_strength must be non-negative")
    l = clips_per_video
    shared = min(dims)
    vfeats = rng_gaussian(rng, n_videos * l * d_v).reshape(n_videos, l, d_v)
    sfeats = rng_gaussian(rng, n_videos * l * d_s).reshape(n_videos, l, d_s)

    types = (QueryType.VIDEO_ONLY, QueryType.SUB_ONLY, QueryType.VIDEO_SUB)
    queries = []
    vid_idx = np.zeros(n_queries, dtype=np.int64)
    spans = np.zeros((n_queries, 2), dtype=np.int64)
    ids = [f"vid{i:05d}" for i in range(n_videos)]
    for q in range(n_queries):
        v = rng.integer(0, n_videos)
        length = rng.integer(min_moment_len, max_moment_len + 1)
        st = rng.integer(0, l - length + 1)
        ed = st + length - 1
        qtype = types[rng.integer(0, 3)]
        direction = rng_gaussian(rng, shared)
        direction *= signal_strength / max(np.linalg.norm(direction), 1e-12)
        tokens = rng_gaussian(rng, query_len * d_q).reshape(query_len, d_q)
        tokens[:, :shared] += direction
        if qtype in (QueryType.VIDEO_ONLY, QueryType.VIDEO_SUB):
            vfeats[v, st:ed + 1, :shared] += direction
        if qtype in (QueryType.SUB_ONLY, QueryType.VIDEO_SUB):
            sfeats[v, st:ed + 1, :shared] += direction
        vid_idx[q] = v
        spans[q] = (st, ed)
        queries.append(QueryRecord(q, tokens, ids[v], clips_to_span(st, ed, clip_duration), qtype, (st, ed)))
    videos = [ClipContext(ids[i], vfeats[i], sfeats[i], clip_duration) for i in range(n_videos)]
    return CorpusManifest(videos, d_v, d_s, d_q), queries, PlantedTruth(vid_idx, spans)


def tef_columns(n_clips: int) -> np.ndarray:
    i = np.arange(n_clips, dtype=np.float64)
    return np.stack([i / n_clips, (i + 1) / n_clips], axis=1)


def append_tef(manifest: CorpusManifest) -> CorpusManifest:
    """Append normalised clip start/end positions to both feature matrices."""
    if manifest.tef_enabled:
        raise ValueError("TEF already appended to this corpus")
    videos = []
    for v in manifest.videos:
        tef = tef_columns(v.n_clips)
        videos.append(replace(v, video_feats=np.hstack([v.video_feats, tef]),
                              sub_feats=np.hstack([v.sub_feats, tef])))
    return CorpusManifest(videos, manifest.d_v + 2, manifest.d_s + 2, manifest.d_q, tef_enabled=True)

