"""Pre-encoded context store: the artifact late fusion retrieves from.

Layout (little endian)::

    "XMLE" | u32 version | u32 n_videos | u32 d
    per video: u16 id_len | id utf-8 | u32 l | f32 clip_duration
               | H_v0, H_s0, H_v1, H_s1 as l*d f64 each, row-major
"""
from __future__ import annotations

import struct
from pathlib import Path
from typing import Sequence

import numpy as np

from .encoder import EncodedVideo
from .featstore import BadMagicError, DimMismatchError, TruncatedStoreError, UnsupportedVersionError

MAGIC = b"XMLE"
VERSION = 1
_HEADER = struct.Struct("<4sIII")


def encoded_store_nbytes(n_clips: Sequence[int], id_lengths: Sequence[int], d: int) -> int:
    return _HEADER.size + sum(2 + n + 8 + 4 * l * d * 8 for l, n in zip(n_clips, id_lengths))


def write_encoded_store(path, videos: Sequence[EncodedVideo]) -> int:
    """Write and return the number of bytes written."""
    d = videos[0].H_v0.shape[1] if videos else 0
    written = 0
    with open(path, "wb") as fh:
        written += fh.write(_HEADER.pack(MAGIC, VERSION, len(videos), d))
        for v in videos:
            vid = v.video_id.encode("utf-8")
            written += fh.write(struct.pack("<H", len(vid)) + vid + struct.pack("<If", v.n_clips, v.clip_duration))
            for h in (v.H_v0, v.H_s0, v.H_v1, v.H_s1):
                if h.shape != (v.n_clips, d):
                    raise DimMismatchError(f"{v.video_id}: tensor shape {h.shape} != ({v.n_clips}, {d})")
                written += fh.write(np.ascontiguousarray(h, dtype="<f8").tobytes())
    return written


def read_encoded_store(path) -> list[EncodedVideo]:
    path = Path(path)
    buf = path.read_bytes()
    if buf[:4] != MAGIC:
        raise BadMagicError(f"{path}: bad magic")
    if len(buf) < _HEADER.size:
        raise TruncatedStoreError(f"{path}: truncated header")
    _, version, n_videos, d = _HEADER.unpack_from(buf, 0)
    if version != VERSION:
        raise UnsupportedVersionError(f"{path}: unsupported version {version}")
    off = _HEADER.size
    out = []
    for _ in range(n_videos):
        if off + 2 > len(buf):
            raise TruncatedStoreError(f"{path}: truncated at byte {off}")
        (n,) = struct.unpack_from("<H", buf, off)
        vid = buf[off + 2:off + 2 + n].decode("utf-8")
        off += 2 + n
        l, dur = struct.unpack_from("<If", buf, off)
        off += 8
        if off + 4 * l * d * 8 > len(buf):
            raise TruncatedStoreError(f"{path}: truncated tensors for {vid}")
        mats = []
        for _ in range(4):
            mats.append(np.frombuffer(buf, dtype="<f8", count=l * d, offset=off).reshape(l, d))
            off += l * d * 8
        out.append(EncodedVideo(vid, *mats, clip_duration=float(dur)))
    if off != len(buf):
        raise DimMismatchError(f"{path}: {len(buf) - off} trailing bytes")
    return out
