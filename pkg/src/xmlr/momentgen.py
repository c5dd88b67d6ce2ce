"""Hand-crafted moment generators over a query-clip score curve.

Two baselines that need no training: multi-scale sliding windows ranked
by the mean score inside the window, and TAG-style grouping of
above-threshold clips under a ladder of thresholds.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Iterable, Optional, Sequence

import numpy as np

# 87 windows for a 51-clip video, the average TVR density
DEFAULT_SCALES = (2, 6, 10, 12, 16)
DEFAULT_STRIDE_FRAC = 0.5
DEFAULT_TAG_THRESHOLDS = 8


@dataclass(frozen=True)
class Proposal:
    t_st: int
    t_ed: int
    score: float = 0.0

    def __post_init__(self):
        if self.t_st > self.t_ed:
            raise ValueError(f"proposal start {self.t_st} after end {self.t_ed}")

    @property
    def length(self) -> int:
        return self.t_ed - self.t_st + 1


def _window_means(scores: np.ndarray):
    """Mean over [st, ed] from prefix sums taken relative to the curve minimum.

    The offset keeps a constant curve exact, so equal windows tie exactly.
    """
    base = scores.min()
    csum = np.concatenate([[0.0], np.cumsum(scores - base)])
    return lambda st, ed: float(base + (csum[ed + 1] - csum[st]) / (ed - st + 1))


def _ranked(props: Iterable[Proposal]) -> list[Proposal]:
    return sorted(props, key=lambda p: (-p.score, p.t_st, p.t_ed))


def sliding_window_proposals(l: int, scales: Sequence[int] = DEFAULT_SCALES,
                             stride_frac: float = DEFAULT_STRIDE_FRAC) -> list[Proposal]:
    """Full-length windows per scale, stepped by ``max(1, round(w * stride_frac))``.

    A scale longer than the video collapses to the whole video. Output is
    deduplicated and ordered by (start, end).
    """
    if not scales:
        raise ValueError("at least one scale is required")
    if not 0 < stride_frac <= 1:
        raise ValueError("stride_frac must be in (0, 1]")
    spans = set()
    for w in scales:
        if w < 1:
            raise ValueError(f"window scale must be positive, got {w}")
        width = min(w, l)
        stride = max(1, int(round(w * stride_frac)))
        for st in range(0, l - width + 1, stride):
            spans.add((st, st + width - 1))
    return [Proposal(st, ed) for st, ed in sorted(spans)]


def rank_proposals_avg(scores: np.ndarray, proposals: Sequence[Proposal], k: Optional[int] = None) -> list[Proposal]:
    """Score each proposal by the mean of ``scores`` inside it and keep the best ``k``."""
    mean = _window_means(np.asarray(scores, dtype=np.float64))
    ranked = _ranked(Proposal(p.t_st, p.t_ed, mean(p.t_st, p.t_ed)) for p in proposals)
    return ranked if k is None else ranked[:k]


def _runs(mask: np.ndarray):
    """Maximal runs of True as inclusive (start, end) pairs."""
    padded = np.concatenate([[False], mask, [False]]).astype(np.int8)
    edges = np.diff(padded)
    starts = np.flatnonzero(edges == 1)
    ends = np.flatnonzero(edges == -1) - 1
    return zip(starts.tolist(), ends.tolist())


def tag_thresholds(n_thresholds: int) -> np.ndarray:
    """Uniform ladder ``i / (n + 1)`` for i = 1..n; doubling n+1 refines the grid."""
    if n_thresholds < 1:
        raise ValueError("n_thresholds must be >= 1")
    return np.arange(1, n_thresholds + 1) / (n_thresholds + 1)


def tag_group(scores: np.ndarray, n_thresholds: int = DEFAULT_TAG_THRESHOLDS, min_len: int = 1,
              thresholds: Optional[Sequence[float]] = None) -> list[Proposal]:
    """Group clips whose min-max normalised score clears each threshold into runs.

    Every maximal run of length >= ``min_len`` at any threshold becomes a
    proposal scored by the mean raw score over the run. A flat curve
    normalises to all ones, so each threshold yields the full video.
    """
    scores = np.asarray(scores, dtype=np.float64)
    lo, hi = scores.min(), scores.max()
    if hi > lo:
        norm = (scores - lo) / (hi - lo)
    else:
        norm = np.ones_like(scores)
    grid = tag_thresholds(n_thresholds) if thresholds is None else np.asarray(thresholds, dtype=np.float64)
    mean = _window_means(scores)
    found = {}
    for tau in grid:
        for st, ed in _runs(norm >= tau):
            if ed - st + 1 >= min_len and (st, ed) not in found:
                found[(st, ed)] = mean(st, ed)
    return _ranked(Proposal(st, ed, s) for (st, ed), s in found.items())


GENERATORS = ("convse", "sliding_window", "tag")
