"""Overlapping segmentation of utterances and mean aggregation of segment embeddings."""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import List, Optional, Sequence, Tuple, Union

import numpy as np

from . import numerics as nx
from .numerics import Tensor


@dataclass(frozen=True)
class SegmentSpec:
    """How to cut an utterance.

    ``overlap`` (samples) takes precedence over ``overlap_fraction``. With
    ``policy="random"`` a fresh ``segment_length`` is drawn per mini-batch
    from ``[min_length, max_length]`` (see :func:`draw_segment_length`).
    """

    segment_length: int
    overlap_fraction: float = 0.1
    overlap: Optional[int] = None
    policy: str = "fixed"
    min_length: Optional[int] = None
    max_length: Optional[int] = None

    def __post_init__(self):
        if self.segment_length < 1:
            raise ValueError("segment_length must be >= 1")
        if not 0.0 <= self.overlap_fraction < 1.0:
            raise ValueError("overlap_fraction must lie in [0, 1)")
        if self.policy not in ("fixed", "random"):
            raise ValueError(f"unknown segment policy {self.policy!r}")
        if self.hop < 1:
            raise ValueError("segment hop (length - overlap) must be >= 1")

    @property
    def overlap_samples(self) -> int:
        if self.overlap is not None:
            return int(self.overlap)
        return int(round(self.overlap_fraction * self.segment_length))

    @property
    def hop(self) -> int:
        return self.segment_length - self.overlap_samples

    def with_length(self, length: int) -> "SegmentSpec":
        return SegmentSpec(length, self.overlap_fraction, self.overlap, self.policy,
                           self.min_length, self.max_length)


@dataclass
class SegmentSet:
    segments: np.ndarray  # [K, C]
    starts: List[int]
    source_length: int

    @property
    def count(self) -> int:
        return len(self.starts)


def segment_starts(source_length: int, segment_length: int, hop: int) -> List[int]:
    """Start offsets: regular hops, with the last segment anchored to the end."""
    if segment_length < 1:
        raise ValueError("segment length must be >= 1")
    if source_length <= segment_length:
        return [0]
    count = math.ceil((source_length - segment_length) / hop) + 1
    return [k * hop for k in range(count - 1)] + [source_length - segment_length]


def segment_count(source_length: int, spec: SegmentSpec) -> int:
    return len(segment_starts(source_length, spec.segment_length, spec.hop))


def segment(x, spec: Union[SegmentSpec, int]) -> SegmentSet:
    """Split a 1-D waveform into overlapping segments of ``spec.segment_length``.

    Inputs no longer than one segment become a single zero-padded segment.
    """
    if isinstance(spec, (int, np.integer)):
        spec = SegmentSpec(int(spec))
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 1 or x.size < 1:
        raise ValueError("segment expects a non-empty 1-D waveform")
    c = spec.segment_length
    starts = segment_starts(x.size, c, spec.hop)
    if x.size <= c:
        seg = np.zeros((1, c))
        seg[0, : x.size] = x
        return SegmentSet(seg, starts, x.size)
    return SegmentSet(np.stack([x[s:s + c] for s in starts]), starts, x.size)


def segment_batch(batch: np.ndarray, spec: SegmentSpec) -> Tuple[np.ndarray, int]:
    """Segment every row of ``batch[B, F]``; returns ``([B*K, C], K)`` grouped by utterance."""
    sets = [segment(row, spec) for row in np.asarray(batch)]
    return np.concatenate([s.segments for s in sets]), sets[0].count


def aggregate(embeddings: Union[Sequence[Tensor], Tensor]) -> Tensor:
    """Element-wise mean of K segment embeddings.

    Accepts a list of equally shaped tensors or one tensor whose axis -2
    indexes the segments (e.g. ``[B, K, D]``).
    """
    if isinstance(embeddings, Tensor):
        if embeddings.ndim < 2 or embeddings.shape[-2] < 1:
            raise ValueError("aggregate needs at least one segment embedding")
        return embeddings.mean(axis=embeddings.ndim - 2)
    embeddings = list(embeddings)
    if not embeddings:
        raise ValueError("aggregate needs at least one segment embedding")
    shape = embeddings[0].shape
    if any(e.shape != shape for e in embeddings):
        raise nx.DimensionError("aggregate: segment embeddings differ in shape")
    return nx.stack(embeddings, axis=0).mean(axis=0)


def draw_segment_length(min_length: int, max_length: int, rng: np.random.Generator, factor: int = 1) -> int:
    """Uniform integer in [min_length, max_length], floored to a multiple of ``factor``."""
    if min_length > max_length:
        raise ValueError("min_length must not exceed max_length")
    lo = -(-min_length // factor) * factor
    hi = (max_length // factor) * factor
    if lo > hi or hi < factor:
        raise ValueError(
            f"no multiple of {factor} in [{min_length}, {max_length}]"
        )
    while True:
        length = (int(rng.integers(min_length, max_length + 1)) // factor) * factor
        if length >= lo:
            return length
