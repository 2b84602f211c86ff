"""Segment annotations <-> per-interval (confidence, start, end) grids.

The record is cut into ``n_intervals`` equal, non-overlapping intervals.  For
each interval and each wave class a cell holds a presence confidence and the
start/end of the class's overlap with the interval, as fractions of the
interval length.  Objects spanning several intervals become one fragment per
interval; :func:`postprocess` stitches fragments back together.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np

from .signal_io import WAVE_CLASSES, AnnotationError, AnnotationSet, Segment, WaveClass

N_CLASSES = len(WAVE_CLASSES)
CONF, START, END = 0, 1, 2


@dataclass(frozen=True)
class GridConfig:
    n_intervals: int = 200
    record_len: int = 10000
    conf_threshold: float = 0.5
    merge_gap: int = 300
    min_len: int = 50

    def __post_init__(self):
        if self.n_intervals < 1 or self.record_len < 1:
            raise ValueError("n_intervals and record_len must be positive")
        if self.record_len % self.n_intervals:
            raise ValueError(f"record_len={self.record_len} not divisible by n_intervals={self.n_intervals}")
        if not 0.0 < self.conf_threshold < 1.0:
            raise ValueError("conf_threshold must lie in (0, 1)")
        if self.merge_gap < 0:
            raise ValueError("merge_gap must be >= 0")
        if self.min_len < 1:
            raise ValueError("min_len must be >= 1")

    @property
    def interval_len(self) -> int:
        return self.record_len // self.n_intervals


@dataclass
class Grid:
    """``values[interval, class, (conf, start, end)]`` plus a per-class label mask.

    Targets hold confidences in {0, 1}; predictions in (0, 1).  A ``False``
    mask entry marks a class without labels in this record.
    """

    values: np.ndarray
    mask: np.ndarray = field(default_factory=lambda: np.ones(N_CLASSES, dtype=bool))

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64)
        self.mask = np.asarray(self.mask, dtype=bool)
        if self.values.ndim != 3 or self.values.shape[1:] != (N_CLASSES, 3):
            raise ValueError(f"grid values must have shape (n_intervals, 3, 3), got {self.values.shape}")
        if self.mask.shape != (N_CLASSES,):
            raise ValueError("mask must hold one flag per class")

    @property
    def n_intervals(self) -> int:
        return self.values.shape[0]

    @property
    def confidence(self) -> np.ndarray:
        return self.values[:, :, CONF]

    def with_mask(self, mask: Sequence[bool]) -> "Grid":
        return Grid(self.values.copy(), np.asarray(mask, dtype=bool))


TargetGrid = Grid
PredictionGrid = Grid


def encode_targets(annotations: AnnotationSet, config: GridConfig) -> Grid:
    n_int, length = config.n_intervals, config.interval_len
    values = np.zeros((n_int, N_CLASSES, 3))
    for seg in annotations.segments:
        if seg.offset > config.record_len:
            raise AnnotationError(f"segment [{seg.onset}, {seg.offset}] beyond record_len={config.record_len}")
        c = seg.wave_class.index
        first = seg.onset // length
        last = (seg.offset - 1) // length
        for i in range(first, last + 1):
            lo = max(seg.onset, i * length)
            hi = min(seg.offset, (i + 1) * length)
            if hi <= lo:
                continue
            values[i, c] = (1.0, (lo - i * length) / length, (hi - i * length) / length)
    return Grid(values)


def decode_grid(grid: Grid, config: GridConfig) -> list[Segment]:
    """Raw per-interval fragments whose confidence exceeds the threshold."""
    if grid.n_intervals != config.n_intervals:
        raise ValueError(f"grid has {grid.n_intervals} intervals, config expects {config.n_intervals}")
    length = config.interval_len
    idx, cls = np.nonzero(grid.confidence > config.conf_threshold)
    cells = grid.values[idx, cls]
    base = idx * length
    # np.rint rounds half to even, like the builtin round
    onsets = np.rint(base + np.clip(cells[:, START], 0.0, 1.0) * length).astype(int)
    offsets = np.rint(base + np.clip(cells[:, END], 0.0, 1.0) * length).astype(int)
    confs = np.clip(cells[:, CONF], 1e-9, 1 - 1e-9)
    out = [
        Segment(WAVE_CLASSES[c], int(on), int(off), float(p))
        for c, on, off, p in zip(cls, onsets, offsets, confs)
        if off > on
    ]
    out.sort(key=Segment.sort_key)
    return out


def _merged_conf(a: float | None, b: float | None) -> float | None:
    if a is None:
        return b
    if b is None:
        return a
    return max(a, b)


def merge_segments(segments: Iterable[Segment], merge_gap: int) -> list[Segment]:
    """Unite same-class segments separated by fewer than ``merge_gap`` samples.

    Overlapping or touching segments always merge.  One sweep per class over
    onset-sorted segments reaches the fixpoint, since a merged segment only
    ever extends to the right.
    """
    by_class: dict[WaveClass, list[Segment]] = {c: [] for c in WAVE_CLASSES}
    for seg in sorted(segments, key=Segment.sort_key):
        by_class[seg.wave_class].append(seg)

    out: list[Segment] = []
    for cls, segs in by_class.items():
        current: Segment | None = None
        for seg in segs:
            if current is not None and seg.onset - current.offset < merge_gap:
                current = Segment(
                    cls,
                    current.onset,
                    max(current.offset, seg.offset),
                    _merged_conf(current.confidence, seg.confidence),
                )
                continue
            if current is not None:
                out.append(current)
            current = seg
        if current is not None:
            out.append(current)
    out.sort(key=Segment.sort_key)
    return out


def drop_short(segments: Iterable[Segment], min_len: int) -> list[Segment]:
    return [s for s in segments if s.length >= min_len]


def postprocess(segments: Iterable[Segment], config: GridConfig, record_id: str = "") -> AnnotationSet:
    merged = merge_segments(segments, config.merge_gap)
    return AnnotationSet(record_id=record_id, segments=tuple(drop_short(merged, config.min_len)))


def decode_annotations(grid: Grid, config: GridConfig, record_id: str = "",
                       n_samples: int | None = None) -> AnnotationSet:
    """decode -> postprocess, clipping segments to ``n_samples`` when the record is shorter."""
    segments = decode_grid(grid, config)
    if n_samples is not None and n_samples < config.record_len:
        clipped = []
        for s in segments:
            offset = min(s.offset, n_samples)
            if offset > s.onset:
                clipped.append(Segment(s.wave_class, s.onset, offset, s.confidence))
        segments = clipped
    return postprocess(segments, config, record_id)
