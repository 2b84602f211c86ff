"""Record and annotation file formats, plus a synthetic PQRST generator.

A record lives in a directory holding ``header.json`` and ``signal.bin``
(float32, little-endian, lead-major).  Annotations are ``<id>.delin.json``
files with one record-level segment list.
"""

from __future__ import annotations

import csv
import json
import math
import os
import tempfile
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path
from typing import Any, Iterable, Sequence

import numpy as np

HEADER_NAME = "header.json"
SIGNAL_NAME = "signal.bin"
DELIN_SUFFIX = ".delin.json"

STANDARD_LEADS = ("I", "II", "III", "aVR", "aVL", "aVF", "V1", "V2", "V3", "V4", "V5", "V6")


class RecordFormatError(ValueError):
    """Malformed or inconsistent record on disk."""


class AnnotationError(ValueError):
    """Annotation set violating its invariants."""


class WaveClass(str, Enum):
    P = "P"
    QRS = "QRS"
    T = "T"

    @property
    def index(self) -> int:
        return _CLASS_ORDER[self]


WAVE_CLASSES = (WaveClass.P, WaveClass.QRS, WaveClass.T)
_CLASS_ORDER = {c: i for i, c in enumerate(WAVE_CLASSES)}


def parse_wave_class(value: str | WaveClass) -> WaveClass:
    try:
        return WaveClass(value)
    except ValueError:
        raise AnnotationError(f"unknown wave class {value!r}") from None


@dataclass(frozen=True, eq=False)
class EcgRecord:
    """Multi-lead signal in millivolts, shape ``(n_leads, n_samples)``."""

    id: str
    sampling_rate_hz: int
    leads: tuple[str, ...]
    samples: np.ndarray
    meta: dict[str, Any] = field(default_factory=dict)

    def __post_init__(self):
        leads = tuple(str(name) for name in self.leads)
        object.__setattr__(self, "leads", leads)
        samples = np.ascontiguousarray(self.samples, dtype=np.float32)
        if samples.ndim == 1:
            samples = samples[None, :]
        if samples.ndim != 2:
            raise RecordFormatError(f"samples must be 2-D, got shape {samples.shape}")
        samples.setflags(write=False)
        object.__setattr__(self, "samples", samples)

        if not isinstance(self.sampling_rate_hz, (int, np.integer)) or self.sampling_rate_hz <= 0:
            raise RecordFormatError(f"sampling_rate_hz must be a positive integer, got {self.sampling_rate_hz!r}")
        object.__setattr__(self, "sampling_rate_hz", int(self.sampling_rate_hz))
        if len(leads) < 1:
            raise RecordFormatError("record needs at least one lead")
        if len(set(leads)) != len(leads):
            raise RecordFormatError(f"lead names must be unique: {leads}")
        if samples.shape[0] != len(leads):
            raise RecordFormatError(f"{len(leads)} lead names but {samples.shape[0]} signal rows")
        if samples.shape[1] < 1:
            raise RecordFormatError("record must hold at least one sample per lead")
        if not np.all(np.isfinite(samples)):
            raise RecordFormatError(f"record {self.id!r} contains non-finite samples")

    @property
    def n_samples(self) -> int:
        return self.samples.shape[1]

    @property
    def n_leads(self) -> int:
        return self.samples.shape[0]

    @property
    def duration_ms(self) -> float:
        return 1000.0 * self.n_samples / self.sampling_rate_hz

    def with_samples(self, samples: np.ndarray, sampling_rate_hz: int | None = None) -> "EcgRecord":
        return EcgRecord(
            id=self.id,
            sampling_rate_hz=self.sampling_rate_hz if sampling_rate_hz is None else sampling_rate_hz,
            leads=self.leads,
            samples=samples,
            meta=dict(self.meta),
        )

    def __eq__(self, other):
        if not isinstance(other, EcgRecord):
            return NotImplemented
        return (
            self.id == other.id
            and self.sampling_rate_hz == other.sampling_rate_hz
            and self.leads == other.leads
            and self.meta == other.meta
            and self.samples.shape == other.samples.shape
            and self.samples.tobytes() == other.samples.tobytes()
        )

    __hash__ = None


@dataclass(frozen=True)
class Segment:
    wave_class: WaveClass
    onset: int
    offset: int
    confidence: float | None = None

    def __post_init__(self):
        object.__setattr__(self, "wave_class", parse_wave_class(self.wave_class))
        for name in ("onset", "offset"):
            value = getattr(self, name)
            if isinstance(value, bool) or not float(value).is_integer():
                raise AnnotationError(f"{name} must be an integer sample index, got {value!r}")
            object.__setattr__(self, name, int(value))
        if self.onset < 0 or self.offset <= self.onset:
            raise AnnotationError(f"invalid segment bounds [{self.onset}, {self.offset}]")
        if self.confidence is not None:
            conf = float(self.confidence)
            if not (0.0 < conf < 1.0):
                raise AnnotationError(f"confidence must lie in (0, 1), got {conf}")
            object.__setattr__(self, "confidence", conf)

    @property
    def length(self) -> int:
        return self.offset - self.onset

    def sort_key(self) -> tuple[int, int, int]:
        return (self.onset, self.wave_class.index, self.offset)


@dataclass(frozen=True)
class AnnotationSet:
    """Record-level delineation: segments sorted by onset, class order breaking ties."""

    record_id: str
    segments: tuple[Segment, ...] = ()

    def __post_init__(self):
        segments = tuple(sorted(self.segments, key=Segment.sort_key))
        object.__setattr__(self, "segments", segments)
        last_offset: dict[WaveClass, int] = {}
        for seg in segments:
            prev = last_offset.get(seg.wave_class)
            if prev is not None and seg.onset < prev:
                raise AnnotationError(
                    f"overlapping {seg.wave_class.value} segments in {self.record_id!r} near sample {seg.onset}"
                )
            last_offset[seg.wave_class] = max(seg.offset, prev or 0)

    def by_class(self, wave_class: WaveClass | str) -> list[Segment]:
        wave_class = parse_wave_class(wave_class)
        return [s for s in self.segments if s.wave_class is wave_class]

    def validate_length(self, n_samples: int) -> None:
        for seg in self.segments:
            if seg.offset > n_samples:
                raise AnnotationError(f"segment [{seg.onset}, {seg.offset}] exceeds record length {n_samples}")

    def to_dict(self) -> dict:
        return {
            "record_id": self.record_id,
            "segments": [
                {"class": s.wave_class.value, "onset": s.onset, "offset": s.offset, "confidence": s.confidence}
                for s in self.segments
            ],
        }

    @classmethod
    def from_dict(cls, data: dict) -> "AnnotationSet":
        if not isinstance(data, dict) or "record_id" not in data or "segments" not in data:
            raise AnnotationError("annotation JSON needs 'record_id' and 'segments'")
        segments = []
        for raw in data["segments"]:
            try:
                segments.append(
                    Segment(
                        wave_class=raw["class"],
                        onset=raw["onset"],
                        offset=raw["offset"],
                        confidence=raw.get("confidence"),
                    )
                )
            except (KeyError, TypeError) as exc:
                raise AnnotationError(f"malformed segment entry {raw!r}") from exc
        return cls(record_id=str(data["record_id"]), segments=tuple(segments))


# ---------------------------------------------------------------------------
# file IO


def _atomic_write(path: Path, payload: bytes) -> None:
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(payload)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def write_record(record: EcgRecord, path: str | os.PathLike) -> None:
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    header = {
        "id": record.id,
        "sampling_rate_hz": record.sampling_rate_hz,
        "n_samples": record.n_samples,
        "leads": list(record.leads),
        "meta": record.meta,
    }
    # signal first: a header never points at a missing or stale signal
    _atomic_write(path / SIGNAL_NAME, record.samples.astype("<f4").tobytes())
    _atomic_write(path / HEADER_NAME, json.dumps(header, indent=2).encode())


def read_record(path: str | os.PathLike) -> EcgRecord:
    path = Path(path)
    header_path, signal_path = path / HEADER_NAME, path / SIGNAL_NAME
    if not header_path.is_file():
        raise FileNotFoundError(f"missing {header_path}")
    if not signal_path.is_file():
        raise FileNotFoundError(f"missing {signal_path}")
    try:
        header = json.loads(header_path.read_text())
    except json.JSONDecodeError as exc:
        raise RecordFormatError(f"{header_path}: invalid JSON ({exc})") from exc

    required = ("id", "sampling_rate_hz", "n_samples", "leads")
    if not isinstance(header, dict) or any(k not in header for k in required):
        raise RecordFormatError(f"{header_path}: header needs keys {required}")
    n_samples, leads = header["n_samples"], header["leads"]
    if not isinstance(n_samples, int) or isinstance(n_samples, bool) or n_samples < 1:
        raise RecordFormatError(f"{header_path}: n_samples must be a positive integer")
    if not isinstance(leads, list) or not leads:
        raise RecordFormatError(f"{header_path}: leads must be a non-empty list")
    meta = header.get("meta", {})
    if not isinstance(meta, dict):
        raise RecordFormatError(f"{header_path}: meta must be an object")

    raw = signal_path.read_bytes()
    expected = 4 * n_samples * len(leads)
    if len(raw) != expected:
        raise RecordFormatError(
            f"{signal_path}: header declares {len(leads)} x {n_samples} samples "
            f"({expected} bytes) but file holds {len(raw)} bytes"
        )
    samples = np.frombuffer(raw, dtype="<f4").reshape(len(leads), n_samples)
    return EcgRecord(
        id=str(header["id"]),
        sampling_rate_hz=header["sampling_rate_hz"],
        leads=tuple(leads),
        samples=samples.astype(np.float32),
        meta=meta,
    )


def read_csv_record(path: str | os.PathLike, sampling_rate_hz: int | None = None, record_id: str | None = None) -> EcgRecord:
    """Import a CSV whose first column is a time (seconds) or sample index.

    The sampling rate comes from ``sampling_rate_hz`` when given, otherwise it
    is inferred from a first column named ``time``/``t``/``time_s``.
    """
    path = Path(path)
    with path.open(newline="") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise RecordFormatError(f"{path}: empty CSV") from None
        if len(header) < 2:
            raise RecordFormatError(f"{path}: need a time/index column and at least one lead column")
        rows = [row for row in reader if row]
    try:
        table = np.array(rows, dtype=np.float64)
    except ValueError as exc:
        raise RecordFormatError(f"{path}: non-numeric CSV cell ({exc})") from exc
    if table.ndim != 2 or table.shape[1] != len(header) or table.shape[0] < 1:
        raise RecordFormatError(f"{path}: ragged or empty CSV body")

    if sampling_rate_hz is None:
        if header[0].strip().lower() not in ("time", "t", "time_s"):
            raise RecordFormatError(f"{path}: sampling rate needed for an index-based CSV")
        if table.shape[0] < 2:
            raise RecordFormatError(f"{path}: cannot infer sampling rate from one row")
        dt = np.median(np.diff(table[:, 0]))
        if not dt > 0:
            raise RecordFormatError(f"{path}: time column is not increasing")
        sampling_rate_hz = int(round(1.0 / dt))
    return EcgRecord(
        id=record_id or path.stem,
        sampling_rate_hz=sampling_rate_hz,
        leads=tuple(h.strip() for h in header[1:]),
        samples=table[:, 1:].T,
    )


def annotation_path(directory: str | os.PathLike, record_id: str, suffix: str = DELIN_SUFFIX) -> Path:
    return Path(directory) / f"{record_id}{suffix}"


def write_annotations(annotations: AnnotationSet, path: str | os.PathLike) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    _atomic_write(path, json.dumps(annotations.to_dict(), indent=1).encode())


def read_annotations(path: str | os.PathLike) -> AnnotationSet:
    path = Path(path)
    try:
        data = json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise AnnotationError(f"{path}: invalid JSON ({exc})") from exc
    return AnnotationSet.from_dict(data)


def list_records(directory: str | os.PathLike) -> list[Path]:
    """Record directories directly below ``directory``, sorted by name."""
    directory = Path(directory)
    if not directory.is_dir():
        raise FileNotFoundError(f"no such directory: {directory}")
    return sorted(p for p in directory.iterdir() if (p / HEADER_NAME).is_file())


# ---------------------------------------------------------------------------
# synthetic records

# per-lead gains (I, II, III, aVR, aVL, aVF, V1..V6)
_LEAD_GAINS = {
    WaveClass.P: (0.6, 1.0, 0.4, -0.8, 0.3, 0.7, 0.5, 0.6, 0.6, 0.7, 0.7, 0.6),
    WaveClass.QRS: (0.7, 1.0, 0.5, -0.9, 0.4, 0.8, -0.6, -0.3, 0.4, 1.1, 1.0, 0.8),
    WaveClass.T: (0.6, 1.0, 0.4, -0.7, 0.3, 0.6, 0.2, 0.8, 0.9, 0.9, 0.8, 0.6),
}
# biphasic QRS template: (fraction of width, relative amplitude)
_QRS_KNOTS = ((0.0, 0.0), (0.2, -0.15), (0.5, 1.0), (0.75, -0.3), (1.0, 0.0))
_MIN_SAME_CLASS_GAP_MS = 300.0
_MIN_SEGMENT_MS = 50.0


@dataclass(frozen=True)
class SynthSpec:
    duration_s: float = 10.0
    sampling_rate_hz: int = 1000
    heart_rate_bpm: float = 60.0
    p_amp_mv: float = 0.15
    p_width_ms: float = 100.0
    qrs_amp_mv: float = 1.0
    qrs_width_ms: float = 90.0
    t_amp_mv: float = 0.3
    t_width_ms: float = 180.0
    pr_gap_ms: float = 60.0
    st_gap_ms: float = 100.0
    noise_mv: float = 0.02
    jitter_ms: float = 15.0
    n_leads: int = 12
    seed: int = 0

    def __post_init__(self):
        positive = (
            "duration_s", "sampling_rate_hz", "heart_rate_bpm", "p_amp_mv", "p_width_ms",
            "qrs_amp_mv", "qrs_width_ms", "t_amp_mv", "t_width_ms", "pr_gap_ms", "st_gap_ms", "n_leads",
        )
        for name in positive:
            if not getattr(self, name) > 0:
                raise ValueError(f"SynthSpec.{name} must be positive")
        if self.noise_mv < 0 or self.jitter_ms < 0:
            raise ValueError("noise_mv and jitter_ms must be non-negative")
        for name in ("p_width_ms", "qrs_width_ms", "t_width_ms"):
            # widths shrink by up to 10% per beat
            if 0.9 * getattr(self, name) < _MIN_SEGMENT_MS + 1:
                raise ValueError(f"SynthSpec.{name} too short for the {_MIN_SEGMENT_MS:.0f} ms minimum")


def lead_names(n_leads: int) -> tuple[str, ...]:
    if n_leads <= len(STANDARD_LEADS):
        return STANDARD_LEADS[:n_leads]
    return tuple(f"L{i}" for i in range(n_leads))


def _gains(wave_class: WaveClass, n_leads: int) -> np.ndarray:
    table = _LEAD_GAINS[wave_class]
    return np.array([table[i % len(table)] for i in range(n_leads)], dtype=np.float64)


def synth_record(spec: SynthSpec, record_id: str | None = None) -> tuple[EcgRecord, AnnotationSet]:
    """Generate a noisy PQRST record and its exact ground truth."""
    fs = spec.sampling_rate_hz
    ms = fs / 1000.0
    n = int(round(spec.duration_s * fs))
    rr_ms = 60000.0 / spec.heart_rate_bpm
    jitter = spec.jitter_ms

    # widths vary by at most 10% per beat, timing by +-jitter
    widest = 1.1 * max(spec.p_width_ms, spec.qrs_width_ms, spec.t_width_ms)
    extent = 1.1 * (spec.p_width_ms + spec.qrs_width_ms + spec.t_width_ms) + spec.pr_gap_ms + spec.st_gap_ms
    lead_in = 40.0 + jitter
    if rr_ms - widest - 2 * jitter <= _MIN_SAME_CLASS_GAP_MS + 2 or lead_in + extent + jitter >= rr_ms:
        raise ValueError(
            f"heart rate {spec.heart_rate_bpm} bpm too high: same-class gaps must exceed "
            f"{_MIN_SAME_CLASS_GAP_MS:.0f} ms and beats must not overlap"
        )

    rng = np.random.default_rng(spec.seed)
    n_beats = int(math.floor(spec.duration_s * spec.heart_rate_bpm / 60.0 + 1e-9))
    t = np.arange(n, dtype=np.float64)
    waves = np.zeros((3, n))
    segments: list[Segment] = []

    for k in range(n_beats):
        start = k * rr_ms + lead_in + rng.uniform(-jitter, jitter)
        scale_w = rng.uniform(0.9, 1.1, size=3)
        scale_a = rng.uniform(0.9, 1.1, size=3)
        p_on = start
        p_off = p_on + spec.p_width_ms * scale_w[0]
        q_on = p_off + spec.pr_gap_ms
        q_off = q_on + spec.qrs_width_ms * scale_w[1]
        t_on = q_off + spec.st_gap_ms
        t_off = t_on + spec.t_width_ms * scale_w[2]
        if round(t_off * ms) > n:
            break
        bounds = [(int(round(a * ms)), int(round(b * ms))) for a, b in ((p_on, p_off), (q_on, q_off), (t_on, t_off))]
        for cls, (a, b) in zip(WAVE_CLASSES, bounds):
            segments.append(Segment(cls, a, b))

        for cls_idx, (a, b), amp in ((0, bounds[0], spec.p_amp_mv), (2, bounds[2], spec.t_amp_mv)):
            center, sigma = 0.5 * (a + b), (b - a) / 5.0
            waves[cls_idx] += amp * scale_a[cls_idx] * np.exp(-0.5 * ((t - center) / sigma) ** 2)
        a, b = bounds[1]
        xs = [a + f * (b - a) for f, _ in _QRS_KNOTS]
        ys = [spec.qrs_amp_mv * scale_a[1] * v for _, v in _QRS_KNOTS]
        lo, hi = a, b + 1
        waves[1, lo:hi] += np.interp(t[lo:hi], xs, ys)

    L = spec.n_leads
    samples = sum(np.outer(_gains(cls, L), waves[i]) for i, cls in enumerate(WAVE_CLASSES))
    if spec.noise_mv > 0:
        wander_hz = rng.uniform(0.15, 0.4)
        phase = rng.uniform(0, 2 * np.pi, size=(L, 1))
        samples = samples + 2.0 * spec.noise_mv * np.sin(2 * np.pi * wander_hz * t / fs + phase)
        samples = samples + spec.noise_mv * rng.standard_normal((L, n))

    rid = record_id or f"synth_{spec.seed:06d}"
    meta = {"synthetic": True, "heart_rate_bpm": spec.heart_rate_bpm, "seed": spec.seed}
    record = EcgRecord(id=rid, sampling_rate_hz=fs, leads=lead_names(L), samples=samples, meta=meta)
    return record, AnnotationSet(record_id=rid, segments=tuple(segments))


def synth_corpus(n: int, seed: int, duration_s: float = 10.0, sampling_rate_hz: int = 1000,
                 n_leads: int = 12, noise_mv: float = 0.02, prefix: str = "rec") -> list[tuple[EcgRecord, AnnotationSet]]:
    """Draw ``n`` records with per-record heart rate and morphology variation."""
    rng = np.random.default_rng(seed)
    out = []
    for i in range(n):
        spec = SynthSpec(
            duration_s=duration_s,
            sampling_rate_hz=sampling_rate_hz,
            heart_rate_bpm=float(rng.uniform(55.0, 75.0)),
            p_amp_mv=float(rng.uniform(0.1, 0.25)),
            p_width_ms=float(rng.uniform(80.0, 120.0)),
            qrs_amp_mv=float(rng.uniform(0.8, 1.6)),
            qrs_width_ms=float(rng.uniform(70.0, 110.0)),
            t_amp_mv=float(rng.uniform(0.2, 0.5)),
            t_width_ms=float(rng.uniform(150.0, 220.0)),
            pr_gap_ms=float(rng.uniform(40.0, 90.0)),
            st_gap_ms=float(rng.uniform(70.0, 130.0)),
            noise_mv=noise_mv,
            n_leads=n_leads,
            seed=int(rng.integers(0, 2**31 - 1)),
        )
        out.append(synth_record(spec, record_id=f"{prefix}_{seed}_{i:04d}"))
    return out


def iter_segments(annotations: Iterable[AnnotationSet]) -> Iterable[Segment]:
    for ann in annotations:
        yield from ann.segments


def segments_from_mapping(mapping: dict[str, Sequence[int]]) -> list[Segment]:
    """``{"P": [100, 180], ...}`` shorthand to segments (one segment per class)."""
    return [Segment(parse_wave_class(cls), int(b[0]), int(b[1])) for cls, b in mapping.items()]
