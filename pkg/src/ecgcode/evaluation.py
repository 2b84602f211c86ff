"""Window-tolerance matching of fiducial points and Se/PPV/F1 reports."""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from enum import Enum
from typing import Iterable, Mapping, Sequence

import numpy as np

from .signal_io import AnnotationSet, WaveClass


class PointKind(str, Enum):
    P_on = "P_on"
    P_off = "P_off"
    QRS_on = "QRS_on"
    QRS_off = "QRS_off"
    T_on = "T_on"
    T_off = "T_off"


KINDS = tuple(PointKind)
_ON_OFF = {
    WaveClass.P: (PointKind.P_on, PointKind.P_off),
    WaveClass.QRS: (PointKind.QRS_on, PointKind.QRS_off),
    WaveClass.T: (PointKind.T_on, PointKind.T_off),
}


@dataclass(frozen=True)
class FiducialPoint:
    kind: PointKind
    time_ms: float
    confidence: float | None = None


@dataclass(frozen=True)
class EvalConfig:
    tolerance_ms: float = 150.0
    exclude_edges_s: float = 0.0

    def __post_init__(self):
        if not self.tolerance_ms > 0:
            raise ValueError("tolerance_ms must be positive")
        if self.exclude_edges_s < 0:
            raise ValueError("exclude_edges_s must be >= 0")


@dataclass
class Matching:
    pairs: list[tuple[FiducialPoint, FiducialPoint]]
    unmatched_pred: list[FiducialPoint]
    unmatched_truth: list[FiducialPoint]

    @property
    def errors_ms(self) -> list[float]:
        return [p.time_ms - t.time_ms for p, t in self.pairs]


@dataclass
class PointMetrics:
    tp: int = 0
    fp: int = 0
    fn: int = 0
    se: float | None = None
    ppv: float | None = None
    f1: float | None = None
    err_mean_ms: float | None = None
    err_std_ms: float | None = None

    def to_dict(self) -> dict:
        return {k: getattr(self, k) for k in ("tp", "fp", "fn", "se", "ppv", "f1", "err_mean_ms", "err_std_ms")}


def segment_points(annotations: AnnotationSet, sampling_rate_hz: float) -> dict[PointKind, list[FiducialPoint]]:
    """Onset and offset of every segment as time-sorted fiducial points per kind."""
    scale = 1000.0 / sampling_rate_hz
    points: dict[PointKind, list[FiducialPoint]] = {k: [] for k in KINDS}
    for seg in annotations.segments:
        on, off = _ON_OFF[seg.wave_class]
        points[on].append(FiducialPoint(on, seg.onset * scale, seg.confidence))
        points[off].append(FiducialPoint(off, seg.offset * scale, seg.confidence))
    for kind in KINDS:
        points[kind].sort(key=lambda p: p.time_ms)
    return points


def match_points(predicted: Sequence[FiducialPoint], truth: Sequence[FiducialPoint],
                 tolerance_ms: float) -> Matching:
    """One-to-one matching with ``|pred - truth| <= tolerance_ms``.

    Two-pointer sweep over time-sorted lists pairing each point with the
    earliest compatible partner; on a line with a fixed window this attains
    the maximum matching cardinality.
    """
    kinds = {p.kind for p in predicted} | {t.kind for t in truth}
    if len(kinds) > 1:
        raise ValueError(f"match_points needs a single point kind, got {sorted(k.value for k in kinds)}")
    pred = sorted(predicted, key=lambda p: p.time_ms)
    true = sorted(truth, key=lambda p: p.time_ms)
    pairs, lone_pred, lone_true = [], [], []
    i = j = 0
    while i < len(pred) and j < len(true):
        diff = pred[i].time_ms - true[j].time_ms
        if diff < -tolerance_ms:
            lone_pred.append(pred[i])
            i += 1
        elif diff > tolerance_ms:
            lone_true.append(true[j])
            j += 1
        else:
            pairs.append((pred[i], true[j]))
            i += 1
            j += 1
    lone_pred.extend(pred[i:])
    lone_true.extend(true[j:])
    return Matching(pairs, lone_pred, lone_true)


def _ratio(num: int, den: int) -> float | None:
    return num / den if den else None


def metrics_from_counts(tp: int, fp: int, fn: int, errors_ms: Sequence[float] = ()) -> PointMetrics:
    se, ppv = _ratio(tp, tp + fn), _ratio(tp, tp + fp)
    f1 = None
    if se is not None and ppv is not None:
        f1 = 2 * se * ppv / (se + ppv) if se + ppv > 0 else 0.0
    mean = std = None
    if len(errors_ms):
        err = np.asarray(errors_ms, dtype=np.float64)
        mean, std = float(err.mean()), float(err.std())
    return PointMetrics(tp, fp, fn, se, ppv, f1, mean, std)


def point_metrics(matching: Matching) -> PointMetrics:
    return metrics_from_counts(len(matching.pairs), len(matching.unmatched_pred),
                               len(matching.unmatched_truth), matching.errors_ms)


@dataclass
class EvalReport:
    per_kind: dict[PointKind, PointMetrics]
    aggregate: PointMetrics
    n_records: int
    config: EvalConfig
    per_record: dict[str, dict[PointKind, tuple[int, int, int]]] = field(default_factory=dict, repr=False)

    def f1(self, kind: PointKind | str) -> float | None:
        return self.per_kind[PointKind(kind)].f1

    def to_dict(self) -> dict:
        return {
            "config": {"tolerance_ms": self.config.tolerance_ms, "exclude_edges_s": self.config.exclude_edges_s},
            "per_kind": {k.value: m.to_dict() for k, m in self.per_kind.items()},
            "aggregate": self.aggregate.to_dict(),
            "n_records": self.n_records,
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2)

    def to_markdown(self, title: str = "") -> str:
        def fmt(v, digits=3):
            return "-" if v is None else f"{v:.{digits}f}"

        cols = [k.value.replace("_", " ") for k in KINDS]
        lines = []
        if title:
            lines += [f"### {title}", ""]
        lines.append("| | " + " | ".join(cols) + " |")
        lines.append("|---|" + "---|" * len(cols))
        rows = (("Se", "se"), ("PPV", "ppv"), ("F1-score", "f1"))
        for label, attr in rows:
            lines.append(f"| {label} | " + " | ".join(fmt(getattr(self.per_kind[k], attr)) for k in KINDS) + " |")
        mu_sigma = []
        for k in KINDS:
            m = self.per_kind[k]
            mu_sigma.append("-" if m.err_mean_ms is None else f"{m.err_mean_ms:.1f} ± {m.err_std_ms:.1f}")
        lines.append("| μ ± σ (ms) | " + " | ".join(mu_sigma) + " |")
        lines.append("")
        lines.append(f"{self.n_records} records, window tolerance {self.config.tolerance_ms:g} ms")
        return "\n".join(lines) + "\n"


REPORT_SCHEMA = {
    "type": "object",
    "required": ["config", "per_kind", "n_records"],
    "properties": {
        "config": {
            "type": "object",
            "required": ["tolerance_ms", "exclude_edges_s"],
            "properties": {"tolerance_ms": {"type": "number", "exclusiveMinimum": 0},
                           "exclude_edges_s": {"type": "number", "minimum": 0}},
        },
        "n_records": {"type": "integer", "minimum": 0},
        "per_kind": {
            "type": "object",
            "required": [k.value for k in KINDS],
            "additionalProperties": False,
            "properties": {
                k.value: {
                    "type": "object",
                    "required": ["tp", "fp", "fn", "se", "ppv", "f1", "err_mean_ms", "err_std_ms"],
                    "properties": {
                        "tp": {"type": "integer", "minimum": 0},
                        "fp": {"type": "integer", "minimum": 0},
                        "fn": {"type": "integer", "minimum": 0},
                        "se": {"type": ["number", "null"], "minimum": 0, "maximum": 1},
                        "ppv": {"type": ["number", "null"], "minimum": 0, "maximum": 1},
                        "f1": {"type": ["number", "null"], "minimum": 0, "maximum": 1},
                        "err_mean_ms": {"type": ["number", "null"]},
                        "err_std_ms": {"type": ["number", "null"], "minimum": 0},
                    },
                }
                for k in KINDS
            },
        },
    },
}


def _keep(points: list[FiducialPoint], lo_ms: float, hi_ms: float) -> list[FiducialPoint]:
    return [p for p in points if lo_ms <= p.time_ms <= hi_ms]


def evaluate_dataset(
    predicted: Iterable[AnnotationSet],
    truth: Iterable[AnnotationSet],
    config: EvalConfig = EvalConfig(),
    sampling_rate_hz: float = 1000.0,
    durations_ms: Mapping[str, float] | float | None = None,
) -> EvalReport:
    """Aggregate per-kind metrics over records paired by ``record_id``.

    With ``exclude_edges_s > 0`` points closer than that to either record end
    are dropped from both sides; record durations come from ``durations_ms``
    (a mapping or one value for all records).
    """
    truth_by_id = {t.record_id: t for t in truth}
    counts = {k: [0, 0, 0] for k in KINDS}
    errors: dict[PointKind, list[float]] = {k: [] for k in KINDS}
    per_record = {}
    n_records = 0
    edge_ms = 1000.0 * config.exclude_edges_s
    for pred in sorted(predicted, key=lambda a: a.record_id):
        if pred.record_id not in truth_by_id:
            raise KeyError(f"no ground truth for record {pred.record_id!r}")
        true = truth_by_id[pred.record_id]
        pred_pts = segment_points(pred, sampling_rate_hz)
        true_pts = segment_points(true, sampling_rate_hz)
        if edge_ms > 0:
            if durations_ms is None:
                raise ValueError("edge exclusion needs record durations")
            dur = durations_ms if isinstance(durations_ms, (int, float)) else durations_ms[pred.record_id]
            lo, hi = edge_ms, dur - edge_ms
            pred_pts = {k: _keep(v, lo, hi) for k, v in pred_pts.items()}
            true_pts = {k: _keep(v, lo, hi) for k, v in true_pts.items()}
        rec_counts = {}
        for kind in KINDS:
            m = match_points(pred_pts[kind], true_pts[kind], config.tolerance_ms)
            c = (len(m.pairs), len(m.unmatched_pred), len(m.unmatched_truth))
            rec_counts[kind] = c
            counts[kind] = [a + b for a, b in zip(counts[kind], c)]
            errors[kind].extend(m.errors_ms)
        per_record[pred.record_id] = rec_counts
        n_records += 1

    per_kind = {k: metrics_from_counts(*counts[k], errors[k]) for k in KINDS}
    total = [sum(counts[k][i] for k in KINDS) for i in range(3)]
    aggregate = metrics_from_counts(*total, [e for k in KINDS for e in errors[k]])
    return EvalReport(per_kind, aggregate, n_records, config, per_record)
