import functools
import json
import math

import jsonschema
import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from ecgcode.evaluation import (
    KINDS,
    REPORT_SCHEMA,
    EvalConfig,
    FiducialPoint,
    PointKind,
    evaluate_dataset,
    match_points,
    metrics_from_counts,
    point_metrics,
    segment_points,
)
from ecgcode.signal_io import AnnotationSet, Segment, SynthSpec, synth_record

K = PointKind.QRS_on


def pts(times, kind=K):
    return [FiducialPoint(kind, float(t)) for t in times]


def brute_force_max_matching(pred, truth, tol):
    """Exact maximum bipartite matching by memoized search over truth subsets."""

    @functools.lru_cache(maxsize=None)
    def best(i, used):
        if i == len(pred):
            return 0
        out = best(i + 1, used)
        for j, t in enumerate(truth):
            if not used >> j & 1 and abs(pred[i] - t) <= tol:
                out = max(out, 1 + best(i + 1, used | 1 << j))
        return out

    return best(0, 0)


def test_match_examples():
    m = match_points(pts([100]), pts([180]), 150)
    assert len(m.pairs) == 1 and m.errors_ms == [-80.0]
    m = match_points(pts([100]), pts([300]), 150)
    assert (len(m.pairs), len(m.unmatched_pred), len(m.unmatched_truth)) == (0, 1, 1)
    m = match_points(pts([100, 120]), pts([110]), 150)
    assert (len(m.pairs), len(m.unmatched_pred), len(m.unmatched_truth)) == (1, 1, 0)


def test_window_is_inclusive():
    assert len(match_points(pts([0]), pts([150]), 150).pairs) == 1
    assert len(match_points(pts([0]), pts([150.001]), 150).pairs) == 0


def test_mixed_kinds_rejected():
    with pytest.raises(ValueError):
        match_points(pts([1]), pts([1], PointKind.T_off), 150)


def test_greedy_equals_max_matching_1000():
    rng = np.random.default_rng(99)
    for _ in range(1000):
        p = sorted(rng.integers(0, 1000, rng.integers(0, 9)).tolist())
        t = sorted(rng.integers(0, 1000, rng.integers(0, 9)).tolist())
        tol = float(rng.choice([10, 50, 150, 300]))
        m = match_points(pts(p), pts(t), tol)
        assert len(m.pairs) == brute_force_max_matching(tuple(p), tuple(t), tol)
        assert all(abs(a.time_ms - b.time_ms) <= tol for a, b in m.pairs)


times = st.lists(st.integers(0, 3000), max_size=12)


@settings(max_examples=300, deadline=None)
@given(times, times, st.integers(1, 400), st.integers(0, 400))
def test_matching_properties(p, t, tol, extra):
    m = match_points(pts(p), pts(t), tol)
    tp = len(m.pairs)
    assert tp <= min(len(p), len(t))
    assert tp + len(m.unmatched_pred) == len(p)
    assert tp + len(m.unmatched_truth) == len(t)
    assert len(match_points(pts(p), pts(t), tol + extra).pairs) >= tp


def test_metric_formulas():
    m = metrics_from_counts(9, 1, 1)
    assert (m.se, m.ppv, m.f1) == (0.9, 0.9, pytest.approx(0.9))
    empty = metrics_from_counts(0, 0, 0)
    assert empty.se is None and empty.ppv is None and empty.f1 is None and empty.err_mean_ms is None
    m = metrics_from_counts(2, 0, 0, [-10, 10])
    assert m.err_mean_ms == 0.0 and m.err_std_ms == 10.0


def test_hand_counted_confusion():
    # truth 100, 400, 900; predictions 90 (TP, -10), 430 (TP, +30), 700 (FP); 900 missed
    m = point_metrics(match_points(pts([90, 430, 700]), pts([100, 400, 900]), 150))
    assert (m.tp, m.fp, m.fn) == (2, 1, 1)
    assert m.se == 2 / 3 and m.ppv == 2 / 3
    assert m.f1 == pytest.approx(2 / 3)
    assert m.err_mean_ms == 10.0 and m.err_std_ms == 20.0
    # only FPs: Se undefined, PPV 0
    m = point_metrics(match_points(pts([5]), [], 150))
    assert m.se is None and m.ppv == 0.0 and m.f1 is None


def corpus(n=5, seed=0):
    return [synth_record(SynthSpec(seed=seed + i, n_leads=1), f"r{i}")[1] for i in range(n)]


def test_identity_report():
    truth = corpus()
    report = evaluate_dataset(truth, truth)
    for k in KINDS:
        m = report.per_kind[k]
        assert m.f1 == 1.0 and m.err_mean_ms == 0.0 and m.err_std_ms == 0.0
    jsonschema.validate(json.loads(report.to_json()), REPORT_SCHEMA)


def test_edge_exclusion():
    truth = AnnotationSet("a", (Segment("P", 500, 600), Segment("P", 5000, 5100)))
    pred = AnnotationSet("a", (Segment("P", 5000, 5100),))
    report = evaluate_dataset([pred], [truth], EvalConfig(exclude_edges_s=1.0), durations_ms={"a": 10000.0})
    assert (report.per_kind[PointKind.P_on].tp, report.per_kind[PointKind.P_on].fn) == (1, 0)
    unclipped = evaluate_dataset([pred], [truth])
    assert unclipped.per_kind[PointKind.P_on].fn == 1


def test_missing_truth():
    with pytest.raises(KeyError):
        evaluate_dataset([AnnotationSet("x", ())], [AnnotationSet("y", ())])


def jitter(ann, rng, width):
    segs = []
    for s in ann.segments:
        on = s.onset + int(rng.integers(-width, width + 1))
        off = s.offset + int(rng.integers(-width, width + 1))
        segs.append(Segment(s.wave_class, max(on, 0), max(off, on + 1)))
    return AnnotationSet(ann.record_id, tuple(segs))


def test_uniform_jitter_oracle():
    rng = np.random.default_rng(4)
    truth = [synth_record(SynthSpec(seed=i, n_leads=1), f"j{i}")[1] for i in range(20)]
    pred = [jitter(a, rng, 40) for a in truth]
    report = evaluate_dataset(pred, truth)
    sigma = math.sqrt((81**2 - 1) / 12)  # discrete uniform on [-40, 40]
    for k in KINDS:
        m = report.per_kind[k]
        assert m.f1 == 1.0
        assert abs(m.err_mean_ms) <= 5
        assert abs(m.err_std_ms - 80 / math.sqrt(12)) <= 5
        assert m.err_std_ms == pytest.approx(sigma, abs=3)


def test_report_totals_and_permutation():
    rng = np.random.default_rng(8)
    truth = corpus(6, seed=20)
    pred = [jitter(a, rng, 200) for a in truth]
    report = evaluate_dataset(pred, truth)
    for k in KINDS:
        summed = np.sum([report.per_record[r][k] for r in report.per_record], axis=0)
        m = report.per_kind[k]
        assert tuple(summed) == (m.tp, m.fp, m.fn)
    shuffled = evaluate_dataset(pred[::-1], truth[::-1])
    assert shuffled.to_dict() == report.to_dict()


def test_markdown_layout():
    truth = corpus(2)
    md = evaluate_dataset(truth, truth).to_markdown()
    lines = md.splitlines()
    assert lines[0] == "| | P on | P off | QRS on | QRS off | T on | T off |"
    assert [ln.split("|")[1].strip() for ln in lines[2:6]] == ["Se", "PPV", "F1-score", "μ ± σ (ms)"]


def test_segment_points_scaled_to_ms():
    ann = AnnotationSet("a", (Segment("QRS", 250, 300),))
    got = segment_points(ann, 500)
    assert got[PointKind.QRS_on][0].time_ms == 500.0 and got[PointKind.QRS_off][0].time_ms == 600.0


def test_eval_config_invariants():
    with pytest.raises(ValueError):
        EvalConfig(tolerance_ms=0)
    with pytest.raises(ValueError):
        EvalConfig(exclude_edges_s=-1)
