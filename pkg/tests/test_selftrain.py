import json

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from ecgcode.grid_codec import Grid, GridConfig
from ecgcode.model import ModelConfig, TrainConfig, build_model, parameter_count
from ecgcode.selftrain import (
    MANIFEST_RELPATH,
    PSEUDO_SUFFIX,
    PseudolabelManifest,
    ScoredRecord,
    StageError,
    build_manifest,
    delineation_scores,
    pseudolabel,
    round_half_up,
    select_top,
    selection_size,
    selftrain_run,
)
from ecgcode.signal_io import AnnotationSet, synth_corpus, write_record

SMALL = ModelConfig(n_leads=2, stem_channels=4, blocks=((4, 1), (8, 1)))


def grid_with_conf(conf_column):
    values = np.zeros((len(conf_column), 3, 3))
    values[:, :, 0] = np.asarray(conf_column)[:, None]
    return Grid(values)


def scored(means, ids=None):
    ids = ids or [f"r{i}" for i in range(len(means))]
    return [ScoredRecord(rid, (m, m, m), (0.0, 0.0, 0.0), AnnotationSet(rid, ())) for rid, m in zip(ids, means)]


def test_score_examples():
    s = delineation_scores(grid_with_conf([0.9, 0.1, 0.5]))
    assert abs(s[0, 0] - 0.8 / 3) < 1e-12
    assert abs(s[0, 1] - np.sqrt(2 * (0.4 - 0.8 / 3) ** 2 / 3 + (0.8 / 3) ** 2 / 3)) < 1e-12
    np.testing.assert_array_equal(delineation_scores(grid_with_conf([0.5] * 4)), 0.0)
    for c in (0.99, 0.01):
        s = delineation_scores(grid_with_conf([c] * 4))
        np.testing.assert_allclose(s[:, 0], 0.49, atol=1e-12)
        np.testing.assert_allclose(s[:, 1], 0.0, atol=1e-12)


def test_score_reflection_and_range_1e5():
    rng = np.random.default_rng(0)
    conf = rng.uniform(0, 1, (100_000 // 3 + 1, 3))
    a, b = delineation_scores(grid_with_conf(conf[:, 0])), delineation_scores(grid_with_conf(1 - conf[:, 0]))
    np.testing.assert_allclose(a, b, atol=1e-12)
    values = np.zeros(conf.shape + (3,))
    values[..., 0] = conf
    s = delineation_scores(Grid(values))
    assert np.all((s[:, 0] >= 0) & (s[:, 0] <= 0.5)) and np.all(s[:, 1] >= 0)


@settings(max_examples=100, deadline=None)
@given(st.lists(st.floats(0, 1), min_size=1, max_size=40), st.randoms(use_true_random=False))
def test_score_permutation_invariant(conf, rnd):
    shuffled = conf[:]
    rnd.shuffle(shuffled)
    np.testing.assert_allclose(delineation_scores(grid_with_conf(conf)),
                               delineation_scores(grid_with_conf(shuffled)), atol=1e-12)


def test_select_examples():
    corpus = scored([0.4, 0.1, 0.3, 0.2])
    assert select_top(corpus, "P", 50) == ["r0", "r2"]
    assert sorted(select_top(corpus, "P", 100)) == ["r0", "r1", "r2", "r3"]
    assert select_top(scored([0.2, 0.2], ["b", "a"]), "QRS", 50) == ["a"]


def test_select_rejects_bad_input():
    with pytest.raises(ValueError):
        select_top(scored([0.1]), "P", 0)
    with pytest.raises(ValueError):
        select_top(scored([0.1]), "P", 101)
    with pytest.raises(ValueError):
        select_top([], "P", 50)


def test_round_half_up():
    assert [round_half_up(x) for x in (0.5, 1.5, 2.5, 2.4999)] == [1, 2, 3, 2]
    assert selection_size(50, 5) == 3 and selection_size(50, 40) == 20 and selection_size(10, 4) == 0


def test_select_matches_brute_force_1000():
    rng = np.random.default_rng(1)
    for _ in range(1000):
        n = int(rng.integers(1, 12))
        means = rng.choice([0.0, 0.1, 0.2, 0.3], n).tolist()  # frequent ties
        ids = [f"id{k}" for k in rng.permutation(n)]
        top = float(rng.uniform(1, 100))
        got = select_top(scored(means, ids), "T", top)
        size = int(np.floor(top / 100 * n + 0.5))
        oracle = [rid for _, rid in sorted(zip([-m for m in means], ids))][:size]
        assert got == oracle


def check_manifest_invariants(manifest, n):
    size = selection_size(manifest.top_percent, n)
    for cls, ids in manifest.selected.items():
        c = "P QRS T".split().index(cls)
        assert len(ids) == size
        chosen = set(ids)
        rest = [r for r in manifest.scores if r not in chosen]
        for sel in ids:
            for other in rest:
                a, b = manifest.scores[sel]["mean"][c], manifest.scores[other]["mean"][c]
                assert a > b or (a == b and sel < other)
        for rid, mask in manifest.masks.items():
            assert mask[c] == (rid in chosen)


@pytest.fixture(scope="module")
def unlabeled():
    return synth_corpus(8, seed=50, n_leads=2)


def test_pseudolabel_cardinality_and_files(tmp_path, unlabeled):
    records = [rec for rec, _ in unlabeled]
    paths = []
    for rec in records:
        write_record(rec, tmp_path / "data" / rec.id)
        paths.append(tmp_path / "data" / rec.id)
    paths.append(tmp_path / "data" / "not_a_record")
    model = build_model(SMALL)
    manifest, labels = pseudolabel(model, paths, GridConfig(), top_percent=50, out_dir=tmp_path,
                                   checkpoint_id="ck", timestamp="t0")
    check_manifest_invariants(manifest, len(records))
    assert manifest.skipped == [str(tmp_path / "data" / "not_a_record")]
    assert (tmp_path / MANIFEST_RELPATH).is_file()
    for rid, mask in manifest.masks.items():
        assert (tmp_path / "data" / f"{rid}{PSEUDO_SUFFIX}").exists() == any(mask)
    reread = PseudolabelManifest.read(tmp_path / MANIFEST_RELPATH)
    assert reread == manifest
    again, _ = pseudolabel(model, records, GridConfig(), top_percent=50, checkpoint_id="ck", timestamp="t0")
    assert again.selected == manifest.selected and again.scores == manifest.scores


def test_constant_model_selection_by_tie_rule(unlabeled):
    model = build_model(SMALL)
    model.load_flat(np.zeros(parameter_count(SMALL)))
    manifest, labels = pseudolabel(model, [r for r, _ in unlabeled], GridConfig(), top_percent=50)
    ids = sorted(r.id for r, _ in unlabeled)
    for cls, sel in manifest.selected.items():
        assert sel == ids[:4]
    assert all(s["mean"] == [0.0, 0.0, 0.0] for s in manifest.scores.values())
    assert all(not ann.segments for ann in labels.values())


def test_pseudolabel_empty_corpus():
    with pytest.raises(ValueError):
        pseudolabel(build_model(SMALL), [], GridConfig())


def test_selftrain_run_small(tmp_path, unlabeled):
    labeled = synth_corpus(3, seed=10, n_leads=2)
    cfg = TrainConfig(epochs=2, augment=False)
    kwargs = dict(model_config=SMALL, train_config=cfg, top_percent=50, timestamp="t0")
    result = selftrain_run(labeled, [r for r, _ in unlabeled], out_dir=tmp_path, **kwargs)
    assert [s.stage for s in result.stages] == ["base", "pseudolabel", "scratch", "finetune"]
    assert len(result.stages[-1].history) == 1  # half of two epochs
    check_manifest_invariants(result.manifest, len(unlabeled))
    json.dumps([s.to_dict() for s in result.stages])
    again = selftrain_run(labeled, [r for r, _ in unlabeled], **kwargs)
    np.testing.assert_array_equal(again.model.flat_parameters(), result.model.flat_parameters())


def test_selftrain_preconditions(unlabeled):
    labeled = synth_corpus(1, seed=10, n_leads=2)
    with pytest.raises(ValueError):
        selftrain_run(labeled, [r for r, _ in unlabeled], model_config=SMALL, top_percent=0)
    with pytest.raises(ValueError):
        selftrain_run(labeled, [], model_config=SMALL)


def test_stage_failure_names_stage(unlabeled):
    # 12-lead default model on 2-lead records fails inside the first stage
    labeled = synth_corpus(1, seed=10, n_leads=2)
    with pytest.raises(StageError) as info:
        selftrain_run(labeled, [r for r, _ in unlabeled], train_config=TrainConfig(epochs=1))
    assert info.value.stage == "base"


def test_build_manifest_round_trip():
    m = build_manifest(scored([0.3, 0.1, 0.2]), 50, {"checkpoint": "x"})
    assert PseudolabelManifest.from_dict(json.loads(json.dumps(m.to_dict()))) == m
    assert m.mask_for("r0").tolist() == [True, True, True]
