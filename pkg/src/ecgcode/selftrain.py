"""Confidence-ranked pseudolabeling and the scratch-train + fine-tune schedule.

A trained model labels an unlabeled corpus.  Each record gets, per wave
class, the mean and std of ``|0.5 - confidence|`` over its grid intervals;
records are ranked by that mean and the top N% per class keep that class's
pseudolabels.  A fresh model is trained on the pseudolabels (unselected
classes masked out of the loss) and then fine-tuned on the labeled set.
"""

from __future__ import annotations

import dataclasses
import datetime as _dt
import json
import logging
import math
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .dsp import AugmentConfig, StftConfig
from .evaluation import EvalConfig, EvalReport, evaluate_dataset
from .grid_codec import CONF, Grid, GridConfig, encode_targets
from .model import DelineationNet, ModelConfig, TrainConfig, TrainItem, build_model, predict_record, train
from .signal_io import (
    WAVE_CLASSES,
    AnnotationSet,
    EcgRecord,
    WaveClass,
    annotation_path,
    parse_wave_class,
    read_record,
    write_annotations,
)

log = logging.getLogger(__name__)

PSEUDO_SUFFIX = ".pseudo.delin.json"
MANIFEST_RELPATH = Path("pseudolabels") / "manifest.json"


class StageError(RuntimeError):
    def __init__(self, stage: str, cause: BaseException):
        super().__init__(f"self-training stage '{stage}' failed: {cause}")
        self.stage = stage


def delineation_scores(grid: Grid) -> np.ndarray:
    """Per-class ``(mean, std)`` of ``|0.5 - confidence|``; shape ``(3, 2)``, population std."""
    scores = np.abs(0.5 - grid.values[:, :, CONF])
    return np.stack([scores.mean(axis=0), scores.std(axis=0)], axis=1)


@dataclass
class ScoredRecord:
    record_id: str
    mean_score: tuple[float, float, float]
    std_score: tuple[float, float, float]
    annotations: AnnotationSet

    @classmethod
    def from_grid(cls, record_id: str, grid: Grid, annotations: AnnotationSet) -> "ScoredRecord":
        s = delineation_scores(grid)
        return cls(record_id, tuple(float(v) for v in s[:, 0]), tuple(float(v) for v in s[:, 1]), annotations)


def round_half_up(x: float) -> int:
    return int(math.floor(x + 0.5))


def selection_size(top_percent: float, corpus_size: int) -> int:
    return round_half_up(top_percent / 100.0 * corpus_size)


def select_top(scored: Sequence[ScoredRecord], wave_class: WaveClass | str, top_percent: float) -> list[str]:
    """Ids of the most confident ``top_percent`` records for one class.

    Sorted by mean score descending, record id ascending on ties.
    """
    if not 0 < top_percent <= 100:
        raise ValueError(f"top_percent must lie in (0, 100], got {top_percent}")
    if not scored:
        raise ValueError("cannot select from an empty corpus")
    c = parse_wave_class(wave_class).index
    ranked = sorted(scored, key=lambda s: (-s.mean_score[c], s.record_id))
    return [s.record_id for s in ranked[: selection_size(top_percent, len(scored))]]


@dataclass
class PseudolabelManifest:
    top_percent: float
    selected: dict[str, list[str]]
    masks: dict[str, list[bool]]
    scores: dict[str, dict[str, list[float]]]
    provenance: dict = field(default_factory=dict)
    skipped: list[str] = field(default_factory=list)

    def mask_for(self, record_id: str) -> np.ndarray:
        return np.array(self.masks[record_id], dtype=bool)

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, data: dict) -> "PseudolabelManifest":
        return cls(**data)

    def write(self, path: str | os.PathLike) -> None:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(json.dumps(self.to_dict(), indent=1))

    @classmethod
    def read(cls, path: str | os.PathLike) -> "PseudolabelManifest":
        return cls.from_dict(json.loads(Path(path).read_text()))


def build_manifest(scored: Sequence[ScoredRecord], top_percent: float, provenance: dict | None = None,
                   skipped: Sequence[str] = ()) -> PseudolabelManifest:
    selected = {cls.value: select_top(scored, cls, top_percent) for cls in WAVE_CLASSES}
    chosen = {cls: set(ids) for cls, ids in selected.items()}
    masks = {s.record_id: [s.record_id in chosen[cls.value] for cls in WAVE_CLASSES] for s in scored}
    scores = {s.record_id: {"mean": list(s.mean_score), "std": list(s.std_score)} for s in scored}
    return PseudolabelManifest(top_percent, selected, masks, scores, dict(provenance or {}), list(skipped))


def pseudolabel(
    model: DelineationNet,
    corpus: Sequence[EcgRecord | str | os.PathLike],
    grid_config: GridConfig,
    stft_config: StftConfig = StftConfig(),
    top_percent: float = 50.0,
    out_dir: str | os.PathLike | None = None,
    checkpoint_id: str = "",
    timestamp: str | None = None,
) -> tuple[PseudolabelManifest, dict[str, AnnotationSet]]:
    """Label, score and select a corpus.

    Corpus entries are records or record directories; unreadable directories
    are skipped and listed in the manifest.  With ``out_dir`` the manifest goes
    to ``out_dir/pseudolabels/manifest.json`` and each selected record's
    labels to ``<id>.pseudo.delin.json`` beside the record (or in ``out_dir``
    for in-memory records).
    """
    if not 0 < top_percent <= 100:
        raise ValueError(f"top_percent must lie in (0, 100], got {top_percent}")
    if not corpus:
        raise ValueError("unlabeled corpus is empty")
    scored, labels, skipped, locations = [], {}, [], {}
    for entry in corpus:
        if isinstance(entry, EcgRecord):
            record, where = entry, None
        else:
            try:
                record, where = read_record(entry), Path(entry).parent
            except (OSError, ValueError) as exc:
                log.warning("skipping unreadable record %s: %s", entry, exc)
                skipped.append(str(entry))
                continue
        grid, ann = predict_record(model, record, grid_config, stft_config)
        scored.append(ScoredRecord.from_grid(record.id, grid, ann))
        labels[record.id] = ann
        locations[record.id] = where
    if not scored:
        raise ValueError("no readable records in the unlabeled corpus")

    provenance = {
        "checkpoint": checkpoint_id,
        "grid_config": dataclasses.asdict(grid_config),
        "timestamp": timestamp or _dt.datetime.now(_dt.timezone.utc).isoformat(timespec="seconds"),
    }
    manifest = build_manifest(scored, top_percent, provenance, skipped)
    if out_dir is not None:
        out_dir = Path(out_dir)
        manifest.write(out_dir / MANIFEST_RELPATH)
        for rid, ann in labels.items():
            if any(manifest.masks[rid]):
                write_annotations(ann, annotation_path(locations[rid] or out_dir, rid, PSEUDO_SUFFIX))
    return manifest, labels


# ---------------------------------------------------------------------------
# full schedule


@dataclass
class StageReport:
    stage: str
    history: list[float] = field(default_factory=list)
    evaluation: EvalReport | None = None
    info: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {
            "stage": self.stage,
            "history": self.history,
            "evaluation": None if self.evaluation is None else self.evaluation.to_dict(),
            "info": self.info,
        }


@dataclass
class SelfTrainResult:
    model: DelineationNet
    base_model: DelineationNet
    manifest: PseudolabelManifest
    stages: list[StageReport]


def _evaluate(model, pairs, grid_config, stft_config, eval_config) -> EvalReport:
    preds = [predict_record(model, rec, grid_config, stft_config)[1] for rec, _ in pairs]
    durations = {rec.id: rec.duration_ms for rec, _ in pairs}
    return evaluate_dataset(preds, [ann for _, ann in pairs], eval_config, durations_ms=durations)


def _run_stage(name, fn):
    log.info("self-training stage: %s", name)
    try:
        return fn()
    except Exception as exc:
        raise StageError(name, exc) from exc


def selftrain_run(
    labeled: Sequence[tuple[EcgRecord, AnnotationSet]],
    unlabeled: Sequence[EcgRecord],
    model_config: ModelConfig = ModelConfig(),
    train_config: TrainConfig = TrainConfig(),
    grid_config: GridConfig = GridConfig(),
    stft_config: StftConfig = StftConfig(),
    augment_config: AugmentConfig = AugmentConfig(),
    top_percent: float = 50.0,
    finetune_config: TrainConfig | None = None,
    eval_set: Sequence[tuple[EcgRecord, AnnotationSet]] | None = None,
    eval_config: EvalConfig = EvalConfig(),
    out_dir: str | os.PathLike | None = None,
    timestamp: str | None = None,
) -> SelfTrainResult:
    """Base model -> pseudolabels -> scratch model on pseudolabels -> fine-tune.

    Each training stage is evaluated on ``eval_set`` (the labeled set when
    omitted).  ``finetune_config`` defaults to ``train_config`` with half the
    epochs.
    """
    if not 0 < top_percent <= 100:
        raise ValueError(f"top_percent must lie in (0, 100], got {top_percent}")
    if not labeled or not unlabeled:
        raise ValueError("self-training needs non-empty labeled and unlabeled sets")
    if finetune_config is None:
        finetune_config = dataclasses.replace(train_config, epochs=max(1, train_config.epochs // 2))
    eval_pairs = list(eval_set) if eval_set is not None else list(labeled)
    labeled_items = [TrainItem(rec, encode_targets(ann, grid_config)) for rec, ann in labeled]
    stages = []

    def fit(model, items, cfg):
        return train(model, items, cfg, grid_config, stft_config, augment_config)

    base, hist = _run_stage("base", lambda: fit(build_model(model_config), labeled_items, train_config))
    stages.append(StageReport("base", hist, _evaluate(base, eval_pairs, grid_config, stft_config, eval_config)))

    manifest, labels = _run_stage(
        "pseudolabel",
        lambda: pseudolabel(base, list(unlabeled), grid_config, stft_config, top_percent,
                            out_dir=out_dir, checkpoint_id="base", timestamp=timestamp),
    )
    counts = {cls: len(ids) for cls, ids in manifest.selected.items()}
    stages.append(StageReport("pseudolabel", info={"selected": counts, "corpus": len(labels)}))

    by_id = {rec.id: rec for rec in unlabeled}
    pseudo_items = [
        TrainItem(by_id[rid], encode_targets(labels[rid], grid_config).with_mask(manifest.mask_for(rid)))
        for rid in sorted(labels)
        if any(manifest.masks[rid])
    ]
    scratch, hist = _run_stage("scratch", lambda: fit(build_model(model_config), pseudo_items, train_config))
    stages.append(StageReport("scratch", hist, _evaluate(scratch, eval_pairs, grid_config, stft_config, eval_config),
                              info={"records": len(pseudo_items)}))

    final, hist = _run_stage("finetune", lambda: fit(scratch, labeled_items, finetune_config))
    stages.append(StageReport("finetune", hist, _evaluate(final, eval_pairs, grid_config, stft_config, eval_config)))
    return SelfTrainResult(final, base, manifest, stages)
