"""``ecgcode`` command line: synth, preprocess, train, predict, pseudolabel, selftrain, eval, plot.

Exit status: 0 success, 1 validation/usage error, 2 I/O error.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import dsp
from .config import CONFIG_ENV, ToolkitConfig, load_config
from .evaluation import evaluate_dataset
from .grid_codec import encode_targets
from .model import TrainItem, build_model, load_checkpoint, predict_record, save_checkpoint, train
from .plot import write_svg
from .selftrain import PSEUDO_SUFFIX, pseudolabel, selftrain_run
from .signal_io import (
    DELIN_SUFFIX,
    HEADER_NAME,
    AnnotationSet,
    Segment,
    annotation_path,
    list_records,
    read_annotations,
    read_csv_record,
    read_record,
    synth_corpus,
    write_annotations,
    write_record,
)

log = logging.getLogger("ecgcode")

EXIT_OK, EXIT_INVALID, EXIT_IO = 0, 1, 2


class UsageError(ValueError):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(f"{self.prog}: {message}")


# ---------------------------------------------------------------------------
# helpers


def _resolve(args, path: str | None) -> Path | None:
    if path is None:
        return None
    p = Path(path)
    return p if p.is_absolute() else Path(args.workdir) / p


def _config(args) -> ToolkitConfig:
    cfg = load_config(_resolve(args, args.config) if args.config else None)
    grid, train_cfg, ev = cfg.grid, cfg.train, cfg.eval
    grid_over = {k: v for k, v in (("merge_gap", getattr(args, "merge_gap", None)),
                                   ("min_len", getattr(args, "min_len", None))) if v is not None}
    if grid_over:
        grid = dataclasses.replace(grid, **grid_over)
    train_over = {}
    for flag, key in (("epochs", "epochs"), ("lr", "learning_rate"), ("batch_size", "batch_size")):
        if getattr(args, flag, None) is not None:
            train_over[key] = getattr(args, flag)
    if getattr(args, "no_augment", False):
        train_over["augment"] = False
    if args.seed is not None:
        train_over["seed"] = args.seed
    if train_over:
        train_cfg = dataclasses.replace(train_cfg, **train_over)
    ev_over = {k: v for k, v in (("tolerance_ms", getattr(args, "tolerance_ms", None)),
                                 ("exclude_edges_s", getattr(args, "exclude_edges_s", None))) if v is not None}
    if ev_over:
        ev = dataclasses.replace(ev, **ev_over)
    top = getattr(args, "top_percent", None)
    rate = getattr(args, "sample_rate", None)
    return cfg.replace(
        grid=grid, train=train_cfg, eval=ev,
        top_percent=cfg.top_percent if top is None else top,
        sample_rate_hz=cfg.sample_rate_hz if rate is None else rate,
        seed=cfg.seed if args.seed is None else args.seed,
    )


def _labeled_pairs(directory: Path, suffix: str = DELIN_SUFFIX):
    pairs = []
    for rec_dir in list_records(directory):
        record = read_record(rec_dir)
        ann_file = annotation_path(directory, record.id, suffix)
        if not ann_file.is_file():
            raise FileNotFoundError(f"missing annotations {ann_file}")
        pairs.append((record, read_annotations(ann_file)))
    if not pairs:
        raise FileNotFoundError(f"no records in {directory}")
    return pairs


def _record_duration_ms(rec_dir: Path) -> float | None:
    header = rec_dir / HEADER_NAME
    if not header.is_file():
        return None
    data = json.loads(header.read_text())
    return 1000.0 * data["n_samples"] / data["sampling_rate_hz"]


# ---------------------------------------------------------------------------
# subcommands


def cmd_synth(args) -> int:
    out = _resolve(args, args.out)
    cfg = _config(args)
    corpus = synth_corpus(args.n, cfg.seed, duration_s=args.duration_s, sampling_rate_hz=cfg.sample_rate_hz,
                          n_leads=args.leads, noise_mv=args.noise_mv, prefix=args.prefix)
    for record, ann in corpus:
        write_record(record, out / record.id)
        write_annotations(ann, annotation_path(out, record.id))
    print(f"wrote {len(corpus)} records to {out}")
    return EXIT_OK


def _rescale(ann: AnnotationSet, ratio: float, n_samples: int) -> AnnotationSet:
    segs = []
    for s in ann.segments:
        on, off = int(round(s.onset * ratio)), min(int(round(s.offset * ratio)), n_samples)
        if off > on:
            segs.append(Segment(s.wave_class, on, off, s.confidence))
    return AnnotationSet(ann.record_id, tuple(segs))


def cmd_preprocess(args) -> int:
    """Resample records (and CSV files) to the working rate; annotations follow."""
    src, out = _resolve(args, args.input), _resolve(args, args.out)
    cfg = _config(args)
    target = cfg.sample_rate_hz
    if not src.is_dir():
        raise FileNotFoundError(f"no such directory: {src}")
    records = [read_record(p) for p in sorted(src.iterdir()) if (p / HEADER_NAME).is_file()]
    records += [read_csv_record(p, args.csv_rate) for p in sorted(src.glob("*.csv"))]
    for record in records:
        x = record.samples.astype(np.float64)
        if record.sampling_rate_hz != target:
            x = dsp.resample(x, record.sampling_rate_hz, target)
        if args.zscore:
            x = dsp.zscore(x).values
        new = record.with_samples(x, sampling_rate_hz=target)
        write_record(new, out / record.id)
        ann_file = annotation_path(src, record.id)
        if ann_file.is_file():
            ratio = target / record.sampling_rate_hz
            write_annotations(_rescale(read_annotations(ann_file), ratio, new.n_samples),
                              annotation_path(out, record.id))
    print(f"preprocessed {len(records)} records into {out}")
    return EXIT_OK


def cmd_train(args) -> int:
    cfg = _config(args)
    data, out = _resolve(args, args.data), _resolve(args, args.out)
    pairs = _labeled_pairs(data)
    items = [TrainItem(rec, encode_targets(ann, cfg.grid)) for rec, ann in pairs]
    model = build_model(dataclasses.replace(cfg.model, seed=cfg.seed))
    model, history = train(model, items, cfg.train, cfg.grid, cfg.stft, cfg.augment)
    save_checkpoint(model, out, epoch=cfg.train.epochs, extra={"history": history, "toolkit": cfg.to_dict()})
    print(f"trained on {len(items)} records: loss {history[0]:.4f} -> {history[-1]:.4f}" if history else "no epochs")
    return EXIT_OK


def cmd_predict(args) -> int:
    cfg = _config(args)
    model, _ = load_checkpoint(_resolve(args, args.model))
    data, out = _resolve(args, args.data), _resolve(args, args.out)
    recs = [read_record(p) for p in list_records(data)]
    for record in recs:
        _, ann = predict_record(model, record, cfg.grid, cfg.stft)
        write_annotations(ann, annotation_path(out, record.id))
    print(f"wrote predictions for {len(recs)} records to {out}")
    return EXIT_OK


def cmd_pseudolabel(args) -> int:
    cfg = _config(args)
    ckpt = _resolve(args, args.model)
    model, _ = load_checkpoint(ckpt)
    data = _resolve(args, args.data)
    manifest, _ = pseudolabel(model, list_records(data), cfg.grid, cfg.stft, cfg.top_percent,
                              out_dir=Path(args.workdir), checkpoint_id=str(ckpt))
    counts = {k: len(v) for k, v in manifest.selected.items()}
    print(f"pseudolabeled {len(manifest.masks)} records; selected per class {counts}")
    return EXIT_OK


def cmd_selftrain(args) -> int:
    cfg = _config(args)
    labeled = _labeled_pairs(_resolve(args, args.labeled))
    unlabeled = [read_record(p) for p in list_records(_resolve(args, args.unlabeled))]
    eval_set = _labeled_pairs(_resolve(args, args.eval_data)) if args.eval_data else None
    result = selftrain_run(
        labeled, unlabeled, dataclasses.replace(cfg.model, seed=cfg.seed), cfg.train, cfg.grid, cfg.stft,
        cfg.augment, cfg.top_percent, eval_set=eval_set, eval_config=cfg.eval, out_dir=Path(args.workdir),
    )
    out = _resolve(args, args.out)
    save_checkpoint(result.model, out, extra={"stages": [s.to_dict() for s in result.stages]})
    save_checkpoint(result.base_model, out.with_name(out.name + "_base"))
    (out / "stages.json").write_text(json.dumps([s.to_dict() for s in result.stages], indent=1))
    for stage in result.stages:
        if stage.evaluation is not None:
            print(stage.evaluation.to_markdown(title=stage.stage))
    return EXIT_OK


def cmd_eval(args) -> int:
    cfg = _config(args)
    pred_dir, truth_dir = _resolve(args, args.pred), _resolve(args, args.truth)
    if not pred_dir.is_dir():
        raise FileNotFoundError(f"no such predictions directory: {pred_dir}")
    pred_files = sorted(p for p in pred_dir.glob(f"*{DELIN_SUFFIX}") if not p.name.endswith(PSEUDO_SUFFIX))
    if not pred_files:
        raise FileNotFoundError(f"no {DELIN_SUFFIX} files in {pred_dir}")
    preds = [read_annotations(p) for p in pred_files]
    truths = []
    for pred in preds:
        t = annotation_path(truth_dir, pred.record_id)
        if not t.is_file():
            raise FileNotFoundError(f"missing ground truth {t}")
        truths.append(read_annotations(t))
    durations = None
    if cfg.eval.exclude_edges_s > 0:
        durations = {}
        for pred in preds:
            dur = _record_duration_ms(truth_dir / pred.record_id)
            if dur is None:
                raise ValueError(f"edge exclusion needs record {pred.record_id} beside its annotations")
            durations[pred.record_id] = dur
    report = evaluate_dataset(preds, truths, cfg.eval, sampling_rate_hz=cfg.sample_rate_hz, durations_ms=durations)
    out = _resolve(args, args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    markdown = report.to_markdown()
    out.with_suffix(".json").write_text(report.to_json())
    out.with_suffix(".md").write_text(markdown)
    print(markdown)
    return EXIT_OK


def cmd_plot(args) -> int:
    record = read_record(_resolve(args, args.record))
    ann = read_annotations(_resolve(args, args.annotations)) if args.annotations else None
    out = _resolve(args, args.out)
    write_svg(record, ann, out, leads=args.leads)
    print(f"wrote {out}")
    return EXIT_OK


# ---------------------------------------------------------------------------
# parser


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="ecgcode", description="ECG P/QRS/T delineation toolkit.")
    parser.add_argument("--workdir", default=".", help="base directory for relative paths (default: .)")
    parser.add_argument("--config", default=None,
                        help=f"toolkit config JSON (default: ${CONFIG_ENV} if set, else built-in defaults)")
    parser.add_argument("--seed", type=int, default=None, help="global seed (default: config seed, 0)")
    parser.add_argument("-v", "--verbose", action="store_true")
    # the global options are also accepted after the subcommand
    common = _Parser(add_help=False)
    common.add_argument("--workdir", default=argparse.SUPPRESS, help=argparse.SUPPRESS)
    common.add_argument("--config", default=argparse.SUPPRESS, help=argparse.SUPPRESS)
    common.add_argument("--seed", type=int, default=argparse.SUPPRESS, help="global seed")
    sub = parser.add_subparsers(dest="command", parser_class=_Parser, required=True)
    _add = sub.add_parser

    def add_parser(name, **kw):
        return _add(name, parents=[common], **kw)

    sub.add_parser = add_parser

    def grid_flags(p):
        p.add_argument("--merge-gap", type=int, default=None, help="unite same-class segments closer than this "
                       "many samples (default: 300)")
        p.add_argument("--min-len", type=int, default=None, help="drop segments shorter than this (default: 50)")

    def rate_flag(p):
        p.add_argument("--sample-rate", type=int, default=None, help="working sampling rate in Hz (default: 1000)")

    def train_flags(p):
        p.add_argument("--epochs", type=int, default=None)
        p.add_argument("--lr", type=float, default=None)
        p.add_argument("--batch-size", type=int, default=None)
        p.add_argument("--no-augment", action="store_true", help="disable band-pass/notch augmentation")

    p = sub.add_parser("synth", help="generate a synthetic annotated corpus")
    p.add_argument("--n", type=int, required=True)
    p.add_argument("--out", default="corpus")
    p.add_argument("--duration-s", type=float, default=10.0)
    p.add_argument("--leads", type=int, default=12)
    p.add_argument("--noise-mv", type=float, default=0.02)
    p.add_argument("--prefix", default="rec")
    rate_flag(p)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("preprocess", help="resample records/CSV files to the working rate")
    p.add_argument("--in", dest="input", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--csv-rate", type=int, default=None, help="sampling rate of index-based CSV files")
    p.add_argument("--zscore", action="store_true", help="also store z-scored leads")
    rate_flag(p)
    p.set_defaults(func=cmd_preprocess)

    p = sub.add_parser("train", help="train a model on annotated records")
    p.add_argument("--data", required=True)
    p.add_argument("--out", default="model")
    train_flags(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("predict", help="write <id>.delin.json predictions")
    p.add_argument("--model", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--out", default="predictions")
    grid_flags(p)
    p.set_defaults(func=cmd_predict)

    p = sub.add_parser("pseudolabel", help="label, score and select an unlabeled corpus")
    p.add_argument("--model", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--top-percent", type=float, default=None, help="share of records kept per class (default: 50)")
    grid_flags(p)
    p.set_defaults(func=cmd_pseudolabel)

    p = sub.add_parser("selftrain", help="base train, pseudolabel, scratch train, fine-tune")
    p.add_argument("--labeled", required=True)
    p.add_argument("--unlabeled", required=True)
    p.add_argument("--eval-data", default=None, help="annotated records for per-stage reports")
    p.add_argument("--out", default="model_selftrained")
    p.add_argument("--top-percent", type=float, default=None, help="(default: 50)")
    train_flags(p)
    grid_flags(p)
    p.set_defaults(func=cmd_selftrain)

    p = sub.add_parser("eval", help="window-tolerance evaluation report")
    p.add_argument("--pred", required=True)
    p.add_argument("--truth", required=True)
    p.add_argument("--out", default="report", help="report path stem; writes .json and .md")
    p.add_argument("--tolerance-ms", type=float, default=None, help="matching window (default: 150)")
    p.add_argument("--exclude-edges-s", type=float, default=None, help="ignore points this close to record ends "
                   "(default: 0)")
    rate_flag(p)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("plot", help="SVG of leads with shaded segments")
    p.add_argument("--record", required=True)
    p.add_argument("--annotations", default=None)
    p.add_argument("--out", default="plot.svg")
    p.add_argument("--leads", type=int, default=None, help="number of leads to draw (default: all)")
    p.set_defaults(func=cmd_plot)
    return parser


def run(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as exc:
        print(exc, file=sys.stderr)
        return EXIT_INVALID
    except SystemExit as exc:  # --help
        return EXIT_OK if not exc.code else EXIT_INVALID
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_IO
    except (ValueError, KeyError, RuntimeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INVALID


def main() -> None:
    sys.exit(run())


if __name__ == "__main__":
    main()
