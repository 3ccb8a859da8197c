"""Command-line entry point: ``sparsevox <subcommand> ...``.

Exit codes: 0 success, 2 configuration error, 3 data error, 4 numeric divergence.
"""

from __future__ import annotations

import argparse
import csv
import io
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import metrics, pipeline
from .network import TrainingDiverged, load_checkpoint, predict
from .roi_crop import EmptyRoiError, RoiSpec, crop, expand_roi, extract_roi
from .sparse_ops import ConfigError
from .sparse_tensor import QuantizationPolicy, from_voxels, quantize, save_sparse
from .sparsify import (TABLE1_COLUMNS, HuHistogram, HuRange, InfeasibleBudget, apply_range, corpus_reduction,
                       histogram, parse_budget, range_stats, table1_rows)
from .volume_io import (AlignmentError, PhantomSpec, VolumeFormatError, find_volumes, generate_phantom,
                        kidney_phantom_spec, load_volume, save_volume)

EXIT_OK, EXIT_CONFIG, EXIT_DATA, EXIT_DIVERGED = 0, 2, 3, 4

log = logging.getLogger("sparsevox")


def _margins(text: str) -> list:
    if ".." in text:
        lo, hi = text.split("..")
        return list(range(int(lo), int(hi) + 1))
    return [int(m) for m in text.split(",")]


def _dims(text: str) -> tuple:
    parts = [int(v) for v in text.split(",")]
    return tuple(parts * 3) if len(parts) == 1 else tuple(parts)


def _load_config(args) -> pipeline.PipelineConfig:
    cfg = pipeline.PipelineConfig()
    if getattr(args, "config", None):
        cfg = pipeline.PipelineConfig.from_dict(json.loads(Path(args.config).read_text()))
    overrides = {
        "data_root": getattr(args, "data", None),
        "output_dir": getattr(args, "out", None),
        "run_id": getattr(args, "run_id", None),
        "folds": getattr(args, "folds", None),
        "n_folds": getattr(args, "k", None),
        "fold_seed": getattr(args, "fold_seed", None),
        "factor": getattr(args, "factor", None),
        "crop_margin": getattr(args, "margin", None),
        "train.epochs": getattr(args, "epochs", None),
        "train.seed": getattr(args, "seed", None),
        "train.lr": getattr(args, "lr", None),
        "train.dtype": getattr(args, "dtype", None),
        "train.batch_size": getattr(args, "batch_size", None),
    }
    if getattr(args, "range", None):
        r = HuRange.parse(args.range)
        overrides["hu_range"] = [r.lo, r.hi]
    if getattr(args, "margins", None):
        overrides["margins"] = _margins(args.margins)
    return cfg.merged(overrides)


def _write_rows(rows: list, columns: list, path) -> str:
    buf = io.StringIO()
    w = csv.DictWriter(buf, columns, lineterminator="\n")
    w.writeheader()
    for r in rows:
        w.writerow({k: (f"{v:.4f}" if isinstance(v, float) else v) for k, v in r.items()})
    if path:
        Path(path).write_text(buf.getvalue())
    return buf.getvalue()


# ---------------------------------------------------------------- commands


def cmd_phantom_gen(args) -> int:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    ext = ".nii.gz" if args.format == "nifti" else ".json"
    if args.spec:
        spec = PhantomSpec.from_json(Path(args.spec).read_text())
        save_volume(generate_phantom(spec), out / f"phantom{ext}")
        return EXIT_OK
    for i in range(args.n):
        spec = kidney_phantom_spec(_dims(args.dims), seed=args.seed + i, clutter_fraction=args.clutter)
        save_volume(generate_phantom(spec), out / f"case_{i:05d}{ext}")
    return EXIT_OK


def _gather_volumes(inputs) -> list:
    paths = []
    for p in map(Path, inputs):
        paths.extend(find_volumes(p) if p.is_dir() else [p])
    return paths


def cmd_histogram(args) -> int:
    paths = _gather_volumes(args.inputs)
    if not paths:
        raise FileNotFoundError("no volumes given")
    h = histogram((load_volume(p) for p in paths), step=args.step, threads=pipeline.threads())
    Path(args.out).write_text(h.to_json())
    return EXIT_OK


def cmd_optimize_range(args) -> int:
    h = HuHistogram.from_json(Path(args.hist).read_text())
    budgets = [parse_budget(b) for b in args.budget]
    rows = table1_rows(h, budgets, per_case=args.per_case)
    text = _write_rows(rows, TABLE1_COLUMNS, args.out)
    if args.json:
        Path(args.json).write_text(json.dumps(rows, indent=1))
    sys.stdout.write(text)
    return EXIT_OK


def cmd_sparsify(args) -> int:
    r = HuRange.parse(args.range)
    v = load_volume(args.volume)
    vs = apply_range(v, r)
    t = from_voxels(vs, 0, r)
    labels = vs.labels
    if args.factor > 1:
        t, labels = quantize(t, QuantizationPolicy(args.factor), labels)
    if args.out:
        save_sparse(t, args.out, labels)
    stats = {"sites": len(t), "voxels": int(np.prod(v.dims)), "kept": len(vs), "range": str(r)}
    if v.labels is not None:
        h = histogram([v])
        st = range_stats(h, r)
        stats.update(signal_loss=st.signal_loss, background_removed=st.background_removed,
                     reduction=corpus_reduction(h, r))
    print(json.dumps(stats, indent=1))
    return EXIT_OK


def cmd_train_roi(args) -> int:
    cfg = _load_config(args)
    manifest = pipeline.run_stage1(cfg)
    statuses = [f["status"] for f in manifest["folds"]]
    print(json.dumps({"run_dir": str(pipeline.run_dir(cfg)), "folds": statuses}))
    if "diverged" in statuses:
        return EXIT_DIVERGED
    return EXIT_OK if all(s == "ok" for s in statuses) else EXIT_DATA


def cmd_predict(args) -> int:
    ckpt = load_checkpoint(args.checkpoint)
    r = HuRange.parse(args.range)
    cfg = pipeline.PipelineConfig(hu_range=(r.lo, r.hi), factor=args.factor, train=ckpt.train)
    v = load_volume(args.volume)
    q, ql = pipeline.quantized_case(v, cfg)
    pred = predict(ckpt, q)
    case = pipeline.Case(pipeline.case_id_of(Path(args.volume)), Path(args.volume), q, ql, v.dims)
    pipeline._save_preds(Path(args.out), case, pred)
    if args.roi_out:
        try:
            roi = extract_roi(q.coords, pred, args.factor, v.dims, args.margin)
        except EmptyRoiError as exc:
            log.warning("%s", exc)
            return EXIT_DATA
        Path(args.roi_out).write_text(roi.to_json())
    return EXIT_OK


def cmd_crop(args) -> int:
    v = load_volume(args.volume)
    roi = RoiSpec.from_json(Path(args.roi).read_text())
    if args.margin:
        roi = expand_roi(roi, args.margin)
    save_volume(crop(v, roi), args.out)
    return EXIT_OK


def cmd_crop_stats(args) -> int:
    cfg = _load_config(args)
    result = pipeline.run_crop_stage(cfg, truth_as_prediction=args.truth_as_prediction)
    sys.stdout.write((pipeline.run_dir(cfg) / "reports" / "table3.csv").read_text())
    for note in result["notes"]:
        log.warning("%s: %s", note["case"], note["note"])
    return EXIT_OK


def cmd_evaluate(args) -> int:
    counts, dices = [], []
    files = []
    for p in map(Path, args.preds):
        files.extend(sorted(p.rglob("*.npy")) if p.is_dir() else [p])
    if not files:
        raise FileNotFoundError("no prediction files")
    for f in files:
        _, pred, truth = pipeline.load_preds(f)
        c = metrics.confusion(pred, truth)
        counts.append(c)
        dices.append(metrics.dice(c))
    rep = metrics.aggregate(counts, dices)
    if args.out:
        out = Path(args.out)
        out.with_suffix(".csv").write_text(rep.to_csv())
        out.with_suffix(".json").write_text(rep.to_json())
    sys.stdout.write(rep.to_csv())
    return EXIT_OK


def cmd_report(args) -> int:
    summary = pipeline.report(args.runs, args.out)
    for w in summary["warnings"]:
        log.warning("%s", w)
    for m in summary["missing"]:
        log.warning("missing manifest: %s", m)
    if not args.out:
        print(json.dumps(summary, indent=1))
    return EXIT_OK


# ---------------------------------------------------------------- parser


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="sparsevox", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("phantom-gen", help="write synthetic labelled CT phantoms")
    s.add_argument("--out", required=True)
    s.add_argument("--n", type=int, default=25)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--dims", default="32,32,32")
    s.add_argument("--clutter", type=float, default=0.5)
    s.add_argument("--spec", help="PhantomSpec JSON; writes a single phantom")
    s.add_argument("--format", choices=["raw", "nifti"], default="raw")
    s.set_defaults(func=cmd_phantom_gen)

    s = sub.add_parser("histogram", help="per-HU signal/background histogram over labelled volumes")
    s.add_argument("inputs", nargs="+")
    s.add_argument("--out", required=True)
    s.add_argument("--step", type=int, default=10)
    s.set_defaults(func=cmd_histogram)

    s = sub.add_parser("optimize-range", help="least-signal-loss HU range under a voxel budget")
    s.add_argument("--hist", required=True)
    s.add_argument("--budget", action="append", required=True, help="e.g. 64M; repeatable")
    s.add_argument("--per-case", action="store_true")
    s.add_argument("--out", help="CSV path")
    s.add_argument("--json", help="also write rows as JSON")
    s.set_defaults(func=cmd_optimize_range)

    s = sub.add_parser("sparsify", help="threshold one volume and write a sparse tensor")
    s.add_argument("volume")
    s.add_argument("--range", default="-30:350")
    s.add_argument("--factor", type=int, default=1)
    s.add_argument("--out")
    s.set_defaults(func=cmd_sparsify)

    for name, func, helptext in (("train-roi", cmd_train_roi, "cross-validated stage-1 training"),
                                 ("crop-stats", cmd_crop_stats, "ROI crops and per-margin statistics")):
        s = sub.add_parser(name, help=helptext)
        s.add_argument("--config")
        s.add_argument("--data")
        s.add_argument("--out")
        s.add_argument("--run-id")
        s.add_argument("--range")
        s.add_argument("--factor", type=int)
        s.add_argument("--folds", type=int)
        s.add_argument("--k", type=int, help="number of cross-validation parts")
        s.add_argument("--fold-seed", type=int)
        s.add_argument("--epochs", type=int)
        s.add_argument("--seed", type=int)
        s.add_argument("--lr", type=float)
        s.add_argument("--batch-size", type=int)
        s.add_argument("--dtype", choices=["float32", "float64"])
        s.add_argument("--margins")
        s.add_argument("--margin", type=int)
        if name == "crop-stats":
            s.add_argument("--truth-as-prediction", action="store_true")
        s.set_defaults(func=func)

    s = sub.add_parser("predict", help="per-site classes for one volume")
    s.add_argument("volume")
    s.add_argument("--checkpoint", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--range", default="-30:350")
    s.add_argument("--factor", type=int, default=3)
    s.add_argument("--roi-out")
    s.add_argument("--margin", type=int, default=0)
    s.set_defaults(func=cmd_predict)

    s = sub.add_parser("crop", help="crop a volume to an ROI")
    s.add_argument("volume")
    s.add_argument("--roi", required=True)
    s.add_argument("--margin", type=int, default=0)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_crop)

    s = sub.add_parser("evaluate", help="Table-2 style report from prediction files")
    s.add_argument("preds", nargs="+")
    s.add_argument("--out")
    s.set_defaults(func=cmd_evaluate)

    s = sub.add_parser("report", help="consolidate run directories")
    s.add_argument("runs", nargs="*")
    s.add_argument("--out")
    s.set_defaults(func=cmd_report)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_CONFIG if exc.code else EXIT_OK
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except TrainingDiverged as exc:
        log.error("%s", exc)
        return EXIT_DIVERGED
    except (ConfigError, InfeasibleBudget, TypeError, KeyError) as exc:
        log.error("configuration error: %s", exc)
        return EXIT_CONFIG
    except (FileNotFoundError, VolumeFormatError, AlignmentError, EmptyRoiError) as exc:
        log.error("data error: %s", exc)
        return EXIT_DATA
    except ValueError as exc:
        log.error("configuration error: %s", exc)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
