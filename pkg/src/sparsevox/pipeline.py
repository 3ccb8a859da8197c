"""End-to-end orchestration: sparsify -> quantize -> train/predict per fold -> ROI crops -> reports.

Run layout::

    out/<run-id>/manifest.json
    out/<run-id>/reports/{table2.csv, table2.json, table3.csv}
    out/<run-id>/fold-<k>/{checkpoint/, preds/, roi/, reports/}

Everything except ``*/reports/progress.jsonl`` (wall-clock timing) is a
deterministic function of the config and the input files.
"""

from __future__ import annotations

import csv
import dataclasses
import hashlib
import io
import json
import logging
import os
import traceback
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from . import metrics
from .network import (TrainConfig, TrainingDiverged, UNetConfig, load_checkpoint, predict,
                      save_checkpoint, train)
from .roi_crop import (TABLE3_COLUMNS, EmptyRoiError, average_crop_stats, crop, crop_stats, expand_roi,
                       extract_roi, full_volume_roi)
from .sparse_tensor import QuantizationPolicy, from_voxels, quantize
from .sparsify import HuRange, apply_range
from .volume_io import DenseVolume, find_volumes, load_volume, save_volume, seg_path

log = logging.getLogger(__name__)

PROGRESS_FILE = "progress.jsonl"


def threads() -> int:
    try:
        return max(1, int(os.environ.get("SPARSEVOX_THREADS", "1")))
    except ValueError:
        return 1


@dataclass
class PipelineConfig:
    data_root: str = "data"
    output_dir: str = "out"
    run_id: Optional[str] = None
    hu_range: tuple = (-30, 350)
    factor: int = 3
    unet: UNetConfig = field(default_factory=UNetConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    fold_seed: int = 0
    n_folds: int = 10
    folds: Optional[int] = None  # run only the first N folds of the plan
    margins: tuple = tuple(range(11))
    crop_margin: int = 0

    def __post_init__(self):
        if isinstance(self.unet, dict):
            self.unet = UNetConfig(**self.unet)
        if isinstance(self.train, dict):
            self.train = TrainConfig(**self.train)
        self.hu_range = tuple(int(v) for v in self.hu_range)
        self.margins = tuple(int(m) for m in self.margins)
        if self.factor < 1:
            raise ValueError("quantization factor must be >= 1")

    @property
    def range(self) -> HuRange:
        return HuRange(*self.hu_range)

    def to_dict(self) -> dict:
        return json.loads(json.dumps(asdict(self)))

    @classmethod
    def from_dict(cls, d: dict) -> "PipelineConfig":
        return cls(**d)

    def merged(self, overrides: dict) -> "PipelineConfig":
        """Copy with dotted-key overrides (``train.epochs``) applied; ``None`` values are ignored."""
        d = self.to_dict()
        for key, val in overrides.items():
            if val is None:
                continue
            target = d
            *path, last = key.split(".")
            for p in path:
                target = target[p]
            target[last] = val
        return PipelineConfig.from_dict(d)

    def resolved_run_id(self) -> str:
        if self.run_id:
            return self.run_id
        # only inputs that change fold outputs, so later stages resolve the same directory
        d = self.to_dict()
        for key in ("output_dir", "margins", "crop_margin", "run_id", "folds"):
            d.pop(key)
        return "run-" + hashlib.sha256(json.dumps(d, sort_keys=True).encode()).hexdigest()[:12]


@dataclass
class Case:
    case_id: str
    path: Path
    tensor: object
    labels: np.ndarray
    dims: tuple


def sha256_file(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def case_id_of(path: Path) -> str:
    name = path.name
    for ext in (".nii.gz", ".nii", ".json"):
        if name.endswith(ext):
            return name[: -len(ext)]
    return path.stem


def input_files(path: Path) -> list:
    files = [path]
    if path.name.endswith(".json"):
        files.append(path.with_suffix(".raw"))
    seg = seg_path(path)
    if seg.exists():
        files.append(seg)
        if seg.name.endswith(".json"):
            files.append(seg.with_suffix(".raw"))
    return files


def quantized_case(v: DenseVolume, cfg: PipelineConfig) -> tuple:
    vs = apply_range(v, cfg.range)
    t = from_voxels(vs, 0, cfg.range, np.dtype(cfg.train.dtype))
    labels = vs.labels if vs.labels is not None else np.zeros(len(vs), np.uint8)
    return quantize(t, QuantizationPolicy(cfg.factor), labels)


def prepare_case(path: Path, cfg: PipelineConfig) -> Case:
    v = load_volume(path)
    if v.labels is None:
        raise ValueError(f"{path} has no segmentation sibling")
    q, ql = quantized_case(v, cfg)
    return Case(case_id_of(path), path, q, ql, v.dims)


def prepare_cases(paths: Sequence[Path], cfg: PipelineConfig) -> list:
    n = threads()
    if n > 1:
        with ThreadPoolExecutor(n) as pool:
            return list(pool.map(lambda p: prepare_case(p, cfg), paths))
    return [prepare_case(p, cfg) for p in paths]


def _write(path: Path, data) -> str:
    path.parent.mkdir(parents=True, exist_ok=True)
    if isinstance(data, str):
        data = data.encode()
    path.write_bytes(data)
    return hashlib.sha256(data).hexdigest()


def _save_preds(path: Path, case: Case, pred: np.ndarray) -> str:
    table = np.column_stack([case.tensor.coords.astype(np.int32), pred.astype(np.int32),
                             case.labels.astype(np.int32)])
    buf = io.BytesIO()
    np.save(buf, table, allow_pickle=False)
    return _write(path, buf.getvalue())


def load_preds(path) -> tuple:
    """(coords (N, 4), pred, truth) from a predictions file."""
    table = np.load(path, allow_pickle=False)
    return table[:, :4], table[:, 4], table[:, 5]


def run_dir(cfg: PipelineConfig) -> Path:
    return Path(cfg.output_dir) / cfg.resolved_run_id()


def _hash_tree(root: Path, base: Path) -> dict:
    out = {}
    for p in sorted(root.rglob("*")):
        if p.is_file() and p.name != PROGRESS_FILE and not p.name.endswith(".tmp"):
            out[str(p.relative_to(base))] = sha256_file(p)
    return out


def run_stage1(cfg: PipelineConfig) -> dict:
    """Cross-validated ROI finder training; returns the manifest dict (also written to disk)."""
    paths = find_volumes(cfg.data_root)
    if not paths:
        raise FileNotFoundError(f"no volumes found under {cfg.data_root}")
    cases = prepare_cases(paths, cfg)
    by_id = {c.case_id: c for c in cases}
    plan = metrics.make_folds(sorted(by_id), cfg.fold_seed, cfg.n_folds)
    out = run_dir(cfg)
    out.mkdir(parents=True, exist_ok=True)
    manifest = {
        "run_id": cfg.resolved_run_id(),
        "config": cfg.to_dict(),
        "seeds": {"fold_seed": cfg.fold_seed, "train_seed": cfg.train.seed},
        "inputs": {c.case_id: {str(f.name): sha256_file(f) for f in input_files(c.path)} for c in cases},
        "plan": [list(p) for p in plan.parts],
        "folds": [],
    }
    n_run = len(plan.folds) if cfg.folds is None else min(cfg.folds, len(plan.folds))
    fold_counts, case_dice = [], []
    for fold in plan.folds[:n_run]:
        fdir = out / f"fold-{fold.index}"
        entry = {"index": fold.index, "train": list(fold.train), "val": list(fold.val),
                 "test": list(fold.test), "status": "ok"}
        try:
            counts, dices = _run_fold(fold, by_id, cfg, fdir)
            fold_counts.append(counts)
            case_dice.extend(dices)
        except TrainingDiverged as exc:
            entry.update(status="diverged", error=str(exc))
            save_checkpoint(exc.last_good, fdir / "checkpoint" / "last_good")
        except Exception as exc:  # a failed fold must not take the others down
            log.error("fold %d failed: %s", fold.index, exc)
            entry.update(status="failed", error=f"{type(exc).__name__}: {exc}",
                         traceback=traceback.format_exc().splitlines()[-3:])
        if fdir.exists():
            entry["outputs"] = _hash_tree(fdir, out)
        manifest["folds"].append(entry)

    if fold_counts:
        report = metrics.aggregate(fold_counts, case_dice)
        manifest["reports"] = {
            "reports/table2.json": _write(out / "reports" / "table2.json", report.to_json()),
            "reports/table2.csv": _write(out / "reports" / "table2.csv", report.to_csv()),
        }
    _write(out / "manifest.json", json.dumps(manifest, indent=1, sort_keys=True))
    return manifest


def _run_fold(fold, by_id: dict, cfg: PipelineConfig, fdir: Path) -> tuple:
    train_set = [(by_id[c].tensor, by_id[c].labels) for c in fold.train]
    val_set = [(by_id[c].tensor, by_id[c].labels) for c in fold.val]
    tcfg = dataclasses.replace(cfg.train, seed=cfg.train.seed + fold.index)
    progress = fdir / "reports" / PROGRESS_FILE
    progress.parent.mkdir(parents=True, exist_ok=True)
    progress.write_text("")

    def on_epoch(rec):
        with progress.open("a") as fh:
            fh.write(json.dumps(rec) + "\n")

    ckpt, history = train(train_set, tcfg, cfg.unet, val=val_set, on_epoch=on_epoch)
    save_checkpoint(ckpt, fdir / "checkpoint" / "model")
    counts, dices = [], []
    for cid in fold.test:
        case = by_id[cid]
        pred = predict(ckpt, case.tensor)
        _save_preds(fdir / "preds" / f"{cid}.npy", case, pred)
        c = metrics.confusion(pred, case.labels)
        counts.append(c)
        dices.append(metrics.dice(c))
    total = metrics.aggregate(counts, dices)
    _write(fdir / "reports" / "table2.json", total.to_json())
    _write(fdir / "reports" / "table2.csv", total.to_csv())
    _write(fdir / "reports" / "history.json",
           json.dumps([{k: v for k, v in h.items() if k != "seconds"} for h in history], indent=1))
    return total.counts, dices


def table3_csv(rows) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(TABLE3_COLUMNS)
    for r in rows:
        w.writerow([r.margin] + [f"{getattr(r, c):.6f}" for c in TABLE3_COLUMNS[1:]])
    return buf.getvalue()


def run_crop_stage(cfg: PipelineConfig, truth_as_prediction: bool = False) -> dict:
    """Predict ROIs on every test case of completed folds, crop, and score margins.

    With ``truth_as_prediction`` the quantized truth replaces network output
    (no checkpoints needed), which bounds what cropping can achieve.
    """
    out = run_dir(cfg)
    manifest_path = out / "manifest.json"
    if not manifest_path.exists():
        raise FileNotFoundError(f"no stage-1 manifest at {manifest_path}")
    manifest = json.loads(manifest_path.read_text())
    # sparsification settings come from the run itself, crop settings from cfg
    stage1 = PipelineConfig.from_dict(manifest["config"])
    cfg = dataclasses.replace(cfg, hu_range=stage1.hu_range, factor=stage1.factor, train=stage1.train)
    paths = {case_id_of(p): p for p in find_volumes(cfg.data_root)}
    per_case, notes = [], []
    for entry in manifest["folds"]:
        if entry["status"] != "ok":
            continue
        fdir = out / f"fold-{entry['index']}"
        ckpt = None if truth_as_prediction else load_checkpoint(fdir / "checkpoint" / "model.json")
        for cid in entry["test"]:
            v = load_volume(paths[cid])
            q, ql = quantized_case(v, cfg)
            pred = ql if truth_as_prediction else predict(ckpt, q)
            try:
                base = extract_roi(q.coords, pred, cfg.factor, v.dims, 0)
            except EmptyRoiError:
                notes.append({"case": cid, "note": "empty ROI, full volume used"})
                base = full_volume_roi(v.dims)
            roi = expand_roi(base, cfg.crop_margin)
            _write(fdir / "roi" / f"{cid}.roi.json", roi.to_json())
            save_volume(crop(v, roi), fdir / "roi" / f"{cid}_crop.raw")
            per_case.append(crop_stats(base, v.labels, cfg.margins))
    rows = average_crop_stats(per_case)
    text = table3_csv(rows)
    _write(out / "reports" / "table3.csv", text)
    result = {"cases": len(per_case), "notes": notes, "table3": [asdict(r) for r in rows]}
    _write(out / "reports" / "table3.json", json.dumps(result, indent=1))
    return result


def report(paths: Sequence, out_path=None) -> dict:
    """Merge run directories (or their manifests) into one summary; missing ones are listed."""
    summary = {"runs": [], "missing": [], "warnings": []}
    if not paths:
        summary["warnings"].append("no inputs given")
    for p in paths:
        p = Path(p)
        rdir = p.parent if p.name == "manifest.json" else p
        mpath = rdir / "manifest.json"
        if not mpath.exists():
            summary["missing"].append(str(p))
            continue
        manifest = json.loads(mpath.read_text())
        run = {"run_id": manifest["run_id"], "folds": [], "table1": None, "table2": None, "table3": None}
        for entry in manifest["folds"]:
            fold = {"index": entry["index"], "status": entry["status"]}
            prog = rdir / f"fold-{entry['index']}" / "reports" / PROGRESS_FILE
            if prog.exists():
                secs = [json.loads(line)["seconds"] for line in prog.read_text().splitlines() if line]
                fold["epochs"] = len(secs)
                fold["seconds_per_epoch"] = float(np.mean(secs)) if secs else None
            ftab = rdir / f"fold-{entry['index']}" / "reports" / "table2.json"
            if ftab.exists():
                fold["table2"] = json.loads(ftab.read_text())
            run["folds"].append(fold)
        for key, name in (("table1", "table1.json"), ("table2", "table2.json"), ("table3", "table3.json")):
            f = rdir / "reports" / name
            if f.exists():
                run[key] = json.loads(f.read_text())
        summary["runs"].append(run)
    if out_path:
        out_path = Path(out_path)
        _write(out_path.with_suffix(".json"), json.dumps(summary, indent=1))
        _write(out_path.with_suffix(".md"), summary_markdown(summary))
    return summary


def summary_markdown(summary: dict) -> str:
    lines = ["# sparsevox run summary", ""]
    for w in summary["warnings"]:
        lines.append(f"> warning: {w}")
    for m in summary["missing"]:
        lines.append(f"> missing manifest: {m}")
    for run in summary["runs"]:
        lines += [f"## {run['run_id']}", "", "| fold | status | epochs | s/epoch |", "|---|---|---|---|"]
        for f in run["folds"]:
            spe = f.get("seconds_per_epoch")
            lines.append(f"| {f['index']} | {f['status']} | {f.get('epochs', '')} | "
                         f"{'' if spe is None else f'{spe:.3f}'} |")
        t2 = run.get("table2")
        if t2:
            lines += ["", "| | precision | recall | f1-score | support |", "|---|---|---|---|---|"]
            for name, r in t2["rows"].items():
                lines.append(f"| {name} | {r['precision']:.3f} | {r['recall']:.3f} | {r['f1-score']:.3f} | {r['support']} |")
            lines.append(f"\naccuracy {t2['accuracy']:.4f}, pooled DSC {t2['dsc_pooled']:.4f}, "
                         f"mean per-case DSC {t2['dsc_mean_per_case']:.4f}")
        t3 = run.get("table3")
        if t3:
            lines += ["", "| margin | signal kept (2D) | bkg removed (2D) | signal kept (slices) | bkg removed (slices) |",
                      "|---|---|---|---|---|"]
            for r in t3["table3"]:
                lines.append(f"| {r['margin']} | {r['signal_kept_2d']:.3f} | {r['background_removed_2d']:.3f} | "
                             f"{r['signal_kept_slices']:.3f} | {r['background_removed_slices']:.3f} |")
        lines.append("")
    return "\n".join(lines) + "\n"
