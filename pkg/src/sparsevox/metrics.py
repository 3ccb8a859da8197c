"""Confusion counts, overlap metrics and the k-fold plan.

Degenerate ratios follow one convention: when both the predicted and the
true signal sets are empty the metric is 1.0, otherwise a zero denominator
gives 0.0.
"""

from __future__ import annotations

import csv
import io
import json
from dataclasses import asdict, dataclass, field
from typing import Optional, Sequence

import numpy as np


@dataclass(frozen=True)
class ConfusionCounts:
    tp: int = 0
    fp: int = 0
    fn: int = 0
    tn: int = 0

    def __post_init__(self):
        if min(self.tp, self.fp, self.fn, self.tn) < 0:
            raise ValueError("confusion counts must be non-negative")

    @property
    def total(self) -> int:
        return self.tp + self.fp + self.fn + self.tn

    def __add__(self, other: "ConfusionCounts") -> "ConfusionCounts":
        return ConfusionCounts(self.tp + other.tp, self.fp + other.fp, self.fn + other.fn, self.tn + other.tn)

    def flipped(self) -> "ConfusionCounts":
        """Counts with background treated as the positive class."""
        return ConfusionCounts(self.tn, self.fn, self.fp, self.tp)


def confusion(pred, truth) -> ConfusionCounts:
    pred = np.asarray(pred) != 0
    truth = np.asarray(truth) != 0
    if pred.shape != truth.shape:
        raise ValueError(f"prediction/truth length mismatch: {pred.shape} vs {truth.shape}")
    tp = int(np.count_nonzero(pred & truth))
    fp = int(np.count_nonzero(pred & ~truth))
    fn = int(np.count_nonzero(~pred & truth))
    return ConfusionCounts(tp, fp, fn, pred.size - tp - fp - fn)


def _ratio(num: int, den: int, both_empty: bool) -> float:
    if den == 0:
        return 1.0 if both_empty else 0.0
    return num / den


def _empty(c: ConfusionCounts) -> bool:
    return c.tp + c.fp == 0 and c.tp + c.fn == 0


def dice(c: ConfusionCounts) -> float:
    return _ratio(2 * c.tp, 2 * c.tp + c.fp + c.fn, _empty(c))


def precision(c: ConfusionCounts) -> float:
    return _ratio(c.tp, c.tp + c.fp, _empty(c))


def recall(c: ConfusionCounts) -> float:
    return _ratio(c.tp, c.tp + c.fn, _empty(c))


def f1(c: ConfusionCounts) -> float:
    # 2PR/(P+R) reduces to 2tp/(2tp+fp+fn); computing it that way keeps f1 == dice exact
    return dice(c)


def accuracy(c: ConfusionCounts) -> float:
    return (c.tp + c.tn) / c.total if c.total else 1.0


def class_rows(c: ConfusionCounts) -> dict:
    rows = {}
    for name, cc in (("background", c.flipped()), ("signal", c)):
        rows[name] = {
            "precision": precision(cc),
            "recall": recall(cc),
            "f1-score": f1(cc),
            "support": cc.tp + cc.fn,
        }
    return rows


@dataclass
class EvalReport:
    counts: ConfusionCounts
    per_case_dice: list = field(default_factory=list)
    per_fold: list = field(default_factory=list)

    @property
    def rows(self) -> dict:
        return class_rows(self.counts)

    @property
    def accuracy(self) -> float:
        return accuracy(self.counts)

    @property
    def dice(self) -> float:
        return dice(self.counts)

    @property
    def mean_case_dice(self) -> float:
        return float(np.mean(self.per_case_dice)) if self.per_case_dice else float("nan")

    def to_dict(self) -> dict:
        d = {
            "rows": self.rows,
            "accuracy": self.accuracy,
            "dsc_pooled": self.dice,
            "dsc_mean_per_case": self.mean_case_dice,
            "counts": asdict(self.counts),
            "per_case_dice": list(self.per_case_dice),
        }
        if self.per_fold:
            d["per_fold"] = [fold_summary(c) for c in self.per_fold]
            d["per_fold_mean"] = {
                k: float(np.mean([fold_summary(c)[k] for c in self.per_fold]))
                for k in ("dice", "precision", "recall", "accuracy")
            }
        return d

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=1)

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["", "precision", "recall", "f1-score", "support"])
        for name, r in self.rows.items():
            w.writerow([name, f"{r['precision']:.6f}", f"{r['recall']:.6f}", f"{r['f1-score']:.6f}", r["support"]])
        w.writerow(["accuracy", "", "", f"{self.accuracy:.6f}", self.counts.total])
        w.writerow(["dsc_pooled", "", "", f"{self.dice:.6f}", ""])
        w.writerow(["dsc_mean_per_case", "", "", f"{self.mean_case_dice:.6f}", len(self.per_case_dice)])
        return buf.getvalue()


def fold_summary(c: ConfusionCounts) -> dict:
    return {"dice": dice(c), "precision": precision(c), "recall": recall(c), "accuracy": accuracy(c),
            **asdict(c)}


def aggregate(per_fold: Sequence[ConfusionCounts], per_case_dice: Optional[Sequence[float]] = None) -> EvalReport:
    """Micro-pooled report: counts are summed before any ratio is taken."""
    if not per_fold:
        raise ValueError("need at least one fold")
    total = ConfusionCounts()
    for c in per_fold:
        total = total + c
    return EvalReport(total, list(per_case_dice or []), list(per_fold))


# ---------------------------------------------------------------- folds


@dataclass(frozen=True)
class Fold:
    index: int
    train: tuple
    val: tuple
    test: tuple


@dataclass(frozen=True)
class FoldPlan:
    seed: int
    parts: tuple
    folds: tuple

    @property
    def case_ids(self) -> tuple:
        return tuple(c for p in self.parts for c in p)


def make_folds(case_ids: Sequence, seed: int = 0, k: int = 10) -> FoldPlan:
    """Shuffle, cut into ``k`` parts, rotate: fold i tests on part i and validates on part i+1."""
    case_ids = list(case_ids)
    if k < 3:
        raise ValueError("need k >= 3 for disjoint train/val/test parts")
    if len(case_ids) < k:
        raise ValueError(f"{len(case_ids)} cases cannot fill {k} folds; pass a smaller k")
    if len(set(case_ids)) != len(case_ids):
        raise ValueError("case ids must be unique")
    order = np.random.default_rng(seed).permutation(len(case_ids))
    shuffled = [case_ids[i] for i in order]
    base, extra = divmod(len(shuffled), k)
    parts, start = [], 0
    for i in range(k):
        size = base + (1 if i < extra else 0)
        parts.append(tuple(shuffled[start:start + size]))
        start += size
    folds = []
    for i in range(k):
        val_i = (i + 1) % k
        train = tuple(c for j, p in enumerate(parts) if j not in (i, val_i) for c in p)
        folds.append(Fold(i, train, parts[val_i], parts[i]))
    return FoldPlan(seed, tuple(parts), tuple(folds))
