import csv
import io
import json

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from sparsevox.metrics import (ConfusionCounts, accuracy, aggregate, class_rows, confusion, dice, f1,
                               make_folds, precision, recall)

bits = st.lists(st.integers(0, 1), min_size=0, max_size=60)


def test_confusion_example():
    c = confusion([1, 1, 0, 0, 1], [1, 0, 0, 1, 1])
    assert (c.tp, c.fp, c.fn, c.tn) == (2, 1, 1, 1)
    assert dice(c) == pytest.approx(4 / 6) and precision(c) == pytest.approx(2 / 3)
    assert recall(c) == pytest.approx(2 / 3) and accuracy(c) == pytest.approx(3 / 5)
    with pytest.raises(ValueError):
        confusion([1, 0], [1])


def test_degenerate_conventions():
    both_empty = confusion([0, 0], [0, 0])
    assert dice(both_empty) == precision(both_empty) == recall(both_empty) == 1.0
    no_pred = confusion([0, 0], [1, 0])
    assert precision(no_pred) == 0.0 and dice(no_pred) == 0.0 and recall(no_pred) == 0.0
    assert accuracy(ConfusionCounts()) == 1.0


@given(p=bits, seed=st.integers(0, 1000))
def test_f1_equals_dice_and_set_formula(p, seed):
    rng = np.random.default_rng(seed)
    t = rng.integers(0, 2, len(p))
    c = confusion(p, t)
    assert f1(c) == dice(c)
    A, B = set(np.flatnonzero(p)), set(np.flatnonzero(t))
    if A or B:
        assert dice(c) == pytest.approx(2 * len(A & B) / (len(A) + len(B)))
    pr, rc = precision(c), recall(c)
    if pr + rc > 0:
        assert dice(c) == pytest.approx(2 * pr * rc / (pr + rc))
    assert 0 <= dice(c) <= 1 and c.total == len(p)


def test_class_rows_support():
    rows = class_rows(confusion([1, 0, 0, 1], [1, 1, 0, 0]))
    assert rows["signal"]["support"] == 2 and rows["background"]["support"] == 2
    assert rows["background"]["precision"] == pytest.approx(0.5)


def test_pooled_differs_from_mean():
    a, b = confusion([1], [1]), confusion([0] * 9 + [1], [1] * 10)
    rep = aggregate([a, b], per_case_dice=[dice(a), dice(b)])
    assert rep.dice == pytest.approx(4 / 13)
    assert rep.mean_case_dice == pytest.approx((1 + 2 / 11) / 2)
    d = json.loads(rep.to_json())
    assert d["per_fold_mean"]["dice"] == pytest.approx(rep.mean_case_dice)
    rows = list(csv.reader(io.StringIO(rep.to_csv())))
    assert [r[0] for r in rows] == ["", "background", "signal", "accuracy", "dsc_pooled", "dsc_mean_per_case"]
    assert float(rows[4][3]) == pytest.approx(4 / 13, abs=1e-6)
    with pytest.raises(ValueError):
        aggregate([])


@given(n=st.integers(10, 80), seed=st.integers(0, 100), k=st.integers(3, 10))
def test_fold_plan_partition(n, seed, k):
    ids = [f"case_{i:03d}" for i in range(n)]
    plan = make_folds(ids, seed, k)
    assert sorted(plan.case_ids) == ids
    sizes = [len(p) for p in plan.parts]
    assert max(sizes) - min(sizes) <= 1 and sizes == sorted(sizes, reverse=True)
    assert sorted(c for f in plan.folds for c in f.test) == ids
    for f in plan.folds:
        assert not set(f.train) & set(f.val) and not set(f.train) & set(f.test) and not set(f.val) & set(f.test)
        assert len(f.train) + len(f.val) + len(f.test) == n
    assert make_folds(ids, seed, k) == plan


def test_fold_plan_300_cases():
    plan = make_folds(range(300), seed=0)
    assert [len(p) for p in plan.parts] == [30] * 10
    f0 = plan.folds[0]
    assert (len(f0.train), len(f0.val), len(f0.test)) == (240, 30, 30)
    assert plan.folds[9].val == plan.parts[0]
    with pytest.raises(ValueError):
        make_folds(range(5), k=10)


def test_confusion_small_cases(rng):
    t = rng.integers(0, 2, 50)
    same = confusion(t, t)
    assert same.fp == same.fn == 0
    flip = confusion(1 - t, t)
    assert flip.tp == flip.tn == 0
    p = rng.integers(0, 2, 50)
    c = confusion(p, t)
    scan = [0, 0, 0, 0]
    for a, b in zip(p, t):
        scan[{(1, 1): 0, (1, 0): 1, (0, 1): 2, (0, 0): 3}[(int(a), int(b))]] += 1
    assert [c.tp, c.fp, c.fn, c.tn] == scan
    assert dice(ConfusionCounts(tp=1, fp=0, fn=2)) == 0.5
    assert dice(same) == precision(same) == recall(same) == 1.0


def test_thirty_cases_fold_sizes():
    f = make_folds(range(30), seed=4).folds[0]
    assert (len(f.test), len(f.val), len(f.train)) == (3, 3, 24)


def test_aggregate_single_and_doubled():
    c = ConfusionCounts(5, 2, 3, 90)
    one = aggregate([c])
    assert one.dice == dice(c) and one.accuracy == accuracy(c)
    two = aggregate([c, c])
    assert two.dice == pytest.approx(dice(c)) and two.rows["signal"]["precision"] == pytest.approx(precision(c))
