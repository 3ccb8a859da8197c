"""Acceptance criteria 1-10, each timed against its budget.

Run with ``pytest tests/test_acceptance.py`` (one PASS/FAIL line per criterion
in the terminal summary) or ``python3 tests/test_acceptance.py``.
Criterion 10 needs real CT data: point KITS21_DIR at the KiTS21 ``data``
directory (``case_XXXXX/imaging.nii.gz`` plus a segmentation file).
"""

import filecmp
import functools
import os
import shutil
import sys
import time
from pathlib import Path

import numpy as np
import pytest

sys.path.insert(0, str(Path(__file__).parent))
sys.path.insert(0, str(Path(__file__).parents[1] / "scripts"))

import conftest  # noqa: E402
from conftest import random_sparse  # noqa: E402
from phantom_generalization import TINY, phantom_cases, run as run_generalization  # noqa: E402
from test_sparse_ops import dense_conv_at, grad_rel_err, numeric_grad, rel_err  # noqa: E402
from test_sparsify import exhaustive_range, random_histogram  # noqa: E402

from sparsevox import pipeline  # noqa: E402
from sparsevox.network import (TrainConfig, UNetConfig, cross_entropy, dice_loss,  # noqa: E402
                               predict, signal_dice, train)
from sparsevox.roi_crop import crop_stats, extract_roi  # noqa: E402
from sparsevox.sparse_ops import BatchNorm, Conv, ReLU, build_kernel_map, conv_forward  # noqa: E402
from sparsevox.sparse_tensor import QuantizationPolicy, quantize  # noqa: E402
from sparsevox.sparsify import (HuRange, InfeasibleBudget, corpus_reduction, histogram,  # noqa: E402
                                optimize_range, range_stats)
from sparsevox.volume_io import generate_phantom, kidney_phantom_spec, load_volume, save_volume  # noqa: E402

pytestmark = pytest.mark.acceptance


def criterion(number: int, name: str, budget_s: float, requires_env: str = None):
    """Time ``fn``; it returns (passed, detail). Records one summary line and asserts both checks."""
    def wrap(fn):
        @functools.wraps(fn)
        def test(*args, **kwargs):
            if requires_env and not os.environ.get(requires_env):
                conftest.ACCEPTANCE_LINES.append(f"[SKIP] {number:2d}. {name}: {requires_env} not set")
                pytest.skip(f"{requires_env} not set; dataset-gated check skipped")
            t0 = time.perf_counter()
            ok, detail = fn(*args, **kwargs)
            secs = time.perf_counter() - t0
            in_time = secs < budget_s
            status = "PASS" if ok and in_time else "FAIL"
            line = f"[{status}] {number:2d}. {name}: {detail} ({secs:.1f}s / budget {budget_s:.0f}s)"
            conftest.ACCEPTANCE_LINES.append(line)
            print(line)
            assert ok, detail
            assert in_time, f"took {secs:.1f}s, budget {budget_s}s"
        return test
    return wrap


@criterion(1, "sparse vs dense convolution", 30)
def test_c01_conv_oracle():
    rng = np.random.default_rng(101)
    worst = {np.float32: 0.0, np.float64: 0.0}
    for case in range(200):
        dtype = np.float32 if case % 2 else np.float64
        grid = int(rng.integers(2, 9))
        c_in, c_out = (int(v) for v in rng.integers(1, 5, 2))
        t = random_sparse(rng, n_sites=int(rng.integers(1, 65)), grid=grid, channels=c_in, dtype=dtype)
        out = random_sparse(rng, n_sites=int(rng.integers(1, 65)), grid=grid, channels=1, dtype=dtype)
        w = rng.normal(size=(27, c_in, c_out)).astype(dtype)
        b = rng.normal(size=c_out).astype(dtype)
        got = conv_forward(t.feats, w, b, build_kernel_map(t, 3, 1, "strided", out=out))
        worst[dtype] = max(worst[dtype], rel_err(got, dense_conv_at(t, w, b, out.coords, grid, 3)))
    ok = worst[np.float32] <= 1e-5 and worst[np.float64] <= 1e-12
    return ok, f"max rel err float32 {worst[np.float32]:.2e}, float64 {worst[np.float64]:.2e}"


@criterion(2, "submanifold site preservation", 10)
def test_c02_site_preservation():
    rng = np.random.default_rng(102)
    bad = 0
    for _ in range(200):
        t = random_sparse(rng, n_sites=int(rng.integers(0, 80)), grid=8, channels=2,
                          batches=int(rng.integers(1, 3)))
        x = t
        for _ in range(int(rng.integers(1, 5))):
            conv = Conv(x.channels, int(rng.integers(1, 4)), 3, dtype=np.float64)
            conv.params["weight"][:] = rng.normal(size=conv.params["weight"].shape)
            x = ReLU().forward(BatchNorm(conv.c_out, dtype=np.float64).forward(conv.forward(x))) if len(x) else \
                conv.forward(x)
        bad += not np.array_equal(x.coords, t.coords)
    return bad == 0, f"{200 - bad}/200 tensors keep their exact site set"


def _grad_cases(dtype, rng):
    """Yield (label, loss_fn, [(array, analytic_grad)]) for every differentiable piece."""
    t = random_sparse(rng, n_sites=48, grid=5, channels=2, dtype=dtype)
    for mode in ("submanifold", "strided", "transposed"):
        target = None
        if mode == "submanifold":
            conv, x = Conv(2, 3, 3, dtype=dtype), t
        elif mode == "strided":
            conv, x = Conv(2, 3, 2, 2, "strided", dtype=dtype), t
        else:
            coarse = Conv(2, 2, 2, 2, "strided", dtype=dtype).forward(t)
            x = coarse.with_feats(rng.normal(size=(len(coarse), 2)).astype(dtype))
            conv, target = Conv(2, 3, 2, 2, "transposed", dtype=dtype), t
        conv.params["weight"][:] = rng.normal(size=conv.params["weight"].shape)
        conv.params["bias"][:] = rng.normal(size=3)
        feats = x.feats.copy()
        r = rng.normal(size=(len(conv.forward(x, target)), 3))

        def loss(conv=conv, x=x, feats=feats, target=target, r=r):
            return float(np.sum(conv.forward(x.with_feats(feats), target).feats.astype(np.float64) * r))

        loss()
        conv.zero_grad()
        gi = conv.backward(r.astype(dtype))
        yield f"conv/{mode}", loss, [(feats, gi), (conv.params["weight"], conv.grads["weight"]),
                                     (conv.params["bias"], conv.grads["bias"])]
    for training in (True, False):
        bn = BatchNorm(2, dtype=dtype).train(training)
        bn.params["gamma"][:] = rng.normal(size=2)
        bn.params["beta"][:] = rng.normal(size=2)
        bn.buffers["running_var"][:] = rng.uniform(0.5, 2, 2)
        frozen = {k: v.copy() for k, v in bn.buffers.items()}
        feats = (t.feats * 2 + 1).astype(dtype)
        r = rng.normal(size=feats.shape)

        def loss(bn=bn, feats=feats, r=r, frozen=frozen):
            bn.buffers.update({k: v.copy() for k, v in frozen.items()})
            return float(np.sum(bn.forward(t.with_feats(feats)).feats.astype(np.float64) * r))

        loss()
        bn.zero_grad()
        gi = bn.backward(r.astype(dtype))
        yield f"batchnorm/{'train' if training else 'eval'}", loss, [
            (feats, gi), (bn.params["gamma"], bn.grads["gamma"]), (bn.params["beta"], bn.grads["beta"])]
    feats = t.feats.copy()
    feats[np.abs(feats) < 0.05] = 0.5
    act, r = ReLU(), rng.normal(size=feats.shape)

    def loss(feats=feats, r=r):
        return float(np.sum(act.forward(t.with_feats(feats)).feats.astype(np.float64) * r))

    loss()
    yield "relu", loss, [(feats, act.backward(r.astype(dtype)))]
    logits = rng.normal(size=(48, 2)).astype(dtype)
    y = (rng.random(48) < 0.4).astype(int)
    for name, fn in (("cross_entropy", lambda: cross_entropy(logits, y, [0.4, 1.7])),
                     ("dice_loss", lambda: dice_loss(logits, y))):
        yield f"loss/{name}", (lambda fn=fn: fn()[0]), [(logits, fn()[1])]


@criterion(3, "gradient checks", 120)
def test_c03_gradients():
    rng = np.random.default_rng(103)
    worst = {}
    for dtype, tol, h in ((np.float64, 1e-6, 1e-6), (np.float32, 1e-3, 1e-2)):
        for label, loss, pairs in _grad_cases(dtype, rng):
            for arr, analytic in pairs:
                err = grad_rel_err(np.asarray(analytic, np.float64), numeric_grad(loss, arr, h))
                key = (np.dtype(dtype).name, label)
                worst[key] = max(worst.get(key, 0.0), err)
    fails = [f"{k[0]} {k[1]} {v:.1e}" for k, v in worst.items()
             if v > (1e-6 if k[0] == "float64" else 1e-3)]
    f64 = max(v for k, v in worst.items() if k[0] == "float64")
    f32 = max(v for k, v in worst.items() if k[0] == "float32")
    detail = f"{len(worst)} checks, worst float64 {f64:.1e}, float32 {f32:.1e}"
    return not fails, detail + ("; over tolerance: " + ", ".join(fails) if fails else "")


@criterion(4, "range optimizer vs exhaustive search", 10)
def test_c04_range_oracle():
    rng = np.random.default_rng(104)
    agree = 0
    for _ in range(100):
        h = random_histogram(rng, n_values=int(rng.integers(1, 61)))
        total = int(h.signal.sum() + h.background.sum())
        budget = int(rng.integers(1, max(2, total + 1)))
        ref = exhaustive_range(h, budget)
        try:
            got = optimize_range(h, budget)[0]
        except InfeasibleBudget:
            got = None
        agree += got == ref
    return agree == 100, f"{agree}/100 histograms identical"


@criterion(5, "quantization vs group-by", 10)
def test_c05_quantization_oracle():
    rng = np.random.default_rng(105)
    agree = 0
    for _ in range(100):
        t = random_sparse(rng, n_sites=int(rng.integers(1, 120)), grid=10, channels=2,
                          batches=int(rng.integers(1, 3)))
        labels = (rng.random(len(t)) < 0.3).astype(np.uint8)
        q, ql = quantize(t, QuantizationPolicy(3), labels)
        groups = {}
        for c, f, l in zip(t.coords.tolist(), t.feats, labels):
            key = (c[0], c[1] // 3 * 3, c[2] // 3 * 3, c[3] // 3 * 3)
            groups.setdefault(key, []).append((f, l))
        ok = len(groups) == len(q)
        for c, f, l in zip(q.coords.tolist(), q.feats, ql):
            members = groups.get(tuple(c))
            ok &= members is not None
            if members:
                ok &= bool(np.allclose(f, np.mean([m[0] for m in members], axis=0), rtol=0, atol=1e-12))
                ok &= int(l) == int(any(m[1] for m in members))
        q2, ql2 = quantize(q, QuantizationPolicy(3), ql)
        ok &= np.array_equal(q2.coords, q.coords) and np.array_equal(q2.feats, q.feats) and np.array_equal(ql2, ql)
        agree += bool(ok)
    return agree == 100, f"{agree}/100 tensors match the group-by and are idempotent"


@criterion(6, "phantom overfit", 300)
def test_c06_overfit():
    v = generate_phantom(kidney_phantom_spec((32, 32, 32), seed=6))
    n_signal = int(np.count_nonzero(v.labels))
    (t, lab), = phantom_cases([6])
    ckpt, hist = train([(t, lab)], TrainConfig(lr=3e-3, epochs=200, batch_size=1, seed=0), TINY)
    d = signal_dice(predict(ckpt, t), lab)
    first = next((h["epoch"] for h in hist if h["dice"] >= 0.95), None)
    return d >= 0.95, (f"{n_signal} signal voxels, {len(t)} sites; inference Dice {d:.4f} after 200 epochs, "
                       f"training-batch Dice first >= 0.95 at epoch {first}")


@criterion(7, "phantom generalization", 1800)
def test_c07_generalization():
    res = run_generalization(n_train=20, n_test=5, epochs=30, lr=3e-3, batch_size=2, seed=0)
    return res["pooled_dice"] >= 0.80, (f"pooled test Dice {res['pooled_dice']:.4f} "
                                        f"(mean per case {res['mean_case_dice']:.4f})")


@criterion(8, "crop margin monotonicity", 10)
def test_c08_crop_monotone():
    rng = np.random.default_rng(108)
    good = 0
    for _ in range(100):
        dims = tuple(int(d) for d in rng.integers(12, 40, 3))
        truth = np.zeros(dims, np.uint8)
        for _ in range(int(rng.integers(1, 4))):
            c = [int(rng.integers(0, d)) for d in dims]
            r = [int(rng.integers(1, 6)) for _ in dims]
            truth[max(0, c[0] - r[0]):c[0] + r[0], max(0, c[1] - r[1]):c[1] + r[1],
                  max(0, c[2] - r[2]):c[2] + r[2]] = 1
        n = int(rng.integers(1, 30))
        cells = np.stack([rng.integers(0, (d - 1) // 3 + 1, n) * 3 for d in dims], axis=1)
        pred = (rng.random(n) < 0.6).astype(int)
        pred[0] = 1
        rows = crop_stats(extract_roi(cells, pred, 3, dims), truth, range(11))
        ok = True
        for col, sign in (("signal_kept_2d", 1), ("signal_kept_slices", 1),
                          ("background_removed_2d", -1), ("background_removed_slices", -1)):
            vals = np.array([getattr(r, col) for r in rows])
            vals = vals[~np.isnan(vals)]
            ok &= bool(np.all(sign * np.diff(vals) >= 0))
        good += ok
    return good == 100, f"{good}/100 pairs monotone over margins 0..10"


@criterion(9, "float64 stage-1 reproducibility", 600)
def test_c09_reproducibility(tmp_path):
    data = tmp_path / "data"
    for i in range(10):
        save_volume(generate_phantom(kidney_phantom_spec((24, 24, 24), seed=900 + i)), data / f"case_{i:05d}.json")
    cfg = pipeline.PipelineConfig(
        data_root=str(data), output_dir=str(tmp_path / "out"), n_folds=5, folds=2,
        unet=UNetConfig(widths=(4, 8), encoder_blocks=(1, 1), decoder_blocks=(1, 1), stem_channels=4),
        train=TrainConfig(lr=3e-3, epochs=3, batch_size=2, dtype="float64"),
    )
    first = pipeline.run_stage1(cfg)
    run = pipeline.run_dir(cfg)
    kept = tmp_path / "first"
    shutil.move(str(run), kept)
    second = pipeline.run_stage1(cfg)
    files = sorted(str(p.relative_to(run)) for p in run.rglob("*")
                   if p.is_file() and p.name != pipeline.PROGRESS_FILE)
    same = [f for f in files if filecmp.cmp(run / f, kept / f, shallow=False)]
    ckpts = [f for f in files if "checkpoint" in f]
    ok = (len(same) == len(files) and first == second and len(ckpts) >= 4
          and all(f["status"] == "ok" for f in first["folds"]))
    return ok, f"{len(same)}/{len(files)} files bit-identical incl. {len(ckpts)} checkpoint files"


def _kits_cases(root: Path):
    for case in sorted(p for p in root.iterdir() if p.is_dir() and p.name.startswith("case_")):
        img = case / "imaging.nii.gz"
        seg = next((case / n for n in ("aggregated_MAJ_seg.nii.gz", "segmentation.nii.gz")
                    if (case / n).exists()), None)
        if img.exists() and seg is not None:
            yield img, seg


@criterion(10, "KiTS21 sparsification statistics", 3600, requires_env="KITS21_DIR")
def test_c10_kits21():
    cases = list(_kits_cases(Path(os.environ["KITS21_DIR"])))
    h = histogram(load_volume(img, labels_path=seg) for img, seg in cases)
    st = range_stats(h, HuRange(-30, 350))
    sig, bkg = 100 * st.signal_loss, 100 * st.background_removed
    red = corpus_reduction(h, HuRange(-30, 350))["pooled"]
    ok = (len(cases) == 300 and 1.88 <= sig <= 2.28 and 75.92 <= bkg <= 77.34 and abs(red - 2.0) <= 0.2)
    return ok, f"{len(cases)} cases; signal loss {sig:.2f}%, background removed {bkg:.2f}%, reduction x{red:.2f}"


def test_kits_layout_reader(tmp_path):
    """The dataset-gated path runs end to end on a fake two-case tree."""
    import nibabel as nib

    for i in range(2):
        v = generate_phantom(kidney_phantom_spec((16, 16, 16), seed=i))
        case = tmp_path / f"case_{i:05d}"
        case.mkdir()
        nib.save(nib.Nifti1Image(v.intensities.astype(np.float32), np.eye(4)), case / "imaging.nii.gz")
        nib.save(nib.Nifti1Image(v.labels * 2, np.eye(4)), case / "aggregated_MAJ_seg.nii.gz")
    cases = list(_kits_cases(tmp_path))
    assert len(cases) == 2
    h = histogram(load_volume(img, labels_path=seg) for img, seg in cases)
    assert h.signal.sum() > 0 and h.signal.sum() + h.background.sum() == 2 * 16 ** 3


if __name__ == "__main__":
    sys.exit(pytest.main([__file__, "-q", "-p", "no:cacheprovider"]))
