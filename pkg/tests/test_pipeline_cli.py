import csv
import io
import json
from pathlib import Path

import pytest

from sparsevox import pipeline
from sparsevox.cli import main
from sparsevox.network import load_checkpoint
from sparsevox.roi_crop import RoiSpec
from sparsevox.sparse_tensor import load_sparse
from sparsevox.volume_io import load_volume

TINY = {"widths": [4, 8], "encoder_blocks": [1, 1], "decoder_blocks": [1, 1], "stem_channels": 4}


@pytest.fixture(scope="module")
def corpus(tmp_path_factory):
    root = tmp_path_factory.mktemp("corpus")
    assert main(["phantom-gen", "--out", str(root), "--n", "6", "--dims", "18", "--seed", "3"]) == 0
    return root


def write_config(path: Path, data: Path, out: Path, **train) -> Path:
    cfg = {"data_root": str(data), "output_dir": str(out), "n_folds": 3, "unet": TINY,
           "train": {"epochs": 0, "batch_size": 2, "dtype": "float64", **train}}
    path.write_text(json.dumps(cfg))
    return path


def test_phantom_gen_writes_pairs(corpus):
    files = sorted(p.name for p in corpus.iterdir())
    assert "case_00000.json" in files and "case_00000_seg.json" in files and "case_00000_seg.raw" in files
    v = load_volume(corpus / "case_00000.json")
    assert v.dims == (18, 18, 18) and v.labels is not None and v.labels.any()


def test_histogram_and_optimize_range(corpus, tmp_path, capsys):
    hist = tmp_path / "h.json"
    assert main(["histogram", str(corpus), "--out", str(hist)]) == 0
    assert main(["optimize-range", "--hist", str(hist), "--budget", "20k", "--budget", "30k",
                 "--json", str(tmp_path / "t1.json")]) == 0
    rows = list(csv.DictReader(io.StringIO(capsys.readouterr().out)))
    assert [r["max_voxels"] for r in rows] == ["20000", "30000"]
    assert float(rows[1]["signal_loss_pct"]) <= float(rows[0]["signal_loss_pct"])
    assert len(json.loads((tmp_path / "t1.json").read_text())) == 2
    # an empty HU bin makes even a 1-voxel budget feasible; zero is rejected outright
    assert main(["optimize-range", "--hist", str(hist), "--budget", "1"]) == 0
    assert main(["optimize-range", "--hist", str(hist), "--budget", "0"]) == 2


def test_sparsify_command(corpus, tmp_path, capsys):
    out = tmp_path / "s.json"
    assert main(["sparsify", str(corpus / "case_00001.json"), "--factor", "3", "--out", str(out)]) == 0
    stats = json.loads(capsys.readouterr().out)
    t, labels = load_sparse(out)
    assert len(t) == stats["sites"] and t.stride == 3 and labels.shape == (len(t),)
    assert stats["voxels"] == 18 ** 3 and 0 <= stats["signal_loss"] <= 1


def test_smoke_untrained_baseline(corpus, tmp_path, capsys):
    cfg = write_config(tmp_path / "cfg.json", corpus, tmp_path / "out")
    assert main(["train-roi", "--config", str(cfg), "--folds", "1", "--epochs", "0"]) == 0
    run = Path(json.loads(capsys.readouterr().out)["run_dir"])
    manifest = json.loads((run / "manifest.json").read_text())
    assert [f["status"] for f in manifest["folds"]] == ["ok"]
    assert len(manifest["inputs"]) == 6 and sum(len(p) for p in manifest["plan"]) == 6
    rows = list(csv.reader(io.StringIO((run / "reports" / "table2.csv").read_text())))
    assert rows[0] == ["", "precision", "recall", "f1-score", "support"] and len(rows) == 6
    assert (run / "fold-0" / "checkpoint" / "model.json").exists()
    assert load_checkpoint(run / "fold-0" / "checkpoint" / "model.json").epoch == 0

    # crop stage over the same run id; flags for margins do not change the run directory
    assert main(["crop-stats", "--config", str(cfg), "--margins", "0..10", "--truth-as-prediction"]) == 0
    table = list(csv.reader(io.StringIO(capsys.readouterr().out)))
    assert table[0][0] == "margin" and [int(r[0]) for r in table[1:]] == list(range(11))
    assert float(table[1][1]) == 1.0
    test_ids = manifest["folds"][0]["test"]
    roi = RoiSpec.from_json((run / "fold-0" / "roi" / f"{test_ids[0]}.roi.json").read_text())
    cropped = load_volume(run / "fold-0" / "roi" / f"{test_ids[0]}_crop.json", with_labels=False)
    assert cropped.dims[2] == roi.z_range[1] - roi.z_range[0] + 1

    # the report echoes exactly what the stages wrote
    summary = pipeline.report([run])
    assert len(summary["runs"]) == 1 and [f["index"] for f in summary["runs"][0]["folds"]] == [0]
    assert summary["runs"][0]["table2"] == json.loads((run / "reports" / "table2.json").read_text())
    assert summary["runs"][0]["table3"] == json.loads((run / "reports" / "table3.json").read_text())


def test_predict_crop_evaluate(corpus, tmp_path, capsys):
    cfg = write_config(tmp_path / "cfg.json", corpus, tmp_path / "out", epochs=1, lr=1e-3)
    assert main(["train-roi", "--config", str(cfg), "--folds", "1"]) == 0
    run = Path(json.loads(capsys.readouterr().out)["run_dir"])
    ckpt = run / "fold-0" / "checkpoint" / "model.json"
    vol = corpus / "case_00002.json"
    preds = tmp_path / "p.npy"
    code = main(["predict", str(vol), "--checkpoint", str(ckpt), "--out", str(preds),
                 "--roi-out", str(tmp_path / "roi.json")])
    assert code in (0, 3)  # 3 when the barely trained net predicts no signal
    assert preds.exists()
    assert main(["evaluate", str(preds), "--out", str(tmp_path / "ev")]) == 0
    assert "dsc_pooled" in capsys.readouterr().out
    assert json.loads((tmp_path / "ev.json").read_text())["counts"]
    if code == 0:
        assert main(["crop", str(vol), "--roi", str(tmp_path / "roi.json"), "--out",
                     str(tmp_path / "c.json"), "--margin", "1"]) == 0
        assert load_volume(tmp_path / "c.json", with_labels=False).dims[2] >= 1


def test_fold_failure_is_isolated(corpus, tmp_path, monkeypatch):
    cfg = pipeline.PipelineConfig.from_dict(json.loads(write_config(tmp_path / "c.json", corpus,
                                                                    tmp_path / "a").read_text()))
    cfg = cfg.merged({"folds": 2})
    clean = pipeline.run_stage1(cfg)
    real_train = pipeline.train

    def flaky(train_set, tcfg, *a, **kw):
        if tcfg.seed == 1:  # fold 1
            raise RuntimeError("simulated crash")
        return real_train(train_set, tcfg, *a, **kw)

    monkeypatch.setattr(pipeline, "train", flaky)
    broken = pipeline.run_stage1(cfg.merged({"output_dir": str(tmp_path / "b")}))
    assert [f["status"] for f in broken["folds"]] == ["ok", "failed"]
    assert "simulated crash" in broken["folds"][1]["error"]
    assert broken["folds"][0]["outputs"] == clean["folds"][0]["outputs"]


def test_report_edge_cases(tmp_path, capsys):
    empty = pipeline.report([])
    assert empty["runs"] == [] and empty["warnings"]
    missing = pipeline.report([tmp_path / "nope"])
    assert missing["missing"] == [str(tmp_path / "nope")]
    assert main(["report", str(tmp_path / "nope"), "--out", str(tmp_path / "sum")]) == 0
    assert "missing manifest" in (tmp_path / "sum.md").read_text()


def test_run_id_ignores_crop_settings():
    a = pipeline.PipelineConfig()
    assert a.resolved_run_id() == a.merged({"margins": [0, 1], "crop_margin": 3, "output_dir": "x"}).resolved_run_id()
    assert a.resolved_run_id() != a.merged({"train.epochs": 3}).resolved_run_id()


def test_exit_codes(tmp_path, corpus):
    assert main(["no-such-command"]) == 2
    assert main(["train-roi", "--data", str(tmp_path / "empty"), "--out", str(tmp_path)]) == 3
    assert main(["sparsify", str(tmp_path / "missing.json")]) == 3
    assert main(["sparsify", str(corpus / "case_00000.json"), "--range", "10:5"]) == 2
    bad = tmp_path / "bad.json"
    bad.write_text(json.dumps({"dims": [2, 2], "spacing": [1, 1, 1], "dtype": "int16"}))
    assert main(["sparsify", str(bad)]) == 3
    cfg = write_config(tmp_path / "cfg.json", corpus, tmp_path / "out")
    assert main(["train-roi", "--config", str(cfg), "--folds", "1", "--epochs", "3", "--lr", "1e300"]) == 4


def test_divergence_exit_code(corpus, tmp_path, monkeypatch):
    from sparsevox.network import TrainingDiverged, build_unet, snapshot

    def boom(train_set, tcfg, ucfg, **kw):
        raise TrainingDiverged(0, snapshot(build_unet(ucfg), None, tcfg, 0, None, None))

    monkeypatch.setattr(pipeline, "train", boom)
    cfg = write_config(tmp_path / "cfg.json", corpus, tmp_path / "out")
    assert main(["train-roi", "--config", str(cfg), "--folds", "1"]) == 4
    run = next((tmp_path / "out").iterdir())
    assert (run / "fold-0" / "checkpoint" / "last_good.json").exists()


def test_threads_env(monkeypatch):
    monkeypatch.setenv("SPARSEVOX_THREADS", "3")
    assert pipeline.threads() == 3
    monkeypatch.setenv("SPARSEVOX_THREADS", "junk")
    assert pipeline.threads() == 1
