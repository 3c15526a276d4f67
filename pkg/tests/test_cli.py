"""End-to-end CLI: artifacts on disk, exit codes, idempotence."""
import hashlib
import json
import shutil

import numpy as np
import pytest
from PIL import Image

from mfmseg import cli
from mfmseg import tensor as T
from mfmseg.labels import decode_gt
from mfmseg.models import TOY_FFP, TOY_SSP

TOY = {
    "synth": {"size": 32, "counts": {"train": 8, "val": 4, "test": 4}, "test_sources": 2, "min_overlap": 5},
    "sources": {"n_pt": 6, "n_ht": 6},
    "model": {"name": "mfm", "classes": 4, "ffp": TOY_FFP, "ssp": TOY_SSP},
    "train": {"epochs": 2, "batch_size": 4},
    "crf": {"spatial_sigma": 1.0, "bilateral_sigma_xy": 4.0},
}


def tree_digest(root):
    h = hashlib.sha256()
    for p in sorted(root.rglob("*")):
        if p.is_file():
            h.update(str(p.relative_to(root)).encode())
            h.update(p.read_bytes())
    return h.hexdigest()


@pytest.fixture(scope="module")
def work(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    (root / "cfg.json").write_text(json.dumps(TOY))
    cfg = str(root / "cfg.json")
    assert cli.main(["synth", "--config", cfg, "--out", str(root / "data"), "--seed", "3"]) == 0
    assert cli.main(["train", "--config", cfg, "--data", str(root / "data"), "--out", str(root / "run")]) == 0
    return root


def test_synth_default_toy_counts(tmp_path, capsys):
    assert cli.main(["synth", "--out", str(tmp_path / "d")]) == 0
    out = capsys.readouterr().out
    assert "train=64 val=8 test=8" in out and "class pixels [train]" in out
    recs = (tmp_path / "d" / "manifest.jsonl").read_text().splitlines()
    assert len(recs) == 80
    assert Image.open(tmp_path / "d" / json.loads(recs[0])["image_path"]).size == (64, 64)


def test_synth_rerun_same_checksum(work, tmp_path):
    assert cli.main(["synth", "--config", str(work / "cfg.json"), "--out", str(tmp_path / "again"), "--seed", "3"]) == 0
    assert (tmp_path / "again" / "manifest.jsonl").read_bytes() == (work / "data" / "manifest.jsonl").read_bytes()
    assert tree_digest(tmp_path / "again") == tree_digest(work / "data")


def test_synth_paper_scale_plan(capsys, tmp_path):
    assert cli.main(["synth", "--paper-scale", "--dry-run", "--out", str(tmp_path)]) == 0
    assert "256x256" in capsys.readouterr().out
    assert not any(tmp_path.iterdir())


def test_train_artifacts(work):
    run = work / "run"
    assert {p.name for p in run.iterdir()} >= {"checkpoint.bin", "last.bin", "train_log.jsonl", "run.json"}
    log = [json.loads(l) for l in (run / "train_log.jsonl").read_text().splitlines()]
    assert len(log) == 2


def test_infer_postprocess_eval(work, capsys):
    before = tree_digest(work / "data")
    pred = work / "pred"
    assert cli.main(["infer", "--ckpt", str(work / "run" / "checkpoint.bin"), "--data", str(work / "data"),
                     "--out", str(pred)]) == 0
    files = sorted((pred / "pred" / "none").glob("*_pred.png"))
    assert len(files) == 4
    for f in files:
        labels = decode_gt(np.asarray(Image.open(f).convert("RGB")))
        assert labels.classes.shape == (32, 32)
    probs = np.load(pred / "prob" / f"{files[0].name[:-9]}.npy")
    np.testing.assert_allclose(probs.sum(axis=0), 1.0, atol=1e-5)
    for policy in ("crf", "crfh"):
        assert cli.main(["postprocess", "--config", str(work / "cfg.json"), "--pred", str(pred),
                         "--policy", policy]) == 0
    assert cli.main(["eval", "--pred", str(pred)]) == 0
    table = capsys.readouterr().out.splitlines()[-3:]
    assert "IoU" in table[0] and "With CRF" in table[0] and "With CRFH" in table[0]
    assert table[1].split() == ["PT", "HT", "BG", "Mean"] * 3
    recs = [json.loads(l) for l in (pred / "report.jsonl").read_text().splitlines()]
    assert {r["postprocess"] for r in recs} == {"IoU", "With CRF", "With CRFH"}
    assert tree_digest(work / "data") == before


def test_infer_idempotent(work, tmp_path):
    args = ["infer", "--ckpt", str(work / "run" / "checkpoint.bin"), "--data", str(work / "data")]
    assert cli.main(args + ["--out", str(tmp_path / "a")]) == 0
    assert cli.main(args + ["--out", str(tmp_path / "b")]) == 0
    assert tree_digest(tmp_path / "a" / "pred") == tree_digest(tmp_path / "b" / "pred")


def test_eval_perfect_predictions(work, tmp_path, capsys):
    pred = tmp_path / "gtpred"
    (pred / "pred" / "none").mkdir(parents=True)
    for line in (work / "data" / "manifest.jsonl").read_text().splitlines():
        rec = json.loads(line)
        if rec["split"] == "test":
            shutil.copy(work / "data" / rec["gt_path"], pred / "pred" / "none" / f"{rec['id']}_pred.png")
    (pred / "source.json").write_text(json.dumps({"data": str(work / "data"), "split": "test"}))
    assert cli.main(["eval", "--pred", str(pred)]) == 0
    assert capsys.readouterr().out.splitlines()[2].split() == ["100.00"] * 4


def test_missing_artifacts_named(work, tmp_path, capsys):
    assert cli.main(["infer", "--ckpt", str(tmp_path / "none.bin"), "--data", str(work / "data"),
                     "--out", str(tmp_path / "o")]) == 2
    assert "none.bin" in capsys.readouterr().err
    assert cli.main(["train", "--data", str(tmp_path / "nodata"), "--out", str(tmp_path / "o")]) == 2
    assert "nodata" in capsys.readouterr().err
    assert cli.main(["eval", "--pred", str(tmp_path)]) == 2
    assert "source.json" in capsys.readouterr().err


def test_usage_errors():
    with pytest.raises(SystemExit) as exc:
        cli.main(["train", "--data", "x", "--out", "y", "--classes", "5"])
    assert exc.value.code == 2
    with pytest.raises(SystemExit) as exc:
        cli.main(["synth"])
    assert exc.value.code == 2


def test_gradcheck_passes(capsys):
    assert cli.main(["gradcheck"]) == 0
    out = capsys.readouterr().out
    assert "mfm_end_to_end" in out and "max rel err" in out


def test_gradcheck_corrupted_backward(monkeypatch, capsys):
    monkeypatch.setattr(T, "_relu_grad", lambda x, g: 1.1 * g * (x > 0))
    assert cli.main(["gradcheck"]) == 1
    out = capsys.readouterr().out
    assert "FAILED" in out and "relu" in out.split("FAILED:")[1]
