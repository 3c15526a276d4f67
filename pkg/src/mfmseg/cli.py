"""``mfmseg`` command line: synth, train, infer, postprocess, eval, gradcheck.

Commands talk to each other only through files.  Settings come from one JSON
config (sections ``synth``, ``sources``, ``model``, ``train``, ``crf``) with
flag overrides.  Exit codes: 0 success, 1 failed check, 2 usage/missing input.
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np
from PIL import Image

from . import crf as crf_mod
from . import gradcheck, metrics, synth
from . import train as tr
from .checkpoint import Checkpoint
from .labels import LabelMap, decode_gt, encode_gt
from .losses import LOSS_KINDS, ClassWeights, LossSpec
from .models import MODEL_NAMES, build_model

log = logging.getLogger("mfmseg")

POLICY_HEADINGS = {"none": "IoU", "crf": "With CRF", "crfh": "With CRFH"}


class UsageFailure(Exception):
    pass


def load_config(path):
    if path is None:
        return {}
    p = Path(path)
    if not p.is_file():
        raise UsageFailure(f"config file not found: {p}")
    return json.loads(p.read_text())


def _require(path, what):
    p = Path(path)
    if not p.exists():
        raise UsageFailure(f"missing {what}: {p}")
    return p


def _model_section(cfg, args):
    m = dict(cfg.get("model", {}))
    if getattr(args, "model", None):
        m["name"] = args.model
    if getattr(args, "classes", None):
        m["classes"] = args.classes
    m.setdefault("name", "mfm")
    m.setdefault("classes", 4)
    m.setdefault("ffp", {})
    m.setdefault("ssp", {})
    return m


def _train_config(cfg, args, classes):
    t = dict(cfg.get("train", {}))
    for flag, key in (("epochs", "epochs"), ("batch", "batch_size"), ("lr", "lr0"), ("seed", "seed")):
        if getattr(args, flag, None) is not None:
            t[key] = getattr(args, flag)
    kind = args.loss or t.pop("loss", "fusion")
    t.pop("loss", None)
    weights = t.pop("weights", None)
    if args.weights:
        weights = [float(v) for v in args.weights.split(",")]
    gamma = t.pop("gamma", 2.0)
    weights = ClassWeights(tuple(weights)) if weights else ClassWeights.paper(classes)
    return tr.TrainConfig(loss=LossSpec(kind=kind, gamma=gamma, weights=weights), **t)


def _dataset(root, split):
    images, labels, recs = synth.load_split(root, split)
    return tr.Dataset(synth.to_input(images), labels, images), recs


# --- commands -----------------------------------------------------------------------------

def cmd_synth(args, cfg):
    scfg = dict(cfg.get("synth", {}))
    if args.seed is not None:
        scfg["seed"] = args.seed
    if args.paper_scale:
        conf = synth.SynthConfig.paper_scale(**{k: v for k, v in scfg.items() if k not in ("size", "counts", "test_sources")})
    else:
        conf = synth.SynthConfig.from_dict(scfg)
    if args.dry_run:
        plan = synth.split_plan(conf)
        counts = {s: sum(sp == s for sp, _ in plan) for s in synth.SPLITS}
        print(f"would write {conf.size}x{conf.size} samples:", " ".join(f"{k}={v}" for k, v in counts.items()))
        return 0
    if args.sources:
        sources = read_sources(_require(args.sources, "source directory"))
    else:
        sc = {"n_pt": 12, "n_ht": 12, "seed": conf.seed, **cfg.get("sources", {})}
        sources = synth.make_sources(sc["n_pt"], sc["n_ht"], conf.size, sc["seed"])
    out = Path(args.out)
    records = synth.build_dataset(sources, conf, out)
    counts = {s: sum(r.split == s for r in records) for s in synth.SPLITS}
    print("samples per split:", " ".join(f"{k}={v}" for k, v in counts.items()))
    for split in synth.SPLITS:
        if counts[split]:
            _, labels, _ = synth.load_split(out, split)
            print(f"class pixels [{split}]:", synth.class_histogram(labels))
    print("manifest sha256:", synth.file_checksum(out / "manifest.jsonl"))
    return 0


def read_sources(root):
    """``root/pt/*.png`` and ``root/ht/*.png`` grayscale crops."""
    out = {}
    for kind in ("pt", "ht"):
        files = sorted((root / kind).glob("*.png"))
        if not files:
            raise UsageFailure(f"no {kind.upper()} source crops in {root / kind}")
        out[kind] = [(f.stem, np.asarray(Image.open(f).convert("L"))) for f in files]
    return out


def cmd_train(args, cfg):
    data = _require(args.data, "dataset directory")
    _require(data / "manifest.jsonl", "dataset manifest")
    m = _model_section(cfg, args)
    tcfg = _train_config(cfg, args, m["classes"])
    model = build_model(m["name"], m["classes"], seed=tcfg.seed, ffp=m["ffp"], ssp=m["ssp"])
    if args.init_ssp:
        if m["name"] != "mfm":
            raise UsageFailure("--init-ssp only applies to --model mfm")
        tr.transfer_init(model, Checkpoint.load(_require(args.init_ssp, "SSP checkpoint")))
    train_set, _ = _dataset(data, "train")
    val_set, _ = _dataset(data, "val")
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    res = tr.train(model, train_set, val_set, tcfg, log_path=out / "train_log.jsonl")
    res.best.save(out / "checkpoint.bin")
    res.last.save(out / "last.bin")
    (out / "run.json").write_text(json.dumps({"model": m}, indent=2, sort_keys=True))
    last = res.log[-1]
    print(f"trained {m['name']} ({m['classes']}-class, {tcfg.loss.kind}) for {tcfg.epochs} epochs; "
          f"best val loss {res.best.best_val_loss:.4f} at epoch {res.best.epoch}; final lr {last['lr']:g}")
    return 0


def _load_run(ckpt_path):
    ckpt_path = _require(ckpt_path, "checkpoint")
    run = json.loads(_require(ckpt_path.parent / "run.json", "run.json next to checkpoint").read_text())
    m = run["model"]
    model = build_model(m["name"], m["classes"], ffp=m["ffp"], ssp=m["ssp"])
    tr.restore(model, Checkpoint.load(ckpt_path))
    return model


def cmd_infer(args, cfg):
    model = _load_run(args.ckpt)
    data = _require(args.data, "dataset directory")
    ds, recs = _dataset(data, args.split)
    probs = tr.predict(model, ds.x)
    out = Path(args.out)
    (out / "pred" / "none").mkdir(parents=True, exist_ok=True)
    (out / "prob").mkdir(parents=True, exist_ok=True)
    for rec, p in zip(recs, probs):
        labels = LabelMap(np.argmax(p, axis=0).astype(np.uint8), 4)
        Image.fromarray(encode_gt(labels), mode="RGB").save(out / "pred" / "none" / f"{rec.id}_pred.png")
        np.save(out / "prob" / f"{rec.id}.npy", p.astype(np.float32))
    (out / "source.json").write_text(json.dumps({"data": str(data.resolve()), "split": args.split}))
    print(f"wrote {len(recs)} predictions to {out / 'pred' / 'none'}")
    return 0


def _crf_config(cfg, args):
    c = dict(cfg.get("crf", {}))
    for key in ("n_iters", "spatial_sigma", "bilateral_sigma_xy", "bilateral_sigma_intensity",
                "spatial_weight", "bilateral_weight"):
        v = getattr(args, key, None)
        if v is not None:
            c[key] = v
    return crf_mod.CrfConfig(**c)


def _source(pred_dir, args):
    src = json.loads(_require(pred_dir / "source.json", "source.json (run infer first)").read_text())
    data = Path(args.data) if getattr(args, "data", None) else Path(src["data"])
    return _require(data, "dataset directory"), src["split"]


def cmd_postprocess(args, cfg):
    pred_dir = _require(args.pred, "prediction directory")
    data, split = _source(pred_dir, args)
    ccfg = _crf_config(cfg, args)
    recs = [r for r in synth.read_manifest(data) if r.split == split]
    out = pred_dir / "pred" / args.policy
    out.mkdir(parents=True, exist_ok=True)
    for rec in recs:
        prob = np.load(_require(pred_dir / "prob" / f"{rec.id}.npy", "soft prediction"))
        image = np.asarray(Image.open(data / rec.image_path).convert("L"))
        labels = crf_mod.apply_crf(prob, image, ccfg, args.policy)
        Image.fromarray(encode_gt(LabelMap(labels, 4)), mode="RGB").save(out / f"{rec.id}_pred.png")
    print(f"postprocessed {len(recs)} predictions with policy {args.policy} -> {out}")
    return 0


def cmd_eval(args, cfg):
    pred_dir = _require(args.pred, "prediction directory")
    data, split = _source(pred_dir, args)
    recs = [r for r in synth.read_manifest(data) if r.split == split]
    reports = {}
    for policy, heading in POLICY_HEADINGS.items():
        pdir = pred_dir / "pred" / policy
        if not pdir.is_dir():
            continue
        pairs = []
        for rec in recs:
            pred = decode_gt(np.asarray(Image.open(_require(pdir / f"{rec.id}_pred.png", "prediction")).convert("RGB")))
            gt = decode_gt(np.asarray(Image.open(data / rec.gt_path).convert("RGB")))
            pairs.append((pred, gt))
        reports[heading] = metrics.evaluate_many(pairs)
    if not reports:
        raise UsageFailure(f"no prediction maps under {pred_dir / 'pred'}")
    table = metrics.format_table(reports)
    out = Path(args.out) if args.out else pred_dir
    out.mkdir(parents=True, exist_ok=True)
    (out / "report.txt").write_text(table + "\n")
    with open(out / "report.jsonl", "w") as fh:
        for heading, rep in reports.items():
            for rec in rep.records():
                fh.write(json.dumps({"postprocess": heading, **rec}) + "\n")
            fh.write(json.dumps({"postprocess": heading, "class": "mean", "iou": rep.mean}) + "\n")
    print(table)
    return 0


def cmd_gradcheck(args, cfg):
    results, seconds = gradcheck.run_all(args.seed or 0)
    print(gradcheck.format_report(results))
    failed = [r.name for r in results if not r.passed]
    print(f"{len(results) - len(failed)}/{len(results)} checks passed in {seconds:.1f}s")
    if failed:
        print("FAILED: " + ", ".join(failed))
        return 1
    return 0


# --- parser -------------------------------------------------------------------------------

def build_parser():
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="JSON config file")
    common.add_argument("--seed", type=int)
    common.add_argument("--out", help="output directory")
    common.add_argument("-v", "--verbose", action="store_true")

    parser = argparse.ArgumentParser(prog="mfmseg", description="Handwritten/printed text segmentation pipeline")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", parents=[common], help="generate a synthetic dataset")
    p.add_argument("--sources", help="directory with pt/*.png and ht/*.png crops (default: procedural)")
    p.add_argument("--paper-scale", action="store_true", help="5169/530/558 samples at 256x256")
    p.add_argument("--dry-run", action="store_true", help="print the split plan without writing")
    p.set_defaults(func=cmd_synth, needs_out=True)

    p = sub.add_parser("train", parents=[common], help="train a model")
    p.add_argument("--data", required=True)
    p.add_argument("--model", choices=MODEL_NAMES)
    p.add_argument("--classes", type=int, choices=(3, 4))
    p.add_argument("--loss", choices=LOSS_KINDS)
    p.add_argument("--weights", help="comma-separated class weights")
    p.add_argument("--epochs", type=int)
    p.add_argument("--batch", type=int)
    p.add_argument("--lr", type=float)
    p.add_argument("--init-ssp", help="SSP checkpoint to initialize the MFM's SSP branch")
    p.set_defaults(func=cmd_train, needs_out=True)

    p = sub.add_parser("infer", parents=[common], help="predict a dataset split")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--split", default="test", choices=synth.SPLITS)
    p.set_defaults(func=cmd_infer, needs_out=True)

    p = sub.add_parser("postprocess", parents=[common], help="CRF / CRFH refinement of predictions")
    p.add_argument("--pred", required=True, help="directory written by infer")
    p.add_argument("--data")
    p.add_argument("--policy", choices=crf_mod.POLICIES, required=True)
    p.add_argument("--n-iters", dest="n_iters", type=int)
    p.add_argument("--spatial-sigma", dest="spatial_sigma", type=float)
    p.add_argument("--bilateral-sigma-xy", dest="bilateral_sigma_xy", type=float)
    p.add_argument("--bilateral-sigma-intensity", dest="bilateral_sigma_intensity", type=float)
    p.add_argument("--spatial-weight", dest="spatial_weight", type=float)
    p.add_argument("--bilateral-weight", dest="bilateral_weight", type=float)
    p.set_defaults(func=cmd_postprocess, needs_out=False)

    p = sub.add_parser("eval", parents=[common], help="IoU table for none / CRF / CRFH predictions")
    p.add_argument("--pred", required=True, help="directory written by infer")
    p.add_argument("--data")
    p.set_defaults(func=cmd_eval, needs_out=False)

    p = sub.add_parser("gradcheck", parents=[common], help="finite-difference gradient suite")
    p.set_defaults(func=cmd_gradcheck, needs_out=False)
    return parser


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    if args.needs_out and not args.out:
        parser.error(f"{args.command} requires --out")
    try:
        cfg = load_config(args.config)
        return args.func(args, cfg)
    except UsageFailure as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except (ValueError, TypeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
