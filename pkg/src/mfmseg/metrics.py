"""Per-class IoU with overlap expansion.

OV pixels count towards both the HT and PT masks before anything is counted;
IoU is reported for PT, HT and BG.  Counts add, so a dataset score is obtained
by summing per-image counts before dividing.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .labels import BG, expand_overlap

EVAL_CLASSES = ("PT", "HT", "BG")


@dataclass
class ConfusionCounts:
    tp: dict = field(default_factory=lambda: dict.fromkeys(EVAL_CLASSES, 0))
    fp: dict = field(default_factory=lambda: dict.fromkeys(EVAL_CLASSES, 0))
    fn: dict = field(default_factory=lambda: dict.fromkeys(EVAL_CLASSES, 0))

    def add_masks(self, c, pred_mask, gt_mask):
        self.tp[c] += int(np.count_nonzero(pred_mask & gt_mask))
        self.fp[c] += int(np.count_nonzero(pred_mask & ~gt_mask))
        self.fn[c] += int(np.count_nonzero(~pred_mask & gt_mask))

    def __add__(self, other):
        out = ConfusionCounts()
        for c in EVAL_CLASSES:
            out.tp[c] = self.tp[c] + other.tp[c]
            out.fp[c] = self.fp[c] + other.fp[c]
            out.fn[c] = self.fn[c] + other.fn[c]
        return out


def iou(counts, c):
    """TP / (TP + FP + FN), or None when the class is absent from pred and gt."""
    tp, fp, fn = counts.tp[c], counts.fp[c], counts.fn[c]
    denom = tp + fp + fn
    return tp / denom if denom else None


def mean_iou(values):
    """Arithmetic mean of the defined (non-None) per-class IoUs."""
    vals = [v for v in values if v is not None]
    return sum(vals) / len(vals) if vals else None


def class_masks(labels):
    m = expand_overlap(labels)
    return {"PT": m.pt_mask, "HT": m.ht_mask, "BG": labels.classes == BG}


def confusion(pred, gt, region=None):
    """Counts for one image pair of 4-class LabelMaps.

    ``region`` optionally restricts counting to a boolean pixel mask.
    """
    if pred.classes.shape != gt.classes.shape:
        raise ValueError(f"pred {pred.classes.shape} and gt {gt.classes.shape} differ in size")
    pm, gm = class_masks(pred), class_masks(gt)
    counts = ConfusionCounts()
    for c in EVAL_CLASSES:
        a, b = pm[c], gm[c]
        if region is not None:
            a, b = a & region, b & region
        counts.add_masks(c, a, b)
    return counts


@dataclass
class IouReport:
    counts: ConfusionCounts
    per_class: dict
    mean: float | None
    undefined: list

    def records(self):
        return [{"class": c, "tp": self.counts.tp[c], "fp": self.counts.fp[c],
                 "fn": self.counts.fn[c], "iou": self.per_class[c]} for c in EVAL_CLASSES]


def report(counts):
    per_class = {c: iou(counts, c) for c in EVAL_CLASSES}
    undefined = [c for c, v in per_class.items() if v is None]
    return IouReport(counts, per_class, mean_iou(per_class.values()), undefined)


def evaluate(pred, gt):
    return report(confusion(pred, gt))


def evaluate_many(pairs):
    """Pool counts over (pred, gt) pairs, then score once."""
    total = ConfusionCounts()
    for pred, gt in pairs:
        total = total + confusion(pred, gt)
    return report(total)


def _fmt(v):
    return "   n/a" if v is None else f"{100 * v:6.2f}"


def format_table(reports):
    """Aligned text table: one column group (PT HT BG Mean) per post-processing.

    ``reports`` maps a heading such as ``"IoU"``, ``"With CRF"`` to an IouReport.
    """
    heads = list(reports)
    group = "    PT     HT     BG   Mean"
    width = len(group)
    lines = ["  ".join(f"{h:^{width}}" for h in heads),
             "  ".join(group for _ in heads)]
    row = []
    for h in heads:
        r = reports[h]
        vals = [r.per_class[c] for c in EVAL_CLASSES] + [r.mean]
        row.append(" ".join(_fmt(v) for v in vals))
    lines.append("  ".join(row))
    undefined = {h: r.undefined for h, r in reports.items() if r.undefined}
    for h, cls in undefined.items():
        lines.append(f"[{h}] undefined (absent in pred and gt, excluded from mean): {', '.join(cls)}")
    return "\n".join(lines)
