"""Segmentation losses over softmax outputs.

Each loss takes ``pred`` as an (N, M, H, W) probability tensor and ``gt`` as a
one-hot array of the same shape, and returns a scalar Tensor whose backward
pass yields d loss / d pred.  Pixel-wise losses are averaged over the N*H*W
pixels; the dice family pools soft precision/recall over the whole batch.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .tensor import ShapeError, Tensor, as_tensor, make_node

LOG_CLAMP = 1e-7
DICE_SMOOTH = 1e-6

PAPER_WEIGHTS = {
    4: (0.3, 0.3, 0.1, 0.3),  # PT, HT, BG, OV
    3: (0.4, 0.5, 0.1),       # PT, HT, BG
}


@dataclass(frozen=True)
class ClassWeights:
    weights: tuple
    normalized: bool = False

    def __post_init__(self):
        w = tuple(float(v) for v in self.weights)
        object.__setattr__(self, "weights", w)
        if any(v < 0 for v in w):
            raise ValueError(f"class weights must be nonnegative, got {w}")
        if self.normalized:
            check_alpha(w)

    @classmethod
    def paper(cls, n_classes):
        return cls(PAPER_WEIGHTS[n_classes], normalized=True)

    @classmethod
    def uniform(cls, n_classes, value=1.0):
        return cls((value,) * n_classes)

    def __len__(self):
        return len(self.weights)

    def array(self):
        return np.asarray(self.weights, dtype=np.float64)


def check_alpha(alpha):
    """Focal-style weights: every entry in (0, 1) and summing to 1."""
    a = np.asarray(alpha, dtype=np.float64)
    if np.any(a <= 0) or np.any(a >= 1) or abs(a.sum() - 1.0) > 1e-6:
        raise ValueError(f"alpha weights must lie in (0, 1) and sum to 1, got {tuple(a)}")


LOSS_KINDS = ("ce", "wce", "focal", "wf", "dice", "wd", "fusion")


@dataclass(frozen=True)
class LossSpec:
    kind: str = "fusion"
    gamma: float = 2.0
    weights: ClassWeights = field(default_factory=lambda: ClassWeights.paper(4))
    dice_smooth: float = DICE_SMOOTH

    def __post_init__(self):
        if self.kind not in LOSS_KINDS:
            raise ValueError(f"unknown loss {self.kind!r}; choose from {LOSS_KINDS}")
        if self.gamma < 0:
            raise ValueError("gamma must be >= 0")
        if self.dice_smooth <= 0:
            raise ValueError("dice_smooth must be > 0")


def _prepare(pred, gt):
    pred = as_tensor(pred)
    gt = np.asarray(gt, dtype=pred.data.dtype)
    if pred.shape != gt.shape or pred.ndim != 4:
        raise ShapeError(f"pred {pred.shape} and gt {gt.shape} must be equal NCHW shapes")
    return pred, gt


def _weights_for(w, m):
    if w is None:
        return np.ones(m)
    arr = w.array() if isinstance(w, ClassWeights) else np.asarray(w, dtype=np.float64)
    if arr.shape != (m,):
        raise ValueError(f"expected {m} class weights, got {arr.shape[0]}")
    return arr


def _pixelwise(pred, gt, w, gamma):
    """Mean over pixels of -sum_m w_m * gt * (1 - p)^gamma * log(p)."""
    pred, gt = _prepare(pred, gt)
    m = pred.shape[1]
    wb = _weights_for(w, m).reshape(1, m, 1, 1)
    p = pred.data.astype(np.float64)
    pc = np.maximum(p, LOG_CLAMP)
    logp = np.log(pc)
    one_minus = np.clip(1.0 - p, 0.0, None)
    mod = one_minus ** gamma if gamma else np.ones_like(p)
    coeff = wb * gt
    n_pix = p.size // m
    value = -(coeff * mod * logp).sum() / n_pix

    def backward(g):
        dlog = np.where(p > LOG_CLAMP, 1.0 / pc, 0.0)
        d = mod * dlog
        if gamma:
            # d/dp (1-p)^gamma = -gamma (1-p)^(gamma-1); log p is 0 where 1-p is 0
            with np.errstate(divide="ignore", invalid="ignore"):
                dmod = np.where(one_minus > 0, gamma * one_minus ** (gamma - 1), 0.0)
            d = d - dmod * logp
        grad = -(coeff * d) / n_pix * g
        return (grad.astype(pred.data.dtype),)

    return make_node(np.asarray(value, dtype=pred.data.dtype), (pred,), backward)


def ce_loss(pred, gt):
    return _pixelwise(pred, gt, None, 0.0)


def wce_loss(pred, gt, w):
    return _pixelwise(pred, gt, w, 0.0)


def focal_loss(pred, gt, gamma=2.0):
    if gamma < 0:
        raise ValueError("gamma must be >= 0")
    return _pixelwise(pred, gt, None, gamma)


def weighted_focal_loss(pred, gt, alpha, gamma=2.0):
    if gamma < 0:
        raise ValueError("gamma must be >= 0")
    a = alpha.weights if isinstance(alpha, ClassWeights) else alpha
    check_alpha(a)
    return _pixelwise(pred, gt, a, gamma)


def soft_precision_recall(p, gt, smooth=DICE_SMOOTH):
    """Per-class soft precision and recall pooled over batch and pixels."""
    inter = (p * gt).sum(axis=(0, 2, 3))
    psum = p.sum(axis=(0, 2, 3))
    gsum = gt.sum(axis=(0, 2, 3))
    return inter / (psum + smooth), inter / (gsum + smooth)


def _dice(pred, gt, w, smooth):
    pred, gt = _prepare(pred, gt)
    m = pred.shape[1]
    wv = _weights_for(w, m)
    p = pred.data.astype(np.float64)
    g64 = gt.astype(np.float64)
    inter = (p * g64).sum(axis=(0, 2, 3))
    psum_s = p.sum(axis=(0, 2, 3)) + smooth
    gsum_s = g64.sum(axis=(0, 2, 3)) + smooth
    prec, rec = inter / psum_s, inter / gsum_s
    den = prec + rec + smooth
    term = prec * rec / den
    value = 1.0 - (2.0 / m) * (wv * term).sum()

    def backward(g):
        dt_dprec = rec * (rec + smooth) / den ** 2
        dt_drec = prec * (prec + smooth) / den ** 2
        b = lambda v: v.reshape(1, m, 1, 1)  # noqa: E731
        dprec = g64 / b(psum_s) - b(inter / psum_s ** 2)
        drec = g64 / b(gsum_s)
        grad = -(2.0 / m) * b(wv) * (b(dt_dprec) * dprec + b(dt_drec) * drec) * g
        return (grad.astype(pred.data.dtype),)

    return make_node(np.asarray(value, dtype=pred.data.dtype), (pred,), backward)


def dice_loss(pred, gt, smooth=DICE_SMOOTH):
    return _dice(pred, gt, None, smooth)


def weighted_dice_loss(pred, gt, w, smooth=DICE_SMOOTH):
    return _dice(pred, gt, w, smooth)


def fusion_loss(pred, gt, spec):
    """Weighted focal + weighted CE + weighted dice, all sharing ``spec.weights``."""
    pred = as_tensor(pred)
    return (weighted_focal_loss(pred, gt, spec.weights, spec.gamma)
            + wce_loss(pred, gt, spec.weights)
            + weighted_dice_loss(pred, gt, spec.weights, spec.dice_smooth))


def compute_loss(spec, pred, gt):
    k = spec.kind
    if k == "ce":
        return ce_loss(pred, gt)
    if k == "wce":
        return wce_loss(pred, gt, spec.weights)
    if k == "focal":
        return focal_loss(pred, gt, spec.gamma)
    if k == "wf":
        return weighted_focal_loss(pred, gt, spec.weights, spec.gamma)
    if k == "dice":
        return dice_loss(pred, gt, spec.dice_smooth)
    if k == "wd":
        return weighted_dice_loss(pred, gt, spec.weights, spec.dice_smooth)
    return fusion_loss(pred, gt, spec)


def loss_value(spec, pred, gt):
    """Float loss without recording a trace."""
    return float(compute_loss(spec, Tensor(np.asarray(pred)), gt).data)
