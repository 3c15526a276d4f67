"""Finite-difference release gate for every differentiable piece.

Each check builds a scalar in float64, backpropagates once and compares every
probed gradient entry against a central difference: h = 1e-3 for single
primitives and losses, h = 1e-4 through the whole toy MFM, whose curvature
makes the O(h^2) truncation error dominate tiny gradient entries at 1e-3.
"""
from __future__ import annotations

import time
from dataclasses import dataclass

import numpy as np

from . import losses as L
from . import tensor as T
from .labels import to_onehot
from .models import TOY_FFP, TOY_SSP, build_model
from .tensor import Tensor

H = 1e-3
END_TO_END_H = 1e-4
PRIMITIVE_TOL = 1e-4
END_TO_END_TOL = 1e-3


@dataclass
class CheckResult:
    name: str
    max_rel_error: float
    tol: float
    probed: int = 0
    skipped: int = 0      # stencils that crossed a ReLU/max-pool kink
    min_probed: int = 1

    @property
    def passed(self):
        return bool(np.isfinite(self.max_rel_error) and self.max_rel_error <= self.tol
                    and self.probed >= self.min_probed)


def _eval_with_pattern(fn):
    with T.record_activation_pattern() as pattern:
        value = float(np.asarray(fn().data).reshape(()))
    return value, pattern


def _same_pattern(a, b):
    return len(a) == len(b) and all(np.array_equal(x, y) for x, y in zip(a, b))


def check(name, fn, inputs, tol=PRIMITIVE_TOL, probes=None, rng=None, min_probed=None, h=H):
    """Compare analytic and central-difference gradients of scalar ``fn()``.

    Every input entry (or a random subset of ``probes`` per input) is probed.
    A probe whose +h / -h evaluations land on a different ReLU or max-pool
    pattern than the unperturbed pass straddles a kink, has no derivative to
    compare against, and is skipped.  ``min_probed`` (default: all probes)
    sets how many kink-free probes the check needs to count as passed.
    """
    for t in inputs:
        t.zero_grad()
    fn().backward()
    _, base = _eval_with_pattern(fn)
    worst, probed, skipped = 0.0, 0, 0
    for t in inputs:
        flat = t.data.reshape(-1)
        index = range(t.size)
        if probes is not None and t.size > probes:
            index = np.sort(rng.choice(t.size, size=probes, replace=False))
        ana = np.zeros(t.size) if t.grad is None else t.grad.reshape(-1)
        for i in index:
            orig = flat[i]
            flat[i] = orig + h
            fp, pat_p = _eval_with_pattern(fn)
            flat[i] = orig - h
            fm, pat_m = _eval_with_pattern(fn)
            flat[i] = orig
            if not (_same_pattern(base, pat_p) and _same_pattern(base, pat_m)):
                skipped += 1
                continue
            num = (fp - fm) / (2 * h)
            worst = max(worst, abs(ana[i] - num) / (abs(num) + 1e-8))
            probed += 1
    total = probed + skipped
    return CheckResult(name, worst, tol, probed, skipped, total if min_probed is None else min_probed)


def _away_from_zero(rng, shape, margin=1e-2):
    x = rng.normal(size=shape)
    return np.where(np.abs(x) < margin, np.sign(x + 1e-12) * (margin + np.abs(x)), x)


def primitive_checks(rng):
    out = []
    n, c, h, w = 2, 3, 4, 4

    x = Tensor(rng.normal(size=(n, c, h, w)), requires_grad=True)
    k = Tensor(rng.normal(size=(5, c, 3, 3)), requires_grad=True)
    b = Tensor(rng.normal(size=5), requires_grad=True)
    r = rng.normal(size=(n, 5, h, w))
    out.append(check("conv2d", lambda: T.mul(T.conv2d(x, k, b), r).sum(), [x, k, b]))

    k1 = Tensor(rng.normal(size=(2, c, 1, 1)), requires_grad=True)
    r1 = rng.normal(size=(n, 2, h, w))
    out.append(check("conv2d_1x1", lambda: T.mul(T.conv2d(x, k1), r1).sum(), [x, k1]))

    gamma = Tensor(rng.uniform(0.5, 1.5, size=c), requires_grad=True)
    beta = Tensor(rng.normal(size=c), requires_grad=True)
    rb = rng.normal(size=(n, c, h, w))
    rm, rv = np.zeros(c), np.ones(c)
    out.append(check("batchnorm_train",
                     lambda: T.mul(T.batchnorm(x, gamma, beta, rm, rv, training=True), rb).sum(),
                     [x, gamma, beta]))
    rm2, rv2 = rng.normal(size=c), rng.uniform(0.5, 2.0, size=c)
    out.append(check("batchnorm_inference",
                     lambda: T.mul(T.batchnorm(x, gamma, beta, rm2, rv2, training=False), rb).sum(),
                     [x, gamma, beta]))

    xr = Tensor(_away_from_zero(rng, (n, c, h, w)), requires_grad=True)
    out.append(check("relu", lambda: T.mul(T.relu(xr), rb).sum(), [xr]))

    # distinct values per window keep the max away from ties under +-h
    xp = Tensor(rng.permutation(n * c * h * w).reshape(n, c, h, w) * 0.1, requires_grad=True)
    rp = rng.normal(size=(n, c, h // 2, w // 2))
    out.append(check("maxpool2", lambda: T.mul(T.maxpool2(xp), rp).sum(), [xp]))

    ru = rng.normal(size=(n, c, 2 * h, 2 * w))
    out.append(check("upsample2", lambda: T.mul(T.upsample2(x), ru).sum(), [x]))

    y = Tensor(rng.normal(size=(n, 2, h, w)), requires_grad=True)
    rc = rng.normal(size=(n, c + 2, h, w))
    out.append(check("concat_channels", lambda: T.mul(T.concat_channels(x, y), rc).sum(), [x, y]))

    z = Tensor(rng.normal(size=(n, 4, h, w)), requires_grad=True)
    rs = rng.normal(size=(n, 4, h, w))
    out.append(check("softmax_channels", lambda: T.mul(T.softmax_channels(z), rs).sum(), [z]))

    a2 = Tensor(rng.normal(size=(n, c, h, w)), requires_grad=True)
    out.append(check("add", lambda: T.mul(T.add(x, a2), rb).sum(), [x, a2]))
    return out


def loss_checks(rng):
    out = []
    m = 4
    logits = Tensor(rng.normal(size=(2, m, 4, 4)), requires_grad=True)
    gt = to_onehot(rng.integers(0, m, size=(2, 4, 4)), m).astype(np.float64)
    weights = L.ClassWeights.paper(4)
    spec = L.LossSpec("fusion", 2.0, weights)
    fns = {
        "loss_ce": lambda p: L.ce_loss(p, gt),
        "loss_wce": lambda p: L.wce_loss(p, gt, weights),
        "loss_focal": lambda p: L.focal_loss(p, gt, 2.0),
        "loss_wf": lambda p: L.weighted_focal_loss(p, gt, weights, 2.0),
        "loss_dice": lambda p: L.dice_loss(p, gt),
        "loss_wd": lambda p: L.weighted_dice_loss(p, gt, weights),
        "loss_fusion": lambda p: L.fusion_loss(p, gt, spec),
    }
    for name, f in fns.items():
        out.append(check(name, lambda f=f: f(T.softmax_channels(logits)), [logits]))
    return out


def end_to_end_check(rng, probes=12, min_probed=100):
    """CE loss through a toy MFM on a 1x3x16x16 input, every parameter tensor probed.

    Perturbing a parameter by h moves thousands of downstream pre-activations,
    so many stencils cross a ReLU kink; those are skipped and at least
    ``min_probed`` smooth probes must remain.
    """
    model = build_model("mfm", 4, seed=int(rng.integers(1 << 31)), ffp=TOY_FFP, ssp=TOY_SSP)
    x = Tensor(rng.normal(size=(1, 3, 16, 16)))
    gt = to_onehot(rng.integers(0, 4, size=(1, 16, 16)), 4).astype(np.float64)
    params = model.parameters()
    return check("mfm_end_to_end", lambda: L.ce_loss(model(x), gt), params,
                 tol=END_TO_END_TOL, probes=probes, rng=rng, min_probed=min_probed, h=END_TO_END_H)


def run_all(seed=0):
    """All checks in float64; returns (results, seconds)."""
    start = time.perf_counter()
    rng = np.random.default_rng(seed)
    with T.precision(np.float64):
        results = primitive_checks(rng) + loss_checks(rng) + [end_to_end_check(rng)]
    return results, time.perf_counter() - start


def format_report(results):
    lines = [f"{'check':<22} {'max rel err':>12} {'tol':>8} {'probed':>7} {'kinked':>7}  status"]
    for r in results:
        lines.append(f"{r.name:<22} {r.max_rel_error:12.3e} {r.tol:8.0e} {r.probed:7d} {r.skipped:7d}  "
                     f"{'ok' if r.passed else 'FAIL'}")
    return "\n".join(lines)
