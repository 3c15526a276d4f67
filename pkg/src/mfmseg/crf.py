"""Dense CRF mean-field refinement and the BG-only relabelling heuristic.

Soft predictions here are (C, H, W) arrays in PT, HT, BG, OV channel order.
Pairwise kernels are evaluated exactly between every pixel pair inside a
square window of half-width ceil(3 * sigma); pairs further apart are ignored.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .labels import BG, HT, PT

LOG_CLAMP = 1e-7
_CACHE_LIMIT = 20_000_000  # kernel entries kept in memory across iterations
_BLOCK_ENTRIES = 4_000_000


@dataclass(frozen=True)
class CrfConfig:
    n_iters: int = 5
    spatial_sigma: float = 3.0
    bilateral_sigma_xy: float = 40.0
    bilateral_sigma_intensity: float = 20.0
    spatial_weight: float = 3.0
    bilateral_weight: float = 5.0

    def __post_init__(self):
        if self.n_iters < 1:
            raise ValueError("n_iters must be >= 1")
        if min(self.spatial_sigma, self.bilateral_sigma_xy, self.bilateral_sigma_intensity) <= 0:
            raise ValueError("CRF sigmas must be positive")
        if self.spatial_weight < 0 or self.bilateral_weight < 0:
            raise ValueError("CRF kernel weights must be nonnegative")


POLICIES = ("none", "crf", "crfh")


def _kernel_rows(rows, ys, xs, inten, cfg):
    """Pairwise weights k(i, j) for pixels ``rows`` against all pixels (diagonal zeroed)."""
    dy = ys[rows, None] - ys[None, :]
    dx = xs[rows, None] - xs[None, :]
    cheb = np.maximum(np.abs(dy), np.abs(dx))
    d2 = dy * dy + dx * dx
    k = np.zeros(dy.shape)
    if cfg.spatial_weight:
        r = math.ceil(3 * cfg.spatial_sigma)
        k += np.where(cheb <= r, cfg.spatial_weight * np.exp(-d2 / (2 * cfg.spatial_sigma ** 2)), 0.0)
    if cfg.bilateral_weight:
        r = math.ceil(3 * cfg.bilateral_sigma_xy)
        di = inten[rows, None] - inten[None, :]
        e = -d2 / (2 * cfg.bilateral_sigma_xy ** 2) - di * di / (2 * cfg.bilateral_sigma_intensity ** 2)
        k += np.where(cheb <= r, cfg.bilateral_weight * np.exp(e), 0.0)
    k[np.arange(len(rows)), rows] = 0.0
    return k


def meanfield(unary, image, cfg=CrfConfig()):
    """Mean-field inference with a Potts model.

    ``unary``: (C, H, W) probabilities; unary energies are -log(max(p, 1e-7)).
    ``image``: (H, W) grayscale used by the bilateral kernel.
    Each iteration: Q_i(l) ∝ exp(-U_i(l) - sum_{j} k(i, j) (1 - Q_j(l))),
    with all pixels updated in parallel from the previous field.
    """
    unary = np.asarray(unary, dtype=np.float64)
    image = np.asarray(image, dtype=np.float64)
    c, h, w = unary.shape
    if image.shape != (h, w):
        raise ValueError(f"image {image.shape} does not match prediction {(h, w)}")
    if cfg.spatial_weight == 0 and cfg.bilateral_weight == 0:
        return unary.copy()
    u = -np.log(np.maximum(unary, LOG_CLAMP)).reshape(c, -1)
    q = _normalize(-u)

    n = h * w
    ys, xs = np.divmod(np.arange(n, dtype=np.float64), w)
    inten = image.reshape(-1)
    block = max(1, min(n, _BLOCK_ENTRIES // n))
    blocks = [np.arange(s, min(n, s + block)) for s in range(0, n, block)]
    cache = {} if n * n <= _CACHE_LIMIT else None

    for _ in range(cfg.n_iters):
        msg = np.empty((c, n))
        for bi, rows in enumerate(blocks):
            if cache is not None and bi in cache:
                k = cache[bi]
            else:
                k = _kernel_rows(rows, ys, xs, inten, cfg)
                if cache is not None:
                    cache[bi] = k
            # Potts: penalty for label l is sum_j k_ij * (1 - Q_j(l))
            msg[:, rows] = k.sum(axis=1)[None, :] - (k @ q.T).T
        q = _normalize(-u - msg)
    return q.reshape(c, h, w)


def _normalize(neg_energy):
    z = neg_energy - neg_energy.max(axis=0, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=0, keepdims=True)


def crfh_filter(before, after):
    """Keep ``before`` labels except BG pixels that moved to HT or PT."""
    before = np.asarray(before)
    after = np.asarray(after)
    allowed = (before == BG) & ((after == HT) | (after == PT))
    return np.where(allowed, after, before).astype(np.uint8)


def apply_crf(pred, image, cfg=CrfConfig(), policy="crf"):
    """Refine a (C, H, W) soft prediction into hard class indices.

    policy "none" returns the plain argmax, "crf" the argmax of the mean-field
    field, "crfh" the CRF labels filtered by :func:`crfh_filter`.
    """
    if policy not in POLICIES:
        raise ValueError(f"unknown policy {policy!r}; choose from {POLICIES}")
    pred = np.asarray(pred)
    before = np.argmax(pred, axis=0).astype(np.uint8)
    if policy == "none":
        return before
    after = np.argmax(meanfield(pred, image, cfg), axis=0).astype(np.uint8)
    if policy == "crfh":
        return crfh_filter(before, after)
    return after
