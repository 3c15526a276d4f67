"""Class labels <-> RGB ground-truth images, and overlap expansion.

Class indices are fixed everywhere: PT=0, HT=1, BG=2, OV=3.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

PT, HT, BG, OV = 0, 1, 2, 3
CLASS_NAMES = ("PT", "HT", "BG", "OV")

COLORS = np.array([
    (255, 0, 0),    # PT red
    (0, 255, 0),    # HT green
    (0, 0, 255),    # BG blue
    (255, 255, 0),  # OV yellow
], dtype=np.uint8)


class DecodeError(ValueError):
    pass


@dataclass
class LabelMap:
    classes: np.ndarray  # (H, W) uint8 class indices
    mode: int = 4

    def __post_init__(self):
        self.classes = np.asarray(self.classes, dtype=np.uint8)
        if self.mode not in (3, 4):
            raise ValueError(f"mode must be 3 or 4, got {self.mode}")
        if self.classes.ndim != 2:
            raise ValueError(f"LabelMap needs a 2-D class array, got shape {self.classes.shape}")
        if self.classes.size and self.classes.max() >= self.mode:
            raise ValueError(f"class index {self.classes.max()} illegal in mode {self.mode}")

    @property
    def height(self):
        return self.classes.shape[0]

    @property
    def width(self):
        return self.classes.shape[1]

    def count(self, c):
        return int((self.classes == c).sum())

    def __eq__(self, other):
        return (isinstance(other, LabelMap) and self.mode == other.mode
                and np.array_equal(self.classes, other.classes))


@dataclass
class ChannelMasks:
    ht_mask: np.ndarray
    pt_mask: np.ndarray


def encode_gt(labels):
    """(H, W, 3) uint8 image, one exact color per class."""
    return COLORS[labels.classes]


def decode_gt(image, mode=4):
    img = np.asarray(image)
    if img.ndim != 3 or img.shape[2] != 3:
        raise DecodeError(f"expected an (H, W, 3) RGB image, got shape {img.shape}")
    img = img.astype(np.uint8)
    # pack RGB into one int so the lookup is a single comparison per color
    packed = (img[..., 0].astype(np.uint32) << 16) | (img[..., 1].astype(np.uint32) << 8) | img[..., 2]
    codes = (COLORS[:, 0].astype(np.uint32) << 16) | (COLORS[:, 1].astype(np.uint32) << 8) | COLORS[:, 2]
    classes = np.full(packed.shape, 255, dtype=np.uint8)
    for c in range(mode):
        classes[packed == codes[c]] = c
    bad = classes == 255
    if bad.any():
        ys, xs = np.nonzero(bad)
        y, x = int(ys[0]), int(xs[0])
        raise DecodeError(
            f"{bad.sum()} pixel(s) with a color not legal in {mode}-class mode; "
            f"first at (x={x}, y={y}): {tuple(int(v) for v in img[y, x])}")
    return LabelMap(classes, mode)


def expand_overlap(labels):
    if labels.mode != 4:
        raise ValueError("expand_overlap needs a 4-class LabelMap")
    c = labels.classes
    return ChannelMasks(ht_mask=(c == HT) | (c == OV), pt_mask=(c == PT) | (c == OV))


def collapse_to_three(labels, ov_to=PT):
    """Relabel OV pixels as ``ov_to`` (HT or PT), giving a 3-class map."""
    if labels.mode != 4:
        raise ValueError("collapse_to_three needs a 4-class LabelMap")
    if ov_to not in (HT, PT):
        raise ValueError("ov_to must be HT or PT")
    c = labels.classes.copy()
    c[c == OV] = ov_to
    return LabelMap(c, 3)


def to_onehot(classes, n_classes):
    """(N, H, W) or (H, W) class indices -> (N, C, H, W) float one-hot."""
    classes = np.asarray(classes)
    if classes.ndim == 2:
        classes = classes[None]
    eye = np.eye(n_classes, dtype=np.float32)
    return np.ascontiguousarray(eye[classes].transpose(0, 3, 1, 2))


def argmax_labels(probs):
    """(C, H, W) scores -> class indices; ties resolve to the lowest index."""
    return np.argmax(probs, axis=0).astype(np.uint8)
