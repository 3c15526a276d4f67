"""Synthetic overlapping-text samples.

Printed (PT) and handwritten (HT) ink layers are binarized from single-type
crops, overlaid on a white page and labelled per pixel; the composed sample is
then shifted, scaled and rotated.  Everything is a pure function of the source
crops, the config and the master seed.
"""
from __future__ import annotations

import hashlib
import json
import string
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image, ImageDraw, ImageFont
from scipy import ndimage

from .labels import BG, HT, OV, PT, LabelMap, decode_gt, encode_gt

SPLITS = ("train", "val", "test")


@dataclass
class InkLayer:
    ink_mask: np.ndarray   # (H, W) bool
    intensity: np.ndarray  # (H, W) uint8, 255 outside the mask

    @property
    def height(self):
        return self.ink_mask.shape[0]

    @property
    def width(self):
        return self.ink_mask.shape[1]


@dataclass(frozen=True)
class Transform:
    dx: float = 0.0
    dy: float = 0.0
    scale: float = 1.0
    angle: float = 0.0  # degrees, counter-clockwise

    @property
    def is_identity(self):
        return self.dx == 0 and self.dy == 0 and self.scale == 1 and self.angle == 0


@dataclass
class SynthRecord:
    id: str
    split: str
    seed: int
    source_pt_id: str
    source_ht_id: str
    dx: float
    dy: float
    scale: float
    angle: float
    image_path: str = ""
    gt_path: str = ""

    @property
    def transform(self):
        return Transform(self.dx, self.dy, self.scale, self.angle)


@dataclass
class DatasetSample:
    image: np.ndarray  # (H, W) uint8 grayscale
    labels: LabelMap
    record: SynthRecord | None = None


@dataclass
class SynthConfig:
    size: int = 64
    counts: dict = field(default_factory=lambda: {"train": 64, "val": 8, "test": 8})
    threshold: int = 128
    shift_frac: float = 0.1
    scale_range: tuple = (0.9, 1.1)
    max_angle: float = 10.0
    test_sources: int = 2        # crops of each type held out for the test split
    min_overlap: int = 0         # resample until at least this many OV pixels
    max_attempts: int = 50
    seed: int = 0

    @classmethod
    def paper_scale(cls, **kw):
        return cls(size=256, counts={"train": 5169, "val": 530, "test": 558}, test_sources=16, **kw)

    @classmethod
    def from_dict(cls, d):
        d = dict(d)
        if "scale_range" in d:
            d["scale_range"] = tuple(d["scale_range"])
        return cls(**d)


class SynthError(ValueError):
    pass


# --- layers and composition -----------------------------------------------------------

def extract_layer(gray, threshold=128):
    """Ink is every pixel darker than ``threshold``; its gray value is kept."""
    gray = np.asarray(gray, dtype=np.uint8)
    mask = gray < threshold
    return InkLayer(mask, np.where(mask, gray, 255).astype(np.uint8))


def compose(pt, ht):
    """Overlay HT ink on PT ink over white paper; returns (image, 4-class labels)."""
    if pt.ink_mask.shape != ht.ink_mask.shape:
        raise SynthError(f"layer sizes differ: {pt.ink_mask.shape} vs {ht.ink_mask.shape}")
    image = np.minimum(pt.intensity, ht.intensity)
    classes = np.full(pt.ink_mask.shape, BG, dtype=np.uint8)
    classes[pt.ink_mask] = PT
    classes[ht.ink_mask] = HT
    classes[pt.ink_mask & ht.ink_mask] = OV
    return image, LabelMap(classes, 4)


def check_transform(t, cfg, size):
    lim = cfg.shift_frac * size
    lo, hi = cfg.scale_range
    if abs(t.dx) > lim + 1e-9 or abs(t.dy) > lim + 1e-9:
        raise SynthError(f"shift ({t.dx}, {t.dy}) exceeds ±{lim} px")
    if not lo <= t.scale <= hi:
        raise SynthError(f"scale {t.scale} outside {cfg.scale_range}")
    if abs(t.angle) > cfg.max_angle:
        raise SynthError(f"angle {t.angle} exceeds ±{cfg.max_angle}°")


def random_transform(rng, cfg, size):
    lim = cfg.shift_frac * size
    return Transform(dx=float(rng.uniform(-lim, lim)), dy=float(rng.uniform(-lim, lim)),
                     scale=float(rng.uniform(*cfg.scale_range)),
                     angle=float(rng.uniform(-cfg.max_angle, cfg.max_angle)))


def _affine(t, shape):
    """(matrix, offset) mapping output (row, col) to input coordinates."""
    a = np.deg2rad(t.angle)
    # output = S R (input - c) + c + shift  =>  input = R^-1 (output - c - shift) / s + c
    rot_inv = np.array([[np.cos(a), -np.sin(a)], [np.sin(a), np.cos(a)]])
    m = rot_inv / t.scale
    c = (np.array(shape, dtype=np.float64) - 1) / 2
    offset = c - m @ (c + np.array([t.dy, t.dx]))
    return m, offset


def augment(sample, transform, cfg=None):
    """Apply one geometric map to image (bilinear, white fill) and labels
    (nearest neighbour, BG fill)."""
    if cfg is not None:
        check_transform(transform, cfg, sample.image.shape[0])
    if transform.is_identity:
        return DatasetSample(sample.image.copy(), LabelMap(sample.labels.classes.copy(), sample.labels.mode),
                             sample.record)
    m, off = _affine(transform, sample.image.shape)
    img = ndimage.affine_transform(sample.image.astype(np.float64), m, off, order=1,
                                   mode="constant", cval=255.0)
    lab = ndimage.affine_transform(sample.labels.classes, m, off, order=0, mode="constant", cval=BG)
    return DatasetSample(np.clip(np.rint(img), 0, 255).astype(np.uint8),
                         LabelMap(lab.astype(np.uint8), sample.labels.mode), sample.record)


# --- procedural source crops ------------------------------------------------------------

def printed_crop(rng, size):
    """Lines of random machine-printed words in near-black ink."""
    img = Image.new("L", (size, size), 255)
    draw = ImageDraw.Draw(img)
    font_px = max(8, size // 6)
    font = ImageFont.load_default(size=font_px)
    y = int(rng.integers(0, font_px))
    while y < size - font_px // 2:
        x = int(rng.integers(-font_px, font_px))
        words = ["".join(rng.choice(list(string.ascii_letters + string.digits), size=int(rng.integers(2, 7))))
                 for _ in range(6)]
        draw.text((x, y), " ".join(words), fill=int(rng.integers(0, 50)), font=font)
        y += int(font_px * rng.uniform(1.3, 1.9))
    return np.asarray(img, dtype=np.uint8)


def handwritten_crop(rng, size):
    """A few smooth cursive-like strokes in lighter pen ink."""
    img = Image.new("L", (size, size), 255)
    draw = ImageDraw.Draw(img)
    for _ in range(int(rng.integers(2, 4))):
        n = 40
        t = np.linspace(0, 1, n)
        x0, x1 = rng.uniform(-0.1, 0.3) * size, rng.uniform(0.7, 1.1) * size
        y0 = rng.uniform(0.15, 0.85) * size
        freq = rng.uniform(2, 5)
        amp = rng.uniform(0.04, 0.12) * size
        xs = x0 + (x1 - x0) * t + 0.03 * size * np.sin(2 * np.pi * freq * 2 * t + rng.uniform(0, 6))
        ys = y0 + amp * np.sin(2 * np.pi * freq * t + rng.uniform(0, 6)) + rng.uniform(-0.1, 0.1) * size * t
        width = max(2, size // 24)
        draw.line(list(zip(xs.tolist(), ys.tolist())), fill=int(rng.integers(60, 115)), width=width, joint="curve")
    return np.asarray(img, dtype=np.uint8)


def make_sources(n_pt, n_ht, size, seed=0):
    """Procedural single-type crops: ``{"pt": [(id, gray)], "ht": [(id, gray)]}``."""
    rng = np.random.default_rng(seed)
    return {
        "pt": [(f"pt{i:04d}", printed_crop(rng, size)) for i in range(n_pt)],
        "ht": [(f"ht{i:04d}", handwritten_crop(rng, size)) for i in range(n_ht)],
    }


# --- dataset -----------------------------------------------------------------------------

def sample_seed(master_seed, index):
    return int(np.random.SeedSequence([master_seed, index]).generate_state(1)[0])


def split_plan(cfg):
    """Ordered (split, global index) pairs for every sample to generate."""
    plan, i = [], 0
    for split in SPLITS:
        for _ in range(cfg.counts.get(split, 0)):
            plan.append((split, i))
            i += 1
    return plan


def partition_sources(sources, cfg):
    """Hold out ``cfg.test_sources`` crops of each type for the test split only."""
    rng = np.random.default_rng(cfg.seed)
    pools = {}
    for kind in ("pt", "ht"):
        ids = sorted(sid for sid, _ in sources[kind])
        rng.shuffle(ids)
        k = cfg.test_sources if cfg.counts.get("test", 0) else 0
        if len(ids) < k + (1 if cfg.counts.get("train", 0) or cfg.counts.get("val", 0) else 0):
            raise SynthError(f"need more than {k} {kind.upper()} sources, have {len(ids)}")
        if k and len(ids) - k < 1 and (cfg.counts.get("train") or cfg.counts.get("val")):
            raise SynthError(f"not enough {kind.upper()} sources left for train/val")
        pools[kind] = {"test": ids[:k], "train": ids[k:], "val": ids[k:]}
    return pools


def generate_sample(split, index, pools, sources, cfg):
    layers = {kind: {sid: extract_layer(g, cfg.threshold) for sid, g in sources[kind]} for kind in ("pt", "ht")}
    return _generate(split, index, pools, layers, cfg)


def _generate(split, index, pools, layers, cfg):
    seed = sample_seed(cfg.seed, index)
    rng = np.random.default_rng(seed)
    for _ in range(cfg.max_attempts):
        pt_id = pools["pt"][split][int(rng.integers(len(pools["pt"][split])))]
        ht_id = pools["ht"][split][int(rng.integers(len(pools["ht"][split])))]
        image, labels = compose(layers["pt"][pt_id], layers["ht"][ht_id])
        t = random_transform(rng, cfg, cfg.size)
        rec = SynthRecord(f"{split}_{index:05d}", split, seed, pt_id, ht_id, t.dx, t.dy, t.scale, t.angle)
        sample = augment(DatasetSample(image, labels, rec), t, cfg)
        if sample.labels.count(OV) >= cfg.min_overlap:
            return sample
    raise SynthError(f"sample {index}: fewer than {cfg.min_overlap} overlap pixels after {cfg.max_attempts} attempts")


def build_dataset(sources, cfg, out_dir):
    """Write ``<split>/<id>_img.png`` / ``<id>_gt.png`` pairs and ``manifest.jsonl``.

    Returns the list of records in manifest order.
    """
    for kind in ("pt", "ht"):
        for sid, g in sources[kind]:
            if np.asarray(g).shape != (cfg.size, cfg.size):
                raise SynthError(f"source {sid} has shape {np.asarray(g).shape}, expected {(cfg.size, cfg.size)}")
    pools = partition_sources(sources, cfg)
    layers = {kind: {sid: extract_layer(g, cfg.threshold) for sid, g in sources[kind]} for kind in ("pt", "ht")}
    out = Path(out_dir)
    records = []
    for split, index in split_plan(cfg):
        sample = _generate(split, index, pools, layers, cfg)
        rec = sample.record
        (out / split).mkdir(parents=True, exist_ok=True)
        rec.image_path = f"{split}/{rec.id}_img.png"
        rec.gt_path = f"{split}/{rec.id}_gt.png"
        Image.fromarray(sample.image, mode="L").save(out / rec.image_path)
        Image.fromarray(encode_gt(sample.labels), mode="RGB").save(out / rec.gt_path)
        records.append(rec)
    with open(out / "manifest.jsonl", "w") as fh:
        for rec in records:
            fh.write(json.dumps(asdict(rec), sort_keys=True) + "\n")
    return records


def read_manifest(root):
    path = Path(root) / "manifest.jsonl"
    if not path.is_file():
        raise SynthError(f"missing dataset manifest: {path}")
    with open(path) as fh:
        return [SynthRecord(**json.loads(line)) for line in fh if line.strip()]


def load_split(root, split):
    """Images (N, H, W) uint8, 4-class labels (N, H, W) uint8, and records."""
    root = Path(root)
    recs = [r for r in read_manifest(root) if r.split == split]
    if not recs:
        raise SynthError(f"no {split!r} samples in {root}")
    images = np.stack([np.asarray(Image.open(root / r.image_path).convert("L")) for r in recs])
    labels = np.stack([decode_gt(np.asarray(Image.open(root / r.gt_path).convert("RGB"))).classes for r in recs])
    return images, labels, recs


def to_input(images):
    """Grayscale uint8 (N, H, W) -> float32 (N, 3, H, W) with ink high, paper 0."""
    x = (255.0 - np.asarray(images, dtype=np.float32)) / 255.0
    return np.ascontiguousarray(np.repeat(x[:, None], 3, axis=1))


def file_checksum(path):
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def class_histogram(labels):
    counts = np.bincount(np.asarray(labels).reshape(-1), minlength=4)
    return {name: int(counts[i]) for i, name in enumerate(("PT", "HT", "BG", "OV"))}
