"""Fine Feature Path, Semantic Segmentation Path and the Mixed Feature Model.

All models map an (N, 3, H, W) image batch to per-pixel class scores of the
same spatial size.  FFP and SSP return logits (they also serve as branches);
``probs`` applies the channel softmax for standalone use.  MFM already ends in
a softmax.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .layers import BatchNorm2d, Conv2d, ConvBNReLU, Module, parameter_count  # noqa: F401


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class FfpConfig:
    n_stages: int = 4
    stage_channels: int = 64
    out_classes: int = 4

    def __post_init__(self):
        if self.n_stages < 1 or self.stage_channels < 1:
            raise ConfigError("n_stages and stage_channels must be >= 1")
        if self.out_classes not in (3, 4):
            raise ConfigError(f"out_classes must be 3 or 4, got {self.out_classes}")


@dataclass(frozen=True)
class SspConfig:
    variant: str = "light"
    depth: int = 4
    base_channels: int = 8
    out_classes: int = 4
    bottleneck: bool = True

    def __post_init__(self):
        if self.variant not in ("light", "mini-residual"):
            raise ConfigError(f"unknown SSP variant {self.variant!r}")
        if self.depth < 1 or self.base_channels < 1:
            raise ConfigError("depth and base_channels must be >= 1")
        if self.out_classes not in (3, 4):
            raise ConfigError(f"out_classes must be 3 or 4, got {self.out_classes}")

    @property
    def widths(self):
        return [self.base_channels * 2 ** i for i in range(self.depth)]


def _check_input(x, model):
    if x.ndim != 4 or x.shape[1] != 3:
        raise T.ShapeError(f"{model} expects (N, 3, H, W) input, got {x.shape}")


class FineFeaturePath(Module):
    """Full-resolution stages of two Conv-BN-ReLU groups; each stage output is
    concatenated with the stage input, so stage s carries 3 + s*stage_channels
    channels.  A 1x1 conv maps the last stage to class logits."""

    def __init__(self, cfg=FfpConfig(), seed=0, rng=None):
        rng = rng if rng is not None else np.random.default_rng(seed)
        self.cfg = cfg
        self.stages = []
        c = 3
        for _ in range(cfg.n_stages):
            self.stages.append(_FfpStage(c, cfg.stage_channels, rng))
            c += cfg.stage_channels
        self.head = Conv2d(c, cfg.out_classes, 1, rng)

    def forward(self, x, stage_outputs=None):
        _check_input(x, "FFP")
        for stage in self.stages:
            x = stage(x)
            if stage_outputs is not None:
                stage_outputs.append(x)
        return self.head(x)

    def probs(self, x):
        return T.softmax_channels(self(x))


class _FfpStage(Module):
    def __init__(self, in_ch, ch, rng):
        self.g1 = ConvBNReLU(in_ch, ch, rng)
        self.g2 = ConvBNReLU(ch, ch, rng)

    def forward(self, x):
        return T.concat_channels(x, self.g2(self.g1(x)))


class _DoubleConv(Module):
    """Conv-BN-ReLU twice.  With ``residual`` the second group's output is added
    to the first group's output (identity shortcut around the second conv)."""

    def __init__(self, in_ch, out_ch, rng, residual=False):
        self.g1 = ConvBNReLU(in_ch, out_ch, rng)
        self.g2 = ConvBNReLU(out_ch, out_ch, rng)
        self.residual = residual

    def forward(self, x):
        h = self.g1(x)
        out = self.g2(h)
        return T.add(out, h) if self.residual else out


class SemanticSegmentationPath(Module):
    """U-Net style encoder/decoder.

    Encoder stage i: double conv to ``base * 2**i`` channels, then 2x2 max pool.
    An optional bottleneck Conv-BN-ReLU runs at the lowest resolution.  Each
    decoder stage upsamples, concatenates the matching encoder activation
    (taken before pooling) and applies a double conv back to that stage's width.
    """

    def __init__(self, cfg=SspConfig(), seed=0, rng=None, use_skips=True):
        rng = rng if rng is not None else np.random.default_rng(seed)
        self.cfg = cfg
        self.use_skips = use_skips
        residual = cfg.variant == "mini-residual"
        widths = cfg.widths
        self.encoder = []
        c = 3
        for w in widths:
            self.encoder.append(_DoubleConv(c, w, rng, residual))
            c = w
        self.bottleneck = ConvBNReLU(c, c, rng) if cfg.bottleneck else None
        self.decoder = []
        for w in reversed(widths):
            self.decoder.append(_DoubleConv(c + w, w, rng, residual))
            c = w
        self.head = Conv2d(c, cfg.out_classes, 1, rng)

    def _check_extent(self, x):
        _check_input(x, "SSP")
        f = 2 ** self.cfg.depth
        if x.shape[2] % f or x.shape[3] % f:
            raise T.ShapeError(f"SSP depth {self.cfg.depth} needs H, W divisible by {f}, got {x.shape[2:]}")

    def encode(self, x):
        """Return (bottleneck activation, pre-pool skip activations)."""
        self._check_extent(x)
        skips = []
        for block in self.encoder:
            x = block(x)
            skips.append(x)
            x = T.maxpool2(x)
        if self.bottleneck is not None:
            x = self.bottleneck(x)
        return x, skips

    def forward(self, x):
        x, skips = self.encode(x)
        for block, skip in zip(self.decoder, reversed(skips)):
            x = T.upsample2(x)
            if not self.use_skips:
                skip = T.Tensor(np.zeros_like(skip.data))
            x = block(T.concat_channels(x, skip))
        return self.head(x)

    def probs(self, x):
        return T.softmax_channels(self(x))


class MixedFeatureModel(Module):
    """FFP and SSP in parallel; each branch output goes through BN + ReLU, the
    two are concatenated and a 1x1 conv + channel softmax gives the prediction."""

    def __init__(self, ffp, ssp, seed=0, rng=None):
        nf, ns = ffp.cfg.out_classes, ssp.cfg.out_classes
        if nf != ns:
            raise ConfigError(f"branch class counts differ: FFP {nf}, SSP {ns}")
        rng = rng if rng is not None else np.random.default_rng(seed)
        self.ffp = ffp
        self.ssp = ssp
        self.ffp_bn = BatchNorm2d(nf)
        self.ssp_bn = BatchNorm2d(ns)
        self.head = Conv2d(2 * nf, nf, 1, rng)

    @property
    def out_classes(self):
        return self.ffp.cfg.out_classes

    def features(self, x):
        """Concatenated branch features that feed the 1x1 head."""
        f = T.relu(self.ffp_bn(self.ffp(x)))
        s = T.relu(self.ssp_bn(self.ssp(x)))
        return T.concat_channels(f, s)

    def logits(self, x):
        return self.head(self.features(x))

    def forward(self, x):
        return T.softmax_channels(self.logits(x))

    probs = forward


MODEL_NAMES = ("ffp", "ssp-light", "ssp-mini-residual", "mfm")


def build_model(name, classes=4, seed=0, ffp=None, ssp=None):
    """Construct a model by CLI name.

    ``ffp``/``ssp`` are dicts of config overrides (e.g. toy widths).
    """
    ffp_cfg = FfpConfig(**{**(ffp or {}), "out_classes": classes})
    ssp_opts = {**(ssp or {}), "out_classes": classes}
    rng = np.random.default_rng(seed)
    if name == "ffp":
        return FineFeaturePath(ffp_cfg, rng=rng)
    if name == "ssp-light":
        return SemanticSegmentationPath(SspConfig(**{**ssp_opts, "variant": "light"}), rng=rng)
    if name == "ssp-mini-residual":
        return SemanticSegmentationPath(SspConfig(**{**ssp_opts, "variant": "mini-residual"}), rng=rng)
    if name == "mfm":
        ssp_cfg = SspConfig(**ssp_opts)
        return MixedFeatureModel(FineFeaturePath(ffp_cfg, rng=rng),
                                 SemanticSegmentationPath(ssp_cfg, rng=rng), rng=rng)
    raise ConfigError(f"unknown model {name!r}; choose from {', '.join(MODEL_NAMES)}")


TOY_FFP = {"n_stages": 2, "stage_channels": 8}
TOY_SSP = {"depth": 2, "base_channels": 4}
