"""FFP / SSP / MFM shapes, parameter counts and forward contracts."""
import numpy as np
import pytest

from mfmseg import tensor as T
from mfmseg.layers import Conv2d, Module, parameter_count
from mfmseg.models import (TOY_FFP, TOY_SSP, ConfigError, FfpConfig, FineFeaturePath,
                           MixedFeatureModel, SemanticSegmentationPath, SspConfig, build_model)
from mfmseg.tensor import ShapeError, Tensor


def conv_params(cin, cout, k):
    return cin * cout * k * k + cout


def bn_params(c):
    return 2 * c


def ffp_param_oracle(n_stages=4, ch=64, classes=4):
    total, c = 0, 3
    for _ in range(n_stages):
        total += conv_params(c, ch, 3) + bn_params(ch) + conv_params(ch, ch, 3) + bn_params(ch)
        c += ch
    return total + conv_params(c, classes, 1)


def ssp_param_oracle(widths, classes=4, bottleneck=True):
    total, c = 0, 3
    for w in widths:
        total += conv_params(c, w, 3) + conv_params(w, w, 3) + 2 * bn_params(w)
        c = w
    if bottleneck:
        total += conv_params(c, c, 3) + bn_params(c)
    for w in reversed(widths):
        total += conv_params(c + w, w, 3) + conv_params(w, w, 3) + 2 * bn_params(w)
        c = w
    return total + conv_params(c, classes, 1)


def x_of(n, h, w, seed=0):
    return Tensor(np.random.default_rng(seed).normal(size=(n, 3, h, w)))


def test_single_conv_count():
    assert parameter_count(Conv2d(3, 64, 3, np.random.default_rng(0))) == 1792


def test_ffp_paper_count_regression():
    model = build_model("ffp", 4)
    assert parameter_count(model) == ffp_param_oracle() == 378128


def test_ffp_stage_channels_small_input():
    model = build_model("ffp", 4)
    stages = []
    out = model(x_of(1, 8, 8), stage_outputs=stages)
    assert [s.shape[1] for s in stages] == [67, 131, 195, 259]
    assert out.shape == (1, 4, 8, 8)


@pytest.mark.parametrize("h,w", [(5, 7), (16, 16), (1, 3)])
def test_ffp_keeps_resolution(h, w):
    model = build_model("ffp", 3, ffp=TOY_FFP)
    assert model(x_of(2, h, w)).shape == (2, 3, h, w)


def test_ssp_light_in_band():
    model = build_model("ssp-light", 4)
    n = parameter_count(model)
    assert n == ssp_param_oracle([8, 16, 32, 64]) == 270876
    assert 250_000 <= n <= 350_000


def test_ssp_bottleneck_resolution():
    model = SemanticSegmentationPath(SspConfig(depth=4, base_channels=2))
    bott, skips = model.encode(x_of(1, 64, 64))
    assert bott.shape[2:] == (4, 4)
    assert [s.shape[2] for s in skips] == [64, 32, 16, 8]
    assert model(x_of(1, 64, 64)).shape == (1, 4, 64, 64)


def test_ssp_paper_resolution_schedule():
    model = SemanticSegmentationPath(SspConfig(depth=4, base_channels=1))
    bott, skips = model.encode(x_of(1, 256, 256))
    assert [s.shape[2] for s in skips] == [256, 128, 64, 32]
    assert bott.shape[2:] == (16, 16)


def test_ssp_indivisible_extent():
    with pytest.raises(ShapeError):
        build_model("ssp-light", 4, ssp=TOY_SSP)(x_of(1, 10, 12))


def test_ssp_without_skips_same_shape_different_values():
    cfg = SspConfig(**TOY_SSP)
    a = SemanticSegmentationPath(cfg, seed=3)
    b = SemanticSegmentationPath(cfg, seed=3, use_skips=False)
    x = x_of(1, 16, 16)
    ya, yb = a(x), b(x)
    assert ya.shape == yb.shape
    assert not np.allclose(ya.data, yb.data)


def test_mini_residual_differs_from_light():
    x = x_of(1, 16, 16)
    light = build_model("ssp-light", 4, seed=1, ssp=TOY_SSP)
    res = build_model("ssp-mini-residual", 4, seed=1, ssp=TOY_SSP)
    assert parameter_count(light) == parameter_count(res)
    assert not np.allclose(light(x).data, res(x).data)


def test_mfm_concat_and_head():
    model = build_model("mfm", 4, ffp=TOY_FFP, ssp=TOY_SSP)
    x = x_of(2, 16, 16)
    assert model.features(x).shape == (2, 8, 16, 16)
    out = model(x)
    assert out.shape == (2, 4, 16, 16)
    np.testing.assert_allclose(out.data.sum(axis=1), 1.0, atol=1e-6)
    assert np.all(out.data > 0)


def test_mfm_three_class():
    model = build_model("mfm", 3, ffp=TOY_FFP, ssp=TOY_SSP)
    assert model.features(x_of(1, 8, 8)).shape[1] == 6
    assert model(x_of(1, 8, 8)).shape == (1, 3, 8, 8)


def test_head_logit_argmax():
    logits = np.zeros((1, 4, 1, 1))
    logits[0, :, 0, 0] = (10, -10, -10, -10)
    p = T.softmax_channels(Tensor(logits)).data[0, :, 0, 0]
    assert p.argmax() == 0 and p[0] > 0.999


def test_mismatched_branches_rejected():
    with pytest.raises(ConfigError):
        MixedFeatureModel(FineFeaturePath(FfpConfig(out_classes=4, **TOY_FFP)),
                          SemanticSegmentationPath(SspConfig(out_classes=3, **TOY_SSP)))


def test_unknown_model_name():
    with pytest.raises(ConfigError):
        build_model("vgg16", 4)


class _Frozen(Module):
    """Stand-in branch that replays a fixed output."""

    def __init__(self, cfg, value):
        self.cfg = cfg
        self.value = value

    def forward(self, x):
        return Tensor(self.value)


def test_mfm_depends_only_on_branch_outputs():
    model = build_model("mfm", 4, ffp=TOY_FFP, ssp=TOY_SSP)
    model.eval()
    x = x_of(1, 8, 8)
    expected = model(x).data
    swapped = MixedFeatureModel(_Frozen(model.ffp.cfg, model.ffp(x).data),
                                _Frozen(model.ssp.cfg, model.ssp(x).data))
    swapped.ffp_bn, swapped.ssp_bn, swapped.head = model.ffp_bn, model.ssp_bn, model.head
    swapped.eval()
    np.testing.assert_array_equal(swapped(x).data, expected)


def test_same_seed_same_weights():
    a = build_model("mfm", 4, seed=5, ffp=TOY_FFP, ssp=TOY_SSP).state_dict()
    b = build_model("mfm", 4, seed=5, ffp=TOY_FFP, ssp=TOY_SSP).state_dict()
    assert a.keys() == b.keys()
    assert all(np.array_equal(a[k], b[k]) for k in a)


def test_conv_init_scale():
    conv = Conv2d(64, 64, 3, np.random.default_rng(0))
    std = conv.kernel.data.std()
    assert abs(std - np.sqrt(2 / (64 * 9))) < 0.01
    assert np.all(conv.bias.data == 0)
