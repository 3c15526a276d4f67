"""Finite-difference suite: individual checks and the corrupted-backward fixture."""
import numpy as np

from mfmseg import gradcheck as gc
from mfmseg import tensor as T
from mfmseg.tensor import Tensor


def test_primitive_checks_pass(rng):
    with T.precision(np.float64):
        results = gc.primitive_checks(rng)
    names = {r.name for r in results}
    assert {"conv2d", "batchnorm_train", "batchnorm_inference", "relu", "maxpool2",
            "upsample2", "concat_channels", "softmax_channels"} <= names
    for r in results:
        assert r.passed, r
        assert r.max_rel_error <= 1e-4


def test_loss_checks_pass(rng):
    with T.precision(np.float64):
        results = gc.loss_checks(rng)
    assert len(results) == 7
    assert all(r.passed for r in results), results


def test_numeric_grad_helper_matches_closed_form():
    with T.precision(np.float64):
        x = Tensor(np.array([0.3, -1.2, 2.0]), requires_grad=True)
        num = T.numeric_grad(lambda: T.mul(x, x).sum(), x, h=1e-3)
    np.testing.assert_allclose(num, 2 * x.data, rtol=1e-9)


def test_corrupted_relu_backward_is_caught(monkeypatch, rng):
    monkeypatch.setattr(T, "_relu_grad", lambda x, g: 1.1 * g * (x > 0))
    with T.precision(np.float64):
        results = {r.name: r for r in gc.primitive_checks(rng)}
    assert not results["relu"].passed
    assert results["conv2d"].passed


def test_kinked_probes_are_skipped():
    # x sits exactly on the ReLU kink: both stencil points change the pattern
    with T.precision(np.float64):
        x = Tensor(np.array([0.0, 1.0]), requires_grad=True)
        r = gc.check("kink", lambda: T.relu(x).sum(), [x])
    assert r.skipped == 1 and r.probed == 1
    assert not r.passed  # default min_probed demands every probe be usable


def test_report_lists_errors():
    res = [gc.CheckResult("a", 1e-6, 1e-4, 5), gc.CheckResult("b", 1e-2, 1e-4, 5)]
    text = gc.format_report(res)
    assert "1.000e-06" in text and "1.000e-02" in text
    assert "FAIL" in text.splitlines()[2]
