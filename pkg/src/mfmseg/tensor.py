"""Dense NCHW tensors with reverse-mode autodiff.

Every primitive computes its forward result eagerly with numpy and records a
closure that maps the upstream gradient to gradients for its inputs.  Calling
``backward()`` on a scalar walks the recorded trace in reverse topological
order and accumulates into ``.grad`` of every tensor that requires it.

Production code runs in float32; ``precision(np.float64)`` switches the
default dtype for finite-difference checking.
"""
from __future__ import annotations

import contextlib

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view


class ShapeError(ValueError):
    pass


class NumericError(ArithmeticError):
    pass


class UsageError(RuntimeError):
    pass


_default_dtype = np.float32
_pattern_log = None  # list collecting ReLU masks / pool argmaxes while recording


@contextlib.contextmanager
def record_activation_pattern():
    """Collect every ReLU sign mask and max-pool argmax computed inside the block.

    Two forward passes with equal patterns lie on the same linear piece of all
    kinks, which is what finite-difference checks need.
    """
    global _pattern_log
    old = _pattern_log
    _pattern_log = log = []
    try:
        yield log
    finally:
        _pattern_log = old


def get_default_dtype():
    return _default_dtype


@contextlib.contextmanager
def precision(dtype):
    """Temporarily change the dtype new tensors are created with."""
    global _default_dtype
    old = _default_dtype
    _default_dtype = np.dtype(dtype).type
    try:
        yield
    finally:
        _default_dtype = old


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "name")

    def __init__(self, data, requires_grad=False, name=None, dtype=None):
        # asarray keeps 0-d scalars 0-d (ascontiguousarray would promote to 1-d)
        arr = np.asarray(data, dtype=dtype or _default_dtype)
        self.data = arr if arr.flags.c_contiguous else arr.copy()
        self.grad = None
        self.requires_grad = requires_grad
        self._parents = ()
        self._backward = None
        self.name = name

    @property
    def shape(self):
        return self.data.shape

    dims = shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    def numpy(self):
        return self.data

    def zero_grad(self):
        self.grad = None

    def __repr__(self):
        tag = f" {self.name!r}" if self.name else ""
        return f"Tensor{tag}(shape={self.shape}, dtype={self.data.dtype}, requires_grad={self.requires_grad})"

    def backward(self):
        """Accumulate d(self)/d(leaf) into every reachable leaf's ``grad``.

        Intermediate gradients live only for the duration of the call, so the
        trace can be replayed; leaf gradients accumulate across calls until
        ``zero_grad``.
        """
        if self.data.size != 1:
            raise UsageError(f"backward() needs a scalar root, got shape {self.shape}")
        order = _topo_order(self)
        grads = {id(self): np.ones_like(self.data)}
        for node in reversed(order):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node._backward is None:
                if node.requires_grad:
                    node.grad = g.copy() if node.grad is None else node.grad + g
                continue
            for parent, pg in zip(node._parents, node._backward(g)):
                if pg is None or not parent.requires_grad:
                    continue
                key = id(parent)
                grads[key] = pg if key not in grads else grads[key] + pg

    def __add__(self, other):
        return add(self, other)

    def __mul__(self, other):
        return mul(self, other)

    def sum(self):
        return tsum(self)


def _topo_order(root):
    order, seen = [], set()
    stack = [(root, False)]
    while stack:
        node, done = stack.pop()
        if done:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))
    return order


def as_tensor(x):
    return x if isinstance(x, Tensor) else Tensor(x)


def make_node(data, parents, backward):
    """Wrap a forward result, attaching ``backward`` when any parent needs grads."""
    out = Tensor(data, dtype=data.dtype)
    if any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward
    return out


def _check_nchw(x, what):
    if x.ndim != 4:
        raise ShapeError(f"{what} expects an NCHW tensor, got shape {x.shape}")


# --- elementwise & reductions -------------------------------------------------

def add(a, b):
    a, b = as_tensor(a), as_tensor(b)
    if a.shape != b.shape:
        raise ShapeError(f"add: shapes differ {a.shape} vs {b.shape}")
    return make_node(a.data + b.data, (a, b), lambda g: (g, g))


def mul(a, b):
    """Elementwise product of equal-shape tensors (or tensor times array)."""
    a, b = as_tensor(a), as_tensor(b)
    if a.shape != b.shape:
        raise ShapeError(f"mul: shapes differ {a.shape} vs {b.shape}")
    return make_node(a.data * b.data, (a, b), lambda g: (g * b.data, g * a.data))


def tsum(x):
    x = as_tensor(x)
    return make_node(np.asarray(x.data.sum(), dtype=x.data.dtype), (x,),
                     lambda g: (np.broadcast_to(g, x.shape).copy(),))


# --- convolution ----------------------------------------------------------------

def conv2d(x, kernel, bias=None, stride=1):
    """Cross-correlation with zero padding that preserves H, W at stride 1.

    x: (N, C, H, W); kernel: (O, C, kh, kw) with odd kh, kw; bias: (O,).
    """
    _check_nchw(x, "conv2d")
    n, c, h, w = x.shape
    o, ci, kh, kw = kernel.shape
    if ci != c:
        raise ShapeError(f"conv2d: input has {c} channels, kernel expects {ci}")
    if kh % 2 == 0 or kw % 2 == 0:
        raise ShapeError(f"conv2d: same-zero padding needs odd kernel, got {kh}x{kw}")
    if bias is not None and bias.shape != (o,):
        raise ShapeError(f"conv2d: bias shape {bias.shape} != ({o},)")
    if stride < 1:
        raise ValueError("stride must be positive")
    if not np.isfinite(x.data).all():
        raise NumericError("conv2d: non-finite input")

    ph, pw = kh // 2, kw // 2
    xp = np.pad(x.data, ((0, 0), (0, 0), (ph, ph), (pw, pw)))
    cols = sliding_window_view(xp, (kh, kw), axis=(2, 3))[:, :, ::stride, ::stride]
    ho, wo = cols.shape[2], cols.shape[3]
    # (N, Ho, Wo, O) -> NCHW
    out = np.tensordot(cols, kernel.data, axes=([1, 4, 5], [1, 2, 3])).transpose(0, 3, 1, 2)
    if bias is not None:
        out = out + bias.data[None, :, None, None]
    out = np.ascontiguousarray(out)

    parents = (x, kernel) if bias is None else (x, kernel, bias)

    def backward(g):
        gk = np.tensordot(g, cols, axes=([0, 2, 3], [0, 2, 3])) if kernel.requires_grad else None
        gx = None
        if x.requires_grad:
            # (N, Ho, Wo, C, kh, kw)
            gcols = np.tensordot(g, kernel.data, axes=([1], [0]))
            gxp = np.zeros_like(xp)
            hs, ws = (ho - 1) * stride + 1, (wo - 1) * stride + 1
            for i in range(kh):
                for j in range(kw):
                    gxp[:, :, i:i + hs:stride, j:j + ws:stride] += gcols[..., i, j].transpose(0, 3, 1, 2)
            gx = gxp[:, :, ph:ph + h, pw:pw + w]
        grads = (gx, gk)
        if bias is not None:
            grads += (g.sum(axis=(0, 2, 3)),)
        return grads

    return make_node(out, parents, backward)


# --- batch normalization ----------------------------------------------------------

def batchnorm(x, gamma, beta, running_mean, running_var, training=True,
              momentum=0.9, eps=1e-5):
    """Per-channel batch normalization.

    In training mode statistics come from the batch (over N, H, W) and the
    running arrays are updated in place:
    ``running = momentum * running + (1 - momentum) * batch``.
    Inference mode normalizes with the running statistics.
    """
    _check_nchw(x, "batchnorm")
    c = x.shape[1]
    if gamma.shape != (c,) or beta.shape != (c,):
        raise ShapeError(f"batchnorm: {c} channels but gamma/beta have {gamma.shape}/{beta.shape}")
    if eps <= 0:
        raise ValueError("eps must be positive")
    bshape = (1, c, 1, 1)

    if training:
        mean = x.data.mean(axis=(0, 2, 3))
        var = x.data.var(axis=(0, 2, 3))
        running_mean *= momentum
        running_mean += (1 - momentum) * mean
        running_var *= momentum
        running_var += (1 - momentum) * var
    else:
        mean, var = running_mean, running_var

    inv_std = 1.0 / np.sqrt(var + eps)
    xhat = (x.data - mean.reshape(bshape)) * inv_std.reshape(bshape)
    out = (gamma.data.reshape(bshape) * xhat + beta.data.reshape(bshape)).astype(x.data.dtype)
    m = x.data.size // c

    def backward(g):
        ggamma = (g * xhat).sum(axis=(0, 2, 3))
        gbeta = g.sum(axis=(0, 2, 3))
        gxhat = g * gamma.data.reshape(bshape)
        if training:
            gx = (inv_std.reshape(bshape) / m) * (
                m * gxhat
                - gxhat.sum(axis=(0, 2, 3)).reshape(bshape)
                - xhat * (gxhat * xhat).sum(axis=(0, 2, 3)).reshape(bshape))
        else:
            gx = gxhat * inv_std.reshape(bshape)
        return gx.astype(x.data.dtype), ggamma, gbeta

    return make_node(out, (x, gamma, beta), backward)


# --- activations, resampling, concat ------------------------------------------------

def _relu_grad(x, g):
    return g * (x > 0)


def relu(x):
    x = as_tensor(x)
    if _pattern_log is not None:
        _pattern_log.append(x.data > 0)
    return make_node(np.maximum(x.data, 0), (x,), lambda g: (_relu_grad(x.data, g),))


def maxpool2(x):
    """2x2 max pooling, stride 2. Ties send the gradient to the row-major first cell."""
    _check_nchw(x, "maxpool2")
    n, c, h, w = x.shape
    if h % 2 or w % 2:
        raise ShapeError(f"maxpool2: spatial extent must be even, got {h}x{w}")
    win = x.data.reshape(n, c, h // 2, 2, w // 2, 2).transpose(0, 1, 2, 4, 3, 5).reshape(n, c, h // 2, w // 2, 4)
    arg = win.argmax(axis=-1)
    if _pattern_log is not None:
        _pattern_log.append(arg)
    out = np.take_along_axis(win, arg[..., None], axis=-1)[..., 0]

    def backward(g):
        gwin = np.zeros(win.shape, dtype=g.dtype)
        np.put_along_axis(gwin, arg[..., None], g[..., None], axis=-1)
        gx = gwin.reshape(n, c, h // 2, w // 2, 2, 2).transpose(0, 1, 2, 4, 3, 5).reshape(n, c, h, w)
        return (gx,)

    return make_node(np.ascontiguousarray(out), (x,), backward)


def upsample2(x):
    """Nearest-neighbour x2 upsampling; the backward pass sums each 2x2 block."""
    _check_nchw(x, "upsample2")
    n, c, h, w = x.shape
    out = np.repeat(np.repeat(x.data, 2, axis=2), 2, axis=3)

    def backward(g):
        return (g.reshape(n, c, h, 2, w, 2).sum(axis=(3, 5)),)

    return make_node(out, (x,), backward)


def concat_channels(a, b):
    _check_nchw(a, "concat_channels")
    _check_nchw(b, "concat_channels")
    if a.shape[0] != b.shape[0] or a.shape[2:] != b.shape[2:]:
        raise ShapeError(f"concat_channels: N/H/W mismatch {a.shape} vs {b.shape}")
    ca = a.shape[1]
    out = np.concatenate([a.data, b.data], axis=1)
    return make_node(out, (a, b), lambda g: (g[:, :ca], g[:, ca:]))


def softmax_channels(x):
    """Softmax over axis 1, stabilized by subtracting the per-pixel max."""
    x = as_tensor(x)
    if x.ndim < 2 or x.shape[1] < 2:
        raise ShapeError(f"softmax_channels needs at least 2 channels, got shape {x.shape}")
    z = x.data - x.data.max(axis=1, keepdims=True)
    e = np.exp(z)
    y = e / e.sum(axis=1, keepdims=True)

    def backward(g):
        return (y * (g - (g * y).sum(axis=1, keepdims=True)),)

    return make_node(y, (x,), backward)


# --- finite differences ----------------------------------------------------------------

def numeric_grad(fn, t, h=1e-3, index=None):
    """Central finite-difference gradient of scalar ``fn()`` w.r.t. ``t.data``.

    ``index`` optionally restricts the probe to a subset of flat positions;
    other entries of the result are left at zero.
    """
    flat = t.data.reshape(-1)
    out = np.zeros(flat.shape, dtype=np.float64)
    positions = range(flat.size) if index is None else index
    for i in positions:
        orig = flat[i]
        flat[i] = orig + h
        fp = float(fn().data)
        flat[i] = orig - h
        fm = float(fn().data)
        flat[i] = orig
        out[i] = (fp - fm) / (2 * h)
    return out.reshape(t.shape)


def relative_error(analytic, numeric, index=None):
    """max |a - n| / (|n| + 1e-8) over all (or the indexed) entries."""
    a = np.asarray(analytic, dtype=np.float64).reshape(-1)
    n = np.asarray(numeric, dtype=np.float64).reshape(-1)
    if index is not None:
        a, n = a[list(index)], n[list(index)]
    if a.size == 0:
        return 0.0
    return float(np.max(np.abs(a - n) / (np.abs(n) + 1e-8)))
