"""Parameter containers on top of the tensor primitives."""
from __future__ import annotations

import numpy as np

from . import tensor as T
from .tensor import Tensor


class ArchitectureMismatch(ValueError):
    """Raised when a state dict does not fit a module; lists every differing path."""

    def __init__(self, missing=(), unexpected=(), shape_diffs=()):
        self.missing = sorted(missing)
        self.unexpected = sorted(unexpected)
        self.shape_diffs = sorted(shape_diffs)
        lines = ["state dict does not match the model architecture"]
        lines += [f"  missing: {p}" for p in self.missing]
        lines += [f"  unexpected: {p}" for p in self.unexpected]
        lines += [f"  shape: {p}: {a} vs {b}" for p, a, b in self.shape_diffs]
        super().__init__("\n".join(lines))


class Module:
    """Minimal module tree: attributes holding Tensors, Modules or lists of Modules."""

    training = True

    def __call__(self, *args, **kwargs):
        return self.forward(*args, **kwargs)

    def _children(self):
        for key, value in vars(self).items():
            if isinstance(value, Module):
                yield key, value
            elif isinstance(value, (list, tuple)):
                for i, item in enumerate(value):
                    if isinstance(item, Module):
                        yield f"{key}.{i}", item

    def named_parameters(self, prefix=""):
        for key, value in vars(self).items():
            if isinstance(value, Tensor) and value.requires_grad:
                yield prefix + key, value
        for key, child in self._children():
            yield from child.named_parameters(f"{prefix}{key}.")

    def named_buffers(self, prefix=""):
        for key, value in getattr(self, "_buffers", {}).items():
            yield prefix + key, value
        for key, child in self._children():
            yield from child.named_buffers(f"{prefix}{key}.")

    def parameters(self):
        return [p for _, p in self.named_parameters()]

    def zero_grad(self):
        for p in self.parameters():
            p.zero_grad()

    def train(self, mode=True):
        self.training = mode
        for _, child in self._children():
            child.train(mode)
        return self

    def eval(self):
        return self.train(False)

    def state_dict(self):
        """Flat ``name -> ndarray`` copy of parameters and buffers."""
        out = {name: p.data.copy() for name, p in self.named_parameters()}
        out.update({name: b.copy() for name, b in self.named_buffers()})
        return out

    def load_state_dict(self, state):
        targets = {name: p.data for name, p in self.named_parameters()}
        targets.update(dict(self.named_buffers()))
        missing = set(targets) - set(state)
        unexpected = set(state) - set(targets)
        shape_diffs = [(k, tuple(state[k].shape), targets[k].shape)
                       for k in set(targets) & set(state) if tuple(state[k].shape) != targets[k].shape]
        if missing or unexpected or shape_diffs:
            raise ArchitectureMismatch(missing, unexpected, shape_diffs)
        for name, arr in targets.items():
            arr[...] = state[name]


def parameter_count(model):
    """Number of learnable scalars (kernels, biases, BN gamma/beta)."""
    return int(sum(p.size for p in model.parameters()))


class Conv2d(Module):
    def __init__(self, in_ch, out_ch, k=3, rng=None, stride=1):
        if out_ch < 1:
            raise ValueError("out_ch must be >= 1")
        rng = rng if rng is not None else np.random.default_rng(0)
        fan_in = in_ch * k * k
        dtype = T.get_default_dtype()
        w = rng.normal(0.0, np.sqrt(2.0 / fan_in), size=(out_ch, in_ch, k, k))
        self.kernel = Tensor(w.astype(dtype), requires_grad=True)
        self.bias = Tensor(np.zeros(out_ch, dtype=dtype), requires_grad=True)
        self.stride = stride

    def forward(self, x):
        return T.conv2d(x, self.kernel, self.bias, self.stride)


class BatchNorm2d(Module):
    def __init__(self, channels, eps=1e-5, momentum=0.9):
        dtype = T.get_default_dtype()
        self.gamma = Tensor(np.ones(channels, dtype=dtype), requires_grad=True)
        self.beta = Tensor(np.zeros(channels, dtype=dtype), requires_grad=True)
        self._buffers = {
            "running_mean": np.zeros(channels, dtype=dtype),
            "running_var": np.ones(channels, dtype=dtype),
        }
        self.eps = eps
        self.momentum = momentum

    def forward(self, x):
        return T.batchnorm(x, self.gamma, self.beta, self._buffers["running_mean"],
                           self._buffers["running_var"], training=self.training,
                           momentum=self.momentum, eps=self.eps)


class ConvBNReLU(Module):
    def __init__(self, in_ch, out_ch, rng, k=3):
        self.conv = Conv2d(in_ch, out_ch, k, rng)
        self.bn = BatchNorm2d(out_ch)

    def forward(self, x):
        return T.relu(self.bn(self.conv(x)))
