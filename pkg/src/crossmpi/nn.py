"""Small layer library on top of the autodiff engine.

Modules register parameters and children automatically on attribute
assignment; ``parameters()`` returns a flat dict keyed by stable dotted
names, which is also the naming scheme used inside checkpoints.
"""

from __future__ import annotations

import numpy as np

from . import autodiff as ad
from .autodiff import Parameter

__all__ = ["Module", "ModuleList", "Conv2d", "ResBlock", "ResASPP"]

LEAKY_SLOPE = 0.1


class Module:
    def __init__(self):
        object.__setattr__(self, "_params", {})
        object.__setattr__(self, "_children", {})

    def __setattr__(self, name, value):
        if isinstance(value, Parameter):
            self._params[name] = value
        elif isinstance(value, Module):
            self._children[name] = value
        object.__setattr__(self, name, value)

    def parameters(self, prefix=""):
        out = {}
        for name, p in self._params.items():
            out[prefix + name] = p
        for name, child in self._children.items():
            out.update(child.parameters(prefix + name + "."))
        return out

    def zero_grad(self):
        for p in self.parameters().values():
            p.grad = None

    def __call__(self, *args, **kwargs):
        return self.forward(*args, **kwargs)


class ModuleList(Module):
    def __init__(self, modules=()):
        super().__init__()
        self._list = []
        for m in modules:
            self.append(m)

    def append(self, module):
        self._children[str(len(self._list))] = module
        self._list.append(module)

    def __iter__(self):
        return iter(self._list)

    def __len__(self):
        return len(self._list)

    def __getitem__(self, i):
        return self._list[i]


class Conv2d(Module):
    """3x3 (or kxk) convolution, stride 1, 'same' padding, optional dilation.

    Weights are fan-in scaled for the leaky nonlinearity; ``zero_init``
    starts the layer as an exact zero map (used for the final fusion
    projection so the network begins as an identity on the upsampled input).
    """

    def __init__(self, c_in, c_out, kernel=3, dilation=1, rng=None, dtype=np.float32,
                 zero_init=False, bias=True):
        super().__init__()
        self.dilation = dilation
        if zero_init:
            w = np.zeros((c_out, c_in, kernel, kernel), dtype=dtype)
        else:
            gain = np.sqrt(2.0 / (1.0 + LEAKY_SLOPE ** 2))
            std = gain / np.sqrt(c_in * kernel * kernel)
            w = (rng.standard_normal((c_out, c_in, kernel, kernel)) * std).astype(dtype)
        self.weight = Parameter(w)
        if bias:
            self.bias = Parameter(np.zeros(c_out, dtype=dtype))
        else:
            self.bias = None

    def forward(self, x):
        return ad.conv2d(x, self.weight, self.bias, dilation=self.dilation)


class ResBlock(Module):
    """conv -> leaky relu -> conv with an identity skip."""

    def __init__(self, channels, rng, dtype=np.float32):
        super().__init__()
        self.conv1 = Conv2d(channels, channels, rng=rng, dtype=dtype)
        self.conv2 = Conv2d(channels, channels, rng=rng, dtype=dtype)

    def forward(self, x):
        return x + self.conv2(ad.leaky_relu(self.conv1(x), LEAKY_SLOPE))


class ResASPP(Module):
    """Parallel dilated convolutions fused by a 1x1 conv, with an identity skip."""

    def __init__(self, channels, rng, dtype=np.float32, dilations=(1, 4, 8)):
        super().__init__()
        self.branches = ModuleList(
            Conv2d(channels, channels, dilation=d, rng=rng, dtype=dtype) for d in dilations
        )
        self.fuse = Conv2d(len(dilations) * channels, channels, kernel=1, rng=rng, dtype=dtype)

    def forward(self, x):
        feats = [ad.leaky_relu(branch(x), LEAKY_SLOPE) for branch in self.branches]
        return x + self.fuse(ad.concat(feats, axis=1))
