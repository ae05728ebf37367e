"""Module containers and the basic layers the EDVR graph is built from."""
import math

import numpy as np

from . import tensor as T
from .tensor import Parameter


class Module:
    """Minimal parameter container.

    Parameters, sub-modules and lists of sub-modules assigned as attributes are
    discovered in assignment order, which fixes the parameter naming used by
    checkpoints.
    """

    def named_parameters(self, prefix=""):
        for key, value in vars(self).items():
            name = f"{prefix}{key}"
            if isinstance(value, Parameter):
                yield name, value
            elif isinstance(value, Module):
                yield from value.named_parameters(name + ".")
            elif isinstance(value, (list, tuple)):
                for i, item in enumerate(value):
                    if isinstance(item, Module):
                        yield from item.named_parameters(f"{name}.{i}.")

    def parameters(self):
        return [p for _, p in self.named_parameters()]

    def zero_grad(self):
        for p in self.parameters():
            p.grad = None

    def to(self, dtype):
        for p in self.parameters():
            p.data = p.data.astype(dtype)
            p.grad = None
        return self

    def state_dict(self):
        return {name: p.data.copy() for name, p in self.named_parameters()}

    def load_state_dict(self, state):
        params = dict(self.named_parameters())
        missing = sorted(set(params) - set(state))
        extra = sorted(set(state) - set(params))
        if missing or extra:
            raise KeyError(f"parameter names differ: missing {missing}, unexpected {extra}")
        for name, p in params.items():
            value = np.asarray(state[name])
            if value.shape != p.shape:
                raise T.ShapeError(f"parameter {name}: checkpoint shape {value.shape} != model shape {p.shape}")
            p.data = value.astype(p.dtype).copy()

    def num_params(self):
        return sum(p.data.size for p in self.parameters())

    def __call__(self, *args, **kwargs):
        return self.forward(*args, **kwargs)


def kaiming_normal(rng, shape, slope=0.1, scale=1.0):
    fan_in = int(np.prod(shape[1:]))
    gain = math.sqrt(2.0 / (1.0 + slope * slope))
    return (rng.standard_normal(shape) * (gain / math.sqrt(fan_in)) * scale).astype(np.float32)


class Conv2d(Module):
    """Square-kernel convolution with "same" padding for stride 1.

    ``init="zeros"`` is used for offset/mask heads; ``scale`` shrinks the
    Kaiming draw (residual branches).
    """

    def __init__(self, rng, in_ch, out_ch, kernel=3, stride=1, bias=True, init="kaiming", scale=1.0):
        shape = (out_ch, in_ch, kernel, kernel)
        if init == "zeros":
            w = np.zeros(shape, np.float32)
        else:
            w = kaiming_normal(rng, shape, scale=scale)
        self.weight = Parameter(w)
        self.bias = Parameter(np.zeros(out_ch, np.float32)) if bias else None
        self.stride = stride
        self.padding = kernel // 2

    def forward(self, x):
        return T.conv2d(x, self.weight, self.bias, self.stride, self.padding)


def lrelu(x):
    return T.leaky_relu(x, 0.1)


class ResidualBlock(Module):
    """conv3x3 -> leaky ReLU -> conv3x3, plus identity skip. No normalisation."""

    def __init__(self, rng, ch):
        self.conv1 = Conv2d(rng, ch, ch, 3, scale=0.1)
        self.conv2 = Conv2d(rng, ch, ch, 3, scale=0.1)

    def forward(self, x):
        return x + self.conv2(lrelu(self.conv1(x)))


def run_blocks(blocks, x):
    for b in blocks:
        x = b(x)
    return x


def name_parameters(module):
    """Stamp dotted attribute paths onto each Parameter's ``name``."""
    for name, p in module.named_parameters():
        p.name = name
    return module
