"""Parameter containers and the two parametrised layers the model needs."""
import math

import numpy as np

from . import tensor as T
from .tensor import Tensor


def parameter(data, name=None):
    return Tensor(data, requires_grad=True, dtype=np.asarray(data).dtype, name=name)


class Module:
    """Walks attributes in definition order to enumerate parameters."""

    def named_parameters(self, prefix=""):
        out = []
        for key, value in vars(self).items():
            if key.startswith("_"):
                continue
            path = f"{prefix}{key}"
            if isinstance(value, Tensor) and value.requires_grad:
                out.append((path, value))
            elif isinstance(value, Module):
                out.extend(value.named_parameters(path + "."))
            elif isinstance(value, (list, tuple)):
                for i, item in enumerate(value):
                    if isinstance(item, Module):
                        out.extend(item.named_parameters(f"{path}.{i}."))
        return out

    def parameters(self):
        return [p for _, p in self.named_parameters()]

    def num_parameters(self):
        return int(np.sum([p.size for p in self.parameters()], dtype=np.int64))

    def zero_grad(self):
        for p in self.parameters():
            p.grad = None

    def astype(self, dtype):
        for p in self.parameters():
            p.data = p.data.astype(dtype)
            p.grad = None
        return self

    def __call__(self, *args, **kwargs):
        return self.forward(*args, **kwargs)


def he_normal(rng, shape, fan_in, dtype, gain=1.0):
    std = gain * math.sqrt(2.0 / fan_in)
    return (rng.standard_normal(shape) * std).astype(dtype)


class Conv2d(Module):
    """Square odd-kernel convolution with 'same' padding by default.

    ``init`` is ``"he"`` (fan-in scaled normal), ``"normal"`` (fixed ``std``),
    ``"zeros"`` or ``"identity"`` (1x1 only).
    """

    def __init__(self, cin, cout, k, rng, stride=1, padding=None, dtype=np.float32,
                 init="he", std=0.01, gain=1.0, bias_value=0.0):
        self.stride = stride
        self.padding = k // 2 if padding is None else padding
        shape = (cout, cin, k, k)
        if init == "he":
            w = he_normal(rng, shape, cin * k * k, dtype, gain)
        elif init == "normal":
            w = (rng.standard_normal(shape) * std).astype(dtype)
        elif init == "zeros":
            w = np.zeros(shape, dtype=dtype)
        elif init == "identity":
            if k != 1 or cin != cout:
                raise ValueError("identity init needs a 1x1 kernel with cin == cout")
            w = np.eye(cout, dtype=dtype).reshape(shape)
        else:
            raise ValueError(f"unknown init {init!r}")
        self.weight = parameter(w)
        self.bias = parameter(np.full(cout, bias_value, dtype=dtype))

    def forward(self, x):
        return T.conv2d(x, self.weight, self.bias, self.stride, self.padding)


class Linear(Module):
    def __init__(self, cin, cout, rng, dtype=np.float32, std=None):
        std = math.sqrt(1.0 / cin) if std is None else std
        self.weight = parameter((rng.standard_normal((cout, cin)) * std).astype(dtype))
        self.bias = parameter(np.zeros(cout, dtype=dtype))

    def forward(self, x):
        return T.linear(x, self.weight, self.bias)
