"""Minimal module system: parameter registration, naming and common layers."""

from collections import OrderedDict

import numpy as np

from . import autograd as ag
from .autograd import Parameter


class Module:
    """Base class. Attributes that are Parameters, Modules, or lists/dicts of
    Modules are discovered in assignment order and named by attribute path."""

    def named_parameters(self, prefix=""):
        seen = set()
        out = OrderedDict()
        self._collect(prefix, out, seen)
        return out

    def _collect(self, prefix, out, seen):
        for key, value in vars(self).items():
            if key.startswith("_"):
                continue
            path = f"{prefix}.{key}" if prefix else key
            _collect_value(value, path, out, seen)

    def parameters(self):
        return list(self.named_parameters().values())

    def assign_names(self, prefix=""):
        for name, p in self.named_parameters(prefix).items():
            p.name = name
        return self

    def num_parameters(self):
        return sum(p.size for p in self.parameters())

    def zero_grad(self):
        for p in self.parameters():
            p.zero_grad()

    def state_dict(self):
        return OrderedDict((n, p.data) for n, p in self.named_parameters().items())

    def load_state_dict(self, state, strict=True):
        params = self.named_parameters()
        missing = [n for n in params if n not in state]
        unexpected = [n for n in state if n not in params]
        if strict and (missing or unexpected):
            raise KeyError(f"state mismatch: missing={missing} unexpected={unexpected}")
        for name, p in params.items():
            if name not in state:
                continue
            value = np.asarray(state[name])
            if value.shape != p.shape:
                raise ValueError(
                    f"shape mismatch for {name}: checkpoint {value.shape} vs model {p.shape}"
                )
            p.data = value.astype(p.dtype, copy=True)

    def __call__(self, *args, **kwargs):
        return self.forward(*args, **kwargs)


def _collect_value(value, path, out, seen):
    if isinstance(value, Parameter):
        if id(value) not in seen:
            seen.add(id(value))
            out[path] = value
    elif isinstance(value, Module):
        if id(value) not in seen:
            seen.add(id(value))
            value._collect(path, out, seen)
    elif isinstance(value, (list, tuple)):
        for i, item in enumerate(value):
            _collect_value(item, f"{path}.{i}", out, seen)
    elif isinstance(value, dict):
        for k, item in value.items():
            _collect_value(item, f"{path}.{k}", out, seen)


def glorot(rng, fan_in, fan_out, dtype, shape=None):
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    shape = shape or (fan_in, fan_out)
    return rng.uniform(-limit, limit, size=shape).astype(dtype)


class Linear(Module):
    def __init__(self, rng, d_in, d_out, dtype=np.float64, bias=True):
        self.weight = Parameter(glorot(rng, d_in, d_out, dtype))
        self.bias = Parameter(np.zeros(d_out, dtype=dtype)) if bias else None

    def forward(self, x):
        y = ag.matmul(x, self.weight)
        if self.bias is not None:
            y = y + self.bias
        return y


class LayerNorm(Module):
    def __init__(self, dim, dtype=np.float64, eps=1e-5):
        self.gamma = Parameter(np.ones(dim, dtype=dtype))
        self.beta = Parameter(np.zeros(dim, dtype=dtype))
        self.eps = eps

    def forward(self, x):
        return ag.layer_norm(x, self.gamma, self.beta, self.eps)


class MLP(Module):
    """Two affine layers with a ReLU in between."""

    def __init__(self, rng, d_in, d_hidden, d_out, dtype=np.float64):
        self.fc1 = Linear(rng, d_in, d_hidden, dtype)
        self.fc2 = Linear(rng, d_hidden, d_out, dtype)

    def forward(self, x):
        return self.fc2(ag.relu(self.fc1(x)))
