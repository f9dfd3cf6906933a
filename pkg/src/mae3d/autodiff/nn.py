"""Parameter containers and the small set of layers the models are built from."""
from __future__ import annotations

import math
from typing import Dict, Iterator, Tuple

import numpy as np

from . import tensor as T
from .tensor import Tensor

DEFAULT_DTYPE = np.float32


class Parameter(Tensor):
    __slots__ = ()

    def __init__(self, data, name=None):
        super().__init__(np.asarray(data), requires_grad=True, name=name)


class Module:
    """Base class. Parameters and sub-modules are discovered from attributes,
    in assignment order, so parameter names are stable across runs."""

    training = True

    def __call__(self, *args, **kwargs):
        return self.forward(*args, **kwargs)

    def _children(self):
        for name, val in vars(self).items():
            if isinstance(val, (Parameter, Module)):
                yield name, val
            elif isinstance(val, (list, tuple)):
                for i, item in enumerate(val):
                    if isinstance(item, (Parameter, Module)):
                        yield f"{name}.{i}", item

    def named_parameters(self, prefix="") -> Iterator[Tuple[str, Parameter]]:
        for name, val in self._children():
            if isinstance(val, Parameter):
                yield prefix + name, val
            else:
                yield from val.named_parameters(prefix + name + ".")

    def parameters(self):
        return [p for _, p in self.named_parameters()]

    def modules(self):
        yield self
        for _, val in self._children():
            if isinstance(val, Module):
                yield from val.modules()

    def train(self, mode=True):
        for m in self.modules():
            m.training = mode
        return self

    def eval(self):
        return self.train(False)

    def zero_grad(self):
        for p in self.parameters():
            p.grad = None

    def astype(self, dtype):
        for p in self.parameters():
            p.data = p.data.astype(dtype)
            p.grad = None
        return self

    def num_parameters(self):
        return sum(p.size for p in self.parameters())

    def state_dict(self) -> Dict[str, np.ndarray]:
        return {name: p.data.copy() for name, p in self.named_parameters()}

    def load_state_dict(self, state, strict=True):
        """Copy arrays into parameters of the same name. Returns the names loaded."""
        params = dict(self.named_parameters())
        if strict:
            missing = sorted(set(params) - set(state))
            unexpected = sorted(set(state) - set(params))
            if missing or unexpected:
                raise KeyError(f"state mismatch: missing {missing}, unexpected {unexpected}")
        loaded = []
        for name, arr in state.items():
            if name not in params:
                continue
            p = params[name]
            if tuple(arr.shape) != p.shape:
                raise ValueError(f"shape mismatch for parameter {name!r}: "
                                 f"checkpoint {tuple(arr.shape)} vs model {p.shape}")
            p.data = np.array(arr, dtype=p.dtype)
            loaded.append(name)
        return loaded


class Linear(Module):
    def __init__(self, n_in, n_out, rng, bias=True, dtype=DEFAULT_DTYPE):
        bound = 1.0 / math.sqrt(n_in)
        self.weight = Parameter(rng.uniform(-bound, bound, size=(n_in, n_out)).astype(dtype))
        self.bias = Parameter(rng.uniform(-bound, bound, size=n_out).astype(dtype)) if bias else None

    @property
    def n_in(self):
        return self.weight.shape[0]

    @property
    def n_out(self):
        return self.weight.shape[1]

    def forward(self, x):
        return T.linear(x, self.weight, self.bias)


class LayerNorm(Module):
    def __init__(self, dim, eps=1e-5, dtype=DEFAULT_DTYPE):
        self.weight = Parameter(np.ones(dim, dtype=dtype))
        self.bias = Parameter(np.zeros(dim, dtype=dtype))
        self.eps = eps

    def forward(self, x):
        return T.layer_norm(x, self.weight, self.bias, self.eps)


class Dropout(Module):
    def __init__(self, p, rng):
        self.p = p
        self.rng = rng

    def forward(self, x):
        return T.dropout(x, self.p, self.rng, self.training)


class ReLU(Module):
    def forward(self, x):
        return T.relu(x)


class GELU(Module):
    def forward(self, x):
        return T.gelu(x)


class Sequential(Module):
    def __init__(self, *layers):
        self.layers = list(layers)

    def forward(self, x):
        for layer in self.layers:
            x = layer(x)
        return x
