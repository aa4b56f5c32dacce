"""Parameter containers and the layers the model is assembled from."""

import contextlib
import math
from collections import OrderedDict

import numpy as np

from . import tensor as T
from .tensor import Tensor


class Parameter(Tensor):
    __slots__ = ()

    def __init__(self, data):
        super().__init__(data, requires_grad=True)


def fan_in_uniform(rng, shape, fan_in):
    """Uniform init with variance 1/fan_in (bound sqrt(3/fan_in))."""
    bound = math.sqrt(3.0 / fan_in)
    return rng.uniform(-bound, bound, size=shape)


class Module:
    """Tree of parameters, numpy buffers and child modules.

    Attribute assignment registers children automatically, so dotted
    parameter names (``stages.0.conv.weight``) are stable across runs and
    are what checkpoints key on.
    """

    training = True

    def __setattr__(self, name, value):
        if isinstance(value, Parameter):
            self.__dict__.setdefault("_params", OrderedDict())[name] = value
        elif isinstance(value, Module):
            self.__dict__.setdefault("_children", OrderedDict())[name] = value
        object.__setattr__(self, name, value)

    def register_buffer(self, name, array):
        self.__dict__.setdefault("_buffers", OrderedDict())[name] = array
        object.__setattr__(self, name, array)

    def named_parameters(self, prefix=""):
        seen = set()
        for name, p in self._named(prefix, "_params"):
            if id(p) not in seen:
                seen.add(id(p))
                yield name, p

    def parameters(self):
        return [p for _, p in self.named_parameters()]

    def named_buffers(self, prefix=""):
        yield from self._named(prefix, "_buffers")

    def _named(self, prefix, kind):
        for name, item in self.__dict__.get(kind, {}).items():
            yield prefix + name, item
        for cname, child in self.__dict__.get("_children", {}).items():
            yield from child._named(f"{prefix}{cname}.", kind)

    def modules(self):
        yield self
        for child in self.__dict__.get("_children", {}).values():
            yield from child.modules()

    def train(self, mode=True):
        for m in self.modules():
            object.__setattr__(m, "training", mode)
        return self

    def eval(self):
        return self.train(False)

    def zero_grad(self):
        for p in self.parameters():
            p.grad = None

    def num_parameters(self):
        return sum(p.size for p in self.parameters())

    def state_dict(self):
        state = OrderedDict((n, p.data.copy()) for n, p in self.named_parameters())
        for n, b in self.named_buffers():
            state[n] = np.array(b, copy=True)
        return state

    def load_state_dict(self, state, strict=True):
        expected = dict(self.named_parameters())
        buffers = dict(self.named_buffers())
        missing = (set(expected) | set(buffers)) - set(state)
        if strict and missing:
            raise KeyError(f"missing entries in state: {sorted(missing)}")
        for name, value in state.items():
            target = expected.get(name)
            if target is None:
                target_buf = buffers.get(name)
                if target_buf is None:
                    if strict:
                        raise KeyError(f"unexpected entry in state: {name}")
                    continue
                if target_buf.shape != value.shape:
                    raise ValueError(f"{name}: shape {value.shape} != {target_buf.shape}")
                target_buf[...] = value
                continue
            if target.shape != value.shape:
                raise ValueError(f"{name}: shape {value.shape} != {target.shape}")
            target.data[...] = value

    def __call__(self, *args, **kwargs):
        return self.forward(*args, **kwargs)


class ModuleList(Module):
    def __init__(self, modules=()):
        self._items = []
        for m in modules:
            self.append(m)

    def append(self, module):
        setattr(self, str(len(self._items)), module)
        self._items.append(module)

    def __getitem__(self, i):
        return self._items[i]

    def __len__(self):
        return len(self._items)

    def __iter__(self):
        return iter(self._items)


class Conv2d(Module):
    def __init__(self, rng, cin, cout, k, stride=1, padding=None, groups=1, bias=True):
        kh, kw = (k, k) if isinstance(k, int) else k
        self.stride = stride
        self.padding = (kh // 2, kw // 2) if padding is None else padding
        self.groups = groups
        fan_in = (cin // groups) * kh * kw
        self.weight = Parameter(fan_in_uniform(rng, (cout, cin // groups, kh, kw), fan_in))
        self.bias = Parameter(np.zeros(cout)) if bias else None

    def forward(self, x):
        return T.conv2d(x, self.weight, self.bias, self.stride, self.padding, self.groups)


class Linear(Module):
    def __init__(self, rng, cin, cout, bias=True):
        self.weight = Parameter(fan_in_uniform(rng, (cout, cin), cin))
        self.bias = Parameter(np.zeros(cout)) if bias else None

    def reset(self, rng):
        cout, cin = self.weight.shape
        self.weight.data[...] = fan_in_uniform(rng, (cout, cin), cin)
        if self.bias is not None:
            self.bias.data[...] = 0.0

    def forward(self, x):
        return T.linear(x, self.weight, self.bias)


class BatchNorm(Module):
    track_stats = True

    def __init__(self, channels, momentum=0.1, eps=1e-5):
        self.weight = Parameter(np.ones(channels))
        self.bias = Parameter(np.zeros(channels))
        self.register_buffer("running_mean", np.zeros(channels))
        self.register_buffer("running_var", np.ones(channels))
        self.momentum, self.eps = momentum, eps

    def forward(self, x):
        return T.batch_norm(x, self.weight, self.bias, self.running_mean, self.running_var,
                            self.training, self.momentum, self.eps, self.track_stats)


@contextlib.contextmanager
def frozen_statistics(module):
    """Batch norm inside ``module`` keeps using batch statistics but stops updating running ones."""
    norms = [m for m in module.modules() if isinstance(m, BatchNorm)]
    previous = [m.__dict__.get("track_stats") for m in norms]
    for m in norms:
        object.__setattr__(m, "track_stats", False)
    try:
        yield
    finally:
        for m, prev in zip(norms, previous):
            if prev is None:
                del m.__dict__["track_stats"]
            else:
                object.__setattr__(m, "track_stats", prev)


class LayerNorm(Module):
    def __init__(self, dim, eps=1e-9):
        self.weight = Parameter(np.ones(dim))
        self.bias = Parameter(np.zeros(dim))
        self.eps = eps

    def forward(self, x):
        return T.layer_norm(x, self.weight, self.bias, self.eps)


class ConvBlock(Module):
    """conv -> batch norm -> ReLU."""

    def __init__(self, rng, cin, cout, k=3, stride=1):
        self.conv = Conv2d(rng, cin, cout, k, stride=stride, bias=False)
        self.norm = BatchNorm(cout)

    def forward(self, x):
        return T.relu(self.norm(self.conv(x)))
