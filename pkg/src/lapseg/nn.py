"""Parameter containers and the small layer set the architecture needs."""

import numpy as np

from . import tensor as T
from .errors import DimensionError, MissingTensorError
from .tensor import Tensor


class Parameter(Tensor):
    """A tensor that is owned by a module and always tracks gradients."""

    __slots__ = ()

    def __init__(self, data, dtype=None):
        super().__init__(data, requires_grad=True, dtype=dtype)


def he_uniform(shape, fan_in, rng, dtype):
    limit = np.sqrt(6.0 / fan_in)
    return rng.uniform(-limit, limit, size=shape).astype(dtype)


def xavier_uniform(shape, fan_in, fan_out, rng, dtype):
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=shape).astype(dtype)


class Module:
    """Base class with named parameter/buffer traversal and a train flag.

    Attribute insertion order defines tensor names, so checkpoint names are
    stable for a fixed architecture. Lists of modules are addressed by
    index, e.g. ``levels.0.conv.weight``.
    """

    def __init__(self):
        self.training = True
        self._buffer_names = []

    def register_buffer(self, name, arr):
        setattr(self, name, arr)
        self._buffer_names.append(name)

    def _children(self):
        for name, value in vars(self).items():
            if isinstance(value, Module):
                yield name, value
            elif isinstance(value, (list, tuple)):
                for i, item in enumerate(value):
                    if isinstance(item, Module):
                        yield f"{name}.{i}", item

    def named_parameters(self, prefix=""):
        for name, value in vars(self).items():
            if isinstance(value, Parameter):
                yield prefix + name, value
        for name, child in self._children():
            yield from child.named_parameters(prefix + name + ".")

    def parameters(self):
        return [p for _, p in self.named_parameters()]

    def named_buffers(self, prefix=""):
        for name in self._buffer_names:
            yield prefix + name, getattr(self, name)
        for name, child in self._children():
            yield from child.named_buffers(prefix + name + ".")

    def state_tensors(self):
        """All named state as numpy arrays (parameters then buffers)."""
        state = {name: p.data for name, p in self.named_parameters()}
        for name, buf in self.named_buffers():
            state[name] = buf
        return state

    def load_state_tensors(self, tensors):
        """Strict by-name load; raises MissingTensorError on any mismatch."""
        own = self.state_tensors()
        missing = [n for n in own if n not in tensors]
        unexpected = [n for n in tensors if n not in own]
        if missing or unexpected:
            raise MissingTensorError(missing, unexpected)
        for name, arr in own.items():
            new = tensors[name]
            if tuple(new.shape) != tuple(arr.shape):
                raise MissingTensorError(
                    [f"{name} (shape {tuple(new.shape)} != {tuple(arr.shape)})"]
                )
            arr[...] = new.astype(arr.dtype)

    def train(self, mode=True):
        self.training = mode
        for _, child in self._children():
            child.train(mode)
        return self

    def eval(self):
        return self.train(False)

    def zero_grad(self):
        for p in self.parameters():
            p.zero_grad()


class Conv2d(Module):
    def __init__(self, cin, cout, k=3, stride=1, padding=1, bias=True,
                 init="he", rng=None, dtype=np.float32):
        super().__init__()
        self.stride = stride
        self.padding = padding
        if init == "zero":
            w = np.zeros((cout, cin, k, k), dtype=dtype)
        else:
            w = he_uniform((cout, cin, k, k), cin * k * k, rng, dtype)
        self.weight = Parameter(w)
        self.bias = Parameter(np.zeros(cout, dtype=dtype)) if bias else None

    def forward(self, x):
        return T.conv2d(x, self.weight, self.bias, stride=self.stride, padding=self.padding)

    __call__ = forward


class Linear(Module):
    def __init__(self, din, dout, bias=True, init="xavier", rng=None, dtype=np.float32):
        super().__init__()
        if init == "zero":
            w = np.zeros((din, dout), dtype=dtype)
        else:
            w = xavier_uniform((din, dout), din, dout, rng, dtype)
        self.weight = Parameter(w)
        self.bias = Parameter(np.zeros(dout, dtype=dtype)) if bias else None

    def forward(self, x):
        return T.linear(x, self.weight, self.bias)

    __call__ = forward


class LayerNorm(Module):
    def __init__(self, dim, eps=1e-5, dtype=np.float32):
        super().__init__()
        self.eps = eps
        self.gain = Parameter(np.ones(dim, dtype=dtype))
        self.shift = Parameter(np.zeros(dim, dtype=dtype))

    def forward(self, x):
        return T.layer_norm(x, self.gain, self.shift, eps=self.eps)

    __call__ = forward


class BatchNorm2d(Module):
    """Per-channel batch norm with running statistics (momentum 0.1)."""

    def __init__(self, channels, momentum=0.1, eps=1e-5, dtype=np.float32):
        super().__init__()
        self.momentum = momentum
        self.eps = eps
        self.gain = Parameter(np.ones(channels, dtype=dtype))
        self.shift = Parameter(np.zeros(channels, dtype=dtype))
        self.register_buffer("running_mean", np.zeros(channels, dtype=dtype))
        self.register_buffer("running_var", np.ones(channels, dtype=dtype))

    def forward(self, x):
        if x.shape[1] != self.gain.shape[0]:
            raise DimensionError(
                f"batch_norm over {x.shape[1]} channels with {self.gain.shape[0]}-channel params"
            )
        return T.batch_norm(
            x, self.gain, self.shift, self.running_mean, self.running_var,
            training=self.training, momentum=self.momentum, eps=self.eps,
        )

    __call__ = forward
